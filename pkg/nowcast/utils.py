"""
Utility functions for nowcast
Hashing, run directories and artifact writers shared by the CLI and the core
"""

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import asdict, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _canonical(obj: Any) -> Any:
    if is_dataclass(obj) and not isinstance(obj, type):
        return _canonical(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    return obj


def config_digest(obj: Any) -> int:
    """
    Stable unsigned 64-bit hash of a configuration object

    Args:
        obj: dataclass, dict or plain value; keys are sorted before hashing

    Returns:
        First 8 bytes of the md5 of the canonical JSON, little-endian
    """
    payload = json.dumps(_canonical(obj), sort_keys=True, separators=(',', ':'))
    return int.from_bytes(hashlib.md5(payload.encode()).digest()[:8], 'little')


def array_digest(arrays: Iterable) -> str:
    """md5 hex digest over the raw bytes of a sequence of arrays"""
    h = hashlib.md5()
    for a in arrays:
        h.update(a.tobytes())
    return h.hexdigest()


def atomic_write_bytes(path: PathLike, data: bytes):
    """Write through a temporary file in the same directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix='.part', dir=str(path.parent))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str):
    atomic_write_bytes(path, text.encode('utf-8'))


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow(['' if v is None else v for v in row])
    atomic_write_text(path, buf.getvalue())
    logger.info(f"Wrote {path}")


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, 'r', newline='') as f:
        return list(csv.DictReader(f))


def write_json(path: PathLike, obj: Any):
    atomic_write_text(path, json.dumps(_canonical(obj), indent=2, sort_keys=True) + '\n')
    logger.info(f"Wrote {path}")


def read_json(path: PathLike) -> Any:
    with open(path, 'r') as f:
        return json.load(f)


def create_run_dir(out_dir: PathLike, command: str) -> Path:
    """
    Create a fresh run directory `<out_dir>/<command>-NNN`

    Existing runs are never reused or overwritten.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    index = 1
    while True:
        candidate = root / f"{command}-{index:03d}"
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            index += 1


def write_manifest(run_dir: Path, command: str, seed: int, config_hash: int, files: Sequence[str]):
    """Reproducibility manifest for a run directory"""
    from nowcast import __version__
    write_json(run_dir / 'manifest.json', {
        'command': command,
        'version': __version__,
        'seed': seed,
        'config_hash': f"{config_hash:016x}",
        'files': sorted(files),
    })


def physical_cores() -> int:
    """Cores available to this process"""
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
