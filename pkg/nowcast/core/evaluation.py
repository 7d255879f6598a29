"""
Forecast evaluation

Persistence baseline, MSE per lead time, local histogram matching of
forecasts and fully convolutional inference over whole mosaics.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tabulate import tabulate

from .errors import ConfigError, ShapeError
from .net import NowcastModel, valid_extents_near
from .patches import INPUT_FRAMES, OUTPUT_FRAMES, NormStats, PatchDataset
from .storm_sim import FRAME_DT_MINUTES, MosaicSequence, write_mosaics
from .tensor import center_crop, crop_offsets

logger = logging.getLogger(__name__)

LEAD_MINUTES = tuple(FRAME_DT_MINUTES * (k + 1) for k in range(OUTPUT_FRAMES))
LOSS_CROP_PX = 48


def persistence_forecast(X: np.ndarray) -> np.ndarray:
    """Repeat the newest input frame (channel 6) for all six leads"""
    X = np.asarray(X)
    if X.shape[-1] != INPUT_FRAMES:
        raise ShapeError('persistence', f"expected {INPUT_FRAMES} input channels, got {X.shape[-1]}")
    return np.repeat(X[..., INPUT_FRAMES - 1:], OUTPUT_FRAMES, axis=-1)


# =============================================================================
# Lead-time MSE
# =============================================================================

@dataclass(frozen=True)
class LeadTimeMSE:
    method: str
    leads: Tuple[int, ...]
    mse: Tuple[float, ...]

    def rows(self) -> List[Tuple[int, str, float]]:
        return [(lead, self.method, value) for lead, value in zip(self.leads, self.mse)]


def _squared_error_sums(pred: np.ndarray, truth: np.ndarray, crop: int) -> Tuple[np.ndarray, int]:
    if pred.ndim != 4 or truth.ndim != 4:
        raise ShapeError('mse_by_lead', f"expected [B,H,W,C] arrays, got {pred.shape} and {truth.shape}")
    if pred.shape[0] != truth.shape[0] or pred.shape[-1] != truth.shape[-1]:
        raise ShapeError('mse_by_lead', f"prediction {pred.shape} and truth {truth.shape} do not align")
    d = center_crop(pred, (crop, crop)).astype(np.float64) - center_crop(truth, (crop, crop))
    return np.sum(d * d, axis=(0, 1, 2)), d.shape[0] * crop * crop


def mse_by_lead(pred: np.ndarray, truth: np.ndarray, crop: int = LOSS_CROP_PX, method: str = 'model') -> LeadTimeMSE:
    """Per-channel MSE over the central crop x crop window, averaged over samples"""
    sums, count = _squared_error_sums(pred, truth, crop)
    return LeadTimeMSE(method, LEAD_MINUTES[:len(sums)], tuple(float(s / count) for s in sums))


def evaluate_forecasts(model: NowcastModel, dataset: PatchDataset, batch_size: int = 16,
                       crop: int = LOSS_CROP_PX) -> Dict[str, LeadTimeMSE]:
    """
    Model and persistence MSE per lead on a (normalized) dataset

    Both are compared with the targets on the same central window, in the
    units of the dataset.
    """
    totals = {'model': 0.0, 'persistence': 0.0}
    count = 0
    for start in range(0, len(dataset), batch_size):
        X = dataset.X[start:start + batch_size]
        Y = dataset.Y[start:start + batch_size]
        finest = model.forward(X).finest
        sums, n = _squared_error_sums(finest, Y, crop)
        totals['model'] = totals['model'] + sums
        sums, _ = _squared_error_sums(persistence_forecast(X), Y, crop)
        totals['persistence'] = totals['persistence'] + sums
        count += n
    return {method: LeadTimeMSE(method, LEAD_MINUTES, tuple(float(s / count) for s in sums))
            for method, sums in totals.items()}


def lead_time_rows(results: Sequence[LeadTimeMSE]) -> List[Tuple[int, str, float]]:
    return [row for result in results for row in result.rows()]


def format_lead_time(results: Sequence[LeadTimeMSE]) -> str:
    headers = ['Lead (min)'] + [r.method for r in results]
    table = [[lead] + [r.mse[i] for r in results] for i, lead in enumerate(results[0].leads)]
    return tabulate(table, headers=headers, floatfmt='.6f')


# =============================================================================
# Local histogram matching
# =============================================================================

@dataclass(frozen=True)
class HistMatchConfig:
    tile_px: int = 64
    bins: int = 256

    def __post_init__(self):
        if self.tile_px < 8:
            raise ConfigError(f"tile_px must be at least 8, got {self.tile_px}")
        if self.bins < 16:
            raise ConfigError(f"bins must be at least 16, got {self.bins}")


def _tile_bounds(extent: int, tile: int) -> List[Tuple[int, int]]:
    return [(start, min(start + tile, extent)) for start in range(0, extent, tile)]


def _blend_axis(extent: int, bounds: List[Tuple[int, int]]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per pixel: lower tile, upper tile and weight of the upper tile"""
    centers = np.array([(a + b - 1) / 2 for a, b in bounds])
    position = np.interp(np.arange(extent), centers, np.arange(len(bounds)))
    lower = np.floor(position).astype(int)
    upper = np.minimum(lower + 1, len(bounds) - 1)
    return lower, upper, position - lower


def matching_table(source_bins: np.ndarray, reference_bins: np.ndarray, bins: int) -> np.ndarray:
    """
    Output bin for every source bin

    A bin the source populates maps to Q_ref(F_src(b)), the first bin where
    F_ref >= F_src(b). Empty source bins are clamped between the mappings of
    the nearest populated bins on either side, so self-matching is the
    identity and every entry stays within the reference's populated range.
    """
    counts = np.bincount(source_bins.ravel(), minlength=bins)
    src = np.cumsum(counts).astype(np.int64)
    ref = np.cumsum(np.bincount(reference_bins.ravel(), minlength=bins)).astype(np.int64)
    populated = np.flatnonzero(counts)
    # F_src(b) <= F_ref(j)  <=>  src[b] * N_ref <= ref[j] * N_src, in exact integers
    exact = np.searchsorted(ref * src[-1], src[populated] * ref[-1], side='left')
    exact = np.minimum(exact, bins - 1)
    b = np.arange(bins)
    below = np.maximum(np.searchsorted(populated, b, side='right') - 1, 0)
    above = np.minimum(np.searchsorted(populated, b, side='left'), len(populated) - 1)
    return np.clip(b, exact[below], exact[above])


def histogram_match_local(forecast: np.ndarray, reference: np.ndarray,
                          config: HistMatchConfig = HistMatchConfig()) -> np.ndarray:
    """
    Match a forecast frame's histogram to the reference frame, tile by tile

    Every tile gets its own monotone bin mapping; each pixel blends the
    mappings of the four nearest tile centers bilinearly. Bins span the joint
    value range of both frames and outputs are bin centers.
    """
    forecast = np.asarray(forecast, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if forecast.shape != reference.shape or forecast.ndim != 2:
        raise ShapeError('histogram_match', f"frames differ: {forecast.shape} vs {reference.shape}")
    if not (np.all(np.isfinite(forecast)) and np.all(np.isfinite(reference))):
        raise ShapeError('histogram_match', "frames contain non-finite values")

    lo = min(forecast.min(), reference.min())
    hi = max(forecast.max(), reference.max())
    if hi == lo:
        return forecast.copy()
    bins = config.bins
    width = (hi - lo) / bins

    def to_bins(values):
        return np.clip(np.floor((values - lo) / width).astype(int), 0, bins - 1)

    src_bins, ref_bins = to_bins(forecast), to_bins(reference)
    height, frame_width = forecast.shape
    rows = _tile_bounds(height, config.tile_px)
    cols = _tile_bounds(frame_width, config.tile_px)

    tables = np.empty((len(rows), len(cols), bins), dtype=np.int64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            tables[i, j] = matching_table(src_bins[r0:r1, c0:c1], ref_bins[r0:r1, c0:c1], bins)
    values = lo + (tables + 0.5) * width

    r_lo, r_hi, wy = _blend_axis(height, rows)
    c_lo, c_hi, wx = _blend_axis(frame_width, cols)
    r_lo, r_hi, wy = r_lo[:, None], r_hi[:, None], wy[:, None]
    c_lo, c_hi, wx = c_lo[None, :], c_hi[None, :], wx[None, :]
    return ((1 - wy) * (1 - wx) * values[r_lo, c_lo, src_bins]
            + (1 - wy) * wx * values[r_lo, c_hi, src_bins]
            + wy * (1 - wx) * values[r_hi, c_lo, src_bins]
            + wy * wx * values[r_hi, c_hi, src_bins])


def match_forecast_sequence(forecast: np.ndarray, initial: np.ndarray,
                            config: HistMatchConfig = HistMatchConfig()) -> np.ndarray:
    """Match each lead frame of a [H, W, 6] forecast to the initial-condition frame"""
    if forecast.ndim != 3:
        raise ShapeError('histogram_match', f"expected [H,W,leads], got {forecast.shape}")
    return np.stack([histogram_match_local(forecast[..., k], initial, config)
                     for k in range(forecast.shape[-1])], axis=-1)


# =============================================================================
# Whole-grid inference
# =============================================================================

@dataclass
class GridForecast:
    """Six lead frames [H', W', 6] concentric with the input grid"""

    frames: np.ndarray
    offset: Tuple[int, int]
    wall_seconds: float
    tiles: int = 1

    def to_sequence(self, t0_minutes: int) -> MosaicSequence:
        """Requantize to digital VIL with timestamps t0+10 ... t0+60"""
        grids = np.clip(np.floor(self.frames + 0.5), 0, 255).astype(np.uint8)
        return MosaicSequence(np.moveaxis(grids, -1, 0), [t0_minutes + lead for lead in LEAD_MINUTES])


def _check_grid(model: NowcastModel, hw: Tuple[int, int]):
    try:
        model.plan(hw)
    except ShapeError as e:
        suggestions = {axis: valid_extents_near(model.config, extent) for axis, extent in zip('HW', hw)}
        raise ShapeError(e.layer, f"grid {hw[0]}x{hw[1]} is not accepted ({e}); "
                                  f"nearest valid heights {suggestions['H']}, widths {suggestions['W']}")


def _tile_offsets(extent: int, tile: int, step: int) -> List[int]:
    offsets = list(range(0, extent - tile, step))
    return offsets + [extent - tile]


def infer_grid(model: NowcastModel, frames: np.ndarray, norm: NormStats, workers: int = 1,
               tile_px: Optional[int] = None) -> GridForecast:
    """
    Forecast six frames for a whole mosaic

    Args:
        model: trained model
        frames: the seven most recent mosaics [7, H, W], oldest first
        norm: statistics the model was trained with
        workers: threads for tiled inference
        tile_px: square input tile size; None runs one pass over the grid

    Returns:
        GridForecast in digital-VIL units
    """
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] != INPUT_FRAMES:
        raise ShapeError('x', f"expected [{INPUT_FRAMES},H,W] frames, got {frames.shape}")
    hw = frames.shape[1:]
    _check_grid(model, hw)
    X = norm.apply(np.moveaxis(frames, 0, -1)[None].astype(np.float64)).astype(model.dtype)

    start = time.monotonic()
    out_h, out_w = model.plan(hw).output_hw
    if tile_px is None or (tile_px >= hw[0] and tile_px >= hw[1]):
        output, tiles = model.forward(X).finest[0], 1
    else:
        output, tiles = _infer_tiled(model, X, tile_px, workers)
    wall = time.monotonic() - start

    offset = (crop_offsets(hw[0], out_h)[0], crop_offsets(hw[1], out_w)[0])
    logger.info(f"Forecast {hw[0]}x{hw[1]} grid in {wall:.2f}s ({tiles} tile(s), {workers} worker(s))")
    return GridForecast(norm.invert(output.astype(np.float64)), offset, wall, tiles)


def _infer_tiled(model: NowcastModel, X: np.ndarray, tile_px: int, workers: int) -> Tuple[np.ndarray, int]:
    _, height, width, _ = X.shape
    tile_h, tile_w = min(tile_px, height), min(tile_px, width)
    _check_grid(model, (tile_h, tile_w))
    align = model.config.alignment
    if (height - tile_h) % align or (width - tile_w) % align:
        raise ShapeError('tiling', f"grid and tile extents must differ by multiples of {align}")
    out_th, out_tw = model.plan((tile_h, tile_w)).output_hw
    out_h, out_w = model.plan((height, width)).output_hw
    step_h = max(align, out_th // align * align)
    step_w = max(align, out_tw // align * align)
    jobs = [(r, c) for r in _tile_offsets(height, tile_h, step_h) for c in _tile_offsets(width, tile_w, step_w)]

    def run(r: int, c: int) -> np.ndarray:
        return model.forward(X[:, r:r + tile_h, c:c + tile_w]).finest[0]

    results = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(run, r, c): (r, c) for r, c in jobs}
        for future in as_completed(futures):
            results[futures[future]] = future.result()

    # tile output row i is full output row r + i; overlaps are written in job order
    output = np.zeros((out_h, out_w, OUTPUT_FRAMES), dtype=X.dtype)
    for r, c in jobs:
        output[r:r + out_th, c:c + out_tw] = results[(r, c)]
    return output, len(jobs)


def write_forecast(path: Union[str, Path], forecast: GridForecast, t0_minutes: int):
    write_mosaics(path, forecast.to_sequence(t0_minutes))
