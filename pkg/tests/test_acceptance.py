import pytest

from nowcast.config import RunConfig
from nowcast.core.bench import speedup_table
from nowcast.scripts.acceptance import (PERSISTENCE_SETTINGS, SCALING_SETTINGS, beats_persistence,
                                        scaling_check)
from nowcast.utils import physical_cores

pytestmark = pytest.mark.slow


class TestReproductions:

    def test_beats_persistence_at_every_lead(self):
        config = RunConfig.load(overrides=PERSISTENCE_SETTINGS, workers=min(4, physical_cores()))
        check = beats_persistence(config)
        assert all(gap > 0 for gap in check.gaps)
        assert check.gaps[-1] > check.gaps[0]

    @pytest.mark.skipif(physical_cores() < 4, reason="needs at least 4 cores")
    def test_strong_scaling(self):
        check = scaling_check(RunConfig.load(overrides=SCALING_SETTINGS), [1, 2, 4])
        assert check.result.table[2].speedup >= 1.5
        assert check.result.table[4].speedup >= 2.5

    def test_relative_speedups_from_timings(self):
        hours = [(1, 23.21 * 1.862 * 1.928), (2, 23.21 * 1.928), (4, 23.21)]
        table = speedup_table(hours)
        assert table[2].relative == pytest.approx(1.928)
        assert table[4].relative == pytest.approx(1.862)
