import numpy as np
import pytest

from nowcast.core.errors import ConfigError, ShapeError
from nowcast.core.evaluation import (LEAD_MINUTES, HistMatchConfig, evaluate_forecasts, histogram_match_local,
                                     infer_grid, match_forecast_sequence, matching_table, mse_by_lead,
                                     persistence_forecast, write_forecast)
from nowcast.core.patches import NormStats
from nowcast.core.storm_sim import SimConfig, StormCell, digital_vil_quantize, read_mosaics, render_field


def scene(cell, frames=13, hw=(160, 160)):
    config = SimConfig(grid_hw=hw, frame_count=frames, cell_count=0)
    grids = [digital_vil_quantize(render_field([cell], t, config)) for t in range(frames)]
    stack = np.stack(grids, axis=-1)[None].astype(np.float64)
    return stack[..., :7], stack[..., 7:]


class TestPersistence:

    def test_repeats_newest_frame(self, rng):
        X = rng.normal(size=(2, 9, 9, 7))
        out = persistence_forecast(X)
        assert out.shape == (2, 9, 9, 6)
        for k in range(6):
            np.testing.assert_array_equal(out[..., k], X[..., 6])

    def test_ignores_older_frames(self, rng):
        X = rng.normal(size=(1, 5, 5, 7))
        Z = X.copy()
        Z[..., :6] = 0
        np.testing.assert_array_equal(persistence_forecast(X), persistence_forecast(Z))

    def test_channel_count(self):
        with pytest.raises(ShapeError):
            persistence_forecast(np.zeros((1, 4, 4, 6)))

    def test_static_scene_is_exact(self):
        X, Y = scene(StormCell(80, 80, 0, 0, amplitude=12, radius=8, growth=0))
        assert mse_by_lead(persistence_forecast(X), Y, crop=160).mse == (0.0,) * 6

    def test_error_grows_with_lead_when_advecting(self):
        X, Y = scene(StormCell(50, 50, 3, 3, amplitude=15, radius=10, growth=0))
        mse = mse_by_lead(persistence_forecast(X), Y, crop=160).mse
        assert all(b > a for a, b in zip(mse, mse[1:]))


class TestMseByLead:

    def test_equal(self, rng):
        Y = rng.normal(size=(3, 50, 50, 6))
        result = mse_by_lead(Y, Y)
        assert result.mse == (0.0,) * 6
        assert result.leads == LEAD_MINUTES == (10, 20, 30, 40, 50, 60)

    def test_constant_offset(self, rng):
        Y = rng.normal(size=(2, 48, 48, 6))
        assert mse_by_lead(Y + 0.5, Y).mse == pytest.approx((0.25,) * 6)

    def test_loop_oracle(self, rng):
        pred = rng.normal(size=(2, 52, 52, 6))
        truth = rng.normal(size=(2, 56, 56, 6))
        expected = []
        for k in range(6):
            acc = 0.0
            for b in range(2):
                for i in range(48):
                    for j in range(48):
                        acc += (pred[b, 2 + i, 2 + j, k] - truth[b, 4 + i, 4 + j, k]) ** 2
            expected.append(acc / (2 * 48 * 48))
        assert mse_by_lead(pred, truth).mse == pytest.approx(expected, rel=1e-12)

    def test_misaligned(self, rng):
        with pytest.raises(ShapeError):
            mse_by_lead(rng.normal(size=(2, 50, 50, 6)), rng.normal(size=(3, 50, 50, 6)))
        with pytest.raises(ShapeError):
            mse_by_lead(rng.normal(size=(1, 40, 40, 6)), rng.normal(size=(1, 50, 50, 6)))

    def test_dataset_evaluation(self, tiny_model, make_patches):
        dataset = make_patches(5, patch=70)
        results = evaluate_forecasts(tiny_model, dataset, batch_size=2)
        assert set(results) == {'model', 'persistence'}
        expected = mse_by_lead(persistence_forecast(dataset.X), dataset.Y)
        assert results['persistence'].mse == pytest.approx(expected.mse, rel=1e-12)
        direct = mse_by_lead(tiny_model.forward(dataset.X).finest, dataset.Y)
        assert results['model'].mse == pytest.approx(direct.mse, rel=1e-9)


class TestHistogramMatch:

    def test_self_match_is_identity(self, rng):
        frame = rng.gamma(2.0, 10.0, size=(100, 90))
        out = histogram_match_local(frame, frame, HistMatchConfig(tile_px=32))
        width = (frame.max() - frame.min()) / 256
        assert np.max(np.abs(out - frame)) <= width

    def test_constant_tile_maps_to_reference_maximum(self, rng):
        reference = rng.uniform(0, 10, size=(16, 16))
        out = histogram_match_local(np.full((16, 16), 5.0), reference)
        width = (reference.max() - min(5.0, reference.min())) / 256
        assert np.allclose(out, out[0, 0])
        assert abs(out[0, 0] - reference.max()) <= width

    def test_values_above_reference_range_pulled_in(self, rng):
        reference = rng.uniform(0, 10, size=(32, 32))
        out = histogram_match_local(np.full((32, 32), 50.0), reference, HistMatchConfig(tile_px=16))
        width = (50.0 - reference.min()) / 256
        assert out.max() <= reference.max() + width
        assert out.min() >= reference.min() - width

    def test_shifted_forecast_lands_in_reference_range(self, rng):
        reference = rng.uniform(0, 10, size=(48, 48))
        forecast = rng.uniform(30, 60, size=(48, 48))
        out = histogram_match_local(forecast, reference, HistMatchConfig(tile_px=16))
        width = (forecast.max() - reference.min()) / 256
        assert out.max() <= reference.max() + width
        assert out.min() >= reference.min() - width

    def test_table_targets_populated_reference_bins(self, rng):
        src = rng.integers(20, 32, size=(10, 10))
        ref = rng.integers(0, 8, size=(10, 10))
        table = matching_table(src, ref, 32)
        assert set(table[np.unique(src)].tolist()) <= set(np.unique(ref).tolist())
        assert table.min() >= ref.min() and table.max() <= ref.max()

    def test_self_table_is_identity_inside_range(self, rng):
        levels = rng.choice(64, size=(12, 12), replace=True) // 2 * 2
        table = matching_table(levels, levels, 64)
        inside = np.arange(levels.min(), levels.max() + 1)
        np.testing.assert_array_equal(table[inside], inside)

    def test_order_preserved_in_single_tile(self, rng):
        forecast = rng.normal(size=(40, 40))
        reference = rng.gamma(1.5, 3.0, size=(40, 40))
        out = histogram_match_local(forecast, reference, HistMatchConfig(tile_px=64))
        order = np.argsort(forecast.ravel(), kind='stable')
        assert np.all(np.diff(out.ravel()[order]) >= -1e-12)

    def test_tables_are_monotone(self, rng):
        for _ in range(50):
            src = rng.integers(0, 32, size=(12, 12))
            ref = rng.integers(0, 32, size=(12, 12)) // 3
            table = matching_table(src, ref, 32)
            assert np.all(np.diff(table) >= 0)
            assert table.min() >= 0 and table.max() <= 31

    def test_output_matches_reference_distribution(self, rng):
        forecast = rng.uniform(0, 1, size=(64, 64))
        reference = rng.uniform(0, 1, size=(64, 64)) ** 3
        out = histogram_match_local(forecast, reference, HistMatchConfig(tile_px=64))
        assert abs(np.median(out) - np.median(reference)) <= 0.02

    def test_flat_frames_copied(self):
        frame = np.full((10, 10), 4.0)
        np.testing.assert_array_equal(histogram_match_local(frame, frame.copy()), frame)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            histogram_match_local(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_config_bounds(self):
        with pytest.raises(ConfigError):
            HistMatchConfig(tile_px=4)
        with pytest.raises(ConfigError):
            HistMatchConfig(bins=8)

    def test_sequence(self, rng):
        forecast = rng.uniform(0, 50, size=(20, 20, 6))
        out = match_forecast_sequence(forecast, rng.uniform(0, 50, size=(20, 20)))
        assert out.shape == forecast.shape


class TestInferGrid:

    def test_tiled_matches_single_pass(self, tiny_model, rng):
        frames = rng.uniform(0, 255, size=(7, 98, 514))
        norm = NormStats(60.0, 40.0)
        whole = infer_grid(tiny_model, frames, norm)
        tiled = infer_grid(tiny_model, frames, norm, workers=3, tile_px=70)
        assert tiled.tiles > 1
        assert whole.frames.shape == (88, 504, 6)
        assert np.max(np.abs(whole.frames - tiled.frames)) <= 1e-6
        assert whole.offset == (5, 5)

    def test_zero_weather(self, tiny_model):
        out = infer_grid(tiny_model, np.full((7, 70, 70), 3.0), NormStats(3.0, 2.0))
        assert np.allclose(out.frames, 3.0)

    def test_invalid_size_lists_alternatives(self, tiny_model):
        with pytest.raises(ShapeError, match=r"\[66, 70, 74, 78\]"):
            infer_grid(tiny_model, np.zeros((7, 72, 70)), NormStats(0.0, 1.0))

    def test_export(self, tiny_model, rng, tmp_path):
        out = infer_grid(tiny_model, rng.uniform(0, 255, size=(7, 70, 70)), NormStats(60.0, 40.0))
        write_forecast(tmp_path / 'f.vil', out, t0_minutes=600)
        sequence = read_mosaics(tmp_path / 'f.vil')
        assert len(sequence) == 6
        assert sequence.timestamps.tolist() == [610, 620, 630, 640, 650, 660]
        assert sequence.hw == (60, 60)
