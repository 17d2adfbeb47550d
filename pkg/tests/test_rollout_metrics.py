import numpy as np
import pytest

from rectified_flow import NonFiniteStateError, PersistenceForecaster
from rollout_metrics import (MetricsError, ProbeSpec, RolloutResult, aggregate_envelope, clamp_mse, dft,
                             envelope_rows, full_power_spectrum, masked_mse, masked_mse_per_channel,
                             probe_signal, probe_spectrum, rollout, signal_spectrum, temporal_change,
                             write_csv)


class NoisyForecaster:
    """最后一帧加上由种子决定的噪声"""

    def __init__(self):
        self.seeds = []

    def sample_next(self, context, theta, seed):
        self.seeds.append(list(seed))
        return context[-1] + 0.01 * np.random.default_rng(seed).standard_normal(context.shape[1:])


class ExplodingForecaster:
    def __init__(self, fail_at, raise_error=False):
        self.calls = 0
        self.fail_at = fail_at
        self.raise_error = raise_error

    def sample_next(self, context, theta, seed):
        step = self.calls
        self.calls += 1
        if step == self.fail_at:
            if self.raise_error:
                raise NonFiniteStateError("ODE 状态非有限", step=0)
            return np.full(context.shape[1:], np.nan)
        return context[-1] + 1.0


class TestRollout:
    def test_persistence_repeats_last_frame(self):
        context = np.random.default_rng(0).standard_normal((2, 2, 4, 4))
        result = rollout(PersistenceForecaster(), context, 0.3, horizon=5, seed=1)
        assert result.frames.shape == (5, 2, 4, 4)
        assert all(np.array_equal(frame, context[-1]) for frame in result.frames)
        assert not result.diverged

    def test_single_step(self):
        context = np.zeros((2, 1, 4, 4))
        result = rollout(NoisyForecaster(), context, 0.0, horizon=1, seed=1)
        assert result.length == 1

    def test_seed_streams(self):
        forecaster = NoisyForecaster()
        context = np.zeros((2, 1, 4, 4))
        a = rollout(forecaster, context, 0.0, horizon=3, seed=9, q=2, s=1)
        assert forecaster.seeds == [[9, 2, 1, 0], [9, 2, 1, 1], [9, 2, 1, 2]]
        b = rollout(NoisyForecaster(), context, 0.0, horizon=3, seed=9, q=2, s=1)
        c = rollout(NoisyForecaster(), context, 0.0, horizon=3, seed=9, q=2, s=2)
        assert np.array_equal(a.frames, b.frames)
        assert not np.array_equal(a.frames, c.frames)

    def test_generated_frames_feed_the_context(self):
        context = np.stack([np.zeros((1, 4, 4)), np.ones((1, 4, 4))])
        result = rollout(ExplodingForecaster(fail_at=-1), context, 0.0, horizon=3, seed=0)
        assert [frame[0, 0, 0] for frame in result.frames] == [2.0, 3.0, 4.0]

    def test_non_finite_frame_truncates(self):
        context = np.zeros((2, 1, 4, 4))
        result = rollout(ExplodingForecaster(fail_at=2), context, 0.0, horizon=6, seed=0)
        assert result.diverged and result.diverged_at == 2
        assert result.length == 2

    def test_sampler_error_truncates(self):
        context = np.zeros((2, 1, 4, 4))
        result = rollout(ExplodingForecaster(fail_at=0, raise_error=True), context, 0.0, horizon=4, seed=0)
        assert result.diverged and result.diverged_at == 0
        assert result.frames.shape == (0, 1, 4, 4)

    def test_zero_horizon(self):
        with pytest.raises(MetricsError):
            rollout(PersistenceForecaster(), np.zeros((2, 1, 4, 4)), 0.0, horizon=0, seed=0)


class TestMSE:
    def test_identical_is_zero(self):
        frames = np.random.default_rng(0).standard_normal((4, 2, 8, 8))
        report = masked_mse(frames, frames)
        assert report.aggregate == 0.0
        assert report.per_step.shape == (4,)

    def test_unit_offset(self):
        report = masked_mse(np.ones((3, 2, 4, 4)), np.zeros((3, 2, 4, 4)))
        assert report.aggregate == 1.0

    def test_mask_excludes_points(self):
        pred = np.zeros((2, 1, 4, 4))
        ref = np.zeros((2, 1, 4, 4))
        pred[:, :, 0, 0] = 100.0
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        assert masked_mse(pred, ref, mask).aggregate == 0.0
        assert masked_mse(pred, ref).aggregate == pytest.approx(100.0 ** 2 / 16)

    def test_all_masked(self):
        with pytest.raises(MetricsError, match="all-masked grid"):
            masked_mse(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), np.ones((2, 2), dtype=bool))

    def test_length_mismatch(self):
        with pytest.raises(MetricsError, match="length mismatch"):
            masked_mse(np.zeros((3, 1, 2, 2)), np.zeros((4, 1, 2, 2)))

    def test_per_channel(self):
        pred = np.zeros((2, 2, 4, 4))
        pred[:, 1] = 2.0
        per_channel = masked_mse_per_channel(pred, np.zeros_like(pred))
        assert per_channel.tolist() == [[0.0, 4.0], [0.0, 4.0]]

    def test_empty_rollout(self):
        report = masked_mse(np.zeros((0, 1, 2, 2)), np.zeros((0, 1, 2, 2)))
        assert report.per_step.shape == (0,)
        assert np.isnan(report.aggregate)

    def test_clamp(self):
        assert clamp_mse(0.5, False, 10.0) == 0.5
        assert clamp_mse(50.0, False, 10.0) == 10.0
        assert clamp_mse(0.5, True, 10.0) == 10.0
        assert clamp_mse(float("nan"), False, 10.0) == 10.0


class TestTemporalChange:
    def test_frozen_rollout(self):
        frames = np.ones((5, 2, 4, 4))
        assert np.all(temporal_change(frames, dt=0.5) == 0)

    def test_linear_ramp(self):
        frames = np.arange(4, dtype=np.float64)[:, None, None, None] * np.full((4, 2, 3, 3), 0.3)
        np.testing.assert_allclose(temporal_change(frames, dt=0.1), [3.0, 3.0, 3.0])

    def test_uses_rollout_dt(self):
        result = RolloutResult(q=0, s=0, frames=np.arange(3.0)[:, None, None, None] * np.ones((3, 1, 2, 2)),
                               dt=2.0, theta=0.0)
        np.testing.assert_allclose(temporal_change(result), [0.5, 0.5])

    def test_signed(self):
        frames = np.stack([np.ones((1, 2, 2)), np.zeros((1, 2, 2))])
        assert temporal_change(frames, dt=1.0, absolute=False).tolist() == [-1.0]

    def test_needs_two_frames(self):
        with pytest.raises(MetricsError):
            temporal_change(np.zeros((1, 1, 2, 2)), dt=1.0)


class TestEnvelope:
    def test_single_series(self):
        series = np.array([0.3, 0.1, 0.7])
        envelope = aggregate_envelope([series])
        assert np.array_equal(envelope.mean, series)
        assert np.array_equal(envelope.min, series)
        assert np.array_equal(envelope.max, series)
        assert envelope.abscissa.tolist() == [1.0, 2.0, 3.0]

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        series = [rng.standard_normal(6) * 10.0 ** rng.integers(-8, 8) for _ in range(5)]
        forward = aggregate_envelope(series)
        backward = aggregate_envelope(series[::-1])
        assert np.array_equal(forward.mean, backward.mean)
        assert np.all(forward.min <= forward.mean) and np.all(forward.mean <= forward.max)

    def test_empty(self):
        with pytest.raises(MetricsError, match="empty input"):
            aggregate_envelope([])

    def test_rows(self):
        envelope = aggregate_envelope([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        rows = envelope_rows("v-pred", envelope)
        assert rows[0] == {"experiment": "v-pred", "t": 1.0, "mean": 2.0, "min": 1.0, "max": 3.0, "count": 2}


class TestSpectrum:
    def test_on_bin_sinusoid(self):
        t = np.arange(64)
        spectrum = signal_spectrum(np.sin(2 * np.pi * 5 * t / 64), dt=1.0)
        peak = int(np.argmax(spectrum.power))
        assert spectrum.frequencies[peak] == pytest.approx(5 / 64)
        assert spectrum.power[peak] == pytest.approx(64 ** 2 / 4, rel=1e-9)
        others = np.delete(spectrum.power, peak)
        assert np.max(others) < 1e-12 * spectrum.power[peak]

    def test_frequency_grid(self):
        spectrum = signal_spectrum(np.zeros(100), dt=0.5)
        assert len(spectrum.frequencies) == 49
        assert spectrum.frequencies[0] == pytest.approx(1 / 50)
        assert spectrum.frequencies[-1] == pytest.approx(49 / 50)

    def test_parseval(self):
        signal = np.random.default_rng(1).standard_normal(37)
        power = full_power_spectrum(signal)
        assert power.sum() == pytest.approx(len(signal) * np.sum(signal ** 2), rel=1e-10)

    def test_constant_signal_has_no_power(self):
        spectrum = signal_spectrum(np.full(32, 4.2), dt=1.0)
        assert np.max(spectrum.power) < 1e-20

    def test_dc_offset_invariance(self):
        signal = np.random.default_rng(2).standard_normal(48)
        a = signal_spectrum(signal, dt=1.0)
        b = signal_spectrum(signal + 7.0, dt=1.0)
        np.testing.assert_allclose(a.power, b.power, rtol=1e-8, atol=1e-8)

    def test_fft_matches_direct(self):
        signal = np.random.default_rng(3).standard_normal(90)
        np.testing.assert_allclose(dft(signal, "fft"), dft(signal, "direct"), atol=1e-9)

    def test_weighted(self):
        t = np.arange(16)
        spectrum = signal_spectrum(np.cos(2 * np.pi * 3 * t / 16), dt=1.0)
        np.testing.assert_allclose(spectrum.weighted, spectrum.frequencies ** 2 * spectrum.power)

    def test_too_short(self):
        with pytest.raises(MetricsError):
            signal_spectrum(np.zeros(7), dt=1.0)

    def test_unknown_method(self):
        with pytest.raises(MetricsError):
            dft(np.zeros(8), "chebyshev")


class TestProbe:
    def test_default_location(self):
        probe = ProbeSpec.default(32, 16)
        assert (probe.row, probe.col, probe.channel) == (16, 12, 1)

    def test_signal_and_spectrum(self):
        t = np.arange(32)
        frames = np.zeros((32, 2, 4, 4))
        frames[:, 1, 2, 3] = np.sin(2 * np.pi * 4 * t / 32)
        probe = ProbeSpec.default(4, 4)
        np.testing.assert_array_equal(probe_signal(frames, probe), frames[:, 1, 2, 3])
        spectrum = probe_spectrum(frames, probe, dt=0.25)
        assert spectrum.frequencies[int(np.argmax(spectrum.power))] == pytest.approx(4 / (32 * 0.25))

    def test_out_of_bounds(self):
        with pytest.raises(MetricsError):
            probe_signal(np.zeros((8, 2, 4, 4)), ProbeSpec(row=4, col=0))
        with pytest.raises(MetricsError):
            probe_signal(np.zeros((8, 2, 4, 4)), ProbeSpec(row=0, col=0, channel=2))

    def test_masked_location(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 1] = True
        with pytest.raises(MetricsError):
            probe_signal(np.zeros((8, 2, 4, 4)), ProbeSpec(row=1, col=1), mask)


class TestCSV:
    def test_full_precision_and_column_order(self, tmp_path):
        path = tmp_path / "out" / "rows.csv"
        write_csv(str(path), ["name", "value", "count"],
                  [{"value": 0.1, "name": "a", "count": np.int64(3)},
                   {"name": "b", "value": np.float64(1 / 3), "count": 4, "extra": "dropped"}])
        assert path.read_text(encoding="utf-8") == (
            "name,value,count\n"
            "a,0.10000000000000001,3\n"
            "b,0.33333333333333331,4\n"
        )

    def test_reproducible_bytes(self, tmp_path):
        rows = [{"x": float(v)} for v in np.random.default_rng(0).standard_normal(20)]
        write_csv(str(tmp_path / "a.csv"), ["x"], rows)
        write_csv(str(tmp_path / "b.csv"), ["x"], rows)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
