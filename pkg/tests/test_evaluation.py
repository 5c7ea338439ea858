import dataclasses
import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from models.rimformer.rimformer import ModelConfig
from models.rimformer.training import init_params
from radar.evaluation import (
    EvalSpec, CfarConfig, as_complex, frequency_axis, range_axis, velocity_axis, time_axis, power_spectrum,
    range_profile, rd_map, stft, sinr, build_eval_spec, cfar_alpha_for_pfa, cfar_profile, ca_cfar,
    evaluate_testset, gather_reports,
)
from radar.simulation import (
    ChirpParams, SimConfig, SceneSpec, TargetSpec, ComplexSignal, synth_if_pair, synth_frame, toy_configs,
)

CHIRP = ChirpParams()
SIM = SimConfig()


def _tone(n, k):
    return np.exp(2j * np.pi * k * np.arange(n) / n)


def _spike_profile(n=128, spikes=((40, 1000.0),)):
    p = np.ones(n)
    for b, v in spikes:
        p[b] = v
    return p


class TestSignals:
    def test_as_complex(self):
        channels = np.array([[1.0, 2.0], [3.0, -4.0]])
        assert_array_equal(as_complex(channels), [1 + 2j, 3 - 4j])
        assert_array_equal(as_complex(channels[:, :1]), [1.0, 3.0])
        assert_array_equal(as_complex(ComplexSignal(np.array([1j]), 1.0)), [1j])
        assert_array_equal(as_complex(np.array([1 + 1j, 2.0])), [1 + 1j, 2.0])
        with pytest.raises(ValueError):
            as_complex(np.zeros((4, 3)))

    def test_power_spectrum_of_channels(self, rng):
        z = rng.normal(size=32) + 1j * rng.normal(size=32)
        channels = np.stack([z.real, z.imag], axis=-1)
        assert_allclose(power_spectrum(channels), np.abs(np.fft.fft(z)) ** 2)


class TestAxes:
    def test_range_bins(self):
        r = range_axis(1024, CHIRP, SIM)
        assert r[1] == pytest.approx(0.25)
        assert r[120] == pytest.approx(30.0)

    def test_frequency_axis_is_signed(self):
        f = frequency_axis(8, 8.0)
        assert_allclose(f, [0, 1, 2, 3, -4, -3, -2, -1])

    def test_velocity_axis_centered(self):
        v = velocity_axis(128, CHIRP)
        assert v[64] == 0.0
        resolution = 3e8 / (2 * CHIRP.f0 * 128 * CHIRP.duration)
        assert v[65] - v[64] == pytest.approx(resolution)
        assert v[0] == pytest.approx(-64 * resolution)

    def test_time_axis(self):
        assert_allclose(time_axis(3, 8, 1e6), [0.0, 8e-6, 16e-6])


class TestSpectra:
    def test_range_profile_peak_is_zero_db(self):
        profile = range_profile(0.5 * _tone(1024, 120))
        assert int(np.argmax(profile)) == 120
        assert profile.max() == pytest.approx(0.0)
        assert (profile <= 1e-12).all()

    def test_hann_lowers_far_sidelobes(self):
        x = _tone(256, 40.5)
        rect, hann = range_profile(x), range_profile(x, "hann")
        assert hann[120] < rect[120] - 20
        with pytest.raises(ValueError):
            range_profile(x, "kaiser")

    def test_zero_input(self):
        assert_array_equal(range_profile(np.zeros(16)), 0.0)

    def test_rd_map_locates_range_and_doppler(self):
        n_chirps, n = 16, 64
        m = np.arange(n_chirps)[:, None]
        frame = _tone(n, 10)[None, :] * np.exp(2j * np.pi * 3 * m / n_chirps)
        rd = rd_map(frame)
        assert rd.shape == (n_chirps, n)
        assert np.unravel_index(np.argmax(rd), rd.shape) == (3 + n_chirps // 2, 10)
        assert rd.max() == pytest.approx(0.0)
        with pytest.raises(ValueError):
            rd_map(np.zeros(8))

    def test_stationary_target_sits_in_zero_doppler_row(self):
        chirp, sim = toy_configs(64)
        sim = dataclasses.replace(sim, n_chirps=8)
        scene = SceneSpec(targets=(TargetSpec(10.0),), noise_std=0.0)
        _, clean = synth_frame(scene, chirp, sim)
        for row in clean[1:]:
            assert_allclose(np.abs(np.fft.fft(row)), np.abs(np.fft.fft(clean[0])), atol=1e-9)
        rd = rd_map(clean)
        assert np.unravel_index(np.argmax(rd), rd.shape)[0] == 4

    def test_simulated_mover_lands_on_its_doppler_row(self):
        scene = SceneSpec(targets=(TargetSpec(30.0, speed_mps=18.31),), noise_std=0.0)
        _, clean = synth_frame(scene, CHIRP, SIM)
        rd = rd_map(clean)
        assert rd.shape == (128, 1024)
        row, col = np.unravel_index(np.argmax(rd), rd.shape)
        assert abs(row - (64 + 24)) <= 1
        assert abs(col - 120) <= 1
        assert velocity_axis(128, CHIRP)[88] == pytest.approx(18.31, abs=0.77)

    def test_stft_shape_and_tone(self):
        x = _tone(64, 4)
        spec = stft(x, win_len=16, hop=8)
        assert spec.shape == (16, 7)
        # a bin-aligned tone puts all of each frame's energy in one bin
        assert_allclose(spec[1], 4.0)
        assert_allclose(np.delete(spec, 1, axis=0), 0.0, atol=1e-12)

    def test_stft_frames_keep_energy(self, rng):
        x = rng.normal(size=40) + 1j * rng.normal(size=40)
        spec = stft(x, win_len=8, hop=8)
        for j in range(spec.shape[1]):
            assert np.sum(spec[:, j] ** 2) == pytest.approx(np.sum(np.abs(x[8 * j:8 * j + 8]) ** 2))

    def test_stft_invalid(self):
        with pytest.raises(ValueError):
            stft(np.ones(8), win_len=16, hop=4)
        with pytest.raises(ValueError):
            stft(np.ones(8), win_len=4, hop=0)


class TestSinr:
    def test_ten_db(self):
        spectrum = np.ones(64)
        spectrum[[10, 11]] = 10.0
        spec = EvalSpec(target_bins={10, 11}, noise_bins=set(range(20, 64)))
        assert sinr(spectrum, spec) == pytest.approx(10.0)

    def test_scale_invariant(self, rng):
        spectrum = rng.exponential(size=64)
        spec = EvalSpec(target_bins={5}, noise_bins={20, 30, 40})
        assert sinr(1e4 * spectrum, spec) == pytest.approx(sinr(spectrum, spec))

    def test_invalid_bins(self):
        with pytest.raises(ValueError):
            EvalSpec(target_bins={1, 2}, noise_bins={2, 3})
        with pytest.raises(ValueError):
            sinr(np.ones(8), EvalSpec(target_bins=set(), noise_bins={1}))

    def test_build_eval_spec(self):
        spec = build_eval_spec(SceneSpec(targets=(TargetSpec(30.0),)), SIM, CHIRP)
        assert spec.target_bins == {119, 120, 121}
        assert len(spec.noise_bins) == 1024 - 7
        assert not spec.noise_bins & set(range(117, 124))

    def test_build_eval_spec_real_signal_uses_half_spectrum(self):
        spec = build_eval_spec(SceneSpec(targets=(TargetSpec(30.0),)), SimConfig(iq=False), CHIRP)
        assert max(spec.noise_bins) == 511

    def test_build_eval_spec_needs_targets(self):
        with pytest.raises(ValueError):
            build_eval_spec(SceneSpec(targets=()), SIM, CHIRP)


class TestCfar:
    def test_alpha_for_pfa(self):
        assert cfar_alpha_for_pfa(1e-6, 32) == pytest.approx(32 * (1e-6 ** (-1 / 32) - 1))
        assert cfar_alpha_for_pfa(1e-6, 10 ** 6) == pytest.approx(-np.log(1e-6), rel=1e-4)
        with pytest.raises(ValueError):
            cfar_alpha_for_pfa(1.5, 32)

    def test_single_spike_linear(self):
        detections = ca_cfar(_spike_profile(), CfarConfig(threshold_factor=3.0, domain="linear"))
        assert [d.bin for d in detections] == [40]
        assert detections[0].value == 1000.0
        assert detections[0].threshold == pytest.approx(3.0)

    def test_single_spike_db(self):
        detections = ca_cfar(_spike_profile())
        assert [d.bin for d in detections] == [40]
        assert detections[0].value == pytest.approx(0.0)

    def test_edge_cells_use_one_side(self):
        detections = ca_cfar(_spike_profile(spikes=((0, 1000.0),)), CfarConfig(threshold_factor=3.0, domain="linear"))
        assert [d.bin for d in detections] == [0]

    def test_adjacent_cells_group_into_one_peak(self):
        profile = _spike_profile(spikes=((40, 500.0), (41, 1000.0)))
        grouped = ca_cfar(profile, CfarConfig(threshold_factor=3.0, domain="linear"))
        assert [d.bin for d in grouped] == [41]
        separate = ca_cfar(profile, CfarConfig(threshold_factor=3.0, domain="linear", group_peaks=False))
        assert [d.bin for d in separate] == [40, 41]

    def test_scale_invariant(self, rng):
        profile = rng.exponential(size=256)
        profile[[30, 100]] = 200.0
        for cfg in (CfarConfig(), CfarConfig(threshold_factor=4.0, domain="linear")):
            base = [d.bin for d in ca_cfar(profile, cfg)]
            assert [d.bin for d in ca_cfar(1024.0 * profile, cfg)] == base
            assert {30, 100} <= set(base)

    def test_noise_only_profile_has_no_false_alarms(self, rng):
        profile = rng.exponential(size=4096)
        cfg = CfarConfig(threshold_factor=cfar_alpha_for_pfa(1e-8, 32), domain="linear", group_peaks=False)
        assert ca_cfar(profile, cfg) == []

    def test_zero_profile(self):
        assert ca_cfar(np.zeros(64)) == []

    def test_invalid(self):
        with pytest.raises(ValueError):
            ca_cfar(np.ones(40))
        with pytest.raises(ValueError):
            ca_cfar(np.ones((2, 64)))
        with pytest.raises(ValueError):
            CfarConfig(domain="log")
        with pytest.raises(ValueError):
            CfarConfig(n_train=0)

    def test_cfar_profile_stops_at_low_pass_cutoff(self):
        assert cfar_profile(np.ones(1024, dtype=complex), SIM).shape == (461,)

    def test_two_off_grid_targets_over_seeded_draws(self, rng):
        sim = dataclasses.replace(SIM, n_chirps=1)
        bin_m = range_axis(SIM.n_samples, CHIRP, SIM)[1]
        for _ in range(100):
            near = (rng.integers(40, 200) + rng.uniform(0.2, 0.8)) * bin_m
            far = (rng.integers(240, 420) + rng.uniform(0.2, 0.8)) * bin_m
            targets = tuple(TargetSpec(r, amplitude=float(rng.uniform(0.3, 1.0))) for r in (near, far))
            _, clean = synth_frame(SceneSpec(targets=targets, noise_std=0.0), CHIRP, sim)
            found = [d.bin for d in ca_cfar(cfar_profile(clean[0], sim))]
            for r in (near, far):
                assert min(abs(b - r / bin_m) for b in found) <= 1.0, (near, far, found)

    def test_spike_over_flat_floor(self):
        profile = np.ones(64)
        profile[32] = 100.0
        detections = ca_cfar(profile)
        assert [d.bin for d in detections] == [32]
        assert detections[0].value == pytest.approx(0.0)
        assert detections[0].threshold == pytest.approx(0.82 * -20.0)

    def test_factor_below_one_flags_linear_floor(self):
        profile = np.ones(64)
        profile[32] = 100.0
        loose = ca_cfar(profile, CfarConfig(domain="linear", group_peaks=False))
        assert len(loose) > 1
        assert 32 in [d.bin for d in loose]
        calibrated = ca_cfar(profile, CfarConfig(threshold_factor=cfar_alpha_for_pfa(1e-3, 32), domain="linear"))
        assert [d.bin for d in calibrated] == [32]
        assert calibrated[0].value == 100.0


class TestEvaluateTestset:
    def test_interfered_passthrough_has_no_gain(self, toy_dataset):
        records = toy_dataset.split("test")
        report = evaluate_testset(records, None, None, toy_dataset.chirp, toy_dataset.sim, progress=False)
        assert report.n_samples == 3
        assert report.passthrough == "interfered"
        assert report.mean_mse > 0.0
        assert report.sinr_gain_db == pytest.approx(0.0)
        assert [row["index"] for row in report.per_sample] == [r.index for r in records]

    def test_clean_passthrough_beats_interfered(self, toy_dataset):
        records = toy_dataset.split("test")
        report = evaluate_testset(records, None, None, toy_dataset.chirp, toy_dataset.sim, passthrough="clean", progress=False)
        assert report.sinr_gain_db > 0.0
        assert report.mean_mse == 0.0

    def test_precomputed_predictions(self, toy_dataset):
        records = toy_dataset.split("val")
        cfg = ModelConfig.from_profile("tiny", toy_dataset.sim.n_samples)
        report = evaluate_testset(
            records, init_params(cfg), cfg, toy_dataset.chirp, toy_dataset.sim,
            split="val", progress=False, predictions=[r.clean for r in records],
        )
        assert report.passthrough is None
        assert report.mean_mse == 0.0
        assert report.split == "val"

    def test_model_predictions(self, toy_dataset):
        records = toy_dataset.split("val")
        cfg = ModelConfig.from_profile("tiny", toy_dataset.sim.n_samples, n_layers=1)
        report = evaluate_testset(
            records, init_params(cfg), cfg, toy_dataset.chirp, toy_dataset.sim, timing=True, progress=False,
        )
        assert np.isfinite(report.mean_sinr_db)
        assert report.inference_ms > 0.0

    def test_cfar_fields(self, toy_dataset):
        records = toy_dataset.split("test")
        report = evaluate_testset(
            records, None, None, toy_dataset.chirp, toy_dataset.sim, cfar_cfg=CfarConfig(n_train=8, n_guard=2),
            passthrough="clean", progress=False,
        )
        assert 0.0 <= report.detection_rate <= 1.0
        assert report.false_alarms >= 0
        for row in report.per_sample:
            assert row["targets"] == len(next(r for r in records if r.index == row["index"]).scene.targets)
        assert json.loads(json.dumps(report.to_dict()))["sinr_gain_db"] == pytest.approx(report.sinr_gain_db)

    def test_invalid(self, toy_dataset):
        records = toy_dataset.split("test")
        with pytest.raises(ValueError):
            evaluate_testset([], None, None, toy_dataset.chirp, toy_dataset.sim)
        with pytest.raises(ValueError):
            evaluate_testset(records, None, None, toy_dataset.chirp, toy_dataset.sim, passthrough="model")
        cfg = ModelConfig.from_profile("tiny", toy_dataset.sim.n_samples)
        with pytest.raises(ValueError):
            evaluate_testset(
                records, init_params(cfg), cfg, toy_dataset.chirp, toy_dataset.sim,
                predictions=[records[0].clean], progress=False,
            )


def test_gather_reports(tmp_path):
    report = {
        "split": "test", "n_samples": 3, "mean_sinr_db": 12.0, "median_sinr_db": 11.0,
        "mean_input_sinr_db": 2.0, "mean_mse": 0.01,
    }
    for run in ("a", "b"):
        os.makedirs(tmp_path / run)
        (tmp_path / run / "eval_report.json").write_text(json.dumps(report))
    (tmp_path / "a" / "config.json").write_text(json.dumps({"profile": "tiny"}))
    os.makedirs(tmp_path / "empty")

    rows = gather_reports(str(tmp_path))
    assert [row["run"] for row in rows] == ["a", "b"]
    assert rows[0]["profile"] == "tiny"
    assert "profile" not in rows[1]
    assert rows[1]["inference_ms"] is None
