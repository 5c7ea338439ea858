"""
Spectral analysis and metrics: range profiles, range-Doppler maps, STFT,
SINR over ground-truth target/noise bins and cell-averaging CFAR.
"""
import logging
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, FrozenSet, List, Optional, Sequence, Union

import numpy as np
import scipy.fft
from scipy.signal import get_window
from tqdm import tqdm

from models.rimformer.rimformer import ModelConfig, RimformerParams, rimformer_forward
from radar.simulation import (
    SPEED_OF_LIGHT, ChirpParams, SimConfig, SceneSpec, ComplexSignal, beat_bin,
)
from utils.data import get_json_data

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

SignalLike = Union[ComplexSignal, np.ndarray]


def as_complex(x: SignalLike) -> np.ndarray:
    """Complex samples of a ComplexSignal, a complex array, or [..., n, 1|2] channels."""
    if isinstance(x, ComplexSignal):
        return x.iq
    x = np.asarray(x)
    if np.iscomplexobj(x) or x.ndim == 1:
        return x.astype(np.complex128)
    if x.shape[-1] == 2:
        return x[..., 0] + 1j * x[..., 1]
    if x.shape[-1] == 1:
        return x[..., 0].astype(np.complex128)
    raise ValueError(f"cannot interpret array of shape {x.shape} as a signal")


def _window(name: str, n: int) -> np.ndarray:
    if name in ("rectangular", "boxcar", None):
        return np.ones(n)
    if name == "hann":
        return get_window("hann", n)
    raise ValueError(f"unknown window {name}, expected rectangular or hann")


def _to_db(magnitude: np.ndarray) -> np.ndarray:
    peak = magnitude.max(initial=0.0)
    if peak == 0.0:
        return np.zeros_like(magnitude)
    return 20.0 * np.log10(np.maximum(magnitude, np.finfo(np.float64).tiny) / peak)


# ------------------
#   Axes
# ------------------

def frequency_axis(n: int, fs: float) -> np.ndarray:
    """Frequency of each FFT output bin (negative for the upper half)."""
    return scipy.fft.fftfreq(n, d=1.0 / fs)


def range_axis(n: int, chirp: ChirpParams, sim: SimConfig) -> np.ndarray:
    """Range in meters of each range-FFT bin: f·c / (2K)."""
    return frequency_axis(n, sim.fs) * SPEED_OF_LIGHT / (2.0 * chirp.slope)


def velocity_axis(n_chirps: int, chirp: ChirpParams) -> np.ndarray:
    """Velocity of each fftshifted Doppler row: bin·c / (2·f0·n_chirps·T)."""
    bins = np.arange(n_chirps) - n_chirps // 2
    return bins * SPEED_OF_LIGHT / (2.0 * chirp.f0 * n_chirps * chirp.duration)


def time_axis(n_frames: int, hop: int, fs: float) -> np.ndarray:
    return np.arange(n_frames) * hop / fs


# ------------------
#   Spectra
# ------------------

def power_spectrum(x: SignalLike) -> np.ndarray:
    """|FFT(x)|² along the sample axis."""
    return np.abs(scipy.fft.fft(as_complex(x), axis=-1)) ** 2


def range_profile(x: SignalLike, window: str = "rectangular") -> np.ndarray:
    """20·log10|FFT(w·x)| normalized so the peak sits at 0 dB."""
    z = as_complex(x)
    return _to_db(np.abs(scipy.fft.fft(z * _window(window, z.shape[-1]))))


def rd_map(frame: np.ndarray, windows: Sequence[str] = ("rectangular", "rectangular")) -> np.ndarray:
    """Range FFT along samples, Doppler FFT along chirps (zero velocity in the
    center row), in dB relative to the map peak. Shape [n_chirps, n_samples]."""
    frame = np.asarray(frame, dtype=np.complex128)
    if frame.ndim != 2:
        raise ValueError(f"rd_map expects [n_chirps, n_samples], got {frame.shape}")
    n_chirps, n_samples = frame.shape
    range_window, doppler_window = windows
    ranged = scipy.fft.fft(frame * _window(range_window, n_samples)[None, :], axis=1)
    doppler = scipy.fft.fft(ranged * _window(doppler_window, n_chirps)[:, None], axis=0)
    return _to_db(np.abs(scipy.fft.fftshift(doppler, axes=0)))


def stft(x: SignalLike, win_len: int, hop: int, window: str = "rectangular") -> np.ndarray:
    """Magnitude STFT [win_len, n_frames] with orthonormal per-frame FFTs."""
    z = as_complex(x)
    n = z.shape[-1]
    if not 1 <= win_len <= n or hop < 1:
        raise ValueError(f"need 1 <= win_len <= {n} and hop >= 1, got win_len={win_len}, hop={hop}")
    n_frames = (n - win_len) // hop + 1
    idx = np.arange(n_frames)[:, None] * hop + np.arange(win_len)[None, :]
    frames = z[idx] * _window(window, win_len)[None, :]
    return np.abs(scipy.fft.fft(frames, axis=1, norm="ortho")).T


# ------------------
#   SINR
# ------------------

@dataclass(frozen=True)
class EvalSpec:
    target_bins: FrozenSet[int]
    noise_bins: FrozenSet[int]
    guard_halfwidth: int = 3

    def __post_init__(self):
        object.__setattr__(self, "target_bins", frozenset(int(b) for b in self.target_bins))
        object.__setattr__(self, "noise_bins", frozenset(int(b) for b in self.noise_bins))
        if self.target_bins & self.noise_bins:
            raise ValueError("target and noise bins overlap")


def sinr(spectrum: np.ndarray, spec: EvalSpec) -> float:
    """10·log10(mean power over target bins / mean power over noise bins)."""
    if not spec.target_bins or not spec.noise_bins:
        raise ValueError("SINR needs non-empty target and noise bin sets")
    spectrum = np.asarray(spectrum, dtype=np.float64)
    target = spectrum[sorted(spec.target_bins)].mean()
    noise = spectrum[sorted(spec.noise_bins)].mean()
    return float(10.0 * np.log10(target / noise))


def build_eval_spec(
        scene: SceneSpec, sim: SimConfig, chirp: ChirpParams = ChirpParams(),
        target_halfwidth: int = 1, guard_halfwidth: int = 3,
) -> EvalSpec:
    """Target bins ±target_halfwidth around every ground-truth beat bin; noise
    bins are everything outside ±guard_halfwidth of any target. Real-valued
    signals only use the non-negative half of the spectrum."""
    if not scene.targets:
        raise ValueError("scene has no targets")
    n_bins = sim.n_samples if sim.iq else sim.n_samples // 2
    centers = [beat_bin(t.range_m, chirp, sim) for t in scene.targets]
    targets, guarded = set(), set()
    for center in centers:
        targets.update(b for b in range(center - target_halfwidth, center + target_halfwidth + 1) if 0 <= b < n_bins)
        guarded.update(range(center - guard_halfwidth, center + guard_halfwidth + 1))
    noise = set(range(n_bins)) - guarded - targets
    if not noise:
        raise ValueError("targets leave no noise bins")
    return EvalSpec(frozenset(targets), frozenset(noise), guard_halfwidth)


# ------------------
#   CFAR
# ------------------

@dataclass(frozen=True)
class CfarConfig:
    """``threshold_factor`` multiplies the training-cell mean in the units of
    ``domain``: dB relative to the profile peak (all values <= 0) or linear power.
    A factor below one therefore raises the threshold in dB and lowers it in
    linear power."""

    n_train: int = 16
    n_guard: int = 4
    threshold_factor: float = 0.82
    domain: str = "db"  # db | linear
    group_peaks: bool = True
    floor_db: float = -200.0

    def __post_init__(self):
        if self.n_train < 1 or self.n_guard < 0:
            raise ValueError(f"need n_train >= 1 and n_guard >= 0, got {self.n_train}, {self.n_guard}")
        if self.threshold_factor <= 0:
            raise ValueError(f"threshold factor must be positive, got {self.threshold_factor}")
        if self.domain not in ("db", "linear"):
            raise ValueError(f"CFAR domain must be 'db' or 'linear', got {self.domain}")


@dataclass
class Detection:
    """``value`` and ``threshold`` are in the units of the detector's domain."""

    bin: int
    value: float
    threshold: float


def cfar_alpha_for_pfa(pfa: float, n_cells: int) -> float:
    """Cell-averaging factor for exponentially distributed noise power."""
    if not 0 < pfa < 1 or n_cells < 1:
        raise ValueError(f"need 0 < pfa < 1 and n_cells >= 1, got {pfa}, {n_cells}")
    return n_cells * (pfa ** (-1.0 / n_cells) - 1.0)


def cfar_profile(x: SignalLike, sim: SimConfig) -> np.ndarray:
    """Linear power of the non-negative range bins below the low-pass cutoff."""
    power = power_spectrum(x)
    n_bins = int(np.ceil(sim.f_lpf * sim.n_samples / sim.fs))
    return power[..., :n_bins]


def ca_cfar(profile: np.ndarray, cfg: CfarConfig = CfarConfig()) -> List[Detection]:
    """Cell i is detected when p[i] > α·mean(training cells), training cells
    being ``n_train`` per side beyond ``n_guard`` guard cells. Cells near the
    edges use whichever side exists.

    In the ``db`` domain the rule runs on 10·log10(p / max p), so every value
    is <= 0 and the detection set does not change with the profile's scale.
    In the ``linear`` domain use ``cfar_alpha_for_pfa`` for a factor that holds
    a false-alarm rate; factors below one flag the whole noise floor.
    """
    p = np.asarray(profile, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"CFAR expects a 1-D profile, got {p.shape}")
    n = len(p)
    if n <= 2 * (cfg.n_train + cfg.n_guard):
        raise ValueError(f"profile of {n} cells too short for {cfg.n_train} training and {cfg.n_guard} guard cells per side")
    peak = p.max()
    if peak <= 0:
        return list()
    if cfg.domain == "db":
        values = np.maximum(10.0 * np.log10(np.maximum(p, np.finfo(np.float64).tiny) / peak), cfg.floor_db)
    else:
        values = p

    cumsum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(n)
    left_hi = np.clip(idx - cfg.n_guard, 0, n)
    left_lo = np.clip(idx - cfg.n_guard - cfg.n_train, 0, n)
    right_lo = np.clip(idx + cfg.n_guard + 1, 0, n)
    right_hi = np.clip(idx + cfg.n_guard + 1 + cfg.n_train, 0, n)
    total = (cumsum[left_hi] - cumsum[left_lo]) + (cumsum[right_hi] - cumsum[right_lo])
    count = (left_hi - left_lo) + (right_hi - right_lo)
    thresholds = cfg.threshold_factor * total / count
    hits = values > thresholds

    detections = list()
    i = 0
    while i < n:
        if not hits[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and hits[j + 1]:
            j += 1
        run = range(i, j + 1) if not cfg.group_peaks else [i + int(np.argmax(values[i:j + 1]))]
        detections.extend(Detection(bin=k, value=float(values[k]), threshold=float(thresholds[k])) for k in run)
        i = j + 1
    return detections


# ------------------
#   Test-set evaluation
# ------------------

@dataclass
class EvalReport:
    split: str
    n_samples: int
    mean_sinr_db: float
    median_sinr_db: float
    mean_mse: float
    mean_input_sinr_db: float
    median_input_sinr_db: float
    passthrough: Optional[str] = None
    mean_detections: Optional[float] = None
    detection_rate: Optional[float] = None
    false_alarms: Optional[int] = None
    inference_ms: Optional[float] = None
    per_sample: List[Dict] = field(default_factory=list)

    @property
    def sinr_gain_db(self) -> float:
        return self.mean_sinr_db - self.mean_input_sinr_db

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["sinr_gain_db"] = self.sinr_gain_db
        return out


def predict(records: Sequence, params: RimformerParams, cfg: ModelConfig, batch_size: int = 16) -> List[np.ndarray]:
    """Normalized reconstructions of every record's interfered signal. No graph is recorded."""
    out = list()
    for start in range(0, len(records), batch_size):
        batch = np.stack([r.interfered for r in records[start:start + batch_size]])
        out.extend(rimformer_forward(batch, params, cfg).data)
    return out


def time_inference(params: RimformerParams, cfg: ModelConfig, x: np.ndarray, runs: int = 20, warmup: int = 3) -> float:
    """Median wall time in milliseconds of one single-chirp forward pass."""
    for _ in range(warmup):
        rimformer_forward(x, params, cfg)
    timings = list()
    for _ in range(runs):
        start = time.perf_counter()
        rimformer_forward(x, params, cfg)
        timings.append((time.perf_counter() - start) * 1e3)
    return float(np.median(timings))


def evaluate_testset(
        records: Sequence,
        params: Optional[RimformerParams],
        model_cfg: Optional[ModelConfig],
        chirp: ChirpParams,
        sim: SimConfig,
        cfar_cfg: Optional[CfarConfig] = None,
        passthrough: str = "interfered",
        timing: bool = False,
        batch_size: int = 16,
        split: str = "test",
        progress: bool = True,
        predictions: Optional[Sequence[np.ndarray]] = None,
) -> EvalReport:
    """SINR and MSE of reconstructions (or of the stored signals when
    ``params`` is None) over ``records``.

    MSE is taken on normalized signals; SINR on reconstructions scaled back by
    each record's normalization factor. Precomputed ``predictions`` skip the
    forward passes.
    """
    if not records:
        raise ValueError(f"split {split} is empty")
    if params is None:
        if passthrough not in ("interfered", "clean"):
            raise ValueError(f"passthrough must be 'interfered' or 'clean', got {passthrough}")
        predictions = [getattr(r, passthrough) for r in records]
    else:
        passthrough = None
        if predictions is None:
            predictions = predict(records, params, model_cfg, batch_size)
    if len(predictions) != len(records):
        raise ValueError(f"{len(predictions)} predictions for {len(records)} records")

    per_sample = list()
    for record, pred in tqdm(zip(records, predictions), total=len(records), desc=f"eval {split}", disable=not progress):
        spec = build_eval_spec(record.scene, sim, chirp)
        row = {
            "index": record.index,
            "mse": float(np.mean((pred - record.clean) ** 2)),
            "sinr_db": sinr(power_spectrum(pred * record.scale), spec),
            "input_sinr_db": sinr(power_spectrum(record.interfered * record.scale), spec),
        }
        if cfar_cfg is not None:
            truth = [beat_bin(t.range_m, chirp, sim) for t in record.scene.targets]
            found = [d.bin for d in ca_cfar(cfar_profile(pred * record.scale, sim), cfar_cfg)]
            row["detections"] = len(found)
            row["hits"] = sum(any(abs(b - t) <= 1 for b in found) for t in truth)
            row["targets"] = len(truth)
            row["false_alarms"] = sum(not any(abs(b - t) <= 1 for t in truth) for b in found)
        per_sample.append(row)

    sinrs = np.array([r["sinr_db"] for r in per_sample])
    inputs = np.array([r["input_sinr_db"] for r in per_sample])
    report = EvalReport(
        split=split,
        n_samples=len(per_sample),
        mean_sinr_db=float(sinrs.mean()),
        median_sinr_db=float(np.median(sinrs)),
        mean_mse=float(np.mean([r["mse"] for r in per_sample])),
        mean_input_sinr_db=float(inputs.mean()),
        median_input_sinr_db=float(np.median(inputs)),
        passthrough=passthrough,
        per_sample=per_sample,
    )
    if cfar_cfg is not None:
        report.mean_detections = float(np.mean([r["detections"] for r in per_sample]))
        report.detection_rate = float(sum(r["hits"] for r in per_sample) / sum(r["targets"] for r in per_sample))
        report.false_alarms = int(sum(r["false_alarms"] for r in per_sample))
    if timing and params is not None:
        report.inference_ms = time_inference(params, model_cfg, records[0].interfered)
    logger.info(f"{split} | sinr: {report.mean_sinr_db:.2f} dB (median {report.median_sinr_db:.2f}) | input sinr: {report.mean_input_sinr_db:.2f} dB | mse: {report.mean_mse:.3e}")
    return report


def gather_reports(root_path: str = "./runs") -> List[Dict]:
    """One row per ``eval_report.json`` under ``root_path``, merged with the
    sibling ``config.json`` when there is one."""
    out = list()
    for root, folders, files in sorted(os.walk(root_path)):
        if "eval_report.json" not in files:
            continue
        report = get_json_data(os.path.join(root, "eval_report.json"))
        config_path = os.path.join(root, "config.json")
        row = dict(get_json_data(config_path)) if os.path.exists(config_path) else dict()
        row.update({
            "run": os.path.relpath(root, root_path),
            "split": report["split"],
            "n_samples": report["n_samples"],
            "mean_sinr_db": report["mean_sinr_db"],
            "median_sinr_db": report["median_sinr_db"],
            "mean_input_sinr_db": report["mean_input_sinr_db"],
            "mean_mse": report["mean_mse"],
            "inference_ms": report.get("inference_ms"),
        })
        out.append(row)
    return out
