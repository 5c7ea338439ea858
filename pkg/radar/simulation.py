"""
FMCW signal model: transmit chirps, target echoes, interfering chirps, the
dechirp + low-pass mixer, and randomized scenes.

Mixer convention: the IF output is ``conj(rx) · tx`` so a target at delay τ
beats at +K·τ and a receding (positive speed) target advances its
phase from chirp to chirp.

The analog low-pass is emulated by synthesizing each mixed component at an
oversampled rate, zeroing every frequency bin above the cutoff and then
decimating to the ADC rate.
"""
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.fft

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

SPEED_OF_LIGHT = 3e8


@dataclass(frozen=True)
class ChirpParams:
    f0: float = 76.5e9  # start frequency, Hz
    slope: float = 3e13  # K, Hz/s (0.03 GHz/us)
    bandwidth: float = 6e8  # B, Hz
    tc: float = 20e-6  # effective time width, s
    duration: float = 20e-6  # T, s
    amplitude: float = 1.0  # A_T

    def __post_init__(self):
        if not 0 < self.tc <= self.duration:
            raise ValueError(f"need 0 < Tc <= T, got Tc={self.tc}, T={self.duration}")
        if abs(self.slope - self.bandwidth / self.tc) > 1e-12 * abs(self.slope):
            raise ValueError(f"slope {self.slope} != bandwidth / Tc = {self.bandwidth / self.tc}")

    @classmethod
    def for_duration(cls, duration: float, f0: float = 76.5e9, slope: float = 3e13, amplitude: float = 1.0) -> "ChirpParams":
        """Chirp with Tc = T and the bandwidth implied by the slope."""
        return cls(f0=f0, slope=slope, bandwidth=slope * duration, tc=duration, duration=duration, amplitude=amplitude)


@dataclass(frozen=True)
class SimConfig:
    fs: float = 51.2e6
    n_samples: int = 1024
    n_chirps: int = 128
    f_lpf: Optional[float] = None  # defaults to 0.9 * fs / 2
    iq: bool = True

    def __post_init__(self):
        if self.f_lpf is None:
            object.__setattr__(self, "f_lpf", 0.9 * self.fs / 2)
        if self.n_samples < 1 or self.n_chirps < 1:
            raise ValueError("n_samples and n_chirps must be positive")
        if not 0 < self.f_lpf <= self.fs / 2:
            raise ValueError(f"need 0 < f_lpf <= fs/2, got f_lpf={self.f_lpf}, fs={self.fs}")

    @property
    def channels(self) -> int:
        return 2 if self.iq else 1

    def check(self, p: ChirpParams) -> None:
        if self.n_samples != int(round(self.fs * p.duration)):
            raise ValueError(f"n_samples={self.n_samples} inconsistent with fs*T = {self.fs * p.duration}")


def toy_configs(n_samples: int = 256, fs: float = 51.2e6, iq: bool = True) -> Tuple[ChirpParams, SimConfig]:
    """Default victim slope and sampling rate with a chirp shortened to ``n_samples``."""
    return ChirpParams.for_duration(n_samples / fs), SimConfig(fs=fs, n_samples=n_samples, iq=iq)


@dataclass(frozen=True)
class TargetSpec:
    range_m: float
    speed_mps: float = 0.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.range_m <= 0 or self.amplitude <= 0:
            raise ValueError(f"target needs positive range and amplitude, got {self}")


@dataclass(frozen=True)
class InterfererSpec:
    start_freq: float
    slope: float
    amplitude: float
    time_offset: float = 0.0

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ValueError(f"interferer amplitude must be positive, got {self.amplitude}")


@dataclass(frozen=True)
class SceneSpec:
    targets: Tuple[TargetSpec, ...]
    interferers: Tuple[InterfererSpec, ...] = ()
    noise_std: float = 0.05
    seed: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "SceneSpec":
        return cls(
            targets=tuple(TargetSpec(**t) for t in d["targets"]),
            interferers=tuple(InterfererSpec(**i) for i in d["interferers"]),
            noise_std=d["noise_std"],
            seed=d["seed"],
        )


@dataclass(frozen=True)
class SceneRanges:
    """Sampling intervals of a random scene.

    Target speeds are signed by default; pass (3.0, 45.0) for receding-only scenes.
    """
    n_targets: Tuple[int, int] = (1, 3)
    target_range_m: Tuple[float, float] = (3.0, 45.0)
    target_speed_mps: Tuple[float, float] = (-45.0, 45.0)
    target_amplitude: Tuple[float, float] = (0.4, 3.0)
    n_interferers: Tuple[int, int] = (0, 5)
    interferer_slope: Tuple[float, float] = (-6.75e13, 6.75e13)  # +-0.0675 GHz/us
    interferer_start_freq: Tuple[float, float] = (76.2e9, 76.8e9)
    interferer_amplitude: Tuple[float, float] = (6.0, 33.0)
    noise_std: float = 0.05


@dataclass
class ComplexSignal:
    iq: np.ndarray
    fs: float

    def __post_init__(self):
        self.iq = np.asarray(self.iq, dtype=np.complex128)
        if not np.isfinite(self.iq).all():
            raise ValueError("signal contains non-finite samples")

    def __len__(self):
        return self.iq.shape[-1]

    def __add__(self, other: "ComplexSignal") -> "ComplexSignal":
        if self.fs != other.fs or len(self) != len(other):
            raise ValueError("cannot add signals of different rate or length")
        return ComplexSignal(self.iq + other.iq, self.fs)

    def to_channels(self, iq: bool = True) -> np.ndarray:
        """[n, 2] (I, Q) or [n, 1] (real part) float64 array."""
        if iq:
            return np.stack([self.iq.real, self.iq.imag], axis=-1)
        return self.iq.real[..., None].copy()

    @classmethod
    def from_channels(cls, channels: np.ndarray, fs: float) -> "ComplexSignal":
        channels = np.asarray(channels, dtype=np.float64)
        if channels.shape[-1] == 2:
            return cls(channels[..., 0] + 1j * channels[..., 1], fs)
        if channels.shape[-1] == 1:
            return cls(channels[..., 0].astype(np.complex128), fs)
        raise ValueError(f"expected [..., n, 1] or [..., n, 2] channels, got {channels.shape}")


def time_axis(n_samples: int, fs: float) -> np.ndarray:
    return np.arange(n_samples) / fs


def chirp_phase(p: ChirpParams, t: np.ndarray) -> np.ndarray:
    """Unwrapped transmit phase 2π(f0·t + K/2·t²) in radians."""
    return 2 * np.pi * (p.f0 * t + 0.5 * p.slope * t ** 2)


def echo_delay(p: ChirpParams, tgt: TargetSpec, chirp_index: int) -> float:
    return 2.0 * (tgt.range_m + tgt.speed_mps * chirp_index * p.duration) / SPEED_OF_LIGHT


def beat_bin(range_m: float, p: ChirpParams, cfg: SimConfig) -> int:
    return int(round(2.0 * range_m * p.slope / SPEED_OF_LIGHT * cfg.n_samples / cfg.fs))


def tx_chirp(p: ChirpParams, cfg: SimConfig, oversample: int = 1) -> ComplexSignal:
    cfg.check(p)
    fs = cfg.fs * oversample
    t = time_axis(cfg.n_samples * oversample, fs)
    return ComplexSignal(p.amplitude * np.exp(1j * chirp_phase(p, t)), fs)


def target_echo(p: ChirpParams, tgt: TargetSpec, chirp_index: int, cfg: SimConfig, oversample: int = 1) -> ComplexSignal:
    """Delayed copy of the chirp; samples before the echo arrives are zero."""
    cfg.check(p)
    tau = echo_delay(p, tgt, chirp_index)
    if not 0 <= tau < p.duration:
        raise ValueError(f"echo delay {tau:.3e} s outside [0, T={p.duration:.3e} s) for {tgt}")
    fs = cfg.fs * oversample
    t = time_axis(cfg.n_samples * oversample, fs)
    echo = tgt.amplitude * np.exp(1j * chirp_phase(p, t - tau))
    echo[t < tau] = 0.0
    return ComplexSignal(echo, fs)


def interference_signal(spec: InterfererSpec, p: ChirpParams, cfg: SimConfig, oversample: int = 1) -> ComplexSignal:
    """Another radar's chirp, phase-referenced to its own start ``time_offset``."""
    cfg.check(p)
    fs = cfg.fs * oversample
    dt = time_axis(cfg.n_samples * oversample, fs) - spec.time_offset
    phase = 2 * np.pi * (spec.start_freq * dt + 0.5 * spec.slope * dt ** 2)
    return ComplexSignal(spec.amplitude * np.exp(1j * phase), fs)


def interference_offsets(spec: InterfererSpec, p: ChirpParams) -> Tuple[float, float]:
    """Mixer output frequency (tx minus interferer) at the chirp start and end."""

    def offset(t):
        return (p.f0 + p.slope * t) - (spec.start_freq + spec.slope * (t - spec.time_offset))

    return offset(0.0), offset(p.duration)


def required_oversample(offset_start: float, offset_end: float, cfg: SimConfig) -> int:
    """Smallest power-of-two factor whose rate keeps aliases of a linear
    frequency sweep outside the ±f_lpf passband."""
    peak = max(abs(offset_start), abs(offset_end))
    factor = 1
    while cfg.fs * factor <= peak + cfg.f_lpf:
        factor *= 2
    return factor


def dechirp_lpf(rx: ComplexSignal, tx: ComplexSignal, cfg: SimConfig) -> ComplexSignal:
    """Mix ``rx`` against ``tx``, brick-wall low-pass at f_lpf, decimate to cfg.fs."""
    if len(rx) != len(tx) or rx.fs != tx.fs:
        raise ValueError(f"rx ({len(rx)} @ {rx.fs}) and tx ({len(tx)} @ {tx.fs}) differ")
    ratio = rx.fs / cfg.fs
    factor = int(round(ratio))
    if factor < 1 or abs(ratio - factor) > 1e-9:
        raise ValueError(f"signal rate {rx.fs} is not an integer multiple of {cfg.fs}")

    mixed = np.conj(rx.iq) * tx.iq
    spectrum = scipy.fft.fft(mixed)
    freqs = scipy.fft.fftfreq(len(mixed), d=1.0 / rx.fs)
    spectrum[np.abs(freqs) > cfg.f_lpf] = 0.0
    filtered = scipy.fft.ifft(spectrum)
    return ComplexSignal(filtered[::factor], cfg.fs)


def _as_output(signal: ComplexSignal, cfg: SimConfig) -> ComplexSignal:
    return signal if cfg.iq else ComplexSignal(signal.iq.real, signal.fs)


def synth_components(
        scene: SceneSpec, p: ChirpParams, cfg: SimConfig, chirp_index: int = 0
) -> Tuple[List[ComplexSignal], List[ComplexSignal]]:
    """Per-target and per-interferer IF contributions, already low-passed."""
    tx_cache: Dict[int, ComplexSignal] = dict()

    def tx(oversample):
        if oversample not in tx_cache:
            tx_cache[oversample] = tx_chirp(p, cfg, oversample)
        return tx_cache[oversample]

    targets = list()
    for tgt in scene.targets:
        beat = p.slope * echo_delay(p, tgt, chirp_index)
        factor = required_oversample(beat, beat, cfg)
        targets.append(dechirp_lpf(target_echo(p, tgt, chirp_index, cfg, factor), tx(factor), cfg))

    interferers = list()
    for spec in scene.interferers:
        factor = required_oversample(*interference_offsets(spec, p), cfg)
        interferers.append(dechirp_lpf(interference_signal(spec, p, cfg, factor), tx(factor), cfg))
    return targets, interferers


def synth_if_pair(
        scene: SceneSpec, p: ChirpParams, cfg: SimConfig, chirp_index: int = 0
) -> Tuple[ComplexSignal, ComplexSignal]:
    """(interfered, clean) IF signals of one chirp.

    clean is the sum of target beats; interfered adds every interferer's
    burst and circular complex Gaussian noise of std ``scene.noise_std``.
    """
    targets, interferers = synth_components(scene, p, cfg, chirp_index)
    clean = np.zeros(cfg.n_samples, dtype=np.complex128)
    for part in targets:
        clean = clean + part.iq
    interfered = clean.copy()
    for part in interferers:
        interfered = interfered + part.iq

    if scene.noise_std > 0:
        rng = np.random.default_rng([scene.seed, chirp_index])
        if cfg.iq:
            noise = (rng.standard_normal(cfg.n_samples) + 1j * rng.standard_normal(cfg.n_samples)) * (scene.noise_std / np.sqrt(2))
        else:
            noise = rng.standard_normal(cfg.n_samples) * scene.noise_std
        interfered = interfered + noise

    return _as_output(ComplexSignal(interfered, cfg.fs), cfg), _as_output(ComplexSignal(clean, cfg.fs), cfg)


def synth_frame(scene: SceneSpec, p: ChirpParams, cfg: SimConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(interfered, clean) complex frames of shape [n_chirps, n_samples]."""
    interfered = np.zeros((cfg.n_chirps, cfg.n_samples), dtype=np.complex128)
    clean = np.zeros_like(interfered)
    for chirp_index in range(cfg.n_chirps):
        noisy, reference = synth_if_pair(scene, p, cfg, chirp_index)
        interfered[chirp_index] = noisy.iq
        clean[chirp_index] = reference.iq
    return interfered, clean


def sample_scene(rng_seed: int, ranges: SceneRanges = SceneRanges(), chirp: ChirpParams = ChirpParams()) -> SceneSpec:
    """Draw a scene uniformly from ``ranges``; deterministic in ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)

    def uniform(bounds):
        return float(rng.uniform(bounds[0], bounds[1]))

    n_targets = int(rng.integers(ranges.n_targets[0], ranges.n_targets[1] + 1))
    targets = tuple(
        TargetSpec(
            range_m=uniform(ranges.target_range_m),
            speed_mps=uniform(ranges.target_speed_mps),
            amplitude=uniform(ranges.target_amplitude),
        )
        for _ in range(n_targets)
    )
    n_interferers = int(rng.integers(ranges.n_interferers[0], ranges.n_interferers[1] + 1))
    interferers = tuple(
        InterfererSpec(
            start_freq=uniform(ranges.interferer_start_freq),
            slope=uniform(ranges.interferer_slope),
            amplitude=uniform(ranges.interferer_amplitude),
            time_offset=uniform((0.0, chirp.duration)),
        )
        for _ in range(n_interferers)
    )
    return SceneSpec(targets=targets, interferers=interferers, noise_std=ranges.noise_std, seed=int(rng_seed))
