"""
Paired (interfered, clean) single-chirp datasets.

Layout of a dataset directory::

    manifest.json
    samples/00000_interfered.rimt   [n_samples, channels] float64, normalized
    samples/00000_clean.rimt

Both members of a pair are divided by the interfered signal's scale, which
the manifest records per sample.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from radar.simulation import (
    ChirpParams, SimConfig, SceneRanges, SceneSpec, ComplexSignal, sample_scene, synth_if_pair,
)
from utils.data import get_json_data, write_json_data, check_output_dir
from utils.python import derive_seed
from utils.serialization import CorruptArtifactError, write_rimt, read_rimt

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"


def normalize_signal(x: ComplexSignal) -> Tuple[ComplexSignal, float]:
    """Divide by the largest absolute I or Q component."""
    scale = float(max(np.abs(x.iq.real).max(initial=0.0), np.abs(x.iq.imag).max(initial=0.0)))
    if scale == 0.0:
        raise ValueError("cannot normalize an all-zero signal")
    return ComplexSignal(x.iq / scale, x.fs), scale


def parse_split(split: Union[str, Sequence]) -> Tuple[Fraction, Fraction, Fraction]:
    """"8:1:1" or (0.8, 0.1, 0.1) -> exact fractions summing to one."""
    parts = split.split(":") if isinstance(split, str) else list(split)
    if len(parts) != 3:
        raise ValueError(f"split needs three parts (train, val, test), got {split!r}")
    try:
        weights = [Fraction(str(p).strip()) for p in parts]
    except ValueError:
        raise ValueError(f"split parts must be numbers, got {split!r}")
    total = sum(weights)
    if any(w < 0 for w in weights) or total <= 0:
        raise ValueError(f"split weights must be non-negative with a positive sum, got {split!r}")
    return tuple(w / total for w in weights)


def split_counts(n_pairs: int, split: Union[str, Sequence]) -> Tuple[int, int, int]:
    """Floor on train; the remainder is shared between val and test in proportion."""
    train, val, test = parse_split(split)
    n_train = int(n_pairs * train // 1)
    rest = n_pairs - n_train
    n_val = int(rest * val / (val + test) // 1) if val + test > 0 else 0
    return n_train, n_val, rest - n_val


@dataclass
class SampleRecord:
    index: int
    split: str
    interfered: np.ndarray  # [n_samples, channels], normalized
    clean: np.ndarray
    scale: float
    scene: SceneSpec


@dataclass
class Dataset:
    path: str
    manifest: Dict
    chirp: ChirpParams
    sim: SimConfig
    _cache: Dict[str, List[SampleRecord]] = field(default_factory=dict, repr=False)

    @property
    def counts(self) -> Dict[str, int]:
        return dict(self.manifest["counts"])

    def split(self, name: str) -> List[SampleRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name}, expected one of {SPLITS}")
        if name not in self._cache:
            self._cache[name] = [self._load_sample(entry) for entry in self.manifest["samples"] if entry["split"] == name]
        return self._cache[name]

    def _load_sample(self, entry: Dict) -> SampleRecord:
        arrays = list()
        for key in ("interfered", "clean"):
            array = read_rimt(os.path.join(self.path, entry[key]))
            if array.shape != (self.sim.n_samples, self.sim.channels):
                raise CorruptArtifactError(f"{entry[key]}: shape {array.shape} does not match the manifest")
            arrays.append(array.astype(np.float64))
        return SampleRecord(
            index=entry["index"], split=entry["split"], interfered=arrays[0], clean=arrays[1],
            scale=float(entry["scale"]), scene=SceneSpec.from_dict(entry["scene"]),
        )


def _make_pair(index: int, master_seed: int, chirp: ChirpParams, sim: SimConfig, ranges: SceneRanges):
    scene = sample_scene(derive_seed(master_seed, index), ranges, chirp)
    interfered, clean = synth_if_pair(scene, chirp, sim, chirp_index=0)
    interfered, scale = normalize_signal(interfered)
    clean = ComplexSignal(clean.iq / scale, clean.fs)
    return scene, scale, interfered.to_channels(sim.iq), clean.to_channels(sim.iq)


def generate_dataset(
        n_pairs: int,
        out_path: str,
        split: Union[str, Sequence] = "8:1:1",
        master_seed: int = 0,
        chirp: Optional[ChirpParams] = None,
        sim: Optional[SimConfig] = None,
        ranges: Optional[SceneRanges] = None,
        workers: int = 1,
        force: bool = False,
) -> Dict:
    """Simulate, normalize and write ``n_pairs`` pairs; returns the manifest."""
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be positive, got {n_pairs}")
    chirp = chirp or ChirpParams()
    sim = sim or SimConfig()
    ranges = ranges or SceneRanges()
    sim.check(chirp)
    counts = split_counts(n_pairs, split)

    check_output_dir(out_path, force=force)
    os.makedirs(os.path.join(out_path, "samples"), exist_ok=True)

    order = np.random.default_rng([master_seed, n_pairs]).permutation(n_pairs)
    assignment = np.empty(n_pairs, dtype=object)
    assignment[order[:counts[0]]] = "train"
    assignment[order[counts[0]:counts[0] + counts[1]]] = "val"
    assignment[order[counts[0] + counts[1]:]] = "test"

    logger.info(f"generating {n_pairs} pairs ({counts[0]}/{counts[1]}/{counts[2]}) into {out_path}")
    samples = list()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pairs = pool.map(lambda i: _make_pair(i, master_seed, chirp, sim, ranges), range(n_pairs))
        for index, (scene, scale, interfered, clean) in enumerate(tqdm(pairs, total=n_pairs, desc="gen-data")):
            entry = {
                "index": index,
                "split": str(assignment[index]),
                "scale": scale,
                "scene": scene.to_dict(),
                "interfered": f"samples/{index:05d}_interfered.rimt",
                "clean": f"samples/{index:05d}_clean.rimt",
            }
            write_rimt(os.path.join(out_path, entry["interfered"]), interfered, "f64")
            write_rimt(os.path.join(out_path, entry["clean"]), clean, "f64")
            samples.append(entry)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "n_pairs": n_pairs,
        "counts": dict(zip(SPLITS, counts)),
        "split_ratios": [str(r) for r in parse_split(split)],
        "splits": {name: [s["index"] for s in samples if s["split"] == name] for name in SPLITS},
        "master_seed": master_seed,
        "chirp": asdict(chirp),
        "sim": asdict(sim),
        "scene_ranges": asdict(ranges),
        "samples": samples,
    }
    write_json_data(manifest, os.path.join(out_path, MANIFEST), force=True)
    return manifest


def load_dataset(path: str) -> Dataset:
    manifest = get_json_data(os.path.join(path, MANIFEST))
    try:
        if manifest["schema_version"] != SCHEMA_VERSION:
            raise CorruptArtifactError(f"unsupported dataset schema {manifest['schema_version']}")
        chirp = ChirpParams(**manifest["chirp"])
        sim = SimConfig(**manifest["sim"])
        for entry in manifest["samples"]:
            if entry["split"] not in SPLITS:
                raise CorruptArtifactError(f"sample {entry['index']} has unknown split {entry['split']}")
    except (KeyError, TypeError) as e:
        raise CorruptArtifactError(f"{path}: malformed manifest ({e})")
    return Dataset(path=path, manifest=manifest, chirp=chirp, sim=sim)


def load_split(path: str, split: str) -> List[SampleRecord]:
    return load_dataset(path).split(split)
