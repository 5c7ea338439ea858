import json
import os
from fractions import Fraction

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from radar.dataset import (
    MANIFEST, normalize_signal, parse_split, split_counts, generate_dataset, load_dataset, load_split,
)
from radar.simulation import ComplexSignal, toy_configs
from utils.serialization import CorruptArtifactError


def _tree_bytes(path):
    out = dict()
    for root, _, files in os.walk(path):
        for name in files:
            full = os.path.join(root, name)
            with open(full, "rb") as file:
                out[os.path.relpath(full, path)] = file.read()
    return out


class TestNormalize:
    def test_scale_is_largest_component(self):
        signal = ComplexSignal(np.array([1 + 5j, -2.0, 0.5 - 1j]), 1.0)
        normalized, scale = normalize_signal(signal)
        assert scale == 5.0
        assert max(np.abs(normalized.iq.real).max(), np.abs(normalized.iq.imag).max()) == 1.0
        assert_allclose(normalized.iq * scale, signal.iq)

    def test_unit_peak_is_unchanged(self):
        signal = ComplexSignal(np.array([1.0, -0.5j]), 1.0)
        normalized, scale = normalize_signal(signal)
        assert scale == 1.0
        assert_array_equal(normalized.iq, signal.iq)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            normalize_signal(ComplexSignal(np.zeros(4), 1.0))


class TestSplits:
    def test_parse(self):
        assert parse_split("8:1:1") == (Fraction(4, 5), Fraction(1, 10), Fraction(1, 10))
        assert parse_split((0.8, 0.1, 0.1)) == parse_split("8:1:1")

    @pytest.mark.parametrize("split", ["8:1", "a:b:c", "1:-1:1", "0:0:0"])
    def test_invalid(self, split):
        with pytest.raises(ValueError):
            parse_split(split)

    @pytest.mark.parametrize("n,expected", [(800, (640, 80, 80)), (10, (8, 1, 1)), (24, (19, 2, 3)), (7, (5, 1, 1))])
    def test_counts(self, n, expected):
        assert split_counts(n, "8:1:1") == expected


class TestGenerate:
    def test_layout_and_counts(self, toy_dataset_path):
        with open(os.path.join(toy_dataset_path, MANIFEST)) as file:
            manifest = json.load(file)
        assert manifest["counts"] == {"train": 19, "val": 2, "test": 3}
        assert len(manifest["samples"]) == 24
        assert sorted(sum(manifest["splits"].values(), [])) == list(range(24))
        for entry in manifest["samples"]:
            assert os.path.exists(os.path.join(toy_dataset_path, entry["interfered"]))
            assert os.path.exists(os.path.join(toy_dataset_path, entry["clean"]))

    def test_byte_identical_regeneration(self, tmp_path):
        chirp, sim = toy_configs(64)
        generate_dataset(6, str(tmp_path / "a"), master_seed=3, chirp=chirp, sim=sim)
        generate_dataset(6, str(tmp_path / "b"), master_seed=3, chirp=chirp, sim=sim, workers=3)
        assert _tree_bytes(str(tmp_path / "a")) == _tree_bytes(str(tmp_path / "b"))

    def test_different_seed_differs(self, tmp_path):
        chirp, sim = toy_configs(64)
        generate_dataset(3, str(tmp_path / "a"), master_seed=1, chirp=chirp, sim=sim)
        generate_dataset(3, str(tmp_path / "b"), master_seed=2, chirp=chirp, sim=sim)
        a, b = load_split(str(tmp_path / "a"), "train"), load_split(str(tmp_path / "b"), "train")
        assert not np.array_equal(a[0].interfered, b[0].interfered)

    def test_refuses_non_empty_output(self, tmp_path):
        (tmp_path / "junk").write_text("x")
        chirp, sim = toy_configs(64)
        with pytest.raises(FileExistsError):
            generate_dataset(2, str(tmp_path), chirp=chirp, sim=sim)

    def test_invalid_count(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(0, str(tmp_path / "d"))


class TestLoad:
    def test_records_are_normalized(self, toy_dataset):
        records = toy_dataset.split("train")
        assert len(records) == 19
        for record in records:
            assert record.interfered.shape == record.clean.shape == (256, 2)
            assert np.abs(record.interfered).max() == pytest.approx(1.0)
            assert record.scale > 0
            assert record.scene.targets

    def test_split_lists_match_manifest(self, toy_dataset):
        for name in ("train", "val", "test"):
            assert [r.index for r in toy_dataset.split(name)] == toy_dataset.manifest["splits"][name]

    def test_unknown_split(self, toy_dataset):
        with pytest.raises(ValueError):
            toy_dataset.split("holdout")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(str(tmp_path))

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / MANIFEST).write_text("{not json")
        with pytest.raises(CorruptArtifactError):
            load_dataset(str(tmp_path))
        (tmp_path / MANIFEST).write_text(json.dumps({"schema_version": 1}))
        with pytest.raises(CorruptArtifactError):
            load_dataset(str(tmp_path))
