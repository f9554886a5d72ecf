"""Tests for the volume_store module."""

import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from src.utils.errors import ManifestError, VolumeFormatError, VolumeStoreError
from src.utils.seeding import derive_rng
from src.volume_store import (
    ClassRule,
    Manifest,
    ManifestRecord,
    PhantomSpec,
    Volume,
    container_paths,
    generate_phantoms,
    load_manifest,
    load_volume,
    parse_orientation,
    save_manifest,
    save_volume,
    synthesize_phantom,
)

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def small_spec():
    """Phantom spec small enough for quick generation."""
    return PhantomSpec(dims=(16, 16, 16), blob_radius_range=(2, 3))


def _record(volume_id, split="train", group=None, labels=None):
    return {
        "volume_id": volume_id,
        "path": f"volumes/{volume_id}",
        "split": split,
        "labels": labels if labels is not None else {"bright_lesion": 0},
        "group_key": group or f"g_{volume_id}",
    }


def _write_manifest(path, tasks, records):
    lines = [json.dumps({"format_version": 1, "tasks": tasks})] + [json.dumps(r) for r in records]
    path.write_text("\n".join(lines) + "\n")
    return path


class TestParseOrientation:
    """Test orientation code decoding."""

    def test_canonical(self):
        """Test RAS maps every axis to itself without flips."""
        assert parse_orientation("RAS") == ((0, 1, 2), (False, False, False))

    def test_flipped_axes(self):
        """Test LPS flips the first two canonical axes."""
        assert parse_orientation("LPS") == ((0, 1, 2), (True, True, False))

    def test_permuted_axes(self):
        """Test ASR carries R on array axis 2 and S on axis 1."""
        assert parse_orientation("ASR") == ((2, 0, 1), (False, False, False))

    def test_lowercase_accepted(self):
        """Test codes are case-insensitive."""
        assert parse_orientation("ras") == parse_orientation("RAS")

    @pytest.mark.parametrize("code", ["RAX", "RRS", "RLS", "RA", "RASS"])
    def test_invalid_codes(self, code):
        """Test invalid codes raise VolumeFormatError."""
        with pytest.raises(VolumeFormatError):
            parse_orientation(code)


class TestVolume:
    """Test Volume invariants."""

    def test_voxels_cast_to_float32(self):
        """Test voxels are stored as contiguous float32."""
        v = Volume(voxels=np.zeros((2, 3, 4), dtype=np.int16))
        assert v.voxels.dtype == np.float32
        assert v.dims == (2, 3, 4)

    def test_rejects_2d_voxels(self):
        """Test a 2D array is rejected."""
        with pytest.raises(VolumeStoreError):
            Volume(voxels=np.zeros((4, 4)))

    @pytest.mark.parametrize("spacing", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, float("nan"))])
    def test_rejects_bad_spacing(self, spacing):
        """Test non-positive or non-finite spacing is rejected."""
        with pytest.raises(VolumeStoreError):
            Volume(voxels=np.zeros((2, 2, 2)), spacing_mm=spacing)

    def test_equality_is_bytewise(self):
        """Test equality compares voxel bytes and metadata."""
        a = Volume(voxels=np.arange(8, dtype=np.float32).reshape(2, 2, 2), id="a")
        b = Volume(voxels=np.arange(8, dtype=np.float32).reshape(2, 2, 2), id="a")
        c = Volume(voxels=np.arange(8, dtype=np.float32).reshape(2, 2, 2), id="c")
        assert a == b
        assert a != c


class TestVolumeContainer:
    """Test the sidecar + blob volume container."""

    def test_container_paths_accept_any_member(self, tmp_path):
        """Test stem, sidecar and blob paths resolve to the same pair."""
        stem = tmp_path / "vol"
        expected = (tmp_path / "vol.vol.json", tmp_path / "vol.vol.raw")
        assert container_paths(stem) == expected
        assert container_paths(f"{stem}.vol.json") == expected
        assert container_paths(f"{stem}.vol.raw") == expected

    def test_save_load_bit_exact(self, tmp_path):
        """Test a stored volume reloads bit-exactly with its metadata."""
        rng = np.random.default_rng(0)
        v = Volume(
            voxels=rng.normal(size=(5, 6, 7)).astype(np.float32),
            spacing_mm=(0.5, 1.0, 2.5),
            orientation="LPS",
            id="scan_01",
        )
        save_volume(v, tmp_path / "scan_01")
        loaded = load_volume(tmp_path / "scan_01.vol.json")
        assert loaded == v

    def test_truncated_blob(self, tmp_path):
        """Test a blob shorter than dims imply is a format error."""
        save_volume(Volume(voxels=np.ones((3, 3, 3))), tmp_path / "v")
        blob = tmp_path / "v.vol.raw"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(VolumeFormatError, match="Blob length mismatch"):
            load_volume(tmp_path / "v")

    def test_malformed_header(self, tmp_path):
        """Test an unparseable sidecar is a format error."""
        save_volume(Volume(voxels=np.ones((2, 2, 2))), tmp_path / "v")
        (tmp_path / "v.vol.json").write_text("{not json")
        with pytest.raises(VolumeFormatError):
            load_volume(tmp_path / "v")

    def test_non_positive_spacing_in_header(self, tmp_path):
        """Test a header with zero spacing is rejected."""
        save_volume(Volume(voxels=np.ones((2, 2, 2))), tmp_path / "v")
        sidecar = tmp_path / "v.vol.json"
        header = json.loads(sidecar.read_text())
        header["spacing_mm"] = [1.0, 0.0, 1.0]
        sidecar.write_text(json.dumps(header))
        with pytest.raises(VolumeFormatError, match="spacing"):
            load_volume(tmp_path / "v")

    def test_unsupported_dtype(self, tmp_path):
        """Test a foreign dtype tag is rejected."""
        save_volume(Volume(voxels=np.ones((2, 2, 2))), tmp_path / "v")
        sidecar = tmp_path / "v.vol.json"
        header = json.loads(sidecar.read_text())
        header["dtype"] = "i16le"
        sidecar.write_text(json.dumps(header))
        with pytest.raises(VolumeFormatError, match="dtype"):
            load_volume(tmp_path / "v")

    def test_missing_file(self, tmp_path):
        """Test a missing container is a store error."""
        with pytest.raises(VolumeStoreError):
            load_volume(tmp_path / "absent")


class TestManifest:
    """Test manifest loading and validation."""

    def test_load_fixture(self):
        """Test the sample manifest loads with tasks and splits."""
        manifest = load_manifest(FIXTURES / "sample_manifest.jsonl")
        assert manifest.tasks == ["bright_lesion", "dark_lesion"]
        assert len(manifest) == 4
        assert manifest.split_indices("train") == [0, 1]
        assert manifest.index_of("vol_003") == 2
        assert manifest.labels_for("dark_lesion").tolist() == [0, 1, 1, 0]
        assert manifest.resolve_path(manifest.records[0]) == FIXTURES / "volumes" / "vol_001"

    def test_to_frame(self):
        """Test the table view has one column per task."""
        frame = load_manifest(FIXTURES / "sample_manifest.jsonl").to_frame()
        assert list(frame.columns) == ["volume_id", "path", "split", "group_key", "bright_lesion", "dark_lesion"]
        assert frame["bright_lesion"].tolist() == [1, 0, 1, 0]

    def test_duplicate_ids(self, tmp_path):
        """Test duplicate volume ids are rejected."""
        path = _write_manifest(tmp_path / "m.jsonl", ["bright_lesion"], [_record("a"), _record("a")])
        with pytest.raises(ManifestError, match="duplicate volume_id"):
            load_manifest(path)

    def test_group_leakage(self, tmp_path):
        """Test a patient group spanning splits is rejected."""
        records = [_record("a", "train", group="p1"), _record("b", "test", group="p1")]
        path = _write_manifest(tmp_path / "m.jsonl", ["bright_lesion"], records)
        with pytest.raises(ManifestError, match="leakage"):
            load_manifest(path)

    def test_missing_label(self, tmp_path):
        """Test a record without a label for a declared task is rejected."""
        records = [_record("a", labels={})]
        path = _write_manifest(tmp_path / "m.jsonl", ["bright_lesion"], records)
        with pytest.raises(ManifestError, match="missing label"):
            load_manifest(path)

    def test_non_binary_label(self, tmp_path):
        """Test labels outside {0, 1} are rejected."""
        path = _write_manifest(tmp_path / "m.jsonl", ["bright_lesion"], [_record("a", labels={"bright_lesion": 2})])
        with pytest.raises(ManifestError, match="non-binary"):
            load_manifest(path)

    def test_missing_header(self, tmp_path):
        """Test a manifest without a task header is rejected."""
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(_record("a")) + "\n")
        with pytest.raises(ManifestError, match="header"):
            load_manifest(path)

    def test_unknown_task(self):
        """Test asking for an undeclared task fails."""
        manifest = load_manifest(FIXTURES / "sample_manifest.jsonl")
        with pytest.raises(ManifestError):
            manifest.labels_for("hemorrhage")

    def test_direct_construction_validates(self):
        """Test building a Manifest in code runs the same checks."""
        records = [
            ManifestRecord(volume_id="a", path="a", split="train", labels={"t": 0}, group_key="p"),
            ManifestRecord(volume_id="b", path="b", split="val", labels={"t": 1}, group_key="p"),
        ]
        with pytest.raises(ManifestError):
            Manifest(tasks=["t"], records=records)

    def test_save_relative_paths(self, tmp_path):
        """Test saved paths are relative to the new manifest directory."""
        manifest = load_manifest(FIXTURES / "sample_manifest.jsonl")
        out = save_manifest(manifest, tmp_path / "copy" / "manifest.jsonl")
        reloaded = load_manifest(out)
        assert [r.volume_id for r in reloaded.records] == [r.volume_id for r in manifest.records]
        assert reloaded.resolve_path(reloaded.records[0]).resolve() == (FIXTURES / "volumes" / "vol_001").resolve()


class TestPhantomSpec:
    """Test phantom specification validation."""

    def test_defaults(self):
        """Test default tasks and classes."""
        spec = PhantomSpec()
        assert spec.tasks == ["bright_lesion", "dark_lesion", "large_bright", "calcification"]
        assert spec.blob_classes == ["bright", "calcified", "dark"]

    def test_rule_with_unknown_class(self):
        """Test a rule referencing an undeclared blob class is rejected."""
        with pytest.raises(ValidationError):
            PhantomSpec(class_rules={"x": ClassRule(blob_class="glowing")})

    def test_unknown_key(self):
        """Test unknown keys are rejected."""
        with pytest.raises(ValidationError):
            PhantomSpec(blobs=3)

    def test_unsatisfiable(self):
        """Test a blob wider than the volume is unsatisfiable."""
        spec = PhantomSpec(dims=(16, 16, 16), blob_radius_range=(3, 8))
        with pytest.raises(VolumeStoreError, match="Unsatisfiable"):
            spec.check_satisfiable()

    def test_implied_prevalence_default(self):
        """Test closed-form prevalence for one of three classes and 0-3 blobs."""
        # mean over k=0..3 of 1 - (2/3)^k
        assert PhantomSpec().implied_prevalence("bright_lesion") == pytest.approx(43 / 108)

    def test_implied_prevalence_certain(self):
        """Test a single-class, single-blob spec is always positive."""
        spec = PhantomSpec(
            blob_count_range=(1, 1),
            blob_intensity_ranges={"bright": (60.0, 90.0)},
            class_rules={"bright_lesion": ClassRule(blob_class="bright")},
        )
        assert spec.implied_prevalence("bright_lesion") == pytest.approx(1.0)


class TestSynthesizePhantom:
    """Test single phantom synthesis."""

    def test_deterministic_per_stream(self, small_spec):
        """Test the same stream yields the same volume and labels."""
        a, labels_a = synthesize_phantom(small_spec, derive_rng(3, "phantom", 0), "p")
        b, labels_b = synthesize_phantom(small_spec, derive_rng(3, "phantom", 0), "p")
        assert a == b
        assert labels_a == labels_b

    def test_empty_phantom_is_uniform(self):
        """Test no blobs, no skull and no noise gives a constant volume with negative labels."""
        spec = PhantomSpec(dims=(8, 8, 8), skull_level=None, blob_count_range=(0, 0), noise_sigma=0.0)
        volume, labels = synthesize_phantom(spec, np.random.default_rng(0))
        assert np.all(volume.voxels == np.float32(30.0))
        assert set(labels.values()) == {0}

    def test_labels_follow_geometry(self):
        """Test a guaranteed bright blob makes the task positive."""
        spec = PhantomSpec(
            dims=(16, 16, 16),
            blob_count_range=(1, 1),
            blob_radius_range=(2, 3),
            blob_intensity_ranges={"bright": (60.0, 90.0)},
            class_rules={
                "bright_lesion": ClassRule(blob_class="bright"),
                "two_bright": ClassRule(blob_class="bright", min_count=2),
            },
            noise_sigma=0.0,
        )
        volume, labels = synthesize_phantom(spec, np.random.default_rng(1))
        assert labels == {"bright_lesion": 1, "two_bright": 0}
        assert ((volume.voxels >= 60.0) & (volume.voxels <= 90.0)).any()


class TestGeneratePhantoms:
    """Test dataset generation."""

    def test_writes_manifest_and_volumes(self, tmp_path, small_spec):
        """Test generation writes a loadable manifest whose volumes exist."""
        manifest = generate_phantoms(small_spec, 6, seed=11, out_dir=tmp_path)
        reloaded = load_manifest(tmp_path / "manifest.jsonl")
        assert [r.volume_id for r in reloaded.records] == [f"phantom_{i:05d}" for i in range(6)]
        assert reloaded.tasks == small_spec.tasks
        for record in reloaded.records:
            assert load_volume(reloaded.resolve_path(record)).dims == (16, 16, 16)
        assert len(manifest) == 6

    def test_deterministic(self, tmp_path, small_spec):
        """Test two runs with one seed write identical volumes and labels."""
        a = generate_phantoms(small_spec, 4, seed=5, out_dir=tmp_path / "a")
        b = generate_phantoms(small_spec, 4, seed=5, out_dir=tmp_path / "b")
        for ra, rb in zip(a.records, b.records):
            assert ra.labels == rb.labels and ra.split == rb.split
            assert load_volume(a.resolve_path(ra)) == load_volume(b.resolve_path(rb))

    def test_groups_stay_in_one_split(self, tmp_path):
        """Test multi-scan patients never straddle splits."""
        spec = PhantomSpec(dims=(16, 16, 16), blob_radius_range=(2, 3), scans_per_patient=2)
        manifest = generate_phantoms(spec, 10, seed=0, out_dir=tmp_path)
        by_group = {}
        for r in manifest.records:
            by_group.setdefault(r.group_key, set()).add(r.split)
        assert len(by_group) == 5
        assert all(len(s) == 1 for s in by_group.values())

    def test_rejects_empty_request(self, tmp_path, small_spec):
        """Test n < 1 is rejected."""
        with pytest.raises(VolumeStoreError):
            generate_phantoms(small_spec, 0, seed=0, out_dir=tmp_path)
