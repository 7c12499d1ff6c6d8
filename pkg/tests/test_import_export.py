"""Tests for the readers and writers (label maps, DTN1 tensors, catalogs, checkpoints)."""

import struct

import numpy as np
import pytest

from carbseg import exporter, importer
from carbseg.catalog import builtin_catalog
from carbseg.exceptions import ConfigError, FormatError, ValidationError
from carbseg.models import IGNORE_INDEX, LabelMap


def dtn1(rows, cols, depth, values):
    header = b"DTN1" + struct.pack("<3I", rows, cols, depth)
    return header + struct.pack(f"<{len(values)}f", *values)


# ---------------------------------------------------------------------------
# Label maps
# ---------------------------------------------------------------------------
class TestReadLabelMap:
    def test_graymap_bytes(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 1, 2, 255]))
        m = importer.read_label_map(path)
        assert (m.width, m.height) == (2, 2)
        assert m.data.tolist() == [[0, 1], [2, IGNORE_INDEX]]

    def test_out_of_range_names_pixel(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\n2 1\n255\n" + bytes([0, 200]))
        with pytest.raises(ValidationError, match=r"x=1, y=0"):
            importer.read_label_map(path, 19)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P5\nxx\n")
        with pytest.raises(FormatError):
            importer.read_label_map(path)

    def test_not_a_label_file(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"hello")
        with pytest.raises(FormatError):
            importer.read_label_map(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            importer.read_label_map(tmp_path / "none.pgm")

    def test_round_trip_bytes(self, tmp_path):
        data = np.random.default_rng(7).integers(0, 256, size=(64, 64), dtype=np.uint8)
        path = exporter.write_label_map(tmp_path / "m.pgm", LabelMap(data))
        first = path.read_bytes()
        again = exporter.write_label_map(tmp_path / "n.pgm", importer.read_label_map(path))
        assert again.read_bytes() == first
        assert np.array_equal(importer.read_label_map(path).data, data)

    def test_dtn1_label_map(self, tmp_path):
        m = LabelMap(np.array([[0, 3], [IGNORE_INDEX, 1]], dtype=np.uint8))
        path = exporter.write_label_map(tmp_path / "m.dtn1", m)
        assert importer.read_label_map(path, 4) == m

    def test_label_dir_sorted(self, tmp_path):
        for name in ("b", "a"):
            exporter.write_label_map(tmp_path / f"{name}.pgm", LabelMap.filled(2, 2, 0))
        assert [i for i, _ in importer.read_label_dir(tmp_path)] == ["a", "b"]

    def test_label_dir_duplicate_ids(self, tmp_path):
        exporter.write_label_map(tmp_path / "a.pgm", LabelMap.filled(2, 2, 0))
        exporter.write_label_map(tmp_path / "a.dtn1", LabelMap.filled(2, 2, 0))
        with pytest.raises(FormatError):
            importer.list_label_files(tmp_path)


# ---------------------------------------------------------------------------
# DTN1 tensors
# ---------------------------------------------------------------------------
class TestTensor:
    def test_smallest(self):
        data = importer.parse_tensor(dtn1(1, 1, 2, [0.5, 0.5]))
        assert data.shape == (1, 1, 2)
        assert data.tolist() == [[[0.5, 0.5]]]

    def test_length_mismatch(self):
        with pytest.raises(FormatError, match="length mismatch"):
            importer.parse_tensor(dtn1(2, 2, 3, [0.0] * 11))

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            importer.parse_tensor(b"XXXX" + struct.pack("<3I", 1, 1, 1) + struct.pack("<f", 1.0))

    def test_non_finite(self):
        with pytest.raises(FormatError, match="non-finite"):
            importer.parse_tensor(dtn1(1, 1, 1, [float("nan")]))

    def test_round_trip_bit_identical(self, tmp_path):
        arr = np.random.default_rng(3).standard_normal((8, 8, 16)).astype(np.float32)
        path = exporter.write_tensor(tmp_path / "t.dtn1", arr)
        back = importer.read_tensor(path)
        assert back.dtype == np.float32
        assert back.tobytes() == arr.tobytes()
        assert exporter.encode_tensor(back) == path.read_bytes()

    def test_text_embeddings_zero_row(self, tmp_path):
        path = exporter.write_tensor(tmp_path / "t.dtn1", np.array([[[1.0, 0.0]], [[0.0, 0.0]]]))
        with pytest.raises(ValidationError, match="row 1"):
            importer.read_text_embeddings(path)

    def test_probability_map_sums(self, tmp_path):
        path = exporter.write_tensor(tmp_path / "p.dtn1", np.array([[[0.5, 0.6]]]))
        with pytest.raises(ValidationError):
            importer.read_probability_map(path)

    def test_probability_map_renormalized_within_tolerance(self, tmp_path):
        path = exporter.write_tensor(
            tmp_path / "p.dtn1", np.array([[[0.2503, 0.75], [0.5, 0.4998]]])
        )
        p = importer.read_probability_map(path, tolerance=1e-3)
        np.testing.assert_allclose(p.data.sum(axis=2), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# Catalogs, key/value files, checkpoints
# ---------------------------------------------------------------------------
class TestCatalog:
    def test_builtin_round_trip(self, tmp_path):
        catalog = builtin_catalog("cityscapes")
        path = exporter.write_catalog(tmp_path / "c.tsv", catalog)
        assert importer.read_catalog(path) == catalog

    def test_index_gap(self):
        with pytest.raises(FormatError, match="expected index 1"):
            importer.parse_catalog("0\troad\troad\t1,2,3\n2\tsky\tsky\t4,5,6\n")

    def test_duplicate_name(self):
        with pytest.raises(ValidationError, match="duplicate"):
            importer.parse_catalog("0\troad\troad\t1,2,3\n1\troad\troad\t4,5,6\n")


class TestKeyValues:
    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("# header\n\nlr = 0.5  # step size\nview_mode=local\n")
        assert importer.read_key_values(path) == {"lr": "0.5", "view_mode": "local"}

    def test_duplicate_key_names_both_lines(self, tmp_path):
        path = tmp_path / "a.cfg"
        path.write_text("lr = 0.5\nseed = 1\nlr = 0.1\n")
        with pytest.raises(ConfigError, match=r"a.cfg:3.*line 1"):
            importer.read_key_values(path)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        weights = np.arange(6, dtype=np.float32).reshape(3, 2)
        bias = np.array([0.5, -0.5, 0.0], dtype=np.float32)
        exporter.write_checkpoint(tmp_path, weights, bias, temperature=0.5, iteration=12)
        data = importer.read_checkpoint(tmp_path)
        assert np.array_equal(data["weights"], weights)
        assert np.array_equal(data["bias"], bias)
        assert data["temperature"] == 0.5
        assert data["iteration"] == 12
        assert data["seed"] is None

    def test_seed_recorded(self, tmp_path):
        exporter.write_checkpoint(
            tmp_path, np.zeros((3, 2)), None, temperature=1.0, iteration=5, seed=9
        )
        assert "seed = 9" in (tmp_path / "meta.txt").read_text().splitlines()
        assert importer.read_checkpoint(tmp_path)["seed"] == 9

    def test_shape_disagrees_with_meta(self, tmp_path):
        exporter.write_checkpoint(tmp_path, np.zeros((3, 2)), None, temperature=1.0, iteration=0)
        exporter.write_key_values(
            tmp_path / "meta.txt", {"class_count": 4, "dim": 2, "temperature": 1.0}
        )
        with pytest.raises(FormatError, match="disagrees"):
            importer.read_checkpoint(tmp_path)


class TestManifestAndCsv:
    def test_csv_line_endings(self, tmp_path):
        path = exporter.write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 2]])
        assert path.read_bytes() == b"a,b\n1,2\n"

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        exporter.write_atomic(tmp_path / "sub" / "x.bin", b"abc")
        assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.bin"]
