import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxscene.cloud import (DROP, LabeledCloud, LabelMapping, PlyError, load_ply, remap_labels,
                            save_ply)
from conftest import random_cloud

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(path, text):
    path.write_text(text)
    return path


def test_two_vertex_ascii(tmp_path):
    p = write(tmp_path / "a.ply", "ply\nformat ascii 1.0\nelement vertex 2\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n"
              "0 0 0\n1.5 2 3\n")
    c = load_ply(p)
    assert len(c) == 2 and c.labels is None
    np.testing.assert_array_equal(c.points[1], [1.5, 2, 3])


def test_missing_label_property_is_named(tmp_path):
    p = write(tmp_path / "a.ply", "ply\nformat ascii 1.0\nelement vertex 1\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n")
    with pytest.raises(PlyError, match="class"):
        load_ply(p, "class")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_ply(tmp_path / "nope.ply")


@pytest.mark.parametrize("header", [
    "ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n",
    "plx\n",
    "ply\nformat ascii 1.0\nelement vertex two\nend_header\n",
    "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n",
])
def test_malformed_headers(tmp_path, header):
    with pytest.raises(PlyError):
        load_ply(write(tmp_path / "bad.ply", header))


def test_non_finite_reports_index(tmp_path):
    p = write(tmp_path / "a.ply", "ply\nformat ascii 1.0\nelement vertex 3\n"
              "property double x\nproperty double y\nproperty double z\nend_header\n"
              "0 0 0\n1 1 1\n2 nan 2\n")
    with pytest.raises(PlyError, match="vertex 2"):
        load_ply(p)


@pytest.mark.parametrize("binary", [True, False])
def test_round_trip_bit_exact(tmp_path, rng, binary):
    c = random_cloud(rng, 1000)
    save_ply(c, tmp_path / "c.ply", binary=binary)
    back = load_ply(tmp_path / "c.ply", "class")
    assert back.points.tobytes() == c.points.tobytes()
    np.testing.assert_array_equal(back.labels, c.labels)


def test_binary_and_ascii_agree(tmp_path, rng):
    c = random_cloud(rng, 200)
    save_ply(c, tmp_path / "b.ply", binary=True)
    save_ply(c, tmp_path / "a.ply", binary=False)
    a, b = load_ply(tmp_path / "a.ply", "class"), load_ply(tmp_path / "b.ply", "class")
    assert a.points.tobytes() == b.points.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_empty_cloud_file(tmp_path):
    save_ply(LabeledCloud(np.zeros((0, 3))), tmp_path / "e.ply")
    assert b"element vertex 0" in (tmp_path / "e.ply").read_bytes()
    assert len(load_ply(tmp_path / "e.ply")) == 0


def test_labeled_header_declares_class(tmp_path):
    c = LabeledCloud(np.eye(3), [0, 1, 2])
    save_ply(c, tmp_path / "c.ply")
    head = (tmp_path / "c.ply").read_bytes().split(b"end_header")[0]
    assert b"property uint class" in head


def test_float32_binary_with_other_elements(tmp_path):
    # a face element before the vertices and an extra vertex property must be skipped cleanly
    pts = np.array([[1.25, -2.5, 3.0], [0.5, 0.25, -1.0]], dtype="<f4")
    head = ("ply\nformat binary_little_endian 1.0\ncomment test\nelement face 1\n"
            "property list uchar int vertex_indices\nelement vertex 2\nproperty float x\n"
            "property float y\nproperty float z\nproperty uchar red\nproperty int scalar_label\n"
            "end_header\n").encode()
    body = struct.pack("<B3i", 3, 0, 1, 1)
    for p, lab in zip(pts, [7, 9]):
        body += p.tobytes() + struct.pack("<Bi", 200, lab)
    (tmp_path / "f.ply").write_bytes(head + body)
    c = load_ply(tmp_path / "f.ply", "scalar_label")
    np.testing.assert_array_equal(c.points, pts.astype(np.float64))
    np.testing.assert_array_equal(c.labels, [7, 9])


def test_truncated_binary(tmp_path, rng):
    save_ply(random_cloud(rng, 10), tmp_path / "c.ply")
    raw = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(raw[:-5])
    with pytest.raises(PlyError):
        load_ply(tmp_path / "t.ply")


def test_cloud_invariants():
    with pytest.raises(ValueError):
        LabeledCloud(np.zeros((3, 3)), [0, 1])
    with pytest.raises(ValueError):
        LabeledCloud(np.zeros((2, 3)), [0, 5], {0: "a"})
    with pytest.raises(ValueError):
        LabeledCloud(np.array([[0, 0, np.inf]]))
    c = LabeledCloud(np.zeros((2, 3)), [0, 1])
    assert c.class_table == {0: "class_0", 1: "class_1"}
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


def test_remap_substitution():
    c = LabeledCloud(np.zeros((3, 3)), [2, 3, 2])
    out = remap_labels(c, LabelMapping({2: 0, 3: 1}))
    np.testing.assert_array_equal(out.labels, [0, 1, 0])


def test_remap_drop_removes_points():
    c = LabeledCloud(np.arange(30.0).reshape(10, 3), [5] * 10)
    assert len(remap_labels(c, LabelMapping({5: DROP}))) == 0
    c = LabeledCloud(np.arange(9.0).reshape(3, 3), [5, 1, 5])
    out = remap_labels(c, LabelMapping({5: DROP, 1: 0}))
    np.testing.assert_array_equal(out.points, [[3, 4, 5]])


def test_remap_uncovered_label():
    c = LabeledCloud(np.zeros((2, 3)), [0, 4])
    with pytest.raises(KeyError, match="4"):
        remap_labels(c, LabelMapping({0: 0}))


def test_mapping_validation(tmp_path):
    with pytest.raises(ValueError):
        LabelMapping({1: 0, 2: 2})
    (tmp_path / "m.json").write_text(json.dumps({"1": 0, "01": 1}))
    with pytest.raises(ValueError, match="twice"):
        LabelMapping.from_json(tmp_path / "m.json")
    (tmp_path / "m.json").write_text(json.dumps({"1": "ignore"}))
    with pytest.raises(ValueError):
        LabelMapping.from_json(tmp_path / "m.json")


def test_mapping_json_round_trip(tmp_path):
    m = LabelMapping({0: DROP, 1: 0, 2: 1, 3: 1}, ("a", "b"))
    m.to_json(tmp_path / "m.json")
    assert LabelMapping.from_json(tmp_path / "m.json") == m


def test_fifty_to_nine_fixture_covers_all_classes():
    m = LabelMapping.from_json(CONFIGS / "paris_lille_3d_50to9.json")
    assert len(m.entries) == 50
    assert m.n_targets == 9
    assert m.names == ("ground", "buildings", "poles", "bollards", "trash cans", "barriers",
                       "pedestrians", "cars", "natural")
    c = LabeledCloud(np.zeros((50, 3)), np.arange(50))
    out = remap_labels(c, m)
    assert set(out.labels.tolist()) == set(range(9))
    assert out.class_table[8] == "natural"


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.integers(0, 30), st.integers(0, 4), min_size=1, max_size=12),
       st.integers(0, 2 ** 32 - 1))
def test_remap_properties(raw, seed):
    # compact targets to a contiguous range so the mapping is valid
    targets = sorted(set(raw.values()))
    entries = {k: targets.index(v) for k, v in raw.items()}
    m = LabelMapping(entries)
    rng = np.random.default_rng(seed)
    labels = rng.choice(sorted(entries), size=50)
    out = remap_labels(LabeledCloud(rng.normal(size=(50, 3)), labels), m)
    assert len(out) == 50
    assert out.labels.min() >= 0 and out.labels.max() < m.n_targets
    np.testing.assert_array_equal(out.labels, [entries[v] for v in labels])
