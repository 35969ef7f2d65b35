"""Point cloud container, PLY reader/writer and class-label remapping."""
from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

DROP = "drop"

# PLY scalar type names -> numpy little-endian codes
_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledCloud:
    """Immutable set of 3D points (meters, float64) with optional integer labels."""

    points: np.ndarray
    labels: np.ndarray | None = None
    class_table: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise ValueError(f"non-finite coordinate at point {bad}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        table = {int(k): str(v) for k, v in self.class_table.items()}
        if self.labels is not None:
            lab = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(pts):
                raise ValueError(f"{len(lab)} labels for {len(pts)} points")
            if not table and len(lab):
                table = default_class_table(int(lab.max()) + 1)
            missing = set(np.unique(lab).tolist()) - set(table)
            if missing:
                raise ValueError(f"labels {sorted(missing)} missing from class_table")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "class_table", table)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_classes(self) -> int:
        return max(self.class_table) + 1 if self.class_table else 0

    def subset(self, indices) -> "LabeledCloud":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return LabeledCloud(self.points[idx], labels, self.class_table)

    def with_labels(self, labels, class_table: Mapping[int, str] | None = None) -> "LabeledCloud":
        return LabeledCloud(self.points, labels, dict(class_table or self.class_table))


def default_class_table(n: int) -> dict[int, str]:
    return {i: f"class_{i}" for i in range(n)}


# ---------------------------------------------------------------------------
# PLY


@dataclass
class _Element:
    name: str
    count: int
    # (name, dtype) for scalars or (name, (count_dtype, item_dtype)) for lists
    props: list = field(default_factory=list)

    @property
    def has_lists(self) -> bool:
        return any(isinstance(t, tuple) for _, t in self.props)


def _parse_header(f) -> tuple[str, list[_Element]]:
    magic = f.readline()
    if magic.strip() != b"ply":
        raise PlyError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements: list[_Element] = []
    while True:
        raw = f.readline()
        if not raw:
            raise PlyError("unexpected end of file inside header")
        words = raw.decode("ascii", errors="replace").split()
        if not words:
            continue
        key = words[0]
        if key == "end_header":
            break
        if key in ("comment", "obj_info"):
            continue
        if key == "format":
            if len(words) < 2:
                raise PlyError("malformed format line")
            fmt = words[1]
            if fmt == "binary_big_endian":
                raise PlyError("binary_big_endian PLY is not supported")
            if fmt not in ("ascii", "binary_little_endian"):
                raise PlyError(f"unknown PLY format {fmt!r}")
        elif key == "element":
            if len(words) != 3:
                raise PlyError(f"malformed element line: {raw!r}")
            try:
                elements.append(_Element(words[1], int(words[2])))
            except ValueError as exc:
                raise PlyError(f"bad element count in {raw!r}") from exc
        elif key == "property":
            if not elements:
                raise PlyError("property declared before any element")
            try:
                if words[1] == "list":
                    t = (_PLY_TYPES[words[2]], _PLY_TYPES[words[3]])
                    elements[-1].props.append((words[4], t))
                else:
                    elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            except (KeyError, IndexError) as exc:
                raise PlyError(f"malformed property line: {raw!r}") from exc
        else:
            raise PlyError(f"unknown header keyword {key!r}")
    if fmt is None:
        raise PlyError("missing format line")
    return fmt, elements


def _read_binary_lists(f, el: _Element) -> None:
    # elements with list properties cannot be described by a fixed dtype; skip row by row
    for _ in range(el.count):
        for _, t in el.props:
            if isinstance(t, tuple):
                cnt_dt = np.dtype("<" + t[0])
                n = int(np.frombuffer(f.read(cnt_dt.itemsize), cnt_dt)[0])
                f.read(n * np.dtype(t[1]).itemsize)
            else:
                f.read(np.dtype(t).itemsize)


def _read_vertices(path, f, fmt, el: _Element) -> dict[str, np.ndarray]:
    if el.has_lists:
        raise PlyError("list properties on the vertex element are not supported")
    names = [n for n, _ in el.props]
    if fmt == "ascii":
        cols = {n: [] for n in names}
        rows = []
        for i in range(el.count):
            line = f.readline()
            if not line:
                raise PlyError(f"file ends after {i} of {el.count} vertices")
            rows.append(line.split())
        if el.count:
            try:
                table = np.array(rows, dtype=np.float64)
            except ValueError as exc:
                raise PlyError("malformed vertex row") from exc
            if table.ndim != 2 or table.shape[1] != len(names):
                raise PlyError("vertex rows do not match declared properties")
        else:
            table = np.zeros((0, len(names)))
        for j, (n, t) in enumerate(el.props):
            cols[n] = table[:, j].astype(t)
        return cols
    dtype = np.dtype([(n, "<" + t) for n, t in el.props])
    buf = f.read(dtype.itemsize * el.count)
    if len(buf) != dtype.itemsize * el.count:
        raise PlyError(f"{path}: truncated binary vertex data")
    data = np.frombuffer(buf, dtype=dtype)
    return {n: data[n].copy() for n in names}


def load_ply(path, label_property: str | None = None) -> LabeledCloud:
    """Read the vertex element of an ASCII or binary little-endian PLY file.

    Coordinates are returned as float64 regardless of their stored precision.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        vertex = None
        for el in elements:
            if el.name == "vertex":
                vertex = el
                break
            # skip elements that precede the vertices
            if fmt == "ascii":
                for _ in range(el.count):
                    f.readline()
            elif el.has_lists:
                _read_binary_lists(f, el)
            else:
                f.read(np.dtype([(n, "<" + t) for n, t in el.props]).itemsize * el.count)
        if vertex is None:
            raise PlyError("no vertex element")
        names = [n for n, _ in vertex.props]
        for axis in "xyz":
            if axis not in names:
                raise PlyError(f"vertex element lacks property {axis!r}")
        if label_property is not None and label_property not in names:
            raise PlyError(f"label property {label_property!r} not in header")
        cols = _read_vertices(path, f, fmt, vertex)
    pts = np.stack([cols[a].astype(np.float64) for a in "xyz"], axis=1)
    finite = np.isfinite(pts).all(axis=1)
    if not finite.all():
        raise PlyError(f"non-finite coordinate at vertex {int(np.flatnonzero(~finite)[0])}")
    labels = None
    if label_property is not None:
        labels = cols[label_property].astype(np.int64)
    return LabeledCloud(pts, labels)


def save_ply(cloud: LabeledCloud, path, binary: bool = True, label_property: str = "class") -> None:
    """Write x, y, z as doubles plus an optional uint32 label property."""
    props = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    if cloud.labels is not None:
        props.append((label_property, "u4"))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {'double' if t == 'f8' else 'uint'} {n}" for n, t in props]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(len(cloud), dtype=[(n, "<" + t) for n, t in props])
            for j, a in enumerate("xyz"):
                rec[a] = cloud.points[:, j]
            if cloud.labels is not None:
                rec[label_property] = cloud.labels
            f.write(rec.tobytes())
        else:
            lines = []
            for i in range(len(cloud)):
                # repr() round-trips doubles exactly
                row = " ".join(repr(float(v)) for v in cloud.points[i])
                if cloud.labels is not None:
                    row += f" {int(cloud.labels[i])}"
                lines.append(row)
            if lines:
                f.write(("\n".join(lines) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# label remapping


@dataclass(frozen=True)
class LabelMapping:
    """Source class id -> target class id, or DROP to delete those points."""

    entries: dict[int, int | str]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        targets = sorted({v for v in self.entries.values() if v != DROP})
        for v in self.entries.values():
            if v != DROP and not isinstance(v, (int, np.integer)):
                raise ValueError(f"bad mapping target {v!r}")
        if targets != list(range(len(targets))):
            raise ValueError(f"target ids must be contiguous from 0, got {targets}")
        if self.names and len(self.names) != len(targets):
            raise ValueError(f"{len(self.names)} names for {len(targets)} target classes")

    @property
    def n_targets(self) -> int:
        return len({v for v in self.entries.values() if v != DROP})

    @classmethod
    def from_json(cls, path) -> "LabelMapping":
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        names = tuple(raw.pop("names", ()))
        entries = {}
        for k, v in raw.items():
            try:
                src = int(k)
            except ValueError as exc:
                raise ValueError(f"mapping key {k!r} is not an integer id") from exc
            if src in entries:
                raise ValueError(f"source id {src} listed twice")
            if isinstance(v, str):
                if v.lower() != DROP:
                    raise ValueError(f"mapping value {v!r} must be an id or 'drop'")
                v = DROP
            entries[src] = v
        return cls(entries, names)

    def to_json(self, path) -> None:
        raw: dict = {str(k): v for k, v in sorted(self.entries.items())}
        if self.names:
            raw["names"] = list(self.names)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(raw, f, indent=1)


def remap_labels(cloud: LabeledCloud, mapping: LabelMapping) -> LabeledCloud:
    if cloud.labels is None:
        raise ValueError("cloud has no labels to remap")
    present = np.unique(cloud.labels)
    for c in present.tolist():
        if c not in mapping.entries:
            raise KeyError(f"label {c} not covered by mapping")
    lut_keys = np.array(sorted(mapping.entries), dtype=np.int64)
    lut_vals = np.array([-1 if mapping.entries[k] == DROP else int(mapping.entries[k])
                         for k in lut_keys.tolist()], dtype=np.int64)
    new = lut_vals[np.searchsorted(lut_keys, cloud.labels)] if len(cloud) else cloud.labels.copy()
    keep = new >= 0
    n = mapping.n_targets
    table = ({i: mapping.names[i] for i in range(n)} if mapping.names
             else default_class_table(n))
    return LabeledCloud(cloud.points[keep], new[keep], table)


def _main(argv=None):
    # quick header dump, handy when a dataset uses an unexpected label name
    for p in (argv or sys.argv[1:]):
        with open(p, "rb") as f:
            fmt, els = _parse_header(f)
        print(p, fmt, [(e.name, e.count, [n for n, _ in e.props]) for e in els])


if __name__ == "__main__":
    _main()
