"""Multi-scale voxel classifier (K parallel conv branches -> concat -> FC) and a VoxNet baseline."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (BatchNorm, Conv3d, conv_out_size, Dropout, Flatten, Layer, LeakyReLU, Linear,
                     MaxPool3d, PReLU, SqueezeExcite, softmax)


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "ms_dvs"  # "ms_dvs" or "voxnet"
    n_scales: int = 1
    grid_n: int = 32
    n_classes: int = 8
    deltas: tuple[float, ...] = (0.1,)
    channels: tuple[int, ...] = (32, 32, 64, 64)
    fc_width: int = 1024
    padding: int = 0
    se_ratio: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in ("ms_dvs", "voxnet"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_scales < 1:
            raise ValueError("need at least one scale")
        if self.grid_n < 2 or self.grid_n % 2:
            raise ValueError("grid side must be even")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.deltas) != self.n_scales:
            raise ValueError(f"{len(self.deltas)} voxel sizes for {self.n_scales} scales")
        if self.kind == "ms_dvs" and (len(self.channels) != 4 or min(self.channels) < 1):
            raise ValueError("ms_dvs needs a 4-entry channel plan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deltas"] = list(self.deltas)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["deltas"] = tuple(d.get("deltas", (0.1,)))
        d["channels"] = tuple(d.get("channels", (32, 32, 64, 64)))
        return cls(**d)

    @property
    def branch_width(self) -> int:
        return self.fc_width

    @property
    def concat_width(self) -> int:
        return self.fc_width * self.n_scales


@dataclass
class ParameterStore:
    """Trainable tensors and non-trainable buffers keyed by stable dotted paths."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key):
        if key in self.params:
            return self.params[key]
        return self.buffers[key]

    def __contains__(self, key):
        return key in self.params or key in self.buffers

    def keys(self):
        return list(self.params) + list(self.buffers)

    def items(self):
        return list(self.params.items()) + list(self.buffers.items())

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.params.items()},
                              {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({k: v.astype(dtype) for k, v in self.params.items()},
                              {k: v.astype(dtype) for k, v in self.buffers.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_trainable(self) -> int:
        return sum(int(v.size) for v in self.params.values())


class Network:
    """K parallel branches, concatenated, followed by a head producing logits.

    ``forward`` returns raw logits; :meth:`predict_proba` adds the softmax.
    """

    def __init__(self, spec: ModelSpec, branches: list[list[Layer]], head: list[Layer]):
        self.spec = spec
        self.branches = branches
        self.head = head
        self._cache = None
        # per-layer output shapes per branch, filled by init
        self.traces: list[list[tuple[str, tuple]]] = []

    def layers(self):
        for br in self.branches:
            yield from br
        yield from self.head

    def init_params(self, seed: int = 0) -> ParameterStore:
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        n = self.spec.grid_n
        widths = []
        self.traces = []
        for br in self.branches:
            shape = (n, n, n, 1)
            trace = [("input", shape)]
            for layer in br:
                tensors, shape = layer.init(shape, rng)
                _register(store, layer, tensors)
                trace.append((layer.describe(), shape))
            self.traces.append(trace)
            widths.append(shape[-1])
        shape = (sum(widths),)
        for layer in self.head:
            tensors, shape = layer.init(shape, rng)
            _register(store, layer, tensors)
        if shape != (self.spec.n_classes,):
            raise AssertionError(f"head produces {shape}, expected {self.spec.n_classes} logits")
        if self.spec.kind == "ms_dvs":
            plan = planned_trace(self.spec)
            for b in range(len(self.branches)):
                if self.spatial_trace(b) != plan:
                    raise AssertionError(f"branch {b} trace {self.spatial_trace(b)} != {plan}")
            if sum(widths) != self.spec.concat_width:
                raise AssertionError(f"concat width {sum(widths)} != {self.spec.concat_width}")
        return store
    def spatial_trace(self, branch: int = 0) -> list[int]:
        """Grid side after each spatial layer (conv/pool), starting with the input side."""
        if not self.traces:
            self.init_params()
        out = [self.spec.grid_n]
        for (desc, shape), layer in zip(self.traces[branch][1:], self.branches[branch]):
            if layer.kind in ("conv", "maxpool"):
                out.append(shape[0])
        return out

    def flatten_width(self, branch: int = 0) -> int:
        if not self.traces:
            self.init_params()
        for (desc, shape), layer in zip(self.traces[branch][1:], self.branches[branch]):
            if layer.kind == "flatten":
                return shape[0]
        raise ValueError("branch has no flatten layer")

    def _check_input(self, x):
        x = np.asarray(x)
        k, n = self.spec.n_scales, self.spec.grid_n
        if x.ndim == 4 and k == 1:
            x = x[:, None]
        if x.ndim != 5 or x.shape[1:] != (k, n, n, n):
            raise ValueError(f"expected batch of shape (B, {k}, {n}, {n}, {n}), got {x.shape}")
        return x

    def forward(self, x, store: ParameterStore, train: bool = False, keep_cache: bool | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
        """Logits (B, N_c) for a batch (B, K, n, n, n).

        train=True uses batch statistics (updating BN running buffers) and dropout.
        Activations are cached for :meth:`backward` when keep_cache (default: train).
        """
        x = self._check_input(x).astype(store.dtype, copy=False)
        keep = train if keep_cache is None else keep_cache
        caches = [] if keep else None
        feats = []
        for b, br in enumerate(self.branches):
            h = x[:, b, ..., None]
            bc = []
            for layer in br:
                h, c = layer.forward(h, store, train, rng)
                bc.append(c)
            feats.append(h)
            if keep:
                caches.append(bc)
        h = np.concatenate(feats, axis=1)
        hc = []
        for layer in self.head:
            h, c = layer.forward(h, store, train, rng)
            hc.append(c)
        if keep:
            self._cache = (caches, hc, [f.shape[1] for f in feats])
        return h

    def predict_proba(self, x, store: ParameterStore) -> np.ndarray:
        return softmax(self.forward(x, store, train=False, keep_cache=False))

    def predict(self, x, store: ParameterStore, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x)
        out = [self.forward(x[i:i + batch_size], store, train=False, keep_cache=False).argmax(axis=1)
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def backward(self, grad_logits: np.ndarray, store: ParameterStore) -> dict[str, np.ndarray]:
        """Gradients of every trainable tensor given dLoss/dlogits of the last cached forward."""
        if self._cache is None:
            raise RuntimeError("backward called without cached activations; run forward(train=True) first")
        caches, hc, widths = self._cache
        self._cache = None
        grads: dict[str, np.ndarray] = {}
        g = np.asarray(grad_logits, dtype=store.dtype)
        for layer, c in zip(reversed(self.head), reversed(hc)):
            g = layer.backward(g, c, store, grads)
        splits = np.split(g, np.cumsum(widths)[:-1], axis=1)
        for br, bc, gb in zip(self.branches, caches, splits):
            for layer, c in zip(reversed(br), reversed(bc)):
                gb = layer.backward(gb, c, store, grads)
                if gb is None:
                    break
        for k, v in store.params.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        return grads

    def summary(self) -> str:
        if not self.traces:
            self.init_params()
        lines = []
        for b, trace in enumerate(self.traces):
            lines.append(f"branch{b}: " + " -> ".join(f"{d}{list(s)}" for d, s in trace))
        lines.append("head: " + " -> ".join(l.describe() for l in self.head) + " -> SoftMax")
        return "\n".join(lines)


def planned_trace(spec: ModelSpec) -> list[int]:
    """Grid side after each conv/pool of an MS-K branch, computed from the spec alone."""
    n, p = spec.grid_n, spec.padding
    out = [n]
    for op in ("conv", "conv", "pool", "conv", "conv", "pool"):
        n = conv_out_size(n, 3, 1, p) if op == "conv" else n // 2
        if n < 1:
            raise ValueError(f"grid_n={spec.grid_n} with padding {p} collapses to nothing")
        out.append(n)
    return out


def _register(store: ParameterStore, layer: Layer, tensors: dict):
    for key, t in tensors.items():
        short = key.rsplit(".", 1)[1]
        if key in store:
            raise AssertionError(f"duplicate tensor path {key}")
        if short in layer.buffers:
            store.buffers[key] = t
        else:
            store.params[key] = t


def _block(prefix, spec):
    return [BatchNorm(f"{prefix}.bn"), PReLU(f"{prefix}.prelu"), SqueezeExcite(f"{prefix}.se", spec.se_ratio)]


def _dvs_branch(b: int, spec: ModelSpec) -> list[Layer]:
    c1, c2, c3, c4 = spec.channels
    p = spec.padding
    pre = f"branch{b}"
    layers: list[Layer] = []
    for i, (ch, pool) in enumerate([(c1, False), (c2, True), (c3, False), (c4, True)], start=1):
        layers.append(Conv3d(f"{pre}.conv{i}", ch, 3, 1, p, input_grad=i > 1))
        layers += _block(f"{pre}.conv{i}", spec)
        if pool:
            layers.append(MaxPool3d(f"{pre}.pool{i // 2}", 2))
    layers.append(Flatten(f"{pre}.flatten"))
    layers.append(Linear(f"{pre}.fc", spec.fc_width))
    layers += _block(f"{pre}.fc", spec)
    if spec.dropout:
        layers.append(Dropout(f"{pre}.dropout", spec.dropout))
    return layers


def build_model(spec: ModelSpec) -> Network:
    if spec.kind == "voxnet":
        return _voxnet(spec)
    branches = [_dvs_branch(b, spec) for b in range(spec.n_scales)]
    return Network(spec, branches, [Linear("head.fc", spec.n_classes)])


def build_ms_dvs(n_scales: int = 3, grid_n: int = 32, n_classes: int = 8,
                 deltas=None, seed: int = 0, **kw) -> tuple[Network, ParameterStore]:
    """MS-K network; default voxel sizes are 10 cm for one scale, 5/10/15 cm for three."""
    if deltas is None:
        deltas = {1: (0.1,), 3: (0.05, 0.10, 0.15)}.get(
            n_scales, tuple(0.05 * (i + 1) for i in range(n_scales)))
    spec = ModelSpec("ms_dvs", n_scales, grid_n, n_classes, tuple(deltas), **kw)
    net = build_model(spec)
    return net, net.init_params(seed)


def _voxnet(spec: ModelSpec) -> Network:
    # VoxNet layout on a single occupancy grid
    c1, c2 = spec.channels[:2]
    layers = [Conv3d("branch0.conv1", c1, 5, 2, spec.padding, input_grad=False), LeakyReLU("branch0.act1", 0.1)]
    if spec.dropout:
        layers.append(Dropout("branch0.drop1", 0.2))
    layers += [Conv3d("branch0.conv2", c2, 3, 1, spec.padding), LeakyReLU("branch0.act2", 0.1)]
    layers.append(MaxPool3d("branch0.pool1", 2))
    if spec.dropout:
        layers.append(Dropout("branch0.drop2", 0.3))
    layers += [Flatten("branch0.flatten"), Linear("branch0.fc", spec.fc_width),
               LeakyReLU("branch0.act3", 0.0)]
    if spec.dropout:
        layers.append(Dropout("branch0.drop3", 0.4))
    return Network(spec, [layers], [Linear("head.fc", spec.n_classes)])


def build_voxnet(n_classes: int = 8, grid_n: int = 32, delta: float = 0.1, seed: int = 0,
                 dropout: bool = False) -> tuple[Network, ParameterStore]:
    spec = ModelSpec("voxnet", 1, grid_n, n_classes, (delta,), channels=(32, 32), fc_width=128,
                     dropout=0.5 if dropout else 0.0)
    net = build_model(spec)
    return net, net.init_params(seed)
