"""3D layers with explicit forward/backward passes (numpy, channels-last).

Activations are laid out (batch, D, H, W, C) for volumes and (batch, F) for vectors.
Each layer reads its tensors from a flat name -> array store, so one layer object
can be evaluated against several parameter sets. ``forward`` returns the output and
a cache object; ``backward`` consumes that cache and accumulates into ``grads``.
"""
from __future__ import annotations

from itertools import product

import numpy as np

# im2col buffer elements per chunk (64 MB in float32)
_COL_BUDGET = 1 << 24


def conv_out_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Layer:
    kind = "layer"
    trainable: tuple[str, ...] = ()
    buffers: tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name

    def key(self, t: str) -> str:
        return f"{self.name}.{t}"

    def init(self, in_shape: tuple, rng: np.random.Generator) -> tuple[dict, tuple]:
        """Return ({tensor name: array}, out_shape) for a per-sample input shape."""
        return {}, self.out_shape(in_shape)

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x, store, train: bool, rng=None):
        raise NotImplementedError

    def backward(self, gy, cache, store, grads):
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind


class Conv3d(Layer):
    """Conv(n, k, s, p); weight (out, in, k, k, k), bias (out,)."""

    kind = "conv"
    trainable = ("weight", "bias")

    def __init__(self, name, out_channels, k=3, s=1, p=0, input_grad=True):
        super().__init__(name)
        self.out_channels, self.k, self.s, self.p = out_channels, k, s, p
        # the first layer of a branch sits on the occupancy grid; nothing needs its input gradient
        self.input_grad = input_grad

    def describe(self):
        return f"Conv({self.out_channels},{self.k},{self.s},{self.p})"

    def out_shape(self, in_shape):
        d, h, w, _ = in_shape
        o = [conv_out_size(v, self.k, self.s, self.p) for v in (d, h, w)]
        if min(o) < 1:
            raise ValueError(f"{self.name}: input {in_shape} too small for {self.describe()}")
        return (*o, self.out_channels)

    def init(self, in_shape, rng):
        c = in_shape[-1]
        fan_in = c * self.k ** 3
        t = {self.key("weight"): _uniform(rng, fan_in, (self.out_channels, c, self.k, self.k, self.k)),
             self.key("bias"): _uniform(rng, fan_in, (self.out_channels,))}
        return t, self.out_shape(in_shape)

    def _pad(self, x, p=None):
        p = self.p if p is None else p
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))

    def _cols(self, xp, od, oh, ow, s):
        """Column-major im2col: (k^3 * C, B * od * oh * ow), rows ordered (kd, kh, kw, C)."""
        k = self.k
        bsz, c = xp.shape[0], xp.shape[-1]
        cols = np.empty((k, k, k, c, bsz, od, oh, ow), dtype=xp.dtype)
        xt = xp.transpose(4, 0, 1, 2, 3)
        for a, b, cc in product(range(k), repeat=3):
            cols[a, b, cc] = xt[:, :, a:a + s * (od - 1) + 1:s, b:b + s * (oh - 1) + 1:s,
                                cc:cc + s * (ow - 1) + 1:s]
        return cols.reshape(k ** 3 * c, -1)

    def _chunk(self, per_sample):
        return max(1, _COL_BUDGET // max(per_sample, 1))

    def forward(self, x, store, train, rng=None):
        w = store[self.key("weight")]
        xp = self._pad(x)
        bsz = x.shape[0]
        od, oh, ow, o = self.out_shape(x.shape[1:])
        wm = w.transpose(2, 3, 4, 1, 0).reshape(-1, o)
        per_sample = wm.shape[0] * od * oh * ow
        out = np.empty((bsz, od, oh, ow, o), dtype=np.result_type(x, w))
        step = self._chunk(per_sample)
        cols = None
        for i in range(0, bsz, step):
            cols = self._cols(xp[i:i + step], od, oh, ow, self.s)
            out[i:i + step] = (cols.T @ wm).reshape(-1, od, oh, ow, o)
        out += store[self.key("bias")]
        # keep the columns for backward when one chunk covered the batch
        return out, (xp, cols if step >= bsz else None)

    def backward(self, gy, cache, store, grads):
        xp, cached = cache
        w = store[self.key("weight")]
        k, s, p = self.k, self.s, self.p
        bsz, od, oh, ow, o = gy.shape
        c = xp.shape[-1]
        if cached is not None:
            gw = cached @ gy.reshape(-1, o)
        else:
            gw = 0
            step = self._chunk(k ** 3 * c * od * oh * ow)
            for i in range(0, bsz, step):
                gw = gw + self._cols(xp[i:i + step], od, oh, ow, s) @ gy[i:i + step].reshape(-1, o)
        _acc(grads, self.key("weight"), gw.reshape(k, k, k, c, o).transpose(4, 3, 0, 1, 2))
        _acc(grads, self.key("bias"), gy.sum(axis=(0, 1, 2, 3)))
        if not self.input_grad:
            return None
        d, h, wd = xp.shape[1:4]
        if s == 1:
            # input gradient = full correlation of gy with the spatially flipped kernel
            flip = w[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 0, 1).reshape(-1, c)
            gxp = np.empty_like(xp)
            step = self._chunk(k ** 3 * o * d * h * wd)
            for i in range(0, bsz, step):
                gpad = self._pad(gy[i:i + step], k - 1)
                gcols = self._cols(gpad, d, h, wd, 1)
                gxp[i:i + step] = (gcols.T @ flip).reshape(-1, d, h, wd, c)
        else:
            wm = w.transpose(2, 3, 4, 1, 0).reshape(-1, o)
            gxp = np.zeros_like(xp)
            for i in range(bsz):
                gc = (gy[i].reshape(-1, o) @ wm.T).reshape(od, oh, ow, k, k, k, c)
                for a, bb, cc in product(range(k), repeat=3):
                    gxp[i, a:a + s * (od - 1) + 1:s, bb:bb + s * (oh - 1) + 1:s,
                        cc:cc + s * (ow - 1) + 1:s] += gc[:, :, :, a, bb, cc]
        if p:
            gxp = gxp[:, p:-p, p:-p, p:-p]
        return gxp


class MaxPool3d(Layer):
    """Max over non-overlapping k^3 blocks; trailing voxels that do not fill a block are dropped."""

    kind = "maxpool"

    def __init__(self, name, k=2):
        super().__init__(name)
        self.k = k

    def describe(self):
        return f"MaxPool({self.k})"

    def out_shape(self, in_shape):
        d, h, w, c = in_shape
        o = (d // self.k, h // self.k, w // self.k)
        if min(o) < 1:
            raise ValueError(f"{self.name}: input {in_shape} too small for {self.describe()}")
        return (*o, c)

    def forward(self, x, store, train, rng=None):
        k = self.k
        bsz, d, h, w, c = x.shape
        od, oh, ow = d // k, h // k, w // k
        xc = x[:, : od * k, : oh * k, : ow * k]
        blocks = (xc.reshape(bsz, od, k, oh, k, ow, k, c)
                  .transpose(0, 1, 3, 5, 7, 2, 4, 6)
                  .reshape(bsz, od, oh, ow, c, k ** 3))
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape)

    def backward(self, gy, cache, store, grads):
        arg, shape = cache
        k = self.k
        bsz, d, h, w, c = shape
        od, oh, ow = gy.shape[1:4]
        # first maximal entry of each block receives the gradient
        gb = np.zeros((bsz, od, oh, ow, c, k ** 3), dtype=gy.dtype)
        np.put_along_axis(gb, arg[..., None], gy[..., None], axis=-1)
        gxc = (gb.reshape(bsz, od, oh, ow, c, k, k, k)
               .transpose(0, 1, 5, 2, 6, 3, 7, 4)
               .reshape(bsz, od * k, oh * k, ow * k, c))
        if gxc.shape == shape:
            return gxc
        gx = np.zeros(shape, dtype=gy.dtype)
        gx[:, : od * k, : oh * k, : ow * k] = gxc
        return gx


class BatchNorm(Layer):
    """Per-channel normalization over batch (and spatial) axes."""

    kind = "batchnorm"
    trainable = ("gamma", "beta")
    buffers = ("running_mean", "running_var")

    def __init__(self, name, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps

    def describe(self):
        return "BatchNorm"

    def init(self, in_shape, rng):
        c = in_shape[-1]
        t = {self.key("gamma"): np.ones(c, np.float32), self.key("beta"): np.zeros(c, np.float32),
             self.key("running_mean"): np.zeros(c, np.float32),
             self.key("running_var"): np.ones(c, np.float32)}
        return t, in_shape

    def forward(self, x, store, train, rng=None):
        gamma, beta = store[self.key("gamma")], store[self.key("beta")]
        axes = tuple(range(x.ndim - 1))
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // x.shape[-1]
            rm, rv = store[self.key("running_mean")], store[self.key("running_var")]
            m = self.momentum
            rm[...] = (1 - m) * rm + m * mu
            if n > 1:
                rv[...] = (1 - m) * rv + m * var * (n / (n - 1))
        else:
            mu = store[self.key("running_mean")]
            var = store[self.key("running_var")]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return gamma * xhat + beta, (xhat, inv, train)

    def backward(self, gy, cache, store, grads):
        xhat, inv, batch_stats = cache
        gamma = store[self.key("gamma")]
        axes = tuple(range(gy.ndim - 1))
        _acc(grads, self.key("gamma"), (gy * xhat).sum(axis=axes))
        _acc(grads, self.key("beta"), gy.sum(axis=axes))
        gxhat = gy * gamma
        if not batch_stats:
            return gxhat * inv
        n = gy.size // gy.shape[-1]
        return (inv / n) * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))


class PReLU(Layer):
    kind = "prelu"
    trainable = ("slope",)

    def describe(self):
        return "PReLU"

    def init(self, in_shape, rng):
        return {self.key("slope"): np.full(in_shape[-1], 0.25, np.float32)}, in_shape

    def forward(self, x, store, train, rng=None):
        a = store[self.key("slope")]
        pos = x > 0
        return np.where(pos, x, a * x), (x, pos)

    def backward(self, gy, cache, store, grads):
        x, pos = cache
        a = store[self.key("slope")]
        axes = tuple(range(gy.ndim - 1))
        _acc(grads, self.key("slope"), np.where(pos, 0, gy * x).sum(axis=axes))
        return np.where(pos, gy, gy * a)


class LeakyReLU(Layer):
    kind = "leakyrelu"

    def __init__(self, name, slope=0.1):
        super().__init__(name)
        self.slope = slope

    def describe(self):
        return f"LeakyReLU({self.slope})"

    def forward(self, x, store, train, rng=None):
        pos = x > 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, gy, pos, store, grads):
        return np.where(pos, gy, self.slope * gy)


class SqueezeExcite(Layer):
    """Channel gating: global mean -> FC(C/r) -> ReLU -> FC(C) -> sigmoid -> scale.

    On (batch, F) inputs each feature is a channel of spatial size 1, so the
    squeeze is the identity.
    """

    kind = "se"
    trainable = ("w1", "b1", "w2", "b2")

    def __init__(self, name, ratio=16):
        super().__init__(name)
        self.ratio = ratio

    def describe(self):
        return f"SE({self.ratio})"

    def init(self, in_shape, rng):
        c = in_shape[-1]
        r = max(c // self.ratio, 1)
        t = {self.key("w1"): _uniform(rng, c, (c, r)), self.key("b1"): _uniform(rng, c, (r,)),
             self.key("w2"): _uniform(rng, r, (r, c)), self.key("b2"): _uniform(rng, r, (c,))}
        return t, in_shape

    def forward(self, x, store, train, rng=None):
        w1, b1 = store[self.key("w1")], store[self.key("b1")]
        w2, b2 = store[self.key("w2")], store[self.key("b2")]
        sp = tuple(range(1, x.ndim - 1))
        s = x.mean(axis=sp) if sp else x
        z1 = s @ w1 + b1
        r1 = np.maximum(z1, 0)
        g = 1.0 / (1.0 + np.exp(-(r1 @ w2 + b2)))
        gb = g.reshape(g.shape[0], *([1] * len(sp)), g.shape[1])
        return x * gb, (x, s, z1, r1, g, gb)

    def backward(self, gy, cache, store, grads):
        x, s, z1, r1, g, gb = cache
        w1, w2 = store[self.key("w1")], store[self.key("w2")]
        sp = tuple(range(1, x.ndim - 1))
        n_sp = int(np.prod([x.shape[a] for a in sp])) if sp else 1
        gg = (gy * x).sum(axis=sp) if sp else gy * x
        dz2 = gg * g * (1 - g)
        _acc(grads, self.key("w2"), r1.T @ dz2)
        _acc(grads, self.key("b2"), dz2.sum(axis=0))
        dz1 = (dz2 @ w2.T) * (z1 > 0)
        _acc(grads, self.key("w1"), s.T @ dz1)
        _acc(grads, self.key("b1"), dz1.sum(axis=0))
        ds = dz1 @ w1.T
        gx = gy * gb
        if sp:
            gx += (ds / n_sp).reshape(ds.shape[0], *([1] * len(sp)), ds.shape[1])
        else:
            gx += ds
        return gx


class Flatten(Layer):
    kind = "flatten"

    def describe(self):
        return "Flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, store, train, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, shape, store, grads):
        return gy.reshape(shape)


class Linear(Layer):
    """FC(n); weight (in, out)."""

    kind = "fc"
    trainable = ("weight", "bias")

    def __init__(self, name, out_features):
        super().__init__(name)
        self.out_features = out_features

    def describe(self):
        return f"FC({self.out_features})"

    def out_shape(self, in_shape):
        return (self.out_features,)

    def init(self, in_shape, rng):
        (f,) = in_shape
        t = {self.key("weight"): _uniform(rng, f, (f, self.out_features)),
             self.key("bias"): _uniform(rng, f, (self.out_features,))}
        return t, (self.out_features,)

    def forward(self, x, store, train, rng=None):
        return x @ store[self.key("weight")] + store[self.key("bias")], x

    def backward(self, gy, x, store, grads):
        _acc(grads, self.key("weight"), x.T @ gy)
        _acc(grads, self.key("bias"), gy.sum(axis=0))
        return gy @ store[self.key("weight")].T


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, p=0.5):
        super().__init__(name)
        self.p = p

    def describe(self):
        return f"DropOut({self.p})"

    def forward(self, x, store, train, rng=None):
        if not train or self.p == 0:
            return x, None
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape) >= self.p) / (1 - self.p)
        return x * keep.astype(x.dtype), keep

    def backward(self, gy, keep, store, grads):
        return gy if keep is None else gy * keep


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _acc(grads, key, g):
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g
