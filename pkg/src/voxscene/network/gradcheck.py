"""Central-difference check of Network.backward.

A central difference is only a valid derivative estimate when x - h and x + h
select the same linear piece of every PReLU, ReLU and max-pool unit. Coordinates
whose perturbation flips any such unit are reported as skipped rather than compared.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import MaxPool3d, PReLU, SqueezeExcite
from .model import Network, ParameterStore


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst: tuple[str, int] | None = None
    per_tensor: dict[str, float] = field(default_factory=dict)


def _pattern(net: Network) -> list[np.ndarray]:
    caches, hc, _ = net._cache
    out = []
    for layers, cs in [*zip(net.branches, caches), (net.head, hc)]:
        for layer, c in zip(layers, cs):
            if isinstance(layer, PReLU):
                out.append(c[1])
            elif isinstance(layer, MaxPool3d):
                out.append(c[0])
            elif isinstance(layer, SqueezeExcite):
                out.append(c[2] > 0)
    return out


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(net: Network, store: ParameterStore, x, targets, loss_fn, h: float = 1e-3,
                    per_tensor: int = 8, train: bool = True, seed: int = 0,
                    floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with (f(p+h) - f(p-h)) / 2h on sampled coordinates.

    `store` should be float64. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    rng = np.random.default_rng(seed)

    def evaluate():
        logits = net.forward(x, store, train=train, keep_cache=True)
        loss, g = loss_fn(logits, targets)
        return loss, g, _pattern(net)

    # BN running buffers drift with every train-mode call; restore them after
    buffers = {k: v.copy() for k, v in store.buffers.items()}
    _, g, base = evaluate()
    grads = net.backward(g, store)
    worst, where, checked, skipped = 0.0, None, 0, 0
    report = {}
    for key, p in store.params.items():
        tensor_worst = 0.0
        for i in rng.choice(p.size, size=min(p.size, per_tensor), replace=False):
            old = p.flat[i]
            p.flat[i] = old + h
            lp, _, pp = evaluate()
            p.flat[i] = old - h
            lm, _, pm = evaluate()
            p.flat[i] = old
            if not (_same(pp, base) and _same(pm, base)):
                skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            a = grads[key].flat[i]
            rel = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            tensor_worst = max(tensor_worst, rel)
            if rel > worst:
                worst, where = rel, (key, int(i))
        report[key] = tensor_worst
    net._cache = None
    for k, v in buffers.items():
        store.buffers[k][...] = v
    return GradCheckReport(worst, checked, skipped, where, report)
