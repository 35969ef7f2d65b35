"""Cross-entropy / ADAM training over class-balanced epochs."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentConfig, augment, sample_rng
from .cloud import LabeledCloud
from .network import ModelSpec, Network, ParameterStore, build_model, load_checkpoint, save_checkpoint
from .network.layers import softmax
from .sampler import build_class_index, plan_epoch
from .spatial import SpatialIndex, build_index, grid_subsample
from .voxel import GridSpec, rasterize

log = logging.getLogger(__name__)


def cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean -log softmax(logits)[target] and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    b, nc = logits.shape
    if targets.shape != (b,):
        raise ValueError(f"{targets.shape[0]} targets for {b} rows")
    if len(targets) and (targets.min() < 0 or targets.max() >= nc):
        raise ValueError(f"target ids must lie in [0, {nc})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, targets]))
    grad = softmax(logits)
    grad[rows, targets] -= 1
    return loss, grad / b


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


class Adam:
    """Bias-corrected ADAM; moments live beside the parameters they track."""

    def __init__(self, params: dict[str, np.ndarray], config: OptimizerConfig = OptimizerConfig()):
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - c.beta1 ** t
        bc2 = 1 - c.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= (c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)).astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for k in self.m:
            self.m[k][...] = tensors[f"adam.m.{k}"]
            self.v[k][...] = tensors[f"adam.v.{k}"]
        self.step_count = step


def adam_step(params, grads, optimizer: Adam) -> None:
    optimizer.step(params, grads)


@dataclass(frozen=True)
class TrainConfig:
    n_per_class: int = 1000
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    grid_n: int = 32
    deltas: tuple[float, ...] = (0.05, 0.10, 0.15)
    model: str = "ms_dvs"
    channels: tuple[int, ...] = (32, 32, 64, 64)
    fc_width: int = 1024
    padding: int = 0
    subsample_cell: float | None = None
    workers: int = 1
    checkpoint_dir: str | None = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        GridSpec(self.grid_n, min(self.deltas))

    def model_spec(self, n_classes: int) -> ModelSpec:
        return ModelSpec(self.model, len(self.deltas), self.grid_n, n_classes, self.deltas,
                         self.channels, self.fc_width, self.padding)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deltas"] = list(self.deltas)
        d["channels"] = list(self.channels)
        d["augment"] = self.augment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "optimizer" in d:
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    balanced_accuracy: float


@dataclass
class TrainResult:
    network: Network
    store: ParameterStore
    history: list[EpochRecord]


class NeighborhoodSampler:
    """Turns (cloud id, point index) rows into stacked multi-scale grids."""

    def __init__(self, clouds: Sequence[LabeledCloud], grid_n: int, deltas, augment_cfg: AugmentConfig,
                 indexes: Sequence[SpatialIndex] | None = None):
        self.clouds = list(clouds)
        self.indexes = list(indexes) if indexes is not None else [build_index(c) for c in self.clouds]
        self.specs = [GridSpec(grid_n, d) for d in deltas]
        self.augment_cfg = augment_cfg
        h = self.specs[-1].half_extent
        a = augment_cfg
        if a.enabled:
            # gather everything that rotation, shrinking and noise could move into the cube
            reach = h * (math.sqrt(2) if a.rotate else 1.0) / a.scale_range[0] + 4 * a.noise_sigma
        else:
            reach = h
        self.query_half = reach

    def grids(self, cloud_id: int, point_index: int, rng: np.random.Generator | None) -> np.ndarray:
        cloud = self.clouds[cloud_id]
        center = cloud.points[point_index]
        near = cloud.points[self.indexes[cloud_id].box_query(center, self.query_half)] - center
        if rng is not None and self.augment_cfg.enabled:
            near = augment(near, self.augment_cfg, rng, self.specs[-1].half_extent)
        return np.stack([rasterize(near, s) for s in self.specs])


def _history_csv(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_loss", "balanced_accuracy"])
        for r in history:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.balanced_accuracy)])


def read_history_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as f:
        return [EpochRecord(int(r["epoch"]), float(r["mean_loss"]), float(r["balanced_accuracy"]))
                for r in csv.DictReader(f)]


def balanced_accuracy(pred, gt, classes) -> float:
    recalls = [float(np.mean(pred[gt == c] == c)) for c in classes if np.any(gt == c)]
    return float(np.mean(recalls)) if recalls else 0.0


def _recorded(config: TrainConfig) -> dict:
    # execution details that cannot change the result stay out of the checkpoint
    d = config.to_dict()
    for k in ("workers", "checkpoint_dir"):
        d.pop(k)
    return d


def latest_checkpoint(directory) -> Path | None:
    d = Path(directory)
    cands = sorted(p for p in d.glob("epoch_*") if (p / "meta.json").exists())
    return cands[-1] if cands else None


def train(clouds: LabeledCloud | Sequence[LabeledCloud], config: TrainConfig,
          resume: bool = False, init_seed: int | None = None,
          on_epoch: Callable[[EpochRecord], bool] | None = None) -> TrainResult:
    """Train on balanced epochs; epoch e draws its plan with seed ``config.seed ^ e``.

    ``on_epoch`` sees each finished epoch's record (after its checkpoint is written)
    and may return True to stop early.
    """
    if isinstance(clouds, LabeledCloud):
        clouds = [clouds]
    clouds = list(clouds)
    if config.subsample_cell:
        clouds = [grid_subsample(c, config.subsample_cell).cloud for c in clouds]
    cindex = build_class_index(clouds)
    n_classes = max(max(c.class_table) for c in clouds) + 1
    if all(len(v) == 0 for v in cindex.entries.values()):
        raise ValueError("no labeled class present")
    present = [c for c, v in cindex.entries.items() if len(v)]
    table = {k: v for c in clouds for k, v in c.class_table.items()}

    spec = config.model_spec(n_classes)
    net = build_model(spec)
    store = net.init_params(config.seed if init_seed is None else init_seed)
    opt = Adam(store.params, config.optimizer)
    history: list[EpochRecord] = []
    start = 1
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None

    if resume and ckdir is not None and (last := latest_checkpoint(ckdir)) is not None:
        _, loaded, extra, meta = load_checkpoint(last)
        if ModelSpec.from_dict(meta["model"]) != spec:
            raise ValueError(f"checkpoint {last} was written for a different model")
        store = loaded
        opt = Adam(store.params, config.optimizer)
        opt.load_state(extra, meta["step"])
        history = [EpochRecord(**r) for r in meta["history"]]
        start = meta["epoch"] + 1
        log.info("resuming from %s (epoch %d)", last, meta["epoch"])

    sampler = NeighborhoodSampler(clouds, config.grid_n, config.deltas, config.augment)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(start, config.epochs + 1):
            plan = plan_epoch(cindex, config.n_per_class, config.seed ^ epoch)
            rows = plan.samples
            losses, weights, preds = [], [], []
            for b0 in range(0, len(rows), config.batch_size):
                batch = rows[b0:b0 + config.batch_size]
                jobs = [(int(c), int(p), sample_rng(config.seed, epoch, b0 + j))
                        for j, (c, p, _) in enumerate(batch)]
                if pool is None:
                    grids = [sampler.grids(*job) for job in jobs]
                else:
                    grids = list(pool.map(lambda job: sampler.grids(*job), jobs))
                x = np.stack(grids)
                y = batch[:, 2]
                drop_rng = sample_rng(config.seed, epoch, -1 - b0) if spec.dropout else None
                logits = net.forward(x, store, train=True, rng=drop_rng)
                loss, glog = cross_entropy(logits, y)
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss in epoch {epoch}, samples {batch[:, :2].tolist()}")
                grads = net.backward(glog, store)
                opt.step(store.params, grads)
                losses.append(loss)
                weights.append(len(batch))
                preds.append(logits.argmax(axis=1))
            rec = EpochRecord(epoch, float(np.average(losses, weights=weights)),
                              balanced_accuracy(np.concatenate(preds), rows[:, 2], present))
            history.append(rec)
            log.info("epoch %d loss %.4f balanced acc %.4f", epoch, rec.mean_loss, rec.balanced_accuracy)
            if ckdir is not None:
                meta = {"epoch": epoch, "step": opt.step_count, "seed": config.seed,
                        "class_table": {str(k): v for k, v in sorted(table.items())},
                        "history": [asdict(r) for r in history], "train_config": _recorded(config)}
                save_checkpoint(ckdir / f"epoch_{epoch:04d}", spec, store, opt.state(), meta)
                _history_csv(ckdir / "history.csv", history)
            if on_epoch is not None and on_epoch(rec):
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(net, store, history)
