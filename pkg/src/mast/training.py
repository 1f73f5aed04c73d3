"""Optimization, gradient checking and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data_io import Manifest, params_to_checkpoint, save_checkpoint
from .errors import ConfigError, DimensionError, InputError
from .metrics import mean_average_precision
from .model import ModelParams, forward, init_params
from .numerics import Tensor
from .schedule import StageSchedule

LOSSES = ("ce-singlelabel", "bce-multilabel")


@dataclass
class TrainConfig:
    base_lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 8
    loss: str = "ce-singlelabel"
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        # zero is accepted so that a run can be checked to leave parameters untouched
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(step: int, total: int, base: float) -> float:
    """Half-cosine decay from ``base`` at step 0 to zero at ``total``."""
    if total <= 0:
        raise ConfigError("cosine schedule needs a positive number of steps")
    if step < 0:
        raise ConfigError("step must be non-negative")
    progress = min(1.0, step / total)
    return max(0.0, 0.5 * base * (1.0 + math.cos(math.pi * progress)))


def adamw_step(params: ModelParams, state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    """Decoupled weight decay Adam; parameters without a gradient are left alone."""
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {p.grad.shape}, parameter has {p.shape}")
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps) + cfg.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.dtype)


# ---------------------------------------------------------------------------
# losses


def head_targets(manifest: Manifest, head: int, n_classes: int, loss: str):
    groups = [e.labels if head == 0 else e.labels2 for e in manifest.entries]
    if loss == "ce-singlelabel":
        return np.array([g[0] for g in groups], dtype=np.int64)
    t = np.zeros((len(groups), n_classes))
    for i, g in enumerate(groups):
        t[i, g] = 1.0
    return t


def batch_loss(logits: list[Tensor], targets: list[np.ndarray], loss: str) -> Tensor:
    """Sum over heads of the per-head mean loss."""
    fn = nx.cross_entropy if loss == "ce-singlelabel" else nx.bce_with_logits
    out = None
    for lg, t in zip(logits, targets):
        term = fn(lg, t)
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    schedule: str
    n_coords: int
    max_rel_error: float
    mean_rel_error: float
    worst: str
    per_tensor: dict[str, float]
    tolerance: float
    corrupted: str | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _sample_coords(shapes: dict[str, tuple[int, ...]], n: int, rng: np.random.Generator) -> list[tuple[str, tuple]]:
    """At least one coordinate per tensor, the remainder uniform over all scalars."""
    names = list(shapes)
    sizes = np.array([int(np.prod(shapes[k])) for k in names])
    chosen: set[tuple[str, int]] = set()
    for k, size in zip(names, sizes):
        chosen.add((k, int(rng.integers(size))))
    total = int(sizes.sum())
    target = min(max(n, len(names)), total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    while len(chosen) < target:
        flat = int(rng.integers(total))
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        chosen.add((names[t], flat - int(offsets[t])))
    return [(k, np.unravel_index(i, shapes[k])) for k, i in sorted(chosen, key=lambda c: (names.index(c[0]), c[1]))]


def check_gradients(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    tensors: dict[str, Tensor],
    n_coords: int = 200,
    seed: int = 0,
    eps: float = 1e-5,
    floor: float = 1e-6,
    tolerance: float = 1e-4,
    corrupt: str | None = None,
    name: str = "",
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``loss_fn`` with central differences at sampled coordinates.

    ``corrupt`` names an op whose backward is negated during the analytic pass;
    a working checker must then report a failure. The default step balances
    truncation error (~eps^2) against roundoff in the loss (~1e-16 / eps).
    """
    for t in tensors.values():
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    if corrupt:
        with nx.negate_backward(corrupt):
            loss_fn(tensors).backward()
    else:
        loss_fn(tensors).backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    rng = np.random.default_rng(seed)
    coords = _sample_coords({k: t.shape for k, t in tensors.items()}, n_coords, rng)
    errors, labels, per_tensor = [], [], {}
    with nx.no_grad():
        for k, idx in coords:
            t = tensors[k]
            orig = t.data[idx]
            t.data[idx] = orig + eps
            fp = float(loss_fn(tensors).data)
            t.data[idx] = orig - eps
            fm = float(loss_fn(tensors).data)
            t.data[idx] = orig
            num = (fp - fm) / (2.0 * eps)
            err = float(nx.relative_error(analytic[k][idx], num, floor))
            errors.append(err)
            labels.append(f"{k}{list(map(int, idx))}")
            per_tensor[k] = max(per_tensor.get(k, 0.0), err)
    errors = np.array(errors)
    worst = int(errors.argmax())
    return GradCheckReport(
        name, len(errors), float(errors.max()), float(errors.mean()), labels[worst], per_tensor, tolerance, corrupt
    )


def grad_check(
    schedule: StageSchedule,
    seed: int = 0,
    n_coords: int = 200,
    batch: int = 2,
    corrupt: str | None = None,
    tolerance: float = 1e-4,
    loss: str = "bce-multilabel",
) -> GradCheckReport:
    """Float64 gradient check of the full network plus loss on random input and labels."""
    if n_coords < 1:
        raise ConfigError("n_coords must be positive")
    rng = np.random.default_rng(seed)
    params = init_params(schedule, seed=seed, dtype=np.float64)
    # larger-than-init weights keep the attention maps away from uniform
    for k, t in params.items():
        if not k.endswith(("gamma", "beta")):
            t.data = t.data + rng.normal(0.0, 0.2, t.shape)
    x = rng.standard_normal((batch, *schedule.input_shape))
    if loss == "ce-singlelabel":
        labels = [rng.integers(0, c, batch) for c in schedule.head_sizes]
    else:
        labels = [(rng.random((batch, c)) < 0.5).astype(np.float64) for c in schedule.head_sizes]

    def loss_fn(tensors):
        out = forward(x, ModelParams(schedule, tensors), schedule)
        return batch_loss(out.logits, labels, loss)

    return check_gradients(
        loss_fn, dict(params.items()), n_coords, seed, corrupt=corrupt, tolerance=tolerance, name=schedule.name
    )


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    metric: float
    seconds: float


def predict(params: ModelParams, x: np.ndarray, batch_size: int = 16) -> tuple[list[np.ndarray], np.ndarray]:
    """Logits per head and class-token embeddings without building a graph."""
    heads, embs = [[] for _ in params.schedule.head_sizes], []
    with nx.no_grad():
        for s in range(0, len(x), batch_size):
            out = forward(x[s:s + batch_size], params)
            for j, lg in enumerate(out.logits):
                heads[j].append(lg.data.astype(np.float64))
            embs.append(out.embedding.data.astype(np.float64))
    return [np.concatenate(h) for h in heads], np.concatenate(embs)


def evaluate(scores: list[np.ndarray], targets: list[np.ndarray], loss: str) -> float:
    """Top-1 accuracy (both heads right when there are two) or mAP of the first head."""
    if loss == "ce-singlelabel":
        correct = np.ones(len(targets[0]), dtype=bool)
        for sc, t in zip(scores, targets):
            correct &= sc.argmax(axis=1) == t
        return float(correct.mean())
    return mean_average_precision(scores[0], targets[0])


def train_loop(
    manifest: Manifest,
    schedule: StageSchedule,
    cfg: TrainConfig,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    params: ModelParams | None = None,
    stop_at: float | None = None,
    log: Callable[[EpochLog], None] | None = None,
) -> tuple[ModelParams, list[EpochLog]]:
    """Mini-batch AdamW with a per-step cosine schedule.

    After every epoch the whole training set is scored in inference mode and
    a JSON line ``{epoch, lr, loss, metric}`` goes to ``log_path``. The final
    weights are written to ``checkpoint_path``. With ``stop_at`` the loop ends
    early once the epoch metric reaches it.
    """
    if len(manifest) == 0:
        raise InputError("training manifest is empty")
    manifest.validate(schedule.head_sizes)
    x = manifest.load_arrays()
    if tuple(x.shape[1:]) != tuple(schedule.input_shape):
        raise InputError(f"inputs are {x.shape[1:]} but schedule {schedule.name!r} expects {schedule.input_shape}")
    targets = [head_targets(manifest, j, c, cfg.loss) for j, c in enumerate(schedule.head_sizes)]

    params = params or init_params(schedule, seed=cfg.seed)
    state = OptimizerState()
    rng = np.random.default_rng(cfg.seed)
    n = len(x)
    total_steps = math.ceil(n / cfg.batch_size) * cfg.epochs
    if log_path is not None:
        Path(log_path).write_text("")

    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        lr = cfg.base_lr
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            params.zero_grad()
            res = forward(x[idx], params)
            loss = batch_loss(res.logits, [t[idx] for t in targets], cfg.loss)
            loss.backward()
            adamw_step(params, state, lr, cfg)
            loss_sum += float(loss.data) * len(idx)
            step += 1
        scores, _ = predict(params, x, cfg.batch_size)
        metric = evaluate(scores, targets, cfg.loss)
        entry = EpochLog(epoch, lr, loss_sum / n, metric, time.perf_counter() - t0)
        history.append(entry)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps({"epoch": entry.epoch, "lr": entry.lr, "loss": entry.loss, "metric": entry.metric}) + "\n")
        if log is not None:
            log(entry)
        if stop_at is not None and metric >= stop_at:
            break

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params_to_checkpoint(params, cfg.to_dict()))
    return params, history
