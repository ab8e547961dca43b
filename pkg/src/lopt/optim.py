"""Optimizer facade: multi-tensor steps, schedules, decay, baselines,
checkpointing.

An OptimizerHandle owns an ordered list of named parameter tensors, one
accumulator state per tensor, the optimizer MLP, and the step modifiers
(learning-rate schedule and decoupled weight decay). opt_step advances the
whole bundle by one gradient set.

Per-step order, fixed: accumulators advance first, the learned update is
computed from the advanced accumulators and scaled by the scheduled learning
rate, decoupled weight decay applies last. With weight_decay = 0 and a
constant schedule at lr = 1 the step is exactly the raw engine step.

The `loss` argument to opt_step is accepted and recorded but DOES NOT alter
the update. Some released weight bundles expect a loss value at the call
site; this implementation keeps the call signature compatible and stores
the value in the step report, nothing more.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .engine import (
    LoptWeights,
    ScratchTracker,
    UpdateReport,
    step_fused,
    step_naive,
    weights_entries,
    weights_from_entries,
)
from .features import FeatureSetSpec, spec_by_name
from .state import OptState, state_entries, state_from_entries, state_step, update_adafactor

F32 = np.float32


class OptimError(Exception):
    pass


class CheckpointMismatchError(OptimError):
    """Checkpoint metadata disagrees with what the loader expects."""


@dataclass
class ScheduleConfig:
    kind: str = "constant"  # constant | cosine
    max_lr: float = 1.0
    min_lr: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.min_lr <= self.max_lr:
            raise ValueError(f"need 0 <= min_lr <= max_lr, got {self.min_lr}, {self.max_lr}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def schedule_lr(cfg: ScheduleConfig, step: int) -> float:
    """Learning rate at a step counter value.

    constant: max_lr everywhere. cosine: linear warmup 0 -> max_lr over
    warmup_steps, then cosine from max_lr down to min_lr at total_steps,
    clamped to min_lr beyond. Endpoints are computed exactly: step ==
    warmup_steps yields max_lr * (w/w) = max_lr, step >= total_steps yields
    the min_lr literal.
    """
    if step < 0:
        raise ValueError("negative step")
    if cfg.kind == "constant":
        return cfg.max_lr
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.max_lr
        return cfg.max_lr * (step / cfg.warmup_steps)
    if step >= cfg.total_steps:
        return cfg.min_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def apply_weight_decay(theta: np.ndarray, lr: float, decay: float) -> np.ndarray:
    """Decoupled decay theta <- theta - lr*decay*theta, as one f32 multiply.

    A single multiplicative factor keeps decay an exact no-op at decay = 0
    (factor 1.0) and makes lr=1, decay=0.1 an exact multiply by f32(0.9).
    """
    if decay < 0:
        raise ValueError("negative weight decay")
    factor = F32(1.0 - lr * decay)
    return theta * factor


@dataclass
class OptimizerHandle:
    """Everything one optimizer instance owns. Externally synchronized:
    one caller at a time."""

    params: list[tuple[str, T.ParamTensor]]
    states: list[OptState]
    weights: LoptWeights
    spec: FeatureSetSpec
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    weight_decay: float = 0.0
    path: str = "fused"  # naive | fused
    workers: int = 1
    T: int = 0
    last_loss: float | None = None
    last_reports: list[UpdateReport] = field(default_factory=list)

    def __post_init__(self):
        if len(self.params) != len(self.states):
            raise ValueError("params/states length mismatch")
        for (name, p), s in zip(self.params, self.states):
            if p.shape != s.shape:
                raise ValueError(f"tensor {name!r}: param {p.shape} vs state {s.shape}")
            if s.t != self.T:
                raise ValueError(f"tensor {name!r}: state t={s.t} but handle T={self.T}")
        if self.path not in ("naive", "fused"):
            raise ValueError(f"unknown path {self.path!r}")
        if self.weight_decay < 0:
            raise ValueError("negative weight decay")
        if self.workers < 1:
            raise ValueError("worker count must be >= 1")

    @classmethod
    def fresh(cls, named_params, weights, spec, **kw) -> "OptimizerHandle":
        params = [(name, p if isinstance(p, T.ParamTensor) else T.ParamTensor(p))
                  for name, p in named_params]
        states = [OptState.zeros(*p.shape) for _, p in params]
        return cls(params=params, states=states, weights=weights, spec=spec, **kw)


def opt_step(
    h: OptimizerHandle,
    grads: list[np.ndarray],
    loss: float | None = None,
    tracker: ScratchTracker | None = None,
) -> None:
    """Advance every tensor by one step. Tensors are processed in their
    declared order; each is independent, so the order only matters for
    error attribution."""
    if len(grads) != len(h.params):
        raise OptimError(f"got {len(grads)} gradients for {len(h.params)} tensors")
    step_fn = step_naive if h.path == "naive" else step_fused
    lr = schedule_lr(h.schedule, h.T)
    new_params: list[tuple[str, T.ParamTensor]] = []
    new_states: list[OptState] = []
    reports: list[UpdateReport] = []
    for (name, p), s, g in zip(h.params, h.states, grads):
        g = np.asarray(g, dtype=F32)
        if g.shape != p.shape:
            raise OptimError(f"tensor {name!r}: gradient {g.shape} vs param {p.shape}")
        if not np.isfinite(g).all():
            raise OptimError(f"tensor {name!r}: non-finite gradient")
        s2 = state_step(s, g, h.weights.betas)
        kw = {"lr": lr, "tracker": tracker, "tensor_name": name}
        if h.path == "fused":
            kw["workers"] = h.workers
        p2, report = step_fn(p.data, g, s2, h.weights, h.spec, **kw)
        if h.weight_decay > 0.0:
            p2 = T.ParamTensor(apply_weight_decay(p2.data, lr, h.weight_decay))
        new_params.append((name, p2))
        new_states.append(s2)
        reports.append(report)
    h.params = new_params
    h.states = new_states
    h.T += 1
    h.last_loss = loss
    h.last_reports = reports


# ---------------------------------------------------------------------------
# baseline optimizers


def adam_step(theta, g, m, v, beta1=0.9, beta2=0.999, lr=1e-3, eps=1e-8, t=1):
    """Standard bias-corrected Adam, one tensor, functional form."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    theta = np.asarray(theta, dtype=F32)
    g = np.asarray(g, dtype=F32)
    b1 = F32(beta1)
    b2 = F32(beta2)
    m2 = b1 * m + (F32(1.0) - b1) * g
    v2 = b2 * v + (F32(1.0) - b2) * np.square(g)
    mhat = m2 / (F32(1.0) - b1 ** F32(t))
    vhat = v2 / (F32(1.0) - b2 ** F32(t))
    theta2 = theta - F32(lr) * mhat / (np.sqrt(vhat) + F32(eps))
    return theta2, m2, v2


def adafactor_step(theta, g, r, c, beta=0.999, lr=1e-3, eps=1e-30):
    """Factored second-moment baseline: EMA of row/column means of g^2,
    rank-1 reconstruction, no momentum, plain (non-relative) step size.

    theta' = theta - lr * g * sqrt(mean(r') / (r' c'^T + eps)).
    For rank-1 g^2 the reconstruction equals the full second moment exactly.
    """
    from .features import adafactor_scale

    theta = np.asarray(theta, dtype=F32)
    g = np.asarray(g, dtype=F32)
    r2, c2 = update_adafactor(r, c, g, beta)
    S = adafactor_scale(r2, c2, eps)
    theta2 = theta - F32(lr) * g * S
    return theta2, r2, c2


# ---------------------------------------------------------------------------
# checkpointing


def checkpoint_save(h: OptimizerHandle, path) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, p in h.params:
        entries[f"param/{name}"] = p.data
    for (name, _), s in zip(h.params, h.states):
        entries.update(state_entries(f"state/{name}", s))
    w_entries, w_meta = weights_entries(h.weights)
    entries.update(w_entries)
    meta = dict(w_meta)
    meta.update(
        {
            "kind": "checkpoint",
            "step": str(h.T),
            "feature_set": h.spec.id.value,
            "tensors": json.dumps([name for name, _ in h.params]),
            "schedule_kind": h.schedule.kind,
            "max_lr": repr(h.schedule.max_lr),
            "min_lr": repr(h.schedule.min_lr),
            "warmup_steps": str(h.schedule.warmup_steps),
            "total_steps": str(h.schedule.total_steps),
            "weight_decay": repr(h.weight_decay),
            "path": h.path,
            "workers": str(h.workers),
        }
    )
    T.file_save(entries, meta, path)


def checkpoint_load(path, expect_spec: FeatureSetSpec | None = None) -> OptimizerHandle:
    entries, meta = T.file_load(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointMismatchError(f"not a checkpoint file: kind={meta.get('kind')!r}")
    spec = spec_by_name(meta["feature_set"])
    if expect_spec is not None and spec.id is not expect_spec.id:
        raise CheckpointMismatchError(
            f"checkpoint feature set {spec.id.value!r}, expected {expect_spec.id.value!r}"
        )
    weights = weights_from_entries(entries, meta)
    names = json.loads(meta["tensors"])
    params = [(name, T.ParamTensor(entries[f"param/{name}"])) for name in names]
    states = [state_from_entries(f"state/{name}", entries) for name in names]
    schedule = ScheduleConfig(
        kind=meta["schedule_kind"],
        max_lr=float(meta["max_lr"]),
        min_lr=float(meta["min_lr"]),
        warmup_steps=int(meta["warmup_steps"]),
        total_steps=int(meta["total_steps"]),
    )
    return OptimizerHandle(
        params=params,
        states=states,
        weights=weights,
        spec=spec,
        schedule=schedule,
        weight_decay=float(meta["weight_decay"]),
        path=meta["path"],
        workers=int(meta["workers"]),
        T=int(meta["step"]),
    )
