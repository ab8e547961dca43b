"""Simulated data-parallel optimizer steps over N in-process workers.

Three strategies, all consuming the same canonically averaged gradient and
all required to land within 1e-6 relative of a single-device step:

    ALL_REDUCE       every worker averages gradients, then redundantly runs
                     the full optimizer step; replicas are asserted
                     byte-identical.
    REDUCE_SCATTER   each tensor is split into N contiguous element ranges
                     (sizes within one element). Workers advance the
                     momentum and second-moment slices they own, exchange
                     f64 partial row/column sums so the factored
                     accumulators stay exact, merge per-shard feature
                     statistics (d_feat scalars each), run the streaming
                     update on their ranges only, and the updated slices are
                     gathered.
    FSDP_A2A         optimizer state is sharded at whole-tensor granularity
                     (greedy largest-first for balance). Gradients for each
                     tensor travel to its owner, the owner runs a full
                     single-tensor step, and updated tensors are broadcast
                     back.

Workers are real threads joined at phase boundaries; merges always happen
in worker-index order, so results are deterministic for a fixed worker
count regardless of scheduling. Communication is simulated: traffic that
real collectives would move is accounted in bytes per phase (ring-model
formulas, documented on each helper below), while the data itself moves
through shared memory. Phase wall times are measured; an optional analytic
cost model adds simulated times for reproducible traces.
"""

from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .engine import (
    ScratchTracker,
    fused_apply,
    fused_stats,
    step_fused,
    step_naive,
    worker_ranges,
)
from .features import FeatureStats, normalization_scale
from .optim import OptimizerHandle, apply_weight_decay, schedule_lr
from .state import OptState, state_step, update_momentum, update_second_moment

F32 = np.float32


class DistError(Exception):
    pass


class TraceError(DistError):
    """Trace byte accounting disagrees with the strategy's formulas."""


class Strategy(enum.Enum):
    ALL_REDUCE = "all_reduce"
    REDUCE_SCATTER = "reduce_scatter"
    FSDP_A2A = "fsdp_a2a"


@dataclass
class TensorAssignment:
    """How one tensor's step is distributed.

    kind "replicated": every worker steps the whole tensor (ALL_REDUCE).
    kind "sharded": ranges is an (N, 2) array of contiguous [lo, hi) flat
    element ranges, disjoint, exhaustive, sizes within one element.
    kind "owned": one worker holds the tensor's full optimizer state and
    steps it alone (FSDP_A2A); whole-tensor granularity, so per-worker
    element counts are balanced only as well as tensor sizes allow.
    """

    kind: str
    ranges: np.ndarray | None = None
    owner: int | None = None


@dataclass
class ShardPlan:
    strategy: Strategy
    workers: int
    assignment: list[TensorAssignment]

    def __post_init__(self):
        if self.workers < 1:
            raise DistError("worker count must be >= 1")


def make_plan(strategy: Strategy, shapes: list[tuple[int, int]], workers: int) -> ShardPlan:
    if workers < 1:
        raise DistError("worker count must be >= 1")
    assignment: list[TensorAssignment] = []
    if strategy is Strategy.ALL_REDUCE:
        assignment = [TensorAssignment(kind="replicated") for _ in shapes]
    elif strategy is Strategy.REDUCE_SCATTER:
        for m, n in shapes:
            ranges = worker_ranges(0, m * n, workers)
            assignment.append(TensorAssignment(kind="sharded", ranges=ranges))
    elif strategy is Strategy.FSDP_A2A:
        # greedy largest-first keeps per-worker element totals balanced
        order = sorted(range(len(shapes)), key=lambda j: -(shapes[j][0] * shapes[j][1]))
        load = [0] * workers
        owner = [0] * len(shapes)
        for j in order:
            w = min(range(workers), key=lambda i: (load[i], i))
            owner[j] = w
            load[w] += shapes[j][0] * shapes[j][1]
        assignment = [TensorAssignment(kind="owned", owner=owner[j]) for j in range(len(shapes))]
    else:
        raise DistError(f"unknown strategy {strategy!r}")
    plan = ShardPlan(strategy=strategy, workers=workers, assignment=assignment)
    validate_plan(plan, shapes)
    return plan


def validate_plan(plan: ShardPlan, shapes: list[tuple[int, int]]) -> None:
    if len(plan.assignment) != len(shapes):
        raise DistError(
            f"plan covers {len(plan.assignment)} tensors, model has {len(shapes)}"
        )
    for j, (asg, (m, n)) in enumerate(zip(plan.assignment, shapes)):
        if asg.kind == "replicated":
            continue
        if asg.kind == "owned":
            if asg.owner is None or not 0 <= asg.owner < plan.workers:
                raise DistError(f"tensor {j}: bad owner {asg.owner}")
            continue
        if asg.kind != "sharded":
            raise DistError(f"tensor {j}: unknown assignment kind {asg.kind!r}")
        r = asg.ranges
        if r is None or r.shape != (plan.workers, 2):
            raise DistError(f"tensor {j}: expected ({plan.workers}, 2) ranges")
        if r[0, 0] != 0 or r[-1, 1] != m * n:
            raise DistError(f"tensor {j}: ranges do not cover the tensor")
        sizes = r[:, 1] - r[:, 0]
        if np.any(sizes < 0) or np.any(r[1:, 0] != r[:-1, 1]):
            raise DistError(f"tensor {j}: ranges overlap or leave gaps")
        if sizes.max() - sizes.min() > 1:
            raise DistError(f"tensor {j}: shard sizes differ by more than one element")


# ---------------------------------------------------------------------------
# traces


@dataclass
class PhaseRecord:
    phase: str
    bytes: int
    time_ms: float
    sim_time_ms: float | None = None


@dataclass
class CostModel:
    """Analytic collective cost: latency + bytes / bandwidth, per phase."""

    bandwidth_bytes_per_s: float = 1e10
    latency_s: float = 1e-5

    def time_ms(self, nbytes: int) -> float:
        return (self.latency_s + nbytes / self.bandwidth_bytes_per_s) * 1e3


@dataclass
class CommTrace:
    strategy: Strategy
    workers: int
    records: list[PhaseRecord] = field(default_factory=list)
    stepped_elements: list[int] | None = None
    state_bytes_per_worker: list[int] | None = None

    def add(self, phase: str, nbytes: int, seconds: float, model: CostModel | None) -> None:
        self.records.append(
            PhaseRecord(
                phase=phase,
                bytes=int(nbytes),
                time_ms=seconds * 1e3,
                sim_time_ms=model.time_ms(int(nbytes)) if model else None,
            )
        )

    def phase_bytes(self, phase: str) -> int:
        return sum(r.bytes for r in self.records if r.phase == phase)

    def csv_rows(self) -> list[str]:
        rows = [f"{self.strategy.value},{self.workers},{r.phase},{r.bytes},{r.time_ms:.3f}"
                for r in self.records]
        return rows


WORD = 4  # f32 payload word


def bytes_ring_allreduce(elements: int, workers: int) -> int:
    """Ring all-reduce moves 2 * P * (N-1)/N words."""
    return (2 * elements * (workers - 1) * WORD) // workers


def bytes_ring_reduce_scatter(elements: int, workers: int) -> int:
    """Reduce-scatter (and all-gather) move P * (N-1)/N words."""
    return (elements * (workers - 1) * WORD) // workers


def bytes_factor_merge(m: int, n: int, workers: int) -> int:
    """Per tensor: each worker sends f64 partial row and column sums of the
    squared gradient (8*(m+n)) and receives the six updated f32 factor
    vectors (12*(m+n))."""
    if workers == 1:
        return 0
    return workers * (8 * (m + n) + 12 * (m + n))


def bytes_stats_merge(d_feat: int, workers: int) -> int:
    """Per tensor: each worker sends d_feat f64 sums of squares plus an i64
    count and receives the d_feat f32 normalization scale."""
    if workers == 1:
        return 0
    return workers * (8 * d_feat + 8 + 4 * d_feat)


def bytes_tensor_a2a(elements: int, owner_shard: int, workers: int) -> int:
    """Gradient shards regrouped to the owner: everything except the shard
    the owner already holds."""
    if workers == 1:
        return 0
    return (elements - owner_shard) * WORD


def bytes_owner_broadcast(elements: int, workers: int) -> int:
    """Owner sends the updated tensor to every other worker."""
    return elements * (workers - 1) * WORD


def validate_trace(trace: CommTrace, plan: ShardPlan, shapes: list[tuple[int, int]],
                   d_feat: int) -> None:
    """Recompute every phase's expected bytes from the plan and compare."""
    N = plan.workers
    sizes = [m * n for m, n in shapes]
    expected: dict[str, int] = {}
    if plan.strategy is Strategy.ALL_REDUCE:
        expected["gradient reduce"] = sum(bytes_ring_allreduce(p, N) for p in sizes)
        expected["optimizer step"] = 0
    elif plan.strategy is Strategy.REDUCE_SCATTER:
        expected["gradient reduce"] = sum(bytes_ring_reduce_scatter(p, N) for p in sizes)
        expected["factor merge"] = sum(bytes_factor_merge(m, n, N) for m, n in shapes)
        expected["stats merge"] = bytes_stats_merge(d_feat, N) * len(shapes)
        expected["optimizer step"] = 0
        expected["parameter gather"] = sum(bytes_ring_reduce_scatter(p, N) for p in sizes)
    else:
        expected["gradient reduce"] = sum(bytes_ring_reduce_scatter(p, N) for p in sizes)
        a2a = 0
        for j, p in enumerate(sizes):
            ranges = worker_ranges(0, p, N)
            owner = plan.assignment[j].owner
            a2a += bytes_tensor_a2a(p, int(ranges[owner, 1] - ranges[owner, 0]), N)
        expected["grad all-to-all"] = a2a
        expected["optimizer step"] = 0
        expected["parameter gather"] = sum(bytes_owner_broadcast(p, N) for p in sizes)
    seen = {r.phase for r in trace.records}
    if seen != set(expected):
        raise TraceError(f"phases {sorted(seen)} != expected {sorted(expected)}")
    for phase, nbytes in expected.items():
        got = trace.phase_bytes(phase)
        if got != nbytes:
            raise TraceError(f"phase {phase!r}: {got} bytes recorded, formula says {nbytes}")


# ---------------------------------------------------------------------------
# shared machinery


def _parallel(workers: int, fn) -> list:
    """Run fn(w) on one thread per worker; join all; re-raise the first
    failure. Results land in worker order."""
    results = [None] * workers
    errors: list[BaseException] = []
    lock = threading.Lock()

    def run(w):
        try:
            results[w] = fn(w)
        except BaseException as e:  # noqa: BLE001 - propagated below
            with lock:
                errors.append(e)

    threads = [threading.Thread(target=run, args=(w,)) for w in range(workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return results


def _check_grads(model, per_worker_grads) -> int:
    if not per_worker_grads:
        raise DistError("no workers")
    N = len(per_worker_grads)
    for w, grads in enumerate(per_worker_grads):
        if len(grads) != len(model):
            raise DistError(f"worker {w}: {len(grads)} gradients for {len(model)} tensors")
        for (name, p), g in zip(model, grads):
            if np.asarray(g).shape != p.shape:
                raise DistError(
                    f"worker {w}, tensor {name!r}: gradient {np.asarray(g).shape} "
                    f"vs param {p.shape}"
                )
    return N


def mean_grads(model, per_worker_grads) -> list[np.ndarray]:
    """Canonical data-parallel reduction: f64 mean over workers, rounded to
    f32 once. Every strategy consumes exactly this gradient, which is what
    makes them comparable to the single-device oracle."""
    out = []
    for j, (name, _) in enumerate(model):
        stack = np.stack([np.asarray(per_worker_grads[w][j], dtype=F32)
                          for w in range(len(per_worker_grads))])
        if not np.isfinite(stack).all():
            raise DistError(f"tensor {name!r}: non-finite gradient")
        out.append(np.mean(stack, axis=0, dtype=np.float64).astype(F32))
    return out


def state_array_bytes(s: OptState) -> int:
    return sum(a.nbytes for a in (*s.M, s.V, *s.r, *s.c))


def _full_step_one(p: T.ParamTensor, g: np.ndarray, s: OptState, h: OptimizerHandle,
                   lr: float, name: str) -> tuple[T.ParamTensor, OptState]:
    """Single-tensor step with the handle's settings: state, engine, decay."""
    s2 = state_step(s, g, h.weights.betas)
    step_fn = step_naive if h.path == "naive" else step_fused
    kw = {"lr": lr, "tensor_name": name}
    if h.path == "fused":
        kw["workers"] = h.workers
    p2, _ = step_fn(p.data, g, s2, h.weights, h.spec, **kw)
    if h.weight_decay > 0.0:
        p2 = T.ParamTensor(apply_weight_decay(p2.data, lr, h.weight_decay))
    return p2, s2


def _adopt(h: OptimizerHandle, model2, states2) -> None:
    h.params = model2
    h.states = states2
    h.T += 1


# ---------------------------------------------------------------------------
# strategies


def run_allreduce_step(
    model: list[tuple[str, T.ParamTensor]],
    per_worker_grads: list[list[np.ndarray]],
    h: OptimizerHandle,
    cost_model: CostModel | None = None,
) -> tuple[list[tuple[str, T.ParamTensor]], CommTrace]:
    """Average gradients, then every worker redundantly steps the whole
    model; replicas are asserted byte-identical and replica 0 is adopted."""
    N = _check_grads(model, per_worker_grads)
    trace = CommTrace(strategy=Strategy.ALL_REDUCE, workers=N)
    lr = schedule_lr(h.schedule, h.T)

    t0 = time.perf_counter()
    gbar = mean_grads(model, per_worker_grads)
    nbytes = sum(bytes_ring_allreduce(p.size, N) for _, p in model)
    trace.add("gradient reduce", nbytes, time.perf_counter() - t0, cost_model)

    t0 = time.perf_counter()

    def replica(w):
        out = []
        for j, (name, p) in enumerate(model):
            out.append(_full_step_one(p, gbar[j], h.states[j], h, lr, name))
        return out

    replicas = _parallel(N, replica)
    for w in range(1, N):
        for j, (name, _) in enumerate(model):
            if not np.array_equal(replicas[w][j][0].data, replicas[0][j][0].data):
                raise DistError(f"replica {w} diverged on tensor {name!r}")
    trace.add("optimizer step", 0, time.perf_counter() - t0, cost_model)

    model2 = [(name, replicas[0][j][0]) for j, (name, _) in enumerate(model)]
    states2 = [replicas[0][j][1] for j in range(len(model))]
    _adopt(h, model2, states2)
    return model2, trace


def run_reduce_scatter_step(
    model: list[tuple[str, T.ParamTensor]],
    per_worker_grads: list[list[np.ndarray]],
    h: OptimizerHandle,
    plan: ShardPlan,
    cost_model: CostModel | None = None,
) -> tuple[list[tuple[str, T.ParamTensor]], CommTrace]:
    """Shard every tensor into even element ranges; workers step only their
    ranges. Factored accumulators and normalization statistics need
    whole-tensor reductions, so those travel as f64 partial sums."""
    N = _check_grads(model, per_worker_grads)
    if plan.strategy is not Strategy.REDUCE_SCATTER or plan.workers != N:
        raise DistError("plan does not match strategy/worker count")
    shapes = [p.shape for _, p in model]
    validate_plan(plan, shapes)
    trace = CommTrace(strategy=Strategy.REDUCE_SCATTER, workers=N)
    lr = schedule_lr(h.schedule, h.T)
    betas = h.weights.betas

    t0 = time.perf_counter()
    gbar = mean_grads(model, per_worker_grads)
    nbytes = sum(bytes_ring_reduce_scatter(p.size, N) for _, p in model)
    trace.add("gradient reduce", nbytes, time.perf_counter() - t0, cost_model)

    # accumulator advance: workers own M/V slices; row/column factors need
    # cross-shard sums, merged at the coordinator in worker order
    t0 = time.perf_counter()
    J = len(model)
    M2 = [[np.empty_like(h.states[j].M[i]) for i in range(3)] for j in range(J)]
    V2 = [np.empty_like(h.states[j].V) for j in range(J)]

    def advance_slices(w):
        partial = []
        for j in range(J):
            lo, hi = plan.assignment[j].ranges[w]
            lo, hi = int(lo), int(hi)
            s = h.states[j]
            gf = gbar[j].ravel()[lo:hi]
            for i in range(3):
                M2[j][i].ravel()[lo:hi] = update_momentum(
                    s.M[i].ravel()[lo:hi], gf, betas.momentum_betas[i]
                )
            V2[j].ravel()[lo:hi] = update_second_moment(
                s.V.ravel()[lo:hi], gf, betas.second_moment_beta
            )
            m, n = shapes[j]
            idx = np.arange(lo, hi, dtype=np.int64)
            g2 = np.square(gf, dtype=np.float64)
            rows = np.bincount(idx // n, weights=g2, minlength=m)
            cols = np.bincount(idx - (idx // n) * n, weights=g2, minlength=n)
            partial.append((rows, cols))
        return partial

    factor_partials = _parallel(N, advance_slices)
    states2: list[OptState] = []
    for j in range(J):
        m, n = shapes[j]
        row_sum = np.zeros(m, dtype=np.float64)
        col_sum = np.zeros(n, dtype=np.float64)
        for w in range(N):
            row_sum += factor_partials[w][j][0]
            col_sum += factor_partials[w][j][1]
        row_mean = (row_sum / n).astype(F32)
        col_mean = (col_sum / m).astype(F32)
        s = h.states[j]
        r2, c2 = [], []
        for i in range(3):
            b = F32(betas.adafactor_betas[i])
            one_m_b = F32(1.0) - b
            r2.append(b * s.r[i] + one_m_b * row_mean)
            c2.append(b * s.c[i] + one_m_b * col_mean)
        states2.append(OptState(M=M2[j], V=V2[j], r=r2, c=c2, t=s.t + 1))
    nbytes = sum(bytes_factor_merge(m, n, N) for m, n in shapes)
    trace.add("factor merge", nbytes, time.perf_counter() - t0, cost_model)

    # per-shard feature statistics, merged into one scale per tensor
    t0 = time.perf_counter()

    def shard_stats(w):
        out = []
        for j, (name, p) in enumerate(model):
            lo, hi = plan.assignment[j].ranges[w]
            lo, hi = int(lo), int(hi)
            if lo == hi:
                out.append(None)
                continue
            out.append(fused_stats(p.data, gbar[j], states2[j], h.spec,
                                   workers=1, lo=lo, hi=hi))
        return out

    stat_partials = _parallel(N, shard_stats)
    merged: list[FeatureStats] = []
    for j in range(J):
        parts = [stat_partials[w][j] for w in range(N) if stat_partials[w][j] is not None]
        merged.append(normalization_across_shards(parts))
    nbytes = bytes_stats_merge(h.spec.d_feat, N) * J
    trace.add("stats merge", nbytes, time.perf_counter() - t0, cost_model)

    # streaming update on owned ranges only; decay folds into the same slice
    t0 = time.perf_counter()
    outs = [np.empty_like(p.data) for _, p in model]
    decay_factor = F32(1.0 - lr * h.weight_decay)
    stepped = [0] * N

    def step_shards(w):
        for j, (name, p) in enumerate(model):
            lo, hi = plan.assignment[j].ranges[w]
            lo, hi = int(lo), int(hi)
            if lo == hi:
                continue
            fused_apply(p.data, gbar[j], states2[j], h.weights, h.spec,
                        merged[j], outs[j], lr=lr, lo=lo, hi=hi)
            if h.weight_decay > 0.0:
                of = outs[j].ravel()
                of[lo:hi] *= decay_factor
            stepped[w] += hi - lo

    _parallel(N, step_shards)
    trace.add("optimizer step", 0, time.perf_counter() - t0, cost_model)

    t0 = time.perf_counter()
    model2 = []
    for j, (name, _) in enumerate(model):
        if not np.isfinite(outs[j]).all():
            raise DistError(f"tensor {name!r}: non-finite parameters after sharded step")
        model2.append((name, T.ParamTensor(outs[j])))
    nbytes = sum(bytes_ring_reduce_scatter(p.size, N) for _, p in model)
    trace.add("parameter gather", nbytes, time.perf_counter() - t0, cost_model)

    trace.stepped_elements = stepped
    _adopt(h, model2, states2)
    return model2, trace


def run_fsdp_a2a_step(
    model: list[tuple[str, T.ParamTensor]],
    per_worker_grads: list[list[np.ndarray]],
    h: OptimizerHandle,
    plan: ShardPlan,
    cost_model: CostModel | None = None,
) -> tuple[list[tuple[str, T.ParamTensor]], CommTrace]:
    """Whole-tensor state sharding: gradients are regrouped to each tensor's
    owner, the owner runs the full single-tensor step, parameters are
    broadcast back. Per-worker resident state is 1/N of the total up to
    tensor granularity."""
    N = _check_grads(model, per_worker_grads)
    if plan.strategy is not Strategy.FSDP_A2A or plan.workers != N:
        raise DistError("plan does not match strategy/worker count")
    shapes = [p.shape for _, p in model]
    validate_plan(plan, shapes)
    trace = CommTrace(strategy=Strategy.FSDP_A2A, workers=N)
    lr = schedule_lr(h.schedule, h.T)

    t0 = time.perf_counter()
    gbar = mean_grads(model, per_worker_grads)
    nbytes = sum(bytes_ring_reduce_scatter(p.size, N) for _, p in model)
    trace.add("gradient reduce", nbytes, time.perf_counter() - t0, cost_model)

    t0 = time.perf_counter()
    a2a = 0
    for j, (name, p) in enumerate(model):
        ranges = worker_ranges(0, p.size, N)
        owner = plan.assignment[j].owner
        a2a += bytes_tensor_a2a(p.size, int(ranges[owner, 1] - ranges[owner, 0]), N)
    trace.add("grad all-to-all", a2a, time.perf_counter() - t0, cost_model)

    t0 = time.perf_counter()
    owned = [[j for j in range(len(model)) if plan.assignment[j].owner == w]
             for w in range(N)]
    results: dict[int, tuple[T.ParamTensor, OptState]] = {}
    res_lock = threading.Lock()

    def step_owned(w):
        for j in owned[w]:
            name, p = model[j]
            pair = _full_step_one(p, gbar[j], h.states[j], h, lr, name)
            with res_lock:
                results[j] = pair

    _parallel(N, step_owned)
    trace.add("optimizer step", 0, time.perf_counter() - t0, cost_model)

    t0 = time.perf_counter()
    model2 = [(name, results[j][0]) for j, (name, _) in enumerate(model)]
    states2 = [results[j][1] for j in range(len(model))]
    nbytes = sum(bytes_owner_broadcast(p.size, N) for _, p in model)
    trace.add("parameter gather", nbytes, time.perf_counter() - t0, cost_model)

    trace.state_bytes_per_worker = [
        sum(state_array_bytes(states2[j]) for j in owned[w]) for w in range(N)
    ]
    _adopt(h, model2, states2)
    return model2, trace


def normalization_across_shards(partials: list[FeatureStats]) -> FeatureStats:
    """Merge disjoint-shard statistics: sums of squares and counts add."""
    if not partials:
        raise DistError("no shard statistics to merge")
    d = partials[0].sumsq.shape[0]
    sumsq = np.zeros(d, dtype=np.float64)
    count = 0
    for p in partials:
        if p.sumsq.shape[0] != d:
            raise DistError("shard statistics have mismatched widths")
        sumsq += p.sumsq
        count += p.count
    return FeatureStats(sumsq=sumsq, count=count)
