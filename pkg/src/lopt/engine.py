"""The optimizer MLP and its two execution paths.

step_naive materializes the full (m*n, d_feat) feature matrix, reduces it
column-wise for normalization statistics, normalizes in place, and runs the
MLP in row blocks: simple, correct, and O(mn * d_feat) temporary memory.

step_fused never materializes features. Two streaming passes:

    pass 1  walk the elements, build each feature vector in a small lane
            buffer, accumulate per-column sums of squares into worker-private
            f64 accumulators; merge the workers with a fixed binary tree.
    pass 2  walk the elements again, rebuild the features, fold the
            normalization scale into the first MLP layer, evaluate the MLP on
            lane blocks, and apply the update.

Temporary memory is O(workers * d_feat) plus constant-size lane buffers,
independent of the tensor. Worker count only partitions the statistics
reduction; results are deterministic for a fixed worker count regardless of
how the work is actually scheduled.

Numerical discipline: feature arithmetic in the streaming kernels is compiled
strict (no fast-math), mirrors features.py operation for operation, and is
bitwise identical to the materialized columns. Only the MLP matrix-vector
loops permit fused multiply-add contraction, which is deterministic and
changes results well below the documented 1e-5 cross-path tolerance.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import tensors as T
from .features import (
    FeatureSet,
    FeatureSetSpec,
    FeatureStats,
    build_features_full,
    compute_squared_average,
    factor_means,
    normalization_scale,
    small_fc_lopt_spec,
    spec_by_name,
    time_features,
)
from .state import BetaConfig, OptState

F32 = np.float32

# lane width of the streaming micro-batches; the per-element arithmetic does
# not depend on it, so it is a pure tuning knob
LANES = 64

# row block for the naive path's batched MLP; bounds the activation buffers
NAIVE_BLOCK = 4096

DEFAULT_ALPHA = 0.01
DEFAULT_BETA_OUT = 0.01


class EngineError(Exception):
    pass


class ScratchLimitError(EngineError):
    """A step-scoped allocation would exceed the configured scratch cap."""

    def __init__(self, label: str, requested: int, in_use: int, cap: int | None):
        self.label = label
        self.requested = requested
        self.in_use = in_use
        self.cap = cap
        cap_s = "unlimited" if cap is None else f"{cap}"
        super().__init__(
            f"scratch allocation {label!r} of {requested} bytes refused "
            f"({in_use} bytes in use, cap {cap_s})"
        )


class UpdateOverflowError(EngineError):
    """The update produced non-finite values (e.g. exp overflow)."""


class ScratchTracker:
    """Accounts for step-scoped temporary allocations, with an optional cap.

    The cap is checked before memory is touched, so an over-budget request
    fails cleanly instead of taking the process down.
    """

    def __init__(self, cap_bytes: int | None = None):
        self.cap_bytes = cap_bytes
        self.current_bytes = 0
        self.peak_bytes = 0

    def alloc(self, shape, dtype, label: str) -> np.ndarray:
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if self.cap_bytes is not None and self.current_bytes + nbytes > self.cap_bytes:
            raise ScratchLimitError(label, nbytes, self.current_bytes, self.cap_bytes)
        try:
            arr = np.empty(shape, dtype=dtype)
        except MemoryError as e:
            raise ScratchLimitError(label, nbytes, self.current_bytes, self.cap_bytes) from e
        self.current_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        return arr

    def release(self, arr: np.ndarray) -> None:
        self.current_bytes -= arr.nbytes

    def release_all(self) -> None:
        self.current_bytes = 0


@dataclass
class LoptWeights:
    """MLP parameters plus the constants the update rule needs.

    layers: list of (weight, bias), weight shaped (out, in). ReLU between
    layers, identity after the last. The last layer emits exactly two values,
    (direction, magnitude). The streaming kernels are built for the
    three-layer shape of the reference optimizers (two hidden layers); width
    is free.

    update_sign = -1 applies theta - update (the shipped kernels' behavior),
    +1 applies theta + update; kept as data for compatibility with weight
    releases that assume the other convention.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]
    alpha: float = DEFAULT_ALPHA
    beta_out: float = DEFAULT_BETA_OUT
    betas: BetaConfig = field(default_factory=BetaConfig)
    update_sign: int = -1

    def __post_init__(self):
        if not self.layers:
            raise ValueError("empty MLP")
        self.layers = [
            (np.ascontiguousarray(w, dtype=F32), np.ascontiguousarray(b, dtype=F32))
            for w, b in self.layers
        ]
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i} input dim {w.shape[1]} breaks the chain")
        if self.layers[-1][0].shape[0] != 2:
            raise ValueError("last layer must emit (direction, magnitude)")
        if self.update_sign not in (-1, 1):
            raise ValueError("update_sign must be -1 or +1")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def zero_weights(
    d_feat: int, hidden: tuple[int, ...] = (32, 32), betas: BetaConfig | None = None
) -> LoptWeights:
    """All-zero MLP of the given topology; its update is a provable no-op."""
    dims = (d_feat, *hidden, 2)
    layers = [
        (np.zeros((dims[i + 1], dims[i]), dtype=F32), np.zeros(dims[i + 1], dtype=F32))
        for i in range(len(dims) - 1)
    ]
    return LoptWeights(layers=layers, betas=betas or BetaConfig())


def random_weights(
    d_feat: int,
    hidden: tuple[int, ...] = (32, 32),
    seed: int = 0,
    scale: float = 0.2,
    betas: BetaConfig | None = None,
) -> LoptWeights:
    rng = np.random.default_rng(seed)
    dims = (d_feat, *hidden, 2)
    layers = []
    for i in range(len(dims) - 1):
        w = (rng.standard_normal((dims[i + 1], dims[i]), dtype=F32) * F32(scale))
        b = (rng.standard_normal(dims[i + 1], dtype=F32) * F32(scale * 0.5))
        layers.append((w, b))
    return LoptWeights(layers=layers, betas=betas or BetaConfig())


def weights_entries(w: LoptWeights) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    entries: dict[str, np.ndarray] = {}
    for i, (wt, b) in enumerate(w.layers):
        entries[f"mlp/w{i}"] = wt
        entries[f"mlp/b{i}"] = b
    meta = {
        "n_layers": str(w.n_layers),
        "alpha": repr(float(w.alpha)),
        "beta_out": repr(float(w.beta_out)),
        "update_sign": str(w.update_sign),
        "momentum_betas": ",".join(repr(float(b)) for b in w.betas.momentum_betas),
        "second_moment_beta": repr(float(w.betas.second_moment_beta)),
        "adafactor_betas": ",".join(repr(float(b)) for b in w.betas.adafactor_betas),
    }
    return entries, meta


def weights_from_entries(
    entries: dict[str, np.ndarray], meta: dict[str, str]
) -> LoptWeights:
    n = int(meta["n_layers"])
    layers = [(entries[f"mlp/w{i}"], entries[f"mlp/b{i}"]) for i in range(n)]
    betas = BetaConfig(
        momentum_betas=tuple(float(x) for x in meta["momentum_betas"].split(",")),
        second_moment_beta=float(meta["second_moment_beta"]),
        adafactor_betas=tuple(float(x) for x in meta["adafactor_betas"].split(",")),
    )
    return LoptWeights(
        layers=layers,
        alpha=float(meta["alpha"]),
        beta_out=float(meta["beta_out"]),
        betas=betas,
        update_sign=int(meta["update_sign"]),
    )


def save_weights(w: LoptWeights, spec: FeatureSetSpec, path) -> None:
    entries, meta = weights_entries(w)
    meta["kind"] = "lopt_weights"
    meta["feature_set"] = spec.id.value
    T.file_save(entries, meta, path)


def load_weights(path, expect: FeatureSetSpec | None = None) -> tuple[LoptWeights, FeatureSetSpec]:
    entries, meta = T.file_load(path)
    spec = spec_by_name(meta["feature_set"])
    if expect is not None and spec.id is not expect.id:
        raise T.MalformedHeaderError(
            f"weights are for feature set {spec.id.value!r}, expected {expect.id.value!r}"
        )
    w = weights_from_entries(entries, meta)
    if w.input_dim != spec.d_feat:
        raise T.MalformedHeaderError(
            f"MLP input dim {w.input_dim} does not match feature set {spec.id.value!r}"
        )
    return w, spec


@dataclass
class UpdateReport:
    tensor_name: str
    elements: int
    max_abs_update: float
    stats_pass_s: float
    apply_pass_s: float
    kernel_equivalents: int
    scratch_peak_bytes: int


# ---------------------------------------------------------------------------
# scalar reference ops


def mlp_forward(feat: np.ndarray, weights: LoptWeights) -> tuple[float, float]:
    """Run the MLP on one feature vector; returns (direction, magnitude)."""
    x = np.asarray(feat, dtype=F32)
    if x.shape != (weights.input_dim,):
        raise ValueError(f"feature vector {x.shape} does not match input dim {weights.input_dim}")
    for i, (w, b) in enumerate(weights.layers):
        x = w @ x + b
        if i < weights.n_layers - 1:
            x = np.maximum(x, F32(0.0))
    return float(x[0]), float(x[1])


def apply_update(
    theta: float, direction: float, magnitude: float, alpha: float, beta_out: float
) -> float:
    """theta - direction * exp(magnitude * alpha) * beta_out, in f32."""
    with np.errstate(over="ignore"):  # overflow becomes a typed error below
        upd = F32(direction) * np.exp(F32(magnitude) * F32(alpha)) * F32(beta_out)
    if not np.isfinite(upd):
        raise UpdateOverflowError(f"update overflowed: direction={direction}, magnitude={magnitude}")
    return float(F32(theta) - upd)


def count_kernel_equivalents(path: str, spec: FeatureSetSpec, n_layers: int = 3) -> int:
    """Bulk passes over the parameter tensor per step, by construction.

    naive: one pass per materialized feature column, one reduction per
    column, one normalization pass, one per MLP layer, one apply pass.
    fused: two streaming passes, plus the ten accumulator updates that
    precede either path.
    """
    if path == "naive":
        return 2 * spec.d_feat + n_layers + 2
    if path == "fused":
        return 2 + 10
    raise ValueError(f"unknown path {path!r}")


# ---------------------------------------------------------------------------
# streaming kernels
#
# Feature fillers are compiled strict so every operation rounds exactly like
# the numpy columns in features.py. The MLP block alone allows fp contraction.


@njit(cache=True)
def _fill_small(a, b0, nl, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                mr5, mr6, mr7, tf, eps, featT):
    one = F32(1.0)
    rv5 = r5[a]
    rv6 = r6[a]
    rv7 = r7[a]
    rr5 = one / np.sqrt(rv5 + eps)
    rr6 = one / np.sqrt(rv6 + eps)
    rr7 = one / np.sqrt(rv7 + eps)
    for l in range(nl):
        b = b0 + l
        wv = W[a, b]
        gv = g[a, b]
        m1 = M1[a, b]
        m2 = M2[a, b]
        m3 = M3[a, b]
        v = V[a, b]
        sv = np.sqrt(v + eps)
        cv5 = c5[b]
        cv6 = c6[b]
        cv7 = c7[b]
        featT[0, l] = m1
        featT[1, l] = m2
        featT[2, l] = m3
        featT[3, l] = v
        featT[4, l] = rv5
        featT[5, l] = rv6
        featT[6, l] = rv7
        featT[7, l] = cv5
        featT[8, l] = cv6
        featT[9, l] = cv7
        featT[10, l] = m1 / sv
        featT[11, l] = m2 / sv
        featT[12, l] = m3 / sv
        featT[13, l] = one / sv
        featT[14, l] = rr5
        featT[15, l] = rr6
        featT[16, l] = rr7
        featT[17, l] = one / np.sqrt(cv5 + eps)
        featT[18, l] = one / np.sqrt(cv6 + eps)
        featT[19, l] = one / np.sqrt(cv7 + eps)
        s5 = np.sqrt(mr5 / (rv5 * cv5 + eps))
        s6 = np.sqrt(mr6 / (rv6 * cv6 + eps))
        s7 = np.sqrt(mr7 / (rv7 * cv7 + eps))
        featT[20, l] = gv * s5
        featT[21, l] = gv * s6
        featT[22, l] = gv * s7
        featT[23, l] = m1 * s5
        featT[24, l] = m2 * s6
        featT[25, l] = m3 * s7
        for k in range(11):
            featT[26 + k, l] = tf[k]
        featT[37, l] = wv
        featT[38, l] = gv


@njit(cache=True)
def _fill_velo(a, b0, nl, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
               mr5, mr6, mr7, clip_bound, eps, featT):
    one = F32(1.0)
    rv5 = r5[a]
    rv6 = r6[a]
    rv7 = r7[a]
    rr5 = one / np.sqrt(rv5 + eps)
    rr6 = one / np.sqrt(rv6 + eps)
    rr7 = one / np.sqrt(rv7 + eps)
    for l in range(nl):
        b = b0 + l
        wv = W[a, b]
        gv = g[a, b]
        m1 = M1[a, b]
        m2 = M2[a, b]
        m3 = M3[a, b]
        v = V[a, b]
        sv = np.sqrt(v + eps)
        cv5 = c5[b]
        cv6 = c6[b]
        cv7 = c7[b]
        featT[0, l] = m1
        featT[1, l] = m2
        featT[2, l] = m3
        featT[3, l] = v
        featT[4, l] = rv5
        featT[5, l] = rv6
        featT[6, l] = rv7
        featT[7, l] = cv5
        featT[8, l] = cv6
        featT[9, l] = cv7
        featT[10, l] = m1 / sv
        featT[11, l] = m2 / sv
        featT[12, l] = m3 / sv
        featT[13, l] = one / sv
        featT[14, l] = rr5
        featT[15, l] = rr6
        featT[16, l] = rr7
        featT[17, l] = one / np.sqrt(cv5 + eps)
        featT[18, l] = one / np.sqrt(cv6 + eps)
        featT[19, l] = one / np.sqrt(cv7 + eps)
        s5 = np.sqrt(mr5 / (rv5 * cv5 + eps))
        s6 = np.sqrt(mr6 / (rv6 * cv6 + eps))
        s7 = np.sqrt(mr7 / (rv7 * cv7 + eps))
        featT[20, l] = gv * s5
        featT[21, l] = gv * s6
        featT[22, l] = gv * s7
        featT[23, l] = m1 * s5
        featT[24, l] = m2 * s6
        featT[25, l] = m3 * s7
        featT[26, l] = wv
        featT[27, l] = gv
        cg = gv
        if cg > clip_bound:
            cg = clip_bound
        elif cg < -clip_bound:
            cg = -clip_bound
        featT[28, l] = cg


@njit(cache=True)
def _accum_sq(featT, d_feat, nl, partial):
    for k in range(d_feat):
        s = 0.0
        for l in range(nl):
            fv = np.float64(featT[k, l])
            s += fv * fv
        partial[k] += s


@njit(cache=True, fastmath={"contract"})
def _mlp_lanes(featT, w1, b1, w2, b2, w3, b3, h1, h2, direction, magnitude):
    d_feat = w1.shape[1]
    H1 = w1.shape[0]
    H2 = w2.shape[0]
    zero = F32(0.0)
    for o in range(H1):
        bo = b1[o]
        for l in range(LANES):
            h1[o, l] = bo
    for j in range(d_feat):
        for o in range(H1):
            wv = w1[o, j]
            for l in range(LANES):
                h1[o, l] += wv * featT[j, l]
    for o in range(H1):
        for l in range(LANES):
            if h1[o, l] < zero:
                h1[o, l] = zero
    for o in range(H2):
        bo = b2[o]
        for l in range(LANES):
            h2[o, l] = bo
    for j in range(H1):
        for o in range(H2):
            wv = w2[o, j]
            for l in range(LANES):
                h2[o, l] += wv * h1[j, l]
    for o in range(H2):
        for l in range(LANES):
            if h2[o, l] < zero:
                h2[o, l] = zero
    for l in range(LANES):
        d = b3[0]
        mg = b3[1]
        for j in range(H2):
            d += w3[0, j] * h2[j, l]
            mg += w3[1, j] * h2[j, l]
        direction[l] = d
        magnitude[l] = mg


@njit(cache=True)
def _pass1_small(ranges, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                 mr5, mr6, mr7, tf, eps, featT, partials):
    n = W.shape[1]
    for w in range(ranges.shape[0]):
        i = ranges[w, 0]
        hi = ranges[w, 1]
        while i < hi:
            a = i // n
            b0 = i - a * n
            nl = min(min(LANES, n - b0), hi - i)
            _fill_small(a, b0, nl, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                        mr5, mr6, mr7, tf, eps, featT)
            _accum_sq(featT, 39, nl, partials[w])
            i += nl


@njit(cache=True)
def _pass1_velo(ranges, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                mr5, mr6, mr7, clip_bound, eps, featT, partials):
    n = W.shape[1]
    for w in range(ranges.shape[0]):
        i = ranges[w, 0]
        hi = ranges[w, 1]
        while i < hi:
            a = i // n
            b0 = i - a * n
            nl = min(min(LANES, n - b0), hi - i)
            _fill_velo(a, b0, nl, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                       mr5, mr6, mr7, clip_bound, eps, featT)
            _accum_sq(featT, 29, nl, partials[w])
            i += nl


@njit(cache=True)
def _pass2_small(lo, hi, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                 mr5, mr6, mr7, tf, eps, w1s, b1, w2, b2, w3, b3,
                 alpha, beta_out, ds, featT, h1, h2, direction, magnitude, out):
    n = W.shape[1]
    maxabs = F32(0.0)
    i = lo
    while i < hi:
        a = i // n
        b0 = i - a * n
        nl = min(min(LANES, n - b0), hi - i)
        _fill_small(a, b0, nl, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                    mr5, mr6, mr7, tf, eps, featT)
        if nl < LANES:
            for k in range(39):
                for l in range(nl, LANES):
                    featT[k, l] = F32(0.0)
        _mlp_lanes(featT, w1s, b1, w2, b2, w3, b3, h1, h2, direction, magnitude)
        for l in range(nl):
            b = b0 + l
            upd = direction[l] * np.exp(magnitude[l] * alpha) * beta_out
            out[a, b] = W[a, b] + ds * upd
            au = abs(ds * upd)
            if au > maxabs:
                maxabs = au
        i += nl
    return maxabs


@njit(cache=True)
def _pass2_velo(lo, hi, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                mr5, mr6, mr7, clip_bound, eps, w1s, b1, w2, b2, w3, b3,
                alpha, beta_out, ds, featT, h1, h2, direction, magnitude, out):
    n = W.shape[1]
    maxabs = F32(0.0)
    i = lo
    while i < hi:
        a = i // n
        b0 = i - a * n
        nl = min(min(LANES, n - b0), hi - i)
        _fill_velo(a, b0, nl, W, g, M1, M2, M3, V, r5, r6, r7, c5, c6, c7,
                   mr5, mr6, mr7, clip_bound, eps, featT)
        if nl < LANES:
            for k in range(29):
                for l in range(nl, LANES):
                    featT[k, l] = F32(0.0)
        _mlp_lanes(featT, w1s, b1, w2, b2, w3, b3, h1, h2, direction, magnitude)
        for l in range(nl):
            b = b0 + l
            upd = direction[l] * np.exp(magnitude[l] * alpha) * beta_out
            out[a, b] = W[a, b] + ds * upd
            au = abs(ds * upd)
            if au > maxabs:
                maxabs = au
        i += nl
    return maxabs


# ---------------------------------------------------------------------------
# step entry points


def _unwrap(x) -> np.ndarray:
    return x.data if isinstance(x, T.ParamTensor) else np.asarray(x, dtype=F32)


def _check_step_inputs(W, g, state: OptState, weights: LoptWeights, spec: FeatureSetSpec):
    if W.shape != g.shape or W.shape != state.shape:
        raise EngineError(
            f"shape mismatch: W {W.shape}, g {g.shape}, state {state.shape}"
        )
    if weights.input_dim != spec.d_feat:
        raise EngineError(
            f"MLP input dim {weights.input_dim} does not match feature set "
            f"({spec.d_feat} columns)"
        )
    if W.size == 0:
        raise EngineError("empty tensor")


def worker_ranges(lo: int, hi: int, workers: int) -> np.ndarray:
    """Split [lo, hi) into `workers` contiguous ranges with sizes within 1."""
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    span = hi - lo
    bounds = [lo + span * w // workers for w in range(workers + 1)]
    return np.array(
        [[bounds[w], bounds[w + 1]] for w in range(workers)], dtype=np.int64
    )


def merge_partials_tree(partials: np.ndarray) -> np.ndarray:
    """Fixed binary-tree reduction of worker partials, in place; returns row 0."""
    step = 1
    P = partials.shape[0]
    while step < P:
        for i in range(0, P - step, 2 * step):
            partials[i] += partials[i + step]
        step *= 2
    return partials[0]


def fused_stats(
    W,
    g,
    state: OptState,
    spec: FeatureSetSpec,
    workers: int = 1,
    tracker: ScratchTracker | None = None,
    lo: int | None = None,
    hi: int | None = None,
) -> FeatureStats:
    """Streaming pass 1: squared-feature sums over [lo, hi) without
    materializing anything of tensor size."""
    W = _unwrap(W)
    g = _unwrap(g)
    tr = tracker or ScratchTracker()
    mn = W.size
    lo = 0 if lo is None else lo
    hi = mn if hi is None else hi
    ranges = worker_ranges(lo, hi, workers)
    partials = tr.alloc((workers, spec.d_feat), np.float64, "stats partials")
    partials[:] = 0.0
    featT = tr.alloc((spec.d_feat, LANES), F32, "lane features")
    mr5, mr6, mr7 = factor_means(state)
    tf = time_features(state.t, spec)
    eps = F32(spec.eps_recip)
    args = (W, g, state.M[0], state.M[1], state.M[2], state.V,
            state.r[0], state.r[1], state.r[2], state.c[0], state.c[1], state.c[2],
            mr5, mr6, mr7)
    if spec.id is FeatureSet.SMALL_FC_LOPT:
        _pass1_small(ranges, *args, tf, eps, featT, partials)
    else:
        _pass1_velo(ranges, *args, F32(spec.clip_bound), eps, featT, partials)
    sumsq = merge_partials_tree(partials).copy()
    tr.release(featT)
    tr.release(partials)
    return FeatureStats(sumsq=sumsq, count=hi - lo)


def fused_apply(
    W,
    g,
    state: OptState,
    weights: LoptWeights,
    spec: FeatureSetSpec,
    stats: FeatureStats,
    out: np.ndarray,
    lr: float = 1.0,
    tracker: ScratchTracker | None = None,
    lo: int | None = None,
    hi: int | None = None,
) -> float:
    """Streaming pass 2 over [lo, hi): recompute features, normalize via the
    first-layer fold, run the MLP, apply updates into `out`. Returns
    max |update| over the range."""
    W = _unwrap(W)
    g = _unwrap(g)
    tr = tracker or ScratchTracker()
    if weights.n_layers != 3:
        raise EngineError(
            "the streaming path supports the reference three-layer MLP topology; "
            f"got {weights.n_layers} layers"
        )
    mn = W.size
    lo = 0 if lo is None else lo
    hi = mn if hi is None else hi
    scale = normalization_scale(stats, spec)
    (w1, b1), (w2, b2), (w3, b3) = weights.layers
    w1s = w1 * scale[None, :]
    featT = tr.alloc((spec.d_feat, LANES), F32, "lane features")
    h1 = tr.alloc((w1.shape[0], LANES), F32, "lane hidden 1")
    h2 = tr.alloc((w2.shape[0], LANES), F32, "lane hidden 2")
    direction = tr.alloc((LANES,), F32, "lane direction")
    magnitude = tr.alloc((LANES,), F32, "lane magnitude")
    mr5, mr6, mr7 = factor_means(state)
    tf = time_features(state.t, spec)
    eps = F32(spec.eps_recip)
    ds = F32(weights.update_sign) * F32(lr)
    args = (W, g, state.M[0], state.M[1], state.M[2], state.V,
            state.r[0], state.r[1], state.r[2], state.c[0], state.c[1], state.c[2],
            mr5, mr6, mr7)
    if spec.id is FeatureSet.SMALL_FC_LOPT:
        maxabs = _pass2_small(lo, hi, *args, tf, eps, w1s, b1, w2, b2, w3, b3,
                              F32(weights.alpha), F32(weights.beta_out), ds,
                              featT, h1, h2, direction, magnitude, out)
    else:
        maxabs = _pass2_velo(lo, hi, *args, F32(spec.clip_bound), eps,
                             w1s, b1, w2, b2, w3, b3,
                             F32(weights.alpha), F32(weights.beta_out), ds,
                             featT, h1, h2, direction, magnitude, out)
    for buf in (featT, h1, h2, direction, magnitude):
        tr.release(buf)
    return float(maxabs)


def step_fused(
    W,
    g,
    state: OptState,
    weights: LoptWeights,
    spec: FeatureSetSpec | None = None,
    lr: float = 1.0,
    workers: int = 1,
    tracker: ScratchTracker | None = None,
    tensor_name: str = "",
) -> tuple[T.ParamTensor, UpdateReport]:
    """Two-pass streaming step. State must already be advanced for this
    gradient (state_step), matching the pipeline order."""
    spec = spec or small_fc_lopt_spec()
    Wd = _unwrap(W)
    gd = _unwrap(g)
    _check_step_inputs(Wd, gd, state, weights, spec)
    tr = tracker or ScratchTracker()
    t0 = time.perf_counter()
    stats = fused_stats(Wd, gd, state, spec, workers=workers, tracker=tr)
    t1 = time.perf_counter()
    out = np.empty_like(Wd)
    maxabs = fused_apply(Wd, gd, state, weights, spec, stats, out, lr=lr, tracker=tr)
    t2 = time.perf_counter()
    if not np.isfinite(out).all():
        raise UpdateOverflowError(f"non-finite parameters after fused step {tensor_name!r}")
    report = UpdateReport(
        tensor_name=tensor_name,
        elements=Wd.size,
        max_abs_update=maxabs,
        stats_pass_s=t1 - t0,
        apply_pass_s=t2 - t1,
        kernel_equivalents=count_kernel_equivalents("fused", spec),
        scratch_peak_bytes=tr.peak_bytes,
    )
    return T.ParamTensor(out), report


def step_naive(
    W,
    g,
    state: OptState,
    weights: LoptWeights,
    spec: FeatureSetSpec | None = None,
    lr: float = 1.0,
    tracker: ScratchTracker | None = None,
    tensor_name: str = "",
) -> tuple[T.ParamTensor, UpdateReport]:
    """Materializing step: full feature matrix, column reductions,
    normalization, blocked MLP, apply. Scratch grows with mn * d_feat, and
    the feature-matrix allocation is what trips the scratch cap at scale."""
    spec = spec or small_fc_lopt_spec()
    Wd = _unwrap(W)
    gd = _unwrap(g)
    _check_step_inputs(Wd, gd, state, weights, spec)
    tr = tracker or ScratchTracker()
    mn = Wd.size
    t0 = time.perf_counter()
    F = tr.alloc((mn, spec.d_feat), F32, "feature matrix")
    build_features_full(Wd, gd, state, spec, out=F)
    sumsq = np.zeros(spec.d_feat, dtype=np.float64)
    for s in range(0, mn, NAIVE_BLOCK):
        blk = F[s : s + NAIVE_BLOCK]
        sumsq += np.einsum("ij,ij->j", blk, blk, dtype=np.float64)
    stats = FeatureStats(sumsq=sumsq, count=mn)
    scale = normalization_scale(stats, spec)
    F *= scale[None, :]
    t1 = time.perf_counter()

    n_out = weights.layers[-1][0].shape[0]
    widths = [w.shape[0] for w, _ in weights.layers]
    act_a = tr.alloc((NAIVE_BLOCK, max(widths)), F32, "mlp activations a")
    act_b = tr.alloc((NAIVE_BLOCK, max(widths)), F32, "mlp activations b")
    out = np.empty_like(Wd)
    outf = out.ravel()
    Wf = Wd.ravel()
    ds = F32(weights.update_sign) * F32(lr)
    alpha = F32(weights.alpha)
    beta_out = F32(weights.beta_out)
    maxabs = 0.0
    for s in range(0, mn, NAIVE_BLOCK):
        e = min(s + NAIVE_BLOCK, mn)
        rows = e - s
        x = F[s:e]
        bufs = (act_a, act_b)
        for i, (w, b) in enumerate(weights.layers):
            y = bufs[i % 2][:rows, : w.shape[0]]
            np.matmul(x, w.T, out=y)
            y += b
            if i < weights.n_layers - 1:
                np.maximum(y, F32(0.0), out=y)
            x = y
        with np.errstate(over="ignore"):  # overflow becomes a typed error below
            upd = x[:, 0] * np.exp(x[:, 1] * alpha) * beta_out
        upd *= ds
        np.add(Wf[s:e], upd, out=outf[s:e])
        blk_max = float(np.max(np.abs(upd))) if rows else 0.0
        maxabs = max(maxabs, blk_max)
    t2 = time.perf_counter()
    if not np.isfinite(out).all():
        raise UpdateOverflowError(f"non-finite parameters after naive step {tensor_name!r}")
    tr.release(act_a)
    tr.release(act_b)
    tr.release(F)
    report = UpdateReport(
        tensor_name=tensor_name,
        elements=mn,
        max_abs_update=maxabs,
        stats_pass_s=t1 - t0,
        apply_pass_s=t2 - t1,
        kernel_equivalents=count_kernel_equivalents("naive", spec, weights.n_layers),
        scratch_peak_bytes=tr.peak_bytes,
    )
    return T.ParamTensor(out), report
