"""Feature construction and normalization for the optimizer MLP.

Two feature sets are supported. Column order is frozen; weights files depend
on it.

SMALL_FC_LOPT, 39 columns:

    0..2    M1, M2, M3                     momenta
    3       V                              second moment
    4..6    r5, r6, r7                     row factors, broadcast down rows
    7..9    c5, c6, c7                     column factors, broadcast across columns
    10..12  M_j / sqrt(V + eps)            normalized momenta
    13      1 / sqrt(V + eps)
    14..16  1 / sqrt(r_i + eps)
    17..19  1 / sqrt(c_i + eps)
    20..22  g   * S_i                      factored-gradient features
    23..25  M_j * S_i, (i,j) in (5,1),(6,2),(7,3)
    26..36  tanh(t / x), x in {1, 3, 10, 30, 100, 300, 1e3, 3e3, 1e4, 3e4, 1e5}
    37      W
    38      g

    where S_i = sqrt(mean(r_i) / (r_i c_i^T + eps)).

VELO_MLP, 29 columns: 0..25 as above, then

    26      W
    27      g
    28      clip(g, -0.1, 0.1)

Every square-root denominator is guarded by eps_recip; a fresh all-zero state
therefore yields finite features (the reciprocal columns become 1/sqrt(eps)).
Normalization divides each column by sqrt(E[feature^2] + eps_norm), with the
expectation taken over all m*n elements of the tensor.

Scalar quantities shared across execution paths (time features, the mean of
each row factor, the normalization scale vector) are computed once by the
canonical host routines in this module so that every path consumes identical
f32 values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .state import OptState

F32 = np.float32

TIME_XS = (1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0, 1e4, 3e4, 1e5)


class FeatureSet(enum.Enum):
    SMALL_FC_LOPT = "small_fc_lopt"
    VELO_MLP = "velo_mlp"


@dataclass(frozen=True)
class FeatureSetSpec:
    id: FeatureSet
    d_feat: int
    time_xs: tuple[float, ...]
    clip_bound: float | None
    eps_recip: float = 1e-12
    eps_norm: float = 1e-5

    def __post_init__(self):
        expected = 39 if self.id is FeatureSet.SMALL_FC_LOPT else 29
        if self.d_feat != expected:
            raise ValueError(f"{self.id.value} must have {expected} columns, got {self.d_feat}")


def small_fc_lopt_spec() -> FeatureSetSpec:
    return FeatureSetSpec(
        id=FeatureSet.SMALL_FC_LOPT, d_feat=39, time_xs=TIME_XS, clip_bound=None
    )


def velo_mlp_spec() -> FeatureSetSpec:
    return FeatureSetSpec(id=FeatureSet.VELO_MLP, d_feat=29, time_xs=(), clip_bound=0.1)


def spec_by_name(name: str) -> FeatureSetSpec:
    for fs, factory in (
        (FeatureSet.SMALL_FC_LOPT, small_fc_lopt_spec),
        (FeatureSet.VELO_MLP, velo_mlp_spec),
    ):
        if name == fs.value:
            return factory()
    raise ValueError(f"unknown feature set {name!r}")


def column_names(spec: FeatureSetSpec) -> list[str]:
    base = (
        ["M1", "M2", "M3", "V", "r5", "r6", "r7", "c5", "c6", "c7"]
        + ["M1_rsqrtV", "M2_rsqrtV", "M3_rsqrtV", "rsqrt_V"]
        + ["rsqrt_r5", "rsqrt_r6", "rsqrt_r7", "rsqrt_c5", "rsqrt_c6", "rsqrt_c7"]
        + ["g_adafac5", "g_adafac6", "g_adafac7", "M1_adafac5", "M2_adafac6", "M3_adafac7"]
    )
    if spec.id is FeatureSet.SMALL_FC_LOPT:
        return base + [f"tanh_t_{x:g}" for x in spec.time_xs] + ["W", "g"]
    return base + ["W", "g", "g_clipped"]


@dataclass
class FeatureStats:
    """Column sums of squared features plus the element count behind them."""

    sumsq: np.ndarray  # (d_feat,) float64
    count: int

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("stats over zero elements")
        if np.any(self.sumsq < 0):
            raise ValueError("negative sum of squares")


# ---------------------------------------------------------------------------
# canonical per-step scalars


def time_features(t: int, spec: FeatureSetSpec) -> np.ndarray:
    """tanh(t / x) for each horizon, in f32. Empty for feature sets without them."""
    if not spec.time_xs:
        return np.zeros(0, dtype=F32)
    xs = np.array(spec.time_xs, dtype=F32)
    return np.tanh(F32(t) / xs).astype(F32)


def factor_means(state: OptState) -> tuple[np.float32, np.float32, np.float32]:
    """mean(r_i) for the three row factors, f64 accumulation rounded to f32."""
    return tuple(F32(np.mean(state.r[i], dtype=np.float64)) for i in range(3))


def normalization_scale(stats: FeatureStats, spec: FeatureSetSpec) -> np.ndarray:
    """Per-column multiplier 1 / sqrt(sumsq/count + eps_norm), as f32."""
    return (1.0 / np.sqrt(stats.sumsq / stats.count + spec.eps_norm)).astype(F32)


# ---------------------------------------------------------------------------
# feature construction


def _gathered_columns(spec, Wv, gv, M1v, M2v, M3v, Vv, r5a, r6a, r7a, c5b, c6b, c7b,
                      mr5, mr6, mr7, tf, out):
    """Fill out[:, k] for elements whose raw per-element inputs are given as
    1-D arrays. The expression trees here are the single source of truth for
    feature arithmetic; the streaming kernels mirror them operation for
    operation."""
    eps = F32(spec.eps_recip)
    one = F32(1.0)
    sv = np.sqrt(Vv + eps)
    out[:, 0] = M1v
    out[:, 1] = M2v
    out[:, 2] = M3v
    out[:, 3] = Vv
    out[:, 4] = r5a
    out[:, 5] = r6a
    out[:, 6] = r7a
    out[:, 7] = c5b
    out[:, 8] = c6b
    out[:, 9] = c7b
    out[:, 10] = M1v / sv
    out[:, 11] = M2v / sv
    out[:, 12] = M3v / sv
    out[:, 13] = one / sv
    out[:, 14] = one / np.sqrt(r5a + eps)
    out[:, 15] = one / np.sqrt(r6a + eps)
    out[:, 16] = one / np.sqrt(r7a + eps)
    out[:, 17] = one / np.sqrt(c5b + eps)
    out[:, 18] = one / np.sqrt(c6b + eps)
    out[:, 19] = one / np.sqrt(c7b + eps)
    s5 = np.sqrt(mr5 / (r5a * c5b + eps))
    s6 = np.sqrt(mr6 / (r6a * c6b + eps))
    s7 = np.sqrt(mr7 / (r7a * c7b + eps))
    out[:, 20] = gv * s5
    out[:, 21] = gv * s6
    out[:, 22] = gv * s7
    out[:, 23] = M1v * s5
    out[:, 24] = M2v * s6
    out[:, 25] = M3v * s7
    if spec.id is FeatureSet.SMALL_FC_LOPT:
        for k in range(11):
            out[:, 26 + k] = tf[k]
        out[:, 37] = Wv
        out[:, 38] = gv
    else:
        out[:, 26] = Wv
        out[:, 27] = gv
        bound = F32(spec.clip_bound)
        out[:, 28] = np.clip(gv, -bound, bound)
    return out


def build_features_range(
    W: np.ndarray,
    g: np.ndarray,
    state: OptState,
    spec: FeatureSetSpec,
    lo: int,
    hi: int,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Materialize feature rows for flat element indices [lo, hi).

    Elements are taken in row-major order. Returns a (hi-lo, d_feat) f32
    matrix.
    """
    m, n = W.shape
    idx = np.arange(lo, hi, dtype=np.int64)
    a = idx // n
    b = idx - a * n
    if out is None:
        out = np.empty((hi - lo, spec.d_feat), dtype=F32)
    mr5, mr6, mr7 = factor_means(state)
    tf = time_features(state.t, spec)
    Wf = W.ravel()
    gf = g.ravel()
    return _gathered_columns(
        spec,
        Wf[lo:hi], gf[lo:hi],
        state.M[0].ravel()[lo:hi], state.M[1].ravel()[lo:hi], state.M[2].ravel()[lo:hi],
        state.V.ravel()[lo:hi],
        state.r[0][a], state.r[1][a], state.r[2][a],
        state.c[0][b], state.c[1][b], state.c[2][b],
        mr5, mr6, mr7, tf, out,
    )


def build_features_full(
    W: np.ndarray,
    g: np.ndarray,
    state: OptState,
    spec: FeatureSetSpec,
    out: np.ndarray | None = None,
) -> np.ndarray:
    """Materialize the whole (m*n, d_feat) feature matrix in row-major
    element order.

    Column arithmetic matches _gathered_columns bit for bit; the difference
    is purely mechanical: broadcast (m, n) expressions are written straight
    into a 3-D view of the output, and the per-row / per-column reciprocal
    terms are computed once per row or column instead of once per element.
    Same f32 operations on the same values, so identical results.
    """
    m, n = W.shape
    if out is None:
        out = np.empty((m * n, spec.d_feat), dtype=F32)
    F3 = out.reshape(m, n, spec.d_feat)
    eps = F32(spec.eps_recip)
    one = F32(1.0)
    M1, M2, M3 = state.M
    V = state.V
    r5, r6, r7 = state.r
    c5, c6, c7 = state.c
    mr5, mr6, mr7 = factor_means(state)
    sv = np.sqrt(V + eps)
    F3[:, :, 0] = M1
    F3[:, :, 1] = M2
    F3[:, :, 2] = M3
    F3[:, :, 3] = V
    F3[:, :, 4] = r5[:, None]
    F3[:, :, 5] = r6[:, None]
    F3[:, :, 6] = r7[:, None]
    F3[:, :, 7] = c5[None, :]
    F3[:, :, 8] = c6[None, :]
    F3[:, :, 9] = c7[None, :]
    F3[:, :, 10] = M1 / sv
    F3[:, :, 11] = M2 / sv
    F3[:, :, 12] = M3 / sv
    F3[:, :, 13] = one / sv
    F3[:, :, 14] = (one / np.sqrt(r5 + eps))[:, None]
    F3[:, :, 15] = (one / np.sqrt(r6 + eps))[:, None]
    F3[:, :, 16] = (one / np.sqrt(r7 + eps))[:, None]
    F3[:, :, 17] = (one / np.sqrt(c5 + eps))[None, :]
    F3[:, :, 18] = (one / np.sqrt(c6 + eps))[None, :]
    F3[:, :, 19] = (one / np.sqrt(c7 + eps))[None, :]
    s5 = np.sqrt(mr5 / (r5[:, None] * c5[None, :] + eps))
    s6 = np.sqrt(mr6 / (r6[:, None] * c6[None, :] + eps))
    s7 = np.sqrt(mr7 / (r7[:, None] * c7[None, :] + eps))
    F3[:, :, 20] = g * s5
    F3[:, :, 21] = g * s6
    F3[:, :, 22] = g * s7
    F3[:, :, 23] = M1 * s5
    F3[:, :, 24] = M2 * s6
    F3[:, :, 25] = M3 * s7
    if spec.id is FeatureSet.SMALL_FC_LOPT:
        tf = time_features(state.t, spec)
        for k in range(11):
            F3[:, :, 26 + k] = tf[k]
        F3[:, :, 37] = W
        F3[:, :, 38] = g
    else:
        F3[:, :, 26] = W
        F3[:, :, 27] = g
        bound = F32(spec.clip_bound)
        F3[:, :, 28] = np.clip(g, -bound, bound)
    return out


def construct_features_at(
    idx: int, W: np.ndarray, g: np.ndarray, state: OptState, spec: FeatureSetSpec
) -> np.ndarray:
    """Feature vector for one element, by flat row-major index."""
    mn = W.size
    if not 0 <= idx < mn:
        raise IndexError(f"element index {idx} out of range for {W.shape}")
    row = build_features_range(W, g, state, spec, idx, idx + 1)
    feat = row[0]
    if not np.isfinite(feat).all():
        raise FloatingPointError(f"non-finite feature at element {idx}")
    return feat


def compute_squared_average(
    W: np.ndarray,
    g: np.ndarray,
    state: OptState,
    spec: FeatureSetSpec,
    lo: int | None = None,
    hi: int | None = None,
    block: int = 65536,
) -> FeatureStats:
    """Column sums of squared features over elements [lo, hi) (whole tensor
    by default), accumulated sequentially in f64.

    This routine is the reference reduction: the streaming path's
    tree-merged statistics are checked against it.
    """
    mn = W.size
    if mn == 0:
        raise ValueError("empty tensor")
    lo = 0 if lo is None else lo
    hi = mn if hi is None else hi
    if not 0 <= lo < hi <= mn:
        raise ValueError(f"bad element range [{lo}, {hi}) for {mn} elements")
    sumsq = np.zeros(spec.d_feat, dtype=np.float64)
    buf = np.empty((min(block, hi - lo), spec.d_feat), dtype=F32)
    for s in range(lo, hi, block):
        e = min(s + block, hi)
        rows = build_features_range(W, g, state, spec, s, e, out=buf[: e - s])
        sumsq += np.einsum("ij,ij->j", rows, rows, dtype=np.float64)
    return FeatureStats(sumsq=sumsq, count=hi - lo)


def normalize_features(
    feat: np.ndarray, stats: FeatureStats, spec: FeatureSetSpec
) -> np.ndarray:
    """Scale features to unit squared average: feat / sqrt(sumsq/count + eps_norm)."""
    scale = normalization_scale(stats, spec)
    return (feat * scale).astype(F32, copy=False)


def adafactor_scale(r: np.ndarray, c: np.ndarray, eps: float) -> np.ndarray:
    """S[a, b] = sqrt(mean(r) / (r[a] * c[b] + eps)) as an (m, n) f32 matrix."""
    r = np.asarray(r, dtype=F32)
    c = np.asarray(c, dtype=F32)
    mean_r = F32(np.mean(r, dtype=np.float64))
    return np.sqrt(mean_r / (r[:, None] * c[None, :] + F32(eps)))
