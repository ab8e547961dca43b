"""Accumulator state feeding the optimizer's input features.

Per parameter tensor we keep ten exponential moving averages plus a step
counter:

    M[0..2]   momenta, coefficients beta_1..beta_3, shaped like W
    V         second moment, coefficient beta_4, shaped like W
    r[0..2]   row factors, coefficients beta_5..beta_7, length m
    c[0..2]   column factors, same coefficients, length n

No bias correction anywhere. The step counter t starts at 0 and is
incremented by state_step; time-derived features use the post-increment
value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

F32 = np.float32


@dataclass(frozen=True)
class BetaConfig:
    """EMA coefficients for the accumulator bundle, each in [0, 1].

    The defaults are placeholders used when a weights file carries no
    coefficients of its own; loaded weights override them.
    """

    momentum_betas: tuple[float, float, float] = (0.1, 0.5, 0.9)
    second_moment_beta: float = 0.999
    adafactor_betas: tuple[float, float, float] = (0.9, 0.99, 0.999)

    def __post_init__(self):
        for b in (*self.momentum_betas, self.second_moment_beta, *self.adafactor_betas):
            if not 0.0 <= b <= 1.0:
                raise ValueError(f"beta {b} outside [0, 1]")


@dataclass
class OptState:
    """Accumulators for one parameter tensor."""

    M: list[np.ndarray]
    V: np.ndarray
    r: list[np.ndarray]
    c: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, m: int, n: int) -> "OptState":
        return cls(
            M=[np.zeros((m, n), dtype=F32) for _ in range(3)],
            V=np.zeros((m, n), dtype=F32),
            r=[np.zeros(m, dtype=F32) for _ in range(3)],
            c=[np.zeros(n, dtype=F32) for _ in range(3)],
            t=0,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.V.shape

    def copy(self) -> "OptState":
        return OptState(
            M=[a.copy() for a in self.M],
            V=self.V.copy(),
            r=[a.copy() for a in self.r],
            c=[a.copy() for a in self.c],
            t=self.t,
        )


def update_momentum(M_prev: np.ndarray, g: np.ndarray, beta: float) -> np.ndarray:
    """beta * M_prev + (1 - beta) * g, elementwise in f32."""
    if M_prev.shape != g.shape:
        raise ValueError(f"shape mismatch {M_prev.shape} vs {g.shape}")
    b = F32(beta)
    return b * M_prev + (F32(1.0) - b) * g


def update_second_moment(V_prev: np.ndarray, g: np.ndarray, beta: float) -> np.ndarray:
    """beta * V_prev + (1 - beta) * g^2, elementwise in f32."""
    if V_prev.shape != g.shape:
        raise ValueError(f"shape mismatch {V_prev.shape} vs {g.shape}")
    b = F32(beta)
    return b * V_prev + (F32(1.0) - b) * np.square(g)


def update_adafactor(
    r_prev: np.ndarray, c_prev: np.ndarray, g: np.ndarray, beta: float
) -> tuple[np.ndarray, np.ndarray]:
    """EMA of the per-row and per-column means of g^2.

    Means are accumulated in f64 and rounded back to f32 so shard-wise
    recomputation in the distributed simulator agrees to ~1 ulp.
    """
    m, n = g.shape
    if m == 0 or n == 0:
        raise ValueError("adafactor factors undefined for empty tensors")
    if r_prev.shape != (m,) or c_prev.shape != (n,):
        raise ValueError(
            f"factor shapes {r_prev.shape}/{c_prev.shape} do not match gradient {g.shape}"
        )
    g2 = np.square(g, dtype=np.float64)
    row_mean = np.mean(g2, axis=1).astype(F32)
    col_mean = np.mean(g2, axis=0).astype(F32)
    b = F32(beta)
    one_m_b = F32(1.0) - b
    return b * r_prev + one_m_b * row_mean, b * c_prev + one_m_b * col_mean


def state_step(state: OptState, g: np.ndarray, betas: BetaConfig) -> OptState:
    """Advance all ten accumulators by one gradient and bump t."""
    if g.shape != state.shape:
        raise ValueError(f"gradient shape {g.shape} does not match state {state.shape}")
    if not np.isfinite(g).all():
        raise ValueError("non-finite gradient")
    M = [update_momentum(state.M[i], g, betas.momentum_betas[i]) for i in range(3)]
    V = update_second_moment(state.V, g, betas.second_moment_beta)
    r = []
    c = []
    for i in range(3):
        ri, ci = update_adafactor(state.r[i], state.c[i], g, betas.adafactor_betas[i])
        r.append(ri)
        c.append(ci)
    return OptState(M=M, V=V, r=r, c=c, t=state.t + 1)


def state_entries(prefix: str, state: OptState) -> dict[str, np.ndarray]:
    """Flatten a state into container-file entries under the given prefix."""
    out = {}
    for i in range(3):
        out[f"{prefix}/M{i}"] = state.M[i]
    out[f"{prefix}/V"] = state.V
    for i in range(3):
        out[f"{prefix}/r{i}"] = state.r[i]
        out[f"{prefix}/c{i}"] = state.c[i]
    out[f"{prefix}/t"] = np.array([[state.t]], dtype=np.int64)
    return out


def state_from_entries(prefix: str, entries: dict[str, np.ndarray]) -> OptState:
    """Inverse of state_entries."""
    return OptState(
        M=[entries[f"{prefix}/M{i}"].astype(F32) for i in range(3)],
        V=entries[f"{prefix}/V"].astype(F32),
        r=[entries[f"{prefix}/r{i}"].astype(F32).ravel() for i in range(3)],
        c=[entries[f"{prefix}/c{i}"].astype(F32).ravel() for i in range(3)],
        t=int(entries[f"{prefix}/t"].ravel()[0]),
    )
