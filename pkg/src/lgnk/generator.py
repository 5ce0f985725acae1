"""Per-Fourier-mode latent generators.

The generator at retained mode k is an r x r real matrix assembled from a
shared skew-symmetric coupling matrix S = (P - P^T)/2 and a positive diagonal
damping D_k = diag(softplus(d) + softplus(alpha) * |k|^2 / ksq_max). Because S
has a purely imaginary spectrum and D_k is positive, every eigenvalue of
S - D_k lies in Re(lambda) <= -min_i softplus(d_i): stability holds for any
parameter values, trained or not.

Three ablation variants share the machinery: ``s_only`` (no damping),
``d_only`` (no coupling) and ``unconstrained`` (full matrix plus signed
k-dependent diagonal, no structural guarantee).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lgnk import numkern

__all__ = [
    "VARIANTS",
    "GeneratorParams",
    "ModeGrid",
    "DispersionPoint",
    "softplus",
    "sigmoid",
    "build_skew",
    "build_dissipation",
    "assemble",
    "propagate",
    "spectrum",
    "dominant_eigs",
    "interpretable_count",
    "used_fields",
]

VARIANTS = ("sd", "unconstrained", "s_only", "d_only")


def softplus(x):
    """log(1 + e^x) with the overflow-safe branch above x = 20."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 20.0, x + np.log1p(np.exp(-np.clip(x, 20.0, None))),
                   np.log1p(np.exp(np.clip(x, None, 20.0))))
    return out if out.ndim else float(out)


def sigmoid(x):
    """Derivative of softplus."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class GeneratorParams:
    """Raw generator parameters plus the structural variant tag.

    ``P`` is the free matrix behind S (the full matrix A for the
    unconstrained variant), ``d`` the base damping pre-softplus (the signed
    diagonal b for unconstrained), ``alpha`` the Laplacian coefficient
    pre-softplus. Unused fields for a variant are None.
    """

    variant: str
    P: np.ndarray | None = None
    d: np.ndarray | None = None
    alpha: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown generator variant {self.variant!r}; expected one of {VARIANTS}")
        used = _used_fields(self.variant)
        for name in ("P", "d", "alpha"):
            val = getattr(self, name)
            if name in used and val is None:
                raise ValueError(f"variant {self.variant!r} requires field {name!r}")
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=np.float64))

    @property
    def r(self) -> int:
        return int(self.P.shape[0]) if self.P is not None else int(self.d.shape[0])


def used_fields(variant: str) -> tuple[str, ...]:
    """Raw parameter fields a variant actually owns."""
    return {
        "sd": ("P", "d", "alpha"),
        "unconstrained": ("P", "d"),
        "s_only": ("P",),
        "d_only": ("d", "alpha"),
    }[variant]


_used_fields = used_fields


def interpretable_count(variant: str, r: int) -> int:
    """Number of free generator parameters reported for interpretation."""
    counts = {
        "sd": r * (r - 1) // 2 + 2 * r,
        "unconstrained": r * r + r,
        "s_only": r * (r - 1) // 2,
        "d_only": 2 * r,
    }
    return counts[variant]


@dataclass
class ModeGrid:
    """The retained one-sided block of wavevectors k_x, k_y in {0..M-1}."""

    M: int
    wavevectors: list[tuple[int, int]] = field(init=False)
    ksq: np.ndarray = field(init=False)
    ksq_max: float = field(init=False)

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("ModeGrid needs M >= 1")
        self.wavevectors = [(i, j) for i in range(self.M) for j in range(self.M)]
        self.ksq = np.array([float(i * i + j * j) for i, j in self.wavevectors])
        self.ksq_max = float(2 * (self.M - 1) ** 2) if self.M > 1 else 1.0

    @property
    def n_modes(self) -> int:
        return self.M * self.M


@dataclass
class DispersionPoint:
    """One generator eigenvalue tagged with its wavevector and branch id."""

    mode: tuple[int, int]
    ksq: float
    lam: complex
    branch: int


def build_skew(P: np.ndarray) -> np.ndarray:
    """S = (P - P^T)/2 with S + S^T = 0 exact in floating point.

    The strict lower triangle is the explicit negation of the upper one and
    the diagonal is written as exact zero, so skewness holds bitwise.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"build_skew expects a square matrix, got {P.shape}")
    S = (P - P.T) / 2.0
    S = np.triu(S, 1)
    S = S - S.T
    np.fill_diagonal(S, 0.0)
    return S


def build_dissipation(d: np.ndarray, alpha: np.ndarray, ksq: float, ksq_max: float) -> np.ndarray:
    """Positive damping vector softplus(d) + softplus(alpha) * ksq/ksq_max."""
    if not 0.0 <= ksq <= ksq_max:
        raise ValueError(f"ksq={ksq} outside [0, {ksq_max}]")
    return softplus(d) + softplus(alpha) * (ksq / ksq_max)


def _dissipation_stack(params: GeneratorParams, grid: ModeGrid) -> np.ndarray:
    """(n_modes, r) damping diagonal values for the sd/d_only variants."""
    w = grid.ksq[:, None] / grid.ksq_max
    return softplus(params.d)[None, :] + softplus(params.alpha)[None, :] * w


def assemble(params: GeneratorParams, grid: ModeGrid) -> np.ndarray:
    """Stack of per-mode generators, shape (M^2, r, r), in grid order."""
    r = params.r
    nm = grid.n_modes
    if params.variant == "s_only":
        S = build_skew(params.P)
        return np.broadcast_to(S, (nm, r, r)).copy()
    if params.variant == "d_only":
        L = np.zeros((nm, r, r))
        diag = -_dissipation_stack(params, grid)
        L[:, np.arange(r), np.arange(r)] = diag
        return L
    if params.variant == "unconstrained":
        L = np.broadcast_to(params.P, (nm, r, r)).copy()
        w = grid.ksq[:, None] / grid.ksq_max
        L[:, np.arange(r), np.arange(r)] += params.d[None, :] * w
        return L
    S = build_skew(params.P)
    L = np.broadcast_to(S, (nm, r, r)).copy()
    L[:, np.arange(r), np.arange(r)] -= _dissipation_stack(params, grid)
    return L


def propagate(C0: np.ndarray, params: GeneratorParams, grid: ModeGrid, t: float) -> np.ndarray:
    """Advance truncated coefficients: C_t[k] = exp(L_k * t) C_0[k].

    C0 has shape (r, M, M) complex; the real exponential acts separately on
    real and imaginary parts. Stable variants reject t < 0 because the
    contractivity guarantee only covers forward time.
    """
    C0 = np.asarray(C0, dtype=np.complex128)
    r, M = params.r, grid.M
    if C0.shape != (r, M, M):
        raise ValueError(f"C0 shape {C0.shape} != ({r}, {M}, {M})")
    if t < 0.0 and params.variant != "unconstrained":
        raise ValueError(
            f"negative time t={t} is outside the contractive-forward contract of variant {params.variant!r}"
        )
    E = numkern.expm(assemble(params, grid) * t)
    flat = C0.reshape(r, -1)
    out = np.einsum("kij,jk->ik", E, flat)
    return out.reshape(r, M, M)


def spectrum(params: GeneratorParams, grid: ModeGrid) -> list[DispersionPoint]:
    """All r * M^2 eigenvalues with branch ids traced across wavenumbers.

    Modes are visited by ascending |k|^2 (ties lexicographic). Branches are
    seeded at the first mode by (Im, Re) sort order and continued by greedy
    nearest-neighbor matching against the previous mode's branch values.
    """
    Ls = assemble(params, grid)
    order = sorted(range(grid.n_modes), key=lambda i: (grid.ksq[i], grid.wavevectors[i]))
    points: list[DispersionPoint] = []
    prev: np.ndarray | None = None
    for mode_idx in order:
        try:
            vals = numkern.eig(Ls[mode_idx]).values
        except numkern.NoConvergence as exc:
            exc.mode = grid.wavevectors[mode_idx]
            exc.args = (f"{exc.args[0]} at mode {exc.mode}",)
            raise
        if prev is None:
            idx = np.lexsort((vals.real, vals.imag))
            assigned = vals[idx]
        else:
            assigned = _greedy_match(prev, vals)
        for b in range(params.r):
            points.append(
                DispersionPoint(
                    mode=grid.wavevectors[mode_idx],
                    ksq=float(grid.ksq[mode_idx]),
                    lam=complex(assigned[b]),
                    branch=b,
                )
            )
        prev = assigned
    return points


def _greedy_match(prev: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Assign vals to branches by repeatedly taking the globally closest pair."""
    r = prev.shape[0]
    dist = np.abs(prev[:, None] - vals[None, :])
    assigned = np.empty(r, dtype=np.complex128)
    free_b = np.ones(r, dtype=bool)
    free_v = np.ones(r, dtype=bool)
    big = np.inf
    for _ in range(r):
        masked = np.where(free_b[:, None] & free_v[None, :], dist, big)
        flat = int(np.argmin(masked))
        b, v = divmod(flat, r)
        assigned[b] = vals[v]
        free_b[b] = False
        free_v[v] = False
    return assigned


def dominant_eigs(params: GeneratorParams, grid: ModeGrid) -> np.ndarray:
    """Per-mode eigenvalue with maximal real part, in grid order.

    Ties on the real part go to the larger |Im|, then to positive Im, so the
    result is deterministic on conjugate pairs.
    """
    Ls = assemble(params, grid)
    out = np.empty(grid.n_modes, dtype=np.complex128)
    for i in range(grid.n_modes):
        vals = numkern.eig(Ls[i]).values
        order = np.lexsort((vals.imag, np.abs(vals.imag), vals.real))
        out[i] = vals[order[-1]]
    return out
