"""Deterministic numerical kernels shared by every other module.

All kernels operate on plain numpy arrays in float64/complex128. The matrix
exponential, the non-symmetric eigensolver and the singular value routine are
implemented here rather than delegated to LAPACK wrappers so that their
algorithmic behaviour (fixed Pade degree, explicit convergence policy,
iteration counts on failure) is fully pinned down; tests cross-check them
against independent oracles.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "NoConvergence",
    "DegenerateFit",
    "LinFit",
    "fft2",
    "expm",
    "expm_adjoint",
    "eig",
    "singvals",
    "linfit",
    "expm_matrix_count",
    "reset_expm_matrix_count",
]


class NoConvergence(RuntimeError):
    """QR iteration exhausted its sweep budget.

    Carries ``iterations`` (sweeps performed) and ``order`` (matrix order).
    """

    def __init__(self, iterations: int, order: int):
        self.iterations = iterations
        self.order = order
        super().__init__(
            f"eigenvalue iteration did not converge after {iterations} sweeps "
            f"(matrix order {order})"
        )


class DegenerateFit(ValueError):
    """Least-squares fit is undefined (all abscissae identical)."""


# Count of individual matrix exponentials evaluated, used by the O(1)
# evaluation diagnostics. Plain module counter; callers reset around the
# region they want to measure.
_EXPM_MATRIX_COUNT = 0


def expm_matrix_count() -> int:
    return _EXPM_MATRIX_COUNT


def reset_expm_matrix_count() -> None:
    global _EXPM_MATRIX_COUNT
    _EXPM_MATRIX_COUNT = 0


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------

def fft2(field: np.ndarray, direction: str = "forward") -> np.ndarray:
    """2D DFT over the trailing two axes.

    Forward is the unnormalized DFT; inverse carries the 1/n^2 factor, so
    ``fft2(fft2(x), "inverse") == x``. Grid-size validation (power of two)
    happens at model-configuration time, not here.
    """
    if field.ndim < 2:
        raise ValueError(f"fft2 expects at least 2 axes, got shape {field.shape}")
    if direction == "forward":
        return np.fft.fft2(field, axes=(-2, -1))
    if direction == "inverse":
        return np.fft.ifft2(field, axes=(-2, -1))
    raise ValueError(f"unknown fft2 direction {direction!r}")


# ---------------------------------------------------------------------------
# Matrix exponential: diagonal Pade of degree 13 with scaling-and-squaring
# ---------------------------------------------------------------------------

# Degree-13 Pade numerator coefficients and the standard 1-norm threshold.
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152


def _pade13(A: np.ndarray) -> np.ndarray:
    """exp(A) for a batch (..., m, m) with ||A||_1 already <= theta_13."""
    b = _PADE13
    m = A.shape[-1]
    ident = np.broadcast_to(np.eye(m), A.shape)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    U = A @ (
        A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
        + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident
    )
    V = (
        A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
        + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    )
    return np.linalg.solve(V - U, V + U)


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential of real matrices, batched over leading axes.

    Scaling-and-squaring with a single degree-13 diagonal Pade approximant:
    s = max(0, ceil(log2(||A||_1 / theta_13))) per matrix. The per-matrix
    result does not depend on what else is in the batch.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expm expects square matrices, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("expm requires finite entries")

    global _EXPM_MATRIX_COUNT
    batch_shape = A.shape[:-2]
    m = A.shape[-1]
    flat = A.reshape(-1, m, m)
    _EXPM_MATRIX_COUNT += flat.shape[0]

    norm1 = np.abs(flat).sum(axis=-2).max(axis=-1)
    s = np.zeros(flat.shape[0], dtype=np.int64)
    over = norm1 > _THETA13
    s[over] = np.ceil(np.log2(norm1[over] / _THETA13)).astype(np.int64)

    out = np.empty_like(flat)
    zero = norm1 == 0.0
    if zero.any():
        out[zero] = np.eye(m)
    for s_val in np.unique(s[~zero]) if zero.any() else np.unique(s):
        idx = np.nonzero((s == s_val) & ~zero)[0]
        if idx.size == 0:
            continue
        E = _pade13(flat[idx] / (2.0 ** s_val))
        for _ in range(int(s_val)):
            E = E @ E
        out[idx] = E
    return out.reshape(*batch_shape, m, m)


def expm_adjoint(A: np.ndarray, t: float, Gbar: np.ndarray) -> np.ndarray:
    """Gradient of <Gbar, exp(A*t)> with respect to A.

    Uses the block-matrix Frechet identity: the derivative is t times the
    upper-right block of exp([[A^T t, Gbar], [0, A^T t]]). Batched over
    leading axes like :func:`expm`.
    """
    A = np.asarray(A, dtype=np.float64)
    Gbar = np.asarray(Gbar, dtype=np.float64)
    if A.shape != Gbar.shape or A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(
            f"expm_adjoint expects matching square matrices, got {A.shape} and {Gbar.shape}"
        )
    m = A.shape[-1]
    At = np.swapaxes(A, -1, -2) * t
    block = np.zeros(A.shape[:-2] + (2 * m, 2 * m))
    block[..., :m, :m] = At
    block[..., :m, m:] = Gbar
    block[..., m:, m:] = At
    return t * expm(block)[..., :m, m:]


# ---------------------------------------------------------------------------
# Non-symmetric eigensolver: balancing + Hessenberg + Francis double-shift QR
# ---------------------------------------------------------------------------

_EIG_TOL = 1e-12
_EIG_MAX_ORDER = 256


class EigenSet:
    """Eigenvalues of one real matrix: ``values`` (complex) and ``source_dim``."""

    __slots__ = ("values", "source_dim")

    def __init__(self, values: np.ndarray, source_dim: int):
        self.values = np.asarray(values, dtype=np.complex128)
        self.source_dim = source_dim
        if self.values.shape != (source_dim,):
            raise ValueError("EigenSet length must equal source_dim")


def _balance(A: np.ndarray) -> np.ndarray:
    """Parlett-Reinsch diagonal balancing (radix 2); similarity transform."""
    B = A.copy()
    n = B.shape[0]
    radix = 2.0
    while True:
        done = True
        for i in range(n):
            c = np.abs(B[:, i]).sum() - abs(B[i, i])
            r = np.abs(B[i, :]).sum() - abs(B[i, i])
            if c == 0.0 or r == 0.0:
                continue
            f = 1.0
            s = c + r
            while c < r / radix:
                c *= radix
                r /= radix
                f *= radix
            while c >= r * radix:
                c /= radix
                r *= radix
                f /= radix
            if (c + r) < 0.95 * s:
                done = False
                B[:, i] *= f
                B[i, :] /= f
        if done:
            return B


def _hessenberg(A: np.ndarray) -> np.ndarray:
    """Householder reduction to upper Hessenberg form (similarity)."""
    H = A.copy()
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k]
        nx = np.linalg.norm(x)
        if nx == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(nx, x[0]) if x[0] != 0.0 else nx
        nv = np.linalg.norm(v)
        if nv == 0.0:
            continue
        v /= nv
        H[k + 1:, k:] -= 2.0 * np.outer(v, v @ H[k + 1:, k:])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
        H[k + 2:, k] = 0.0
    return H


def _eig2x2(a: float, b: float, c: float, d: float) -> tuple[complex, complex]:
    """Eigenvalues of [[a, b], [c, d]], exact conjugates when complex."""
    tr = a + d
    disc = (a - d) * (a - d) / 4.0 + b * c
    if disc >= 0.0:
        rad = math.sqrt(disc)
        # Stable splitting to avoid cancellation in the smaller root.
        if tr >= 0.0:
            lam1 = tr / 2.0 + rad
        else:
            lam1 = tr / 2.0 - rad
        det = a * d - b * c
        lam2 = det / lam1 if lam1 != 0.0 else tr / 2.0 - math.copysign(rad, tr)
        return complex(lam1), complex(lam2)
    rad = math.sqrt(-disc)
    return complex(tr / 2.0, rad), complex(tr / 2.0, -rad)


def _francis_sweep(H: np.ndarray, lo: int, hi: int, exceptional: bool) -> None:
    """One implicit double-shift QR sweep on the active block H[lo:hi+1]."""
    if exceptional:
        # LAPACK-style ad-hoc shift to break rare convergence cycles.
        s_ex = abs(H[hi, hi - 1]) + (abs(H[hi - 1, hi - 2]) if hi - 1 > lo else 0.0)
        a = 0.75 * s_ex + H[hi, hi]
        b = -0.4375 * s_ex
        c = s_ex
        d = a
    else:
        a = H[hi - 1, hi - 1]
        b = H[hi - 1, hi]
        c = H[hi, hi - 1]
        d = H[hi, hi]
    tr = a + d
    det = a * d - b * c

    x = H[lo, lo] * H[lo, lo] + H[lo, lo + 1] * H[lo + 1, lo] - tr * H[lo, lo] + det
    y = H[lo + 1, lo] * (H[lo, lo] + H[lo + 1, lo + 1] - tr)
    z = H[lo + 2, lo + 1] * H[lo + 1, lo] if hi - lo > 1 else 0.0

    for k in range(lo, hi):
        vlen = 3 if k + 2 <= hi else 2
        vec = np.array([x, y, z][:vlen])
        nv = np.linalg.norm(vec)
        if nv != 0.0:
            v = vec.copy()
            v[0] += math.copysign(nv, vec[0]) if vec[0] != 0.0 else nv
            nrm = np.linalg.norm(v)
            if nrm != 0.0:
                v /= nrm
                j0 = max(lo, k - 1)
                rows = slice(k, k + vlen)
                H[rows, j0:hi + 1] -= 2.0 * np.outer(v, v @ H[rows, j0:hi + 1])
                r1 = min(k + vlen, hi) + 1
                H[lo:r1, rows] -= 2.0 * np.outer(H[lo:r1, rows] @ v, v)
        if k + 1 < hi:
            x = H[k + 1, k]
            y = H[k + 2, k]
            z = H[k + 3, k] if k + 3 <= hi else 0.0


def eig(A: np.ndarray) -> EigenSet:
    """Eigenvalues of a real square matrix (order <= 256, diagnostic scale).

    Balancing, Householder Hessenberg reduction, then Francis double-shift QR
    with deflation when a subdiagonal entry drops below
    1e-12 * (|h_ii| + |h_jj|). Raises :class:`NoConvergence` carrying the
    sweep count after 100*m sweeps. Complex values of real matrices come out
    in exact conjugate pairs because 2x2 blocks are solved in closed form.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"eig expects one square matrix, got shape {A.shape}")
    n = A.shape[0]
    if n > _EIG_MAX_ORDER:
        raise ValueError(f"eig supports order <= {_EIG_MAX_ORDER}, got {n}")
    if not np.all(np.isfinite(A)):
        raise ValueError("eig requires finite entries")
    if n == 1:
        return EigenSet(np.array([A[0, 0]], dtype=np.complex128), 1)

    H = _hessenberg(_balance(A))
    values: list[complex] = []
    hi = n - 1
    sweeps = 0
    max_sweeps = 100 * n
    since_deflation = 0

    while hi >= 0:
        if hi == 0:
            values.append(complex(H[0, 0]))
            break
        # Split at negligible subdiagonals, scanning up from the bottom.
        lo = hi
        while lo > 0:
            h = abs(H[lo, lo - 1])
            if h <= _EIG_TOL * (abs(H[lo - 1, lo - 1]) + abs(H[lo, lo])):
                H[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            values.append(complex(H[hi, hi]))
            hi -= 1
            since_deflation = 0
            continue
        if lo == hi - 1:
            l1, l2 = _eig2x2(H[lo, lo], H[lo, hi], H[hi, lo], H[hi, hi])
            values.extend([l1, l2])
            hi = lo - 1
            since_deflation = 0
            continue
        if sweeps >= max_sweeps:
            raise NoConvergence(iterations=sweeps, order=n)
        since_deflation += 1
        _francis_sweep(H, lo, hi, exceptional=(since_deflation % 10 == 0))
        sweeps += 1

    return EigenSet(np.array(values, dtype=np.complex128), n)


# ---------------------------------------------------------------------------
# Singular values: symmetric Jacobi on A^T A
# ---------------------------------------------------------------------------

def singvals(A: np.ndarray) -> np.ndarray:
    """Singular values in descending order, Jacobi-diagonalizing A^T A.

    One-sided (Hestenes) sweeps: each rotation zeroes one Gram entry
    (A^T A)[p, q] by rotating the column pair, which keeps small singular
    values at full absolute accuracy instead of the sqrt(eps) floor of the
    explicitly squared problem.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"singvals expects one square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("singvals requires finite entries")
    n = A.shape[0]
    if n > _EIG_MAX_ORDER:
        raise ValueError(f"singvals supports order <= {_EIG_MAX_ORDER}, got {n}")

    V = A.copy()
    for _ in range(60):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = float(V[:, p] @ V[:, p])
                aqq = float(V[:, q] @ V[:, q])
                apq = float(V[:, p] @ V[:, q])
                if app * aqq == 0.0 or abs(apq) <= 1e-15 * math.sqrt(app * aqq):
                    continue
                rotated = True
                tau = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                col_p = c * V[:, p] - s * V[:, q]
                col_q = s * V[:, p] + c * V[:, q]
                V[:, p], V[:, q] = col_p, col_q
        if not rotated:
            break
    vals = np.linalg.norm(V, axis=0)
    return np.sort(vals)[::-1]


# ---------------------------------------------------------------------------
# Ordinary least squares line fit
# ---------------------------------------------------------------------------

class LinFit:
    """Slope/intercept/R^2 of an ordinary least-squares line."""

    __slots__ = ("slope", "intercept", "r_squared")

    def __init__(self, slope: float, intercept: float, r_squared: float):
        self.slope = slope
        self.intercept = intercept
        self.r_squared = r_squared

    def __repr__(self) -> str:
        return (
            f"LinFit(slope={self.slope:.6g}, intercept={self.intercept:.6g}, "
            f"r_squared={self.r_squared:.6g})"
        )


def linfit(x, y) -> LinFit:
    """OLS line fit; R^2 = 1 - SS_res/SS_tot about the mean of y.

    Constant targets use the R^2 = 0 convention (SS_tot = 0). All-identical
    abscissae raise :class:`DegenerateFit`.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("linfit expects two equal-length 1D arrays of size >= 2")
    xm = x.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0.0:
        raise DegenerateFit("all x values identical; line fit undefined")
    ym = y.mean()
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - ym) ** 2))
    if ss_tot == 0.0:
        r2 = 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return LinFit(slope, intercept, r2)
