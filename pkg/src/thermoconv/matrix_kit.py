"""Dense linear-algebra backbone shared by every other module.

Matrices are plain ``numpy.ndarray`` in row-major layout; vectors are 1-D
arrays.  All solvers target desk-scale problems (dimension well below 100),
so direct dense methods are used throughout:

* Lyapunov equations are solved by Kronecker vectorization, which keeps the
  solve a single well-conditioned linear system that is trivial to verify
  against the residual.
* Matrix exponentials use scaling-and-squaring with a fixed-order rational
  (Pade) approximation via :func:`scipy.linalg.expm`; accuracy is documented
  for ``||M t||_2 <= 50`` and arguments beyond that range are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    NotStable,
    Overflow,
    SingularBlock,
    SingularCovariance,
)

STABILITY_MARGIN = 1e-12
EXPM_NORM_LIMIT = 50.0


def as_matrix(a, name="matrix") -> np.ndarray:
    """Coerce to a finite 2-D float array."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DimensionMismatch(f"{name} has non-finite entries")
    return m


def as_square(a, name="matrix") -> np.ndarray:
    m = as_matrix(a, name)
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {m.shape}")
    return m


def sym(m: np.ndarray) -> np.ndarray:
    """Symmetric part (M + M^T)/2."""
    return 0.5 * (m + m.T)


def is_symmetric(m: np.ndarray, rtol: float = 1e-12) -> bool:
    scale = max(1.0, float(np.linalg.norm(m)))
    return float(np.linalg.norm(m - m.T)) <= rtol * scale


@dataclass(frozen=True)
class GaussianState:
    """Gaussian law N(mean, cov).

    Used both for forward densities rho(t) and for invariant measures.
    The covariance must be symmetric (1e-12 relative) and may be singular
    only up to roundoff: eigenvalues >= -1e-12 * ||cov||.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = as_square(self.cov, "cov")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if mean.ndim != 1 or mean.size != cov.shape[0]:
            raise DimensionMismatch(
                f"mean has size {mean.size}, cov is {cov.shape}"
            )
        if not is_symmetric(cov):
            raise SingularCovariance("covariance is not symmetric to 1e-12 relative")
        w = np.linalg.eigvalsh(sym(cov))
        if w.min() < -1e-12 * max(1.0, float(np.linalg.norm(cov))):
            raise SingularCovariance(
                f"covariance has eigenvalue {w.min():.3e} below roundoff floor"
            )

    @property
    def dim(self) -> int:
        return self.mean.size


def is_positively_stable(m) -> bool:
    """True iff every eigenvalue of M has real part > 1e-12.

    Real parts within the margin are treated as unstable rather than
    guessed; this is the right-half-plane reading of linear stability used
    by the stationary-covariance solver.
    """
    m = as_square(m)
    return bool(np.min(np.linalg.eigvals(m).real) > STABILITY_MARGIN)


def solve_lyapunov(m, q) -> np.ndarray:
    """Solve M X + X M^T = Q for symmetric X by Kronecker vectorization.

    Requires all eigenvalues of M in the open right half-plane (unique
    solution) and symmetric Q.  The result is symmetrized and the residual
    is verified against 1e-10 ||Q||.
    """
    m = as_square(m, "M")
    q = as_square(q, "Q")
    if m.shape != q.shape:
        raise DimensionMismatch(f"M is {m.shape} but Q is {q.shape}")
    if not is_symmetric(q, rtol=1e-10):
        raise DimensionMismatch("Q must be symmetric")
    if not is_positively_stable(m):
        raise NotStable("M has an eigenvalue with real part <= 1e-12")
    d = m.shape[0]
    eye = np.eye(d)
    coef = np.kron(eye, m) + np.kron(m, eye)
    x = np.linalg.solve(coef, q.flatten(order="F")).reshape((d, d), order="F")
    x = sym(x)
    resid = np.linalg.norm(m @ x + x @ m.T - q)
    if resid > 1e-10 * max(np.linalg.norm(q), 1e-300):
        raise ArithmeticError(
            f"Lyapunov residual {resid:.3e} exceeds 1e-10 ||Q||"
        )
    return x


def expm(m, t: float = 1.0) -> np.ndarray:
    """e^{M t} by scaling-and-squaring Pade approximation.

    Relative accuracy 1e-10 is documented for ||M t||_2 <= 50; larger
    arguments raise Overflow so callers must split the interval themselves
    (see :func:`propagator` for the stable-drift case).
    """
    m = as_square(m, "M")
    if not np.isfinite(t):
        raise Overflow("t must be finite")
    mt = m * t
    norm = float(np.linalg.norm(mt, 2)) if m.size else 0.0
    if norm > EXPM_NORM_LIMIT:
        raise Overflow(
            f"||Mt||_2 = {norm:.3g} outside documented range {EXPM_NORM_LIMIT}"
        )
    return scipy.linalg.expm(mt)


def propagator(m, t: float) -> np.ndarray:
    """e^{-M t} for positively stable M and t >= 0, valid for any t.

    Splits t into chunks with ||M dt|| within the expm accuracy range and
    multiplies; products of decaying factors stay well conditioned.
    """
    m = as_square(m, "M")
    if t < 0:
        raise DimensionMismatch("t must be >= 0")
    if t == 0:
        return np.eye(m.shape[0])
    norm = float(np.linalg.norm(m, 2))
    n_chunks = max(1, int(np.ceil(norm * t / (0.8 * EXPM_NORM_LIMIT))))
    step = expm(-m, t / n_chunks)
    out = np.eye(m.shape[0])
    # binary powering keeps the chunk count logarithmic
    p = step
    k = n_chunks
    while k:
        if k & 1:
            out = out @ p
        k >>= 1
        if k:
            p = p @ p
    return out


def schur_complement(s, split: int) -> np.ndarray:
    """S22 - S21 S11^{-1} S12 with the leading split x split block eliminated."""
    s = as_square(s, "S")
    d = s.shape[0]
    if not 0 < split < d:
        raise DimensionMismatch(f"split {split} outside (0, {d})")
    s11 = s[:split, :split]
    if np.linalg.cond(s11) >= 1e12:
        raise SingularBlock(
            f"leading {split}x{split} block has condition number >= 1e12"
        )
    s12 = s[:split, split:]
    s21 = s[split:, :split]
    s22 = s[split:, split:]
    return s22 - s21 @ np.linalg.solve(s11, s12)


def _chol(cov, name):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(f"{name} is not positive definite") from exc


def gaussian_kl(p: GaussianState, q: GaussianState) -> float:
    """KL(p || q) in nats for Gaussians with positive definite covariances.

    0.5 * (tr(Sq^-1 Sp) - d + dm^T Sq^-1 dm + log det Sq - log det Sp).
    """
    if p.dim != q.dim:
        raise DimensionMismatch(f"dimensions differ: {p.dim} vs {q.dim}")
    lp = _chol(p.cov, "p.cov")
    lq = _chol(q.cov, "q.cov")
    d = p.dim
    # tr(Sq^-1 Sp) via triangular solves against the Cholesky factors
    a = scipy.linalg.solve_triangular(lq, lp, lower=True)
    trace_term = float(np.sum(a * a))
    dm = q.mean - p.mean
    y = scipy.linalg.solve_triangular(lq, dm, lower=True)
    quad = float(y @ y)
    logdet = 2.0 * float(
        np.sum(np.log(np.diag(lq))) - np.sum(np.log(np.diag(lp)))
    )
    return max(0.0, 0.5 * (trace_term - d + quad + logdet))


def gaussian_quadratic_expectation(state: GaussianState, d, e, w) -> float:
    """E[(Dz + e)^T W (Dz + e)] for z ~ state, W symmetric.

    Equals tr(W D S D^T) + (Dm + e)^T W (Dm + e); all closed-form
    functionals in the laboratory reduce to this plumbing.
    """
    d = as_matrix(d, "D")
    w = as_square(w, "W")
    e = np.atleast_1d(np.asarray(e, dtype=float))
    if d.shape[1] != state.dim:
        raise DimensionMismatch(f"D has {d.shape[1]} cols, state dim {state.dim}")
    if d.shape[0] != w.shape[0] or e.size != w.shape[0]:
        raise DimensionMismatch("D rows, e and W dimensions must agree")
    if not is_symmetric(w, rtol=1e-10):
        raise DimensionMismatch("W must be symmetric")
    mshift = d @ state.mean + e
    trace_term = float(np.sum(w * (d @ state.cov @ d.T)))
    return trace_term + float(mshift @ w @ mshift)
