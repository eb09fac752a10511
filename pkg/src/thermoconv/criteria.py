"""Checkable sufficient conditions for the uniform curvature bound, the
structural constants of the derivative-flow (Ito-Kunita) route, and an
empirical falsifier via synchronous coupling.

Grid-based matrix checks certify the inequality on the supplied grid only;
verdicts carry the worst grid point so a failed certificate is actionable.
Pointwise inequalities over all of R^d are not decidable numerically, so
no claim beyond the grid is made.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable, Optional, Sequence

import numpy as np

from . import sde
from .errors import (
    DimensionMismatch,
    EmptyGrid,
    FastBlockNotPD,
    InvalidBounds,
)
from .matrix_kit import as_square, sym
from .ou_lab import BlockMatrix

EIG_SLACK = 1e-9


@dataclass(frozen=True)
class CdVerdict:
    """Outcome of a grid curvature check.

    ``kappa`` is the curvature parameter of the tested bound (kappa >= 0
    allows gradient growth e^{2 kappa t}); ``satisfied`` means the matrix
    inequality held at every grid point up to a 1e-9 eigenvalue slack.
    """

    kappa: float
    satisfied: bool
    worst_point: Optional[np.ndarray]
    worst_eigenvalue: float

    def to_json(self) -> dict:
        return {
            "kappa": self.kappa,
            "satisfied": self.satisfied,
            "worst_point": None
            if self.worst_point is None
            else np.asarray(self.worst_point).tolist(),
            "worst_eigenvalue": self.worst_eigenvalue,
        }


def _as_points(grid) -> list:
    pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in grid]
    if not pts:
        raise EmptyGrid("grid is empty")
    return pts


def cd_constant_diffusion(
    hess_v: Callable,
    jac_f: Callable,
    a_inv,
    grid: Sequence,
    kappa: float,
) -> CdVerdict:
    """Constant-diffusion curvature certificate on a grid.

    Checks lambda_min(hess_v(z) - Sym(jac_f(z)) + kappa * A^{-1}) >= -1e-9
    at every grid point, the pointwise matrix form of the curvature bound
    when the diffusion matrix does not depend on the state.
    """
    a_inv = as_square(a_inv, "Ainv")
    if np.linalg.eigvalsh(sym(a_inv)).min() <= 0:
        raise DimensionMismatch("Ainv must be positive definite")
    worst_val = np.inf
    worst_pt = None
    for z in _as_points(grid):
        m = sym(np.asarray(hess_v(z), dtype=float)) - sym(
            np.asarray(jac_f(z), dtype=float)
        ) + kappa * a_inv
        lam = float(np.linalg.eigvalsh(sym(m)).min())
        if lam < worst_val:
            worst_val, worst_pt = lam, z
    return CdVerdict(
        kappa=float(kappa),
        satisfied=bool(worst_val >= -EIG_SLACK),
        worst_point=worst_pt,
        worst_eigenvalue=worst_val,
    )


def cd_schur_averaging(
    jac_b: Callable,
    a1,
    a2,
    grid: Sequence,
):
    """Schur-type curvature constant for the constant-coefficient averaging
    model.

    Forms S(z) = diag(a1,a2)^{1/2} Sym(-jac_b(z)) diag(a1,a2)^{1/2}; the
    certificate needs the fast block S11(z) positive definite everywhere,
    and returns kappa = max(0, -min_z lambda_min(Schur(S11)(z))) together
    with the verdict at that kappa.
    """
    a1 = as_square(np.atleast_2d(a1), "a1")
    a2 = as_square(np.atleast_2d(a2), "a2")
    dx = a1.shape[0]
    root = _sqrtm_pd(np.block(
        [[a1, np.zeros((dx, a2.shape[0]))], [np.zeros((a2.shape[0], dx)), a2]]
    ))
    worst_val = np.inf
    worst_pt = None
    for z in _as_points(grid):
        s = root @ sym(-np.asarray(jac_b(z), dtype=float)) @ root
        s11 = s[:dx, :dx]
        if np.linalg.eigvalsh(sym(s11)).min() <= 0:
            raise FastBlockNotPD(
                f"fast block of the symmetrized drift is not PD at z={z}", point=z
            )
        schur = s[dx:, dx:] - s[dx:, :dx] @ np.linalg.solve(s11, s[:dx, dx:])
        lam = float(np.linalg.eigvalsh(sym(schur)).min())
        if lam < worst_val:
            worst_val, worst_pt = lam, z
    kappa = max(0.0, -worst_val)
    verdict = CdVerdict(
        kappa=kappa,
        satisfied=True,
        worst_point=worst_pt,
        worst_eigenvalue=worst_val,
    )
    return kappa, verdict


def _sqrtm_pd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(sym(m))
    if w.min() <= 0:
        raise DimensionMismatch("matrix must be positive definite")
    return (v * np.sqrt(w)) @ v.T


def ou_cd_rho(block, dx: int = None) -> float:
    """Curvature constant of the scaled OU family, uniform in eps.

    rho = min{0, lambda_min(Schur complement of Sym(B) w.r.t. the fast
    block)}; the family then satisfies the curvature bound with parameter
    rho (i.e. gradient growth at most e^{-2 rho t}) for every eps.
    Requires Sym(B11) positive definite.

    Accepts a BlockMatrix, or a plain square matrix together with the fast
    block size ``dx`` -- the constant is well defined (and useful as a
    growth certificate) even when the averaged drift is unstable and the
    BlockMatrix invariants reject the family.
    """
    if isinstance(block, BlockMatrix):
        b, dx = block.B, block.dx
    else:
        b = as_square(block, "B")
        if dx is None:
            raise DimensionMismatch("plain-matrix input needs the fast size dx")
    s = sym(b)
    s11 = s[:dx, :dx]
    if np.linalg.eigvalsh(s11).min() <= 0:
        raise FastBlockNotPD("Sym(B11) is not positive definite")
    schur = s[dx:, dx:] - s[dx:, :dx] @ np.linalg.solve(s11, s[:dx, dx:])
    return min(0.0, float(np.linalg.eigvalsh(sym(schur)).min()))


_NONNEG_FIELDS = (
    "L_b1_x",
    "L_b1_y",
    "L_b2_x",
    "L_b2_y",
    "L_eta1_x",
    "L_eta1_y",
    "L_eta2_y",
    "L_B1_x",
    "L_B1_y",
    "L_B2_y",
    "H_1_inf",
    "H_2_inf",
    "sup_LfB1",
    "sup_LsB1",
    "sup_M2",
    "B_xy_W",
    "B_2x_W",
)


@dataclass(frozen=True)
class IkbConstants:
    """Primitive bounds and every derived structural constant of the
    derivative-flow curvature route.

    Inputs: two-sided ellipticity bounds (lambda_i, Lambda_i), sup-norm /
    Lipschitz bounds of the coefficients, the four weighted constants, and
    the noise column count r1.  Derived fields follow the displayed
    arithmetic exactly, with the cross-variation constant built from
    c_{r1} = 2 r1; the structural gap holds when alpha0 > c and the
    resulting curvature parameter is rho = (beta0 + d)/2.
    """

    lambda1: float
    Lambda1: float
    lambda2: float
    Lambda2: float
    L_b1_x: float
    L_b1_y: float
    L_b2_x: float
    L_b2_y: float
    L_eta1_x: float
    L_eta1_y: float
    L_eta2_y: float
    L_B1_x: float
    L_B1_y: float
    L_B2_y: float
    H_1_inf: float
    H_2_inf: float
    sup_LfB1: float
    sup_LsB1: float
    sup_M2: float
    K_x_W: float
    B_xy_W: float
    B_2x_W: float
    M_2y_W: float
    r1: int
    # derived
    C_1h: float
    C_1j: float
    C_2_sigma: float
    C_LfB1_tilde: float
    C_h: float
    C_j0: float
    C_cross: float
    c_r1: float
    C_X1: float
    C_Y1: float
    alpha0: float
    beta0: float
    c: float
    d: float
    rho: float
    gap_holds: bool

    def to_json(self) -> dict:
        return asdict(self)


def ikb_constants(
    *,
    lambda1: float = 1.0,
    Lambda1: float = 1.0,
    lambda2: float = 1.0,
    Lambda2: float = 1.0,
    L_b1_x: float = 0.0,
    L_b1_y: float = 0.0,
    L_b2_x: float = 0.0,
    L_b2_y: float = 0.0,
    L_eta1_x: float = 0.0,
    L_eta1_y: float = 0.0,
    L_eta2_y: float = 0.0,
    L_B1_x: float = 0.0,
    L_B1_y: float = 0.0,
    L_B2_y: float = 0.0,
    H_1_inf: float = 0.0,
    H_2_inf: float = 0.0,
    sup_LfB1: float = 0.0,
    sup_LsB1: float = 0.0,
    sup_M2: float = 0.0,
    K_x_W: float = 0.0,
    B_xy_W: float = 0.0,
    B_2x_W: float = 0.0,
    M_2y_W: float = 0.0,
    r1: int = 1,
) -> IkbConstants:
    """Fill every derived constant of the derivative-flow route.

    Pure arithmetic; raises InvalidBounds on sign or ordering violations.
    """
    if lambda1 <= 0 or lambda2 <= 0:
        raise InvalidBounds("ellipticity lower bounds must be positive")
    if lambda1 > Lambda1 or lambda2 > Lambda2:
        raise InvalidBounds("need lambda <= Lambda in each block")
    if int(r1) < 1:
        raise InvalidBounds("r1 must be a positive integer")
    local = dict(locals())
    for name in _NONNEG_FIELDS:
        if local[name] < 0:
            raise InvalidBounds(f"{name} must be nonnegative")

    c_1h = 2.0 * Lambda1 * L_eta1_x**2 / lambda1
    c_1j = 2.0 * Lambda2 * L_eta1_y**2 / lambda1
    c_2s = 2.0 * Lambda2 * L_eta2_y**2 / lambda2
    c_lfb1 = Lambda1 * sup_LfB1
    c_h = Lambda1 * sup_LsB1
    c_j0 = Lambda2 * sup_M2
    c_cross = 2.0 * Lambda2 * L_B2_y**2 * H_2_inf**2 / lambda2
    c_r1 = 2.0 * int(r1)
    c_x1 = c_r1 * L_B1_x * H_1_inf * (L_eta1_x + 0.5 * L_eta1_y) * Lambda1
    c_y1 = c_r1 * L_B1_x * H_1_inf * (0.5 * L_eta1_y) * Lambda2
    alpha0 = 2.0 * K_x_W - (Lambda1 * B_xy_W + c_1h + c_lfb1 + c_x1)
    beta0 = Lambda2 * B_xy_W + c_1j + c_y1
    c = Lambda1 * B_2x_W
    d = Lambda2 * B_2x_W + 2.0 * M_2y_W + c_2s + c_j0 + c_cross
    return IkbConstants(
        lambda1=lambda1,
        Lambda1=Lambda1,
        lambda2=lambda2,
        Lambda2=Lambda2,
        L_b1_x=L_b1_x,
        L_b1_y=L_b1_y,
        L_b2_x=L_b2_x,
        L_b2_y=L_b2_y,
        L_eta1_x=L_eta1_x,
        L_eta1_y=L_eta1_y,
        L_eta2_y=L_eta2_y,
        L_B1_x=L_B1_x,
        L_B1_y=L_B1_y,
        L_B2_y=L_B2_y,
        H_1_inf=H_1_inf,
        H_2_inf=H_2_inf,
        sup_LfB1=sup_LfB1,
        sup_LsB1=sup_LsB1,
        sup_M2=sup_M2,
        K_x_W=K_x_W,
        B_xy_W=B_xy_W,
        B_2x_W=B_2x_W,
        M_2y_W=M_2y_W,
        r1=int(r1),
        C_1h=c_1h,
        C_1j=c_1j,
        C_2_sigma=c_2s,
        C_LfB1_tilde=c_lfb1,
        C_h=c_h,
        C_j0=c_j0,
        C_cross=c_cross,
        c_r1=c_r1,
        C_X1=c_x1,
        C_Y1=c_y1,
        alpha0=alpha0,
        beta0=beta0,
        c=c,
        d=d,
        rho=0.5 * (beta0 + d),
        gap_holds=bool(alpha0 > c),
    )


def grid_sup_norm(fn: Callable, grid: Sequence) -> float:
    """Sample sup of ||fn(z)|| over a user-given grid.

    Non-rigorous estimate: a grid maximum is a lower bound on the true sup
    norm and is offered only to seed :func:`ikb_constants` when no analytic
    bound is at hand.
    """
    best = 0.0
    for z in _as_points(grid):
        best = max(best, float(np.linalg.norm(np.asarray(fn(z), dtype=float))))
    return best


def sync_contraction_test(
    model: sde.DiffusionModel,
    eps: float,
    pairs: Sequence,
    horizon: float,
    rho: float,
    n_reps: int,
    rng_seed: int,
    dt: float = 1e-3,
    n_times: int = 8,
):
    """Empirical check of the synchronous-coupling energy bound.

    For each initial pair, n_reps replicas of both paths are driven by
    identical noise and the weighted separation energy
    (Z1 - Z2)^T A(Z1)^{-1} (Z1 - Z2) is averaged on a time grid.  The pair
    passes when every estimate is at most e^{2 rho t} times the initial
    energy, inflated by three standard errors; the bound is statistical
    because the contraction statement is in expectation, not per path.

    ``rho`` is the exponent of the bound (rho >= 0 permits growth); for
    the OU family pass -ou_cd_rho(B).
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyGrid("need at least one initial pair")
    times = np.linspace(0.0, horizon, n_times + 1)
    times = np.array([round(t / dt) * dt for t in times])
    results = []
    overall_pass = True
    max_ratio = 0.0
    for z1, z2 in pairs:
        z1 = np.atleast_1d(np.asarray(z1, dtype=float))
        z2 = np.atleast_1d(np.asarray(z2, dtype=float))
        grid, energies = sde.couple_ensemble(
            model, z1, z2, n_reps, dt, times, rng_seed
        )
        e0 = float(energies[:, 0].mean())
        means = energies.mean(axis=0)
        ses = energies.std(axis=0, ddof=1) / np.sqrt(n_reps) if n_reps > 1 else 0 * means
        pair_pass = True
        ratios = []
        for t, mean, se in zip(grid, means, ses):
            bound = np.exp(2.0 * rho * t) * e0
            ok = mean <= bound + 3.0 * se + 1e-12
            pair_pass &= ok
            ratios.append(mean / bound if bound > 0 else 0.0)
        max_ratio = max(max_ratio, max(ratios) if ratios else 0.0)
        overall_pass &= pair_pass
        results.append(
            {
                "z1": z1.tolist(),
                "z2": z2.tolist(),
                "times": grid.tolist(),
                "energy_mean": means.tolist(),
                "energy_se": ses.tolist(),
                "initial_energy": e0,
                "pass": bool(pair_pass),
            }
        )
    return {
        "eps": eps,
        "rho": rho,
        "max_ratio": float(max_ratio),
        "pass": bool(overall_pass),
        "pairs": results,
    }
