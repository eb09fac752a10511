"""Concrete model families beyond the linear OU: the nonlinear averaging
demo with a rotational irreversible field, and the stiff-potential
constraint model, each with estimators for their limit statements.

Averaging demo
--------------
State (x, y) in R x R^2 with potential V = (x^2 + |y|^2)/2, unit
diffusivities and slow irreversible drift gamma_y(x, y) = (1 + alpha x) J y,
J the quarter-turn rotation.  J y is orthogonal to y and divergence free,
so div(gamma e^{-V}) = 0 holds analytically and the invariant law is the
standard Gaussian for every eps.  The slow thermodynamic force
(1 + alpha x) J y depends on x unless alpha = 0; its fibrewise variance
alpha^2 |y|^2 quantifies the steady-state housekeeping gap 2 alpha^2.

Stiff model
-----------
dZ = -grad(V + eps^-2 U) dt + sqrt(2) dW with the quadratic penalty
U = (x - H y - b)^T B (x - H y - b) / 2 whose zero set is the affine graph
{(Hu + b, u)}.  The slow limit is dU = -G^-1 grad Vbar dt + sqrt(2) G^-1/2 dB
with G = I + H^T H and Vbar(u) = V(Hu + b, u); the Gibbs laws concentrate
on the graph and push forward to exp(-Vbar)/Z.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from . import sde
from .errors import (
    DimensionMismatch,
    QuadratureDivergence,
    SamplerNotConverged,
    SingularA,
)
from .matrix_kit import as_matrix, as_square, sym

ROTATION_2D = np.array([[0.0, -1.0], [1.0, 0.0]])


# ---------------------------------------------------------------------------
# averaging family


@dataclass
class AveragingModel:
    """Slow-fast diffusion with block diffusivity diag(eps^-1 a1, a2) and an
    irreversible drift acting on the slow block only.

    ``gamma_y`` maps a state block (n, dx+dy) to slow-drift values (n, dy).
    ``a2`` may be a constant SPD matrix or a callback y -> (n, dy, dy) for
    the housekeeping estimator; simulation and the fibre quadrature assume
    constant diffusivities (the demo family).  Custom irreversible fields
    must pass :func:`check_divergence_free` before simulation; the built-in
    demo satisfies the identity analytically and is flagged as such.
    """

    dx: int
    dy: int
    a1: object
    a2: object
    grad_V: Callable[[np.ndarray], np.ndarray]
    V: Callable[[np.ndarray], np.ndarray]
    gamma_y: Callable[[np.ndarray], np.ndarray]
    divergence_checked: bool = False
    alpha: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.dx + self.dy

    def gamma_full(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.zeros_like(z)
        out[:, self.dx :] = self.gamma_y(z)
        return out

    def to_diffusion_model(self, eps: float) -> sde.DiffusionModel:
        if not self.divergence_checked:
            raise SingularA(
                "irreversible field has not passed the divergence check; "
                "run check_divergence_free first"
            )
        dx, dy = self.dx, self.dy
        a1 = as_square(self.a1, "a1")
        a2 = as_square(self.a2, "a2")
        a_eps = np.block(
            [
                [a1 / eps, np.zeros((dx, dy))],
                [np.zeros((dy, dx)), a2],
            ]
        )
        noise = np.block(
            [
                [_sqrtm_pd(2.0 * a1 / eps), np.zeros((dx, dy))],
                [np.zeros((dy, dx)), _sqrtm_pd(2.0 * a2)],
            ]
        )
        grad_v = self.grad_V
        gamma_y = self.gamma_y

        def drift(z):
            g = np.asarray(grad_v(z), dtype=float)
            b = np.empty_like(z)
            b[:, :dx] = -(g[:, :dx] @ (a1 / eps).T)
            b[:, dx:] = -(g[:, dx:] @ a2.T) + gamma_y(z)
            return b

        return sde.DiffusionModel(
            dim=self.dim,
            drift=drift,
            noise_factor=noise,
            A=a_eps,
            gamma=self.gamma_full,
            fast_dims=dx,
            eps=eps,
        )


def _sqrtm_pd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(sym(np.atleast_2d(m)))
    if w.min() <= 0:
        raise SingularA("matrix square root needs a positive definite input")
    return (v * np.sqrt(w)) @ v.T


def make_averaging_demo(alpha: float) -> AveragingModel:
    """Demo family: dx=1, dy=2, V=(x^2+|y|^2)/2, unit diffusivities,
    gamma_y = (1 + alpha x) J y."""

    def grad_v(z):
        return np.atleast_2d(np.asarray(z, dtype=float)).copy()

    def potential(z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return 0.5 * np.sum(z * z, axis=1)

    def gamma_y(z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return (1.0 + alpha * z[:, :1]) * (z[:, 1:] @ ROTATION_2D.T)

    return AveragingModel(
        dx=1,
        dy=2,
        a1=np.eye(1),
        a2=np.eye(2),
        grad_V=grad_v,
        V=potential,
        gamma_y=gamma_y,
        divergence_checked=True,
        alpha=float(alpha),
    )


def check_divergence_free(
    gamma: Callable[[np.ndarray], np.ndarray],
    potential: Callable[[np.ndarray], np.ndarray],
    grid: Sequence,
    tol: float = 1e-6,
    h: float = 1e-5,
) -> float:
    """Central-difference check of div(gamma e^{-V}) = 0 on a grid.

    Returns the largest absolute divergence (scaled by the local density);
    raises SingularA when it exceeds tol.  Required for user-supplied
    irreversible fields before simulation is allowed.
    """
    worst = 0.0
    for p in grid:
        p = np.atleast_1d(np.asarray(p, dtype=float))
        d = p.size
        div = 0.0
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = h
            zp = (p + ei)[None, :]
            zm = (p - ei)[None, :]
            fp = gamma(zp)[0, i] * np.exp(-potential(zp)[0])
            fm = gamma(zm)[0, i] * np.exp(-potential(zm)[0])
            div += (fp - fm) / (2 * h)
        scale = max(np.exp(-float(potential(p[None, :])[0])), 1e-12)
        worst = max(worst, abs(div) / scale)
    if worst > tol:
        raise SingularA(
            f"div(gamma e^-V) = {worst:.3e} exceeds {tol}; field rejected"
        )
    return worst


def averaging_stationary_sample(model: AveragingModel, n: int, seed: int) -> np.ndarray:
    """Exact draws from the eps-independent invariant law of the demo.

    Only valid for the built-in family (standard Gaussian potential)."""
    if model.alpha is None:
        raise SamplerNotConverged("exact stationary sampling is demo-only")
    return sde.sample_gaussian(np.zeros(model.dim), np.eye(model.dim), n, seed)


def sigma_hk_mc(model: AveragingModel, states) -> tuple:
    """MC estimate of the housekeeping integrand gamma^T A^-1 gamma.

    The fast component of gamma vanishes, so only the slow block enters;
    a2 may be a constant SPD matrix or a callback y -> (n, dy, dy).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))

    def observable(block):
        g = model.gamma_y(block)
        if callable(model.a2):
            a2 = np.asarray(model.a2(block[:, model.dx :]), dtype=float)
            try:
                sol = np.linalg.solve(a2, g[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SingularA("slow diffusivity singular at a sample") from exc
            return np.einsum("ni,ni->n", g, sol)
        a2 = as_square(model.a2, "a2")
        if np.linalg.cond(a2) > 1e12:
            raise SingularA("slow diffusivity is numerically singular")
        return np.einsum("ni,ij,nj->n", g, np.linalg.inv(a2), g)

    return sde.mc_expectation(states, observable)


def sigma_hk_ss_bar(model: AveragingModel, y_grid=None, x_order: int = 16) -> float:
    """Macroscopic steady housekeeping rate of the demo by quadrature:
    integral of |mean-fibre force|^2 against the slow Gaussian."""
    nodes, wts, y_pts, y_wts = _demo_quadrature(model, y_grid, x_order)
    fbar = _fibre_mean_force(model, y_pts, nodes, wts)
    vals = np.einsum("mi,ij,mj->m", fbar, as_square(model.a2), fbar)
    return float(y_wts @ vals)


def _demo_quadrature(model: AveragingModel, y_grid, x_order: int):
    if model.alpha is None:
        raise QuadratureDivergence("fibre quadrature is demo-only")
    if model.dx != 1:
        raise DimensionMismatch("demo quadrature assumes a scalar fast block")
    nodes, wts = hermegauss(int(x_order))
    wts = wts / np.sqrt(2.0 * np.pi)
    if y_grid is None:
        axis = np.arange(-6.0, 6.0 + 1e-9, 0.1)
        yy = np.meshgrid(*([axis] * model.dy), indexing="ij")
        y_pts = np.stack([g.ravel() for g in yy], axis=1)
    else:
        y_pts = np.atleast_2d(np.asarray(list(y_grid), dtype=float))
    dens = np.exp(-0.5 * np.sum(y_pts**2, axis=1))
    # self-normalised weights kill the bulk truncation error; the tail
    # estimate below guards against a grid that is simply too small
    y_wts = dens / dens.sum()
    radius = np.sqrt(np.max(np.sum(y_pts**2, axis=1)))
    boundary_density = np.exp(-0.5 * radius**2)
    integrand_scale = (1.0 + abs(model.alpha)) ** 2 * (radius + 1.0) ** 2
    tail = boundary_density * integrand_scale
    if tail > 1e-4:
        raise QuadratureDivergence(
            f"tail truncation estimate {tail:.2e} exceeds 1e-4; enlarge y grid"
        )
    return nodes, wts, y_pts, y_wts


def _fibre_mean_force(model, y_pts, nodes, wts):
    a2_inv = np.linalg.inv(as_square(model.a2))
    acc = np.zeros((y_pts.shape[0], model.dy))
    for xk, wk in zip(nodes, wts):
        z = np.concatenate([np.full((y_pts.shape[0], 1), xk), y_pts], axis=1)
        acc += wk * model.gamma_y(z)
    return acc @ a2_inv.T


def locking_gap_quadrature(
    model: AveragingModel, y_grid=None, x_order: int = 16
) -> float:
    """Fibrewise variance of the slow thermodynamic force, integrated over
    the slow Gaussian: the quantitative locking defect of the demo family.

    Gauss-Hermite in the fast variable, weighted grid in the slow ones.
    Zero (to quadrature tolerance) iff the force is fibrewise constant.
    """
    nodes, wts, y_pts, y_wts = _demo_quadrature(model, y_grid, x_order)
    a2 = as_square(model.a2)
    a2_inv = np.linalg.inv(a2)
    fbar = _fibre_mean_force(model, y_pts, nodes, wts)
    gap = np.zeros(y_pts.shape[0])
    for xk, wk in zip(nodes, wts):
        z = np.concatenate([np.full((y_pts.shape[0], 1), xk), y_pts], axis=1)
        force = model.gamma_y(z) @ a2_inv.T
        diff = force - fbar
        gap += wk * np.einsum("mi,ij,mj->m", diff, a2, diff)
    return float(y_wts @ gap)


# ---------------------------------------------------------------------------
# stiff-potential family


@dataclass
class StiffModel:
    """Large-drift diffusion confined near the affine graph x = H y + b.

    ``quad_P`` declares a quadratic potential V(z) = z^T P z / 2, enabling
    exact Gaussian sampling of the Gibbs laws; without it sampling falls
    back to unadjusted Langevin and is labelled approximate.
    """

    dx: int
    dy: int
    H: np.ndarray
    b: np.ndarray
    Bmat: np.ndarray
    eps: float
    V: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_V: Optional[Callable[[np.ndarray], np.ndarray]] = None
    quad_P: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = as_matrix(self.H, "H")
        self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        self.Bmat = as_square(self.Bmat, "Bmat")
        if self.H.shape != (self.dx, self.dy):
            raise DimensionMismatch(f"H must be ({self.dx}, {self.dy})")
        if self.b.size != self.dx:
            raise DimensionMismatch("b must have the fast dimension")
        if np.linalg.eigvalsh(sym(self.Bmat)).min() <= 0:
            raise DimensionMismatch("constraint Hessian Bmat must be SPD")
        if self.quad_P is not None:
            self.quad_P = as_square(self.quad_P, "quad_P")
            p = self.quad_P

            def _v(z):
                z = np.atleast_2d(np.asarray(z, dtype=float))
                return 0.5 * np.einsum("ni,ij,nj->n", z, p, z)

            def _grad(z):
                z = np.atleast_2d(np.asarray(z, dtype=float))
                return z @ p.T

            self.V = _v
            self.grad_V = _grad
        if self.V is None or self.grad_V is None:
            raise DimensionMismatch("provide quad_P or both V and grad_V")

    @property
    def dim(self) -> int:
        return self.dx + self.dy

    @property
    def G(self) -> np.ndarray:
        return np.eye(self.dy) + self.H.T @ self.H

    def residual(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return z[:, : self.dx] - z[:, self.dx :] @ self.H.T - self.b

    def grad_U(self, z) -> np.ndarray:
        r = self.residual(z) @ self.Bmat.T
        out = np.empty((r.shape[0], self.dim))
        out[:, : self.dx] = r
        out[:, self.dx :] = -(r @ self.H)
        return out

    def embed(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return np.concatenate([u @ self.H.T + self.b, u], axis=1)

    def vbar(self, u) -> np.ndarray:
        return self.V(self.embed(u))

    def grad_vbar(self, u) -> np.ndarray:
        g = self.grad_V(self.embed(u))
        return g[:, : self.dx] @ self.H + g[:, self.dx :]


def stiff_phase_map(model: StiffModel, z) -> np.ndarray:
    """Affine coarse-graining Phi(x, y) = G^{-1}(y + H^T (x - b)); exact
    left inverse of the graph embedding."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x, y = z[:, : model.dx], z[:, model.dx :]
    raw = y + (x - model.b) @ model.H
    out = np.linalg.solve(model.G, raw.T).T
    return out[0] if out.shape[0] == 1 and np.asarray(z).ndim == 1 else out


def stiff_joint_model(model: StiffModel) -> sde.DiffusionModel:
    """Simulable full-space diffusion; the stiff drift makes the whole
    state stiff, so callers pick dt = O(eps^2) rather than substepping."""
    inv_eps2 = 1.0 / model.eps**2

    def drift(z):
        return -(model.grad_V(z) + inv_eps2 * model.grad_U(z))

    return sde.DiffusionModel(
        dim=model.dim,
        drift=drift,
        noise_factor=np.sqrt(2.0) * np.eye(model.dim),
        A=np.eye(model.dim),
        gamma=None,
        fast_dims=0,
        eps=1.0,
    )


def stiff_limit_model(model: StiffModel) -> sde.DiffusionModel:
    """Slow-space limit dU = -G^{-1} grad Vbar dt + sqrt(2) G^{-1/2} dB."""
    g = model.G
    g_inv = np.linalg.inv(g)
    root = _sqrtm_pd(2.0 * g_inv)

    def drift(u):
        return -(model.grad_vbar(u) @ g_inv.T)

    return sde.DiffusionModel(
        dim=model.dy,
        drift=drift,
        noise_factor=root,
        A=g_inv,
        gamma=None,
        fast_dims=0,
        eps=1.0,
    )


def stiff_dt(model: StiffModel, factor: float = 0.05) -> float:
    return factor * model.eps**2


def gibbs_sample(model: StiffModel, n: int, seed: int) -> np.ndarray:
    """Draws from the Gibbs law ~ exp(-V - eps^-2 U).

    Quadratic V: exact Gaussian with precision P + eps^-2 Hess(U).
    Otherwise: unadjusted Langevin with dt = 0.05 eps^2, burn-in of 20
    relaxation times, thinning to the requested count; approximate, and
    rejected when the effective sample size diagnostic is too low.
    """
    if model.quad_P is not None:
        precision = model.quad_P + _hess_U(model) / model.eps**2
        cov = np.linalg.inv(precision)
        return sde.sample_gaussian(np.zeros(model.dim), sym(cov), n, seed)
    return _langevin_sample(model, n, seed)


def limit_gibbs_sample(model: StiffModel, n: int, seed: int) -> np.ndarray:
    """Draws from the limit law ~ exp(-Vbar) on the slow space."""
    if model.quad_P is not None:
        emb = np.concatenate([model.H, np.eye(model.dy)], axis=0)
        hbar = emb.T @ model.quad_P @ emb
        cov = np.linalg.inv(hbar)
        return sde.sample_gaussian(np.zeros(model.dy), sym(cov), n, seed)
    raise SamplerNotConverged("limit sampling without quad_P is not supported")


def _hess_U(model: StiffModel) -> np.ndarray:
    h, bm = model.H, model.Bmat
    return np.block([[bm, -bm @ h], [-h.T @ bm, h.T @ bm @ h]])


def _langevin_sample(model: StiffModel, n: int, seed: int) -> np.ndarray:
    dm = stiff_joint_model(model)
    dt = stiff_dt(model)
    relax = 1.0  # slow-block relaxation is O(1) by construction
    burn_steps = int(np.ceil(20.0 * relax / dt))
    sample_gap = max(1, int(np.ceil(0.5 * relax / dt)))
    z = np.zeros((1, model.dim))
    out = np.empty((n, model.dim))
    k = 0
    for step in range(burn_steps + n * sample_gap):
        sde._advance_block(dm, z, step, dt, seed, 0)
        if step >= burn_steps and (step - burn_steps) % sample_gap == 0:
            out[k] = z[0]
            k += 1
            if k == n:
                break
    if k < n:
        raise SamplerNotConverged("Langevin chain ended before n samples")
    ess = _ess(np.sum(out**2, axis=1))
    if ess < 100:
        raise SamplerNotConverged(f"effective sample size {ess:.0f} < 100")
    return out


def _ess(x: np.ndarray) -> float:
    x = x - x.mean()
    n = x.size
    var = float(x @ x) / n
    if var == 0:
        return float(n)
    acf_sum = 0.0
    for lag in range(1, min(n - 1, 200)):
        rho = float(x[:-lag] @ x[lag:]) / ((n - lag) * var)
        if rho <= 0:
            break
        acf_sum += rho
    return n / (1.0 + 2.0 * acf_sum)


def w1_sorted(a: np.ndarray, b: np.ndarray) -> float:
    """1-D Wasserstein-1 via sorted-sample L1 (equal sample sizes)."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size != b.size:
        raise DimensionMismatch("sorted-sample W1 needs equal sizes")
    return float(np.mean(np.abs(a - b)))


def sliced_w1(a: np.ndarray, b: np.ndarray, n_dirs: int = 32, seed: int = 7) -> float:
    """Sliced W1 over fixed seeded directions; reduces to plain sorted W1
    in one dimension."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    d = a.shape[1]
    if d == 1:
        return w1_sorted(a[:, 0], b[:, 0])
    dirs = sde.counter_normals(seed, 0, 0, 0, n_dirs, d, tag=sde.TAG_GAUSS)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(
        np.mean([w1_sorted(a @ u, b @ u) for u in dirs])
    )


def stiff_concentration(model: StiffModel, n_samples: int, seed: int) -> dict:
    """Residual moment and push-forward distance of the Gibbs law.

    mean_sq_residual estimates E|x - Hy - b|^2; w1_pushforward compares
    Phi_# samples with limit-law samples.  The W1 null statistics
    (same-law sample pairs of the same size) calibrate how large the
    distance is expected to be at this sample count.
    """
    z = gibbs_sample(model, n_samples, seed)
    res = model.residual(z)
    sq = np.sum(res**2, axis=1)
    mean_sq = float(np.mean(sq))
    se = float(np.std(sq, ddof=1) / np.sqrt(n_samples))
    pushed = np.atleast_2d(stiff_phase_map(model, z))
    ref = limit_gibbs_sample(model, n_samples, sde.derive_seed(seed, 1))
    w1 = sliced_w1(pushed, ref)
    null_mean, null_sd = _w1_null(model, n_samples, sde.derive_seed(seed, 2))
    return {
        "eps": model.eps,
        "n_samples": n_samples,
        "mean_sq_residual": mean_sq,
        "residual_se": se,
        "w1_pushforward": w1,
        "w1_null_mean": null_mean,
        "w1_null_sd": null_sd,
        "w1_pass": bool(w1 <= null_mean + 3.0 * null_sd),
    }


def _w1_null(model: StiffModel, n: int, seed: int, reps: int = 12):
    vals = []
    for r in range(reps):
        a = limit_gibbs_sample(model, n, sde.derive_seed(seed, 2 * r))
        b = limit_gibbs_sample(model, n, sde.derive_seed(seed, 2 * r + 1))
        vals.append(sliced_w1(np.atleast_2d(a), np.atleast_2d(b)))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std(ddof=1))


def stiff_dynamic_check(
    model: StiffModel,
    z0,
    f: Callable[[np.ndarray], np.ndarray],
    t: float,
    eps_grid: Sequence[float],
    n_paths: int,
    seed: int,
    dt_factor: float = 0.05,
) -> list:
    """Per-eps weak gap |E_z0[f(Phi(Z_t))] - E[f(U_t)]| with a coupled
    control variate.

    The limit chain is driven by the projected micro noise (sqrt(2) DPhi dW
    has exactly the limit noise covariance), so the per-path difference
    f(Phi(Z_t)) - f(U_t) carries most of the variance away.  For quadratic
    potentials on a scalar slow space the discrete and continuous limit
    means are computed by quadrature and remove the limit-chain bias;
    ``f`` must be bounded (tanh of affine functionals is the intended
    family) and vectorized over sample blocks.
    """
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    rows = []
    for eps in eps_grid:
        m = StiffModel(
            dx=model.dx,
            dy=model.dy,
            H=model.H,
            b=model.b,
            Bmat=model.Bmat,
            eps=float(eps),
            V=model.V,
            grad_V=model.grad_V,
            quad_P=model.quad_P,
        )
        rows.append(_dynamic_gap_one_eps(m, z0, f, t, n_paths, seed, dt_factor))
    return rows


def _dynamic_gap_one_eps(model, z0, f, t, n_paths, seed, dt_factor):
    n_steps = max(1, int(np.ceil(t / stiff_dt(model, dt_factor))))
    dt = t / n_steps
    g = model.G
    g_inv = np.linalg.inv(g)
    dphi = np.linalg.solve(g, np.concatenate([model.H.T, np.eye(model.dy)], axis=1))
    joint = stiff_joint_model(model)
    sqdt = np.sqrt(dt)
    z = np.tile(z0, (n_paths, 1))
    u = np.tile(np.atleast_1d(stiff_phase_map(model, z0[None, :]))[0], (n_paths, 1))
    for k in range(n_steps):
        xi = sde.counter_normals(seed, k, 0, 0, n_paths, model.dim)
        z_drift = joint.drift_at(z)
        u_drift = -(model.grad_vbar(u) @ g_inv.T)
        z += z_drift * dt + np.sqrt(2.0) * xi * sqdt
        u += u_drift * dt + np.sqrt(2.0) * (xi @ dphi.T) * sqdt
        sde._check_blowup(z)
    micro_vals = np.asarray(
        f(np.atleast_2d(stiff_phase_map(model, z))), dtype=float
    ).ravel()
    limit_vals = np.asarray(f(u), dtype=float).ravel()
    diff = micro_vals - limit_vals
    diff_mean = float(np.mean(diff))
    diff_se = float(np.std(diff, ddof=1) / np.sqrt(n_paths))
    corr = _limit_mean_correction(model, f, z0, t, dt, n_steps)
    if corr is None:
        gap = diff_mean
        limit_mean = float(np.mean(limit_vals))
        exact = None
    else:
        disc_mean, exact = corr
        gap = diff_mean + (disc_mean - exact)
        limit_mean = exact
    return {
        "eps": model.eps,
        "gap": gap,
        "abs_gap": abs(gap),
        "se": diff_se,
        "limit_mean": limit_mean,
        "micro_mean": float(np.mean(micro_vals)),
        "dt": dt,
        "n_paths": n_paths,
        "exact_reference": exact is not None,
    }


def _limit_mean_correction(model, f, z0, t, dt, n_steps):
    """Discrete and exact limit means E[f(U)] for scalar quadratic limits."""
    if model.quad_P is None or model.dy != 1:
        return None
    emb = np.concatenate([model.H, np.eye(1)], axis=0)
    hbar = float((emb.T @ model.quad_P @ emb)[0, 0])
    gval = float(model.G[0, 0])
    lam = hbar / gval
    u0 = float(np.asarray(stiff_phase_map(model, z0[None, :])).ravel()[0])
    # Euler chain: u' = a u + sqrt(2 dt / G) xi
    a = 1.0 - lam * dt
    mean_disc, var_disc = u0, 0.0
    for _ in range(n_steps):
        mean_disc *= a
        var_disc = a * a * var_disc + 2.0 * dt / gval
    mean_ct = u0 * np.exp(-lam * t)
    var_ct = (1.0 - np.exp(-2.0 * lam * t)) / (lam * gval)
    nodes, wts = hermegauss(80)
    wts = wts / np.sqrt(2.0 * np.pi)

    def mean_f(mu, var):
        pts = (mu + np.sqrt(max(var, 0.0)) * nodes)[:, None]
        return float(wts @ np.asarray(f(pts), dtype=float).ravel())

    return mean_f(mean_disc, var_disc), mean_f(mean_ct, var_ct)


def gaps_decreasing_beyond_noise(rows: Sequence[dict], se_mult: float = 2.0) -> bool:
    """True when |gap| strictly decreases along the rows by more than
    se_mult combined standard errors at each step."""
    ok = True
    for r1, r2 in zip(rows, rows[1:]):
        margin = se_mult * float(np.hypot(r1["se"], r2["se"]))
        ok &= r1["abs_gap"] - r2["abs_gap"] > margin
    return ok
