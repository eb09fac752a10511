"""Trajectory-level simulation with reproducible parallel randomness.

The integrator is Euler-Maruyama with explicit substepping of the fast
block: within one slow step of size dt the fast coordinates take
``n_sub = ceil(dt / (0.1 eps))`` substeps with the slow coordinates frozen,
which keeps the eps^-1 drift stable without implicit solves.  Exact
exponential steps are deliberately not used so the same code path covers
nonlinear models.

Randomness is counter-based: the normal increment consumed by path p at
(step, substep, column) is a pure function of (seed, p, step, substep,
column), produced by hashing the counter with a SplitMix64-style mixer and
mapping through the inverse normal CDF.  Results are therefore bit-identical
no matter how paths are chunked across workers.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import DimensionMismatch, SimulationBlowup

BLOWUP_LIMIT = 1e8
FAST_SUBSTEP_FRACTION = 0.1

_U = np.uint64
_MASK = (1 << 64) - 1
_PHI = _U(0x9E3779B97F4A7C15)
_M1 = _U(0xBF58476D1CE4E5B9)
_M2 = _U(0x94D049BB133111EB)
_C_PATH = _U(0xD1342543DE82EF95)
_C_SLOT = _U(0xAF251AF3B0F025B5)
_C_STEP = _U(0x9E6C63D0876A9F4B)
_C_SUB = _U(0xB5026F5AA96619E9)

# stream tags keep independent uses of the same seed disjoint
TAG_NOISE = 1
TAG_INIT = 2
TAG_GAUSS = 3


def _mix64(x):
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    x = (x ^ (x >> _U(30))) * _M1
    x = (x ^ (x >> _U(27))) * _M2
    return x ^ (x >> _U(31))


def _mix64_int(x: int) -> int:
    """Scalar SplitMix64 finalizer on Python ints (no overflow warnings)."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * int(_M1)) & _MASK
    x = ((x ^ (x >> 27)) * int(_M2)) & _MASK
    return x ^ (x >> 31)


def _seed_state(seed: int, tag: int, step: int, substep: int) -> np.uint64:
    h = (int(seed) & _MASK) * int(_PHI) & _MASK
    h = _mix64_int(h ^ ((int(tag) & _MASK) * int(_M2) & _MASK))
    h = _mix64_int(h ^ ((int(step) & _MASK) * int(_C_STEP) & _MASK))
    h = _mix64_int(h ^ ((int(substep) & _MASK) * int(_C_SUB) & _MASK))
    return _U(h)


def counter_normals(seed, step, substep, path_lo, n_paths, n_slots, tag=TAG_NOISE):
    """Standard-normal block of shape (n_paths, n_slots) for the given counters."""
    base = _seed_state(seed, tag, step, substep)
    paths = _mix64(np.arange(path_lo, path_lo + n_paths, dtype=np.uint64) * _C_PATH)
    slots = _mix64(np.arange(n_slots, dtype=np.uint64) * _C_SLOT)
    h = _mix64(_mix64(base ^ paths[:, None] ^ slots[None, :]))
    u = ((h >> _U(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
    return ndtri(u)


def derive_seed(seed: int, index: int) -> int:
    """Stable per-index integer sub-seed (e.g. one per path)."""
    return _mix64_int((int(seed) & _MASK) ^ ((int(index) & _MASK) * int(_C_PATH) & _MASK))


def n_workers_default() -> int:
    env = os.environ.get("THERMOCONV_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return 1


@dataclass
class DiffusionModel:
    """Callback bundle defining a simulable diffusion dZ = b dt + sigma dW.

    ``drift`` and callable coefficient fields must accept a state block of
    shape (n, dim) and return (n, dim) / (n, dim, r) / (n, dim, dim);
    constant coefficients may be given as plain arrays.  ``A`` is the
    diffusion matrix with sigma sigma^T = 2 A.  ``gamma`` is the
    irreversible drift component when the model has one.  When
    ``fast_dims > 0`` the leading block carries the eps^-1 scaling and the
    noise factor must be square and block-diagonal across the split.
    """

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    noise_factor: object
    A: object
    gamma: Optional[Callable[[np.ndarray], np.ndarray]] = None
    fast_dims: int = 0
    eps: float = 1.0

    def drift_at(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(self.drift(z), dtype=float)

    def noise_at(self, z: np.ndarray) -> np.ndarray:
        if callable(self.noise_factor):
            return np.asarray(self.noise_factor(z), dtype=float)
        s = np.asarray(self.noise_factor, dtype=float)
        return np.broadcast_to(s, (z.shape[0],) + s.shape)

    def a_at(self, z: np.ndarray) -> np.ndarray:
        if callable(self.A):
            return np.asarray(self.A(z), dtype=float)
        a = np.asarray(self.A, dtype=float)
        return np.broadcast_to(a, (z.shape[0],) + a.shape)

    def n_noise_cols(self) -> int:
        if callable(self.noise_factor):
            probe = self.noise_at(np.zeros((1, self.dim)))
            return probe.shape[-1]
        return np.asarray(self.noise_factor).shape[-1]

    def validate(self, points: np.ndarray, tol: float = 1e-10) -> None:
        """Check A symmetry and sigma sigma^T = 2A on sample points."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        a = self.a_at(pts)
        s = self.noise_at(pts)
        if np.max(np.abs(a - np.swapaxes(a, -1, -2))) > tol:
            raise DimensionMismatch("A(z) is not symmetric within 1e-10")
        ssT = np.einsum("nij,nkj->nik", s, s)
        if np.max(np.abs(ssT - 2.0 * a)) > tol * max(1.0, float(np.max(np.abs(a)))):
            raise DimensionMismatch("sigma sigma^T != 2 A within 1e-10")
        if self.fast_dims > 0:
            fd = self.fast_dims
            if s.shape[-1] != self.dim:
                raise DimensionMismatch(
                    "fast/slow substepping needs a square noise factor"
                )
            off = max(
                float(np.max(np.abs(s[:, :fd, fd:]))) if fd < self.dim else 0.0,
                float(np.max(np.abs(s[:, fd:, :fd]))) if fd < self.dim else 0.0,
            )
            if off > tol:
                raise DimensionMismatch(
                    "noise factor must be block-diagonal across the fast split"
                )


@dataclass
class PathEnsemble:
    """Snapshots of an ensemble: states has shape (n_paths, n_times, dim)."""

    times: np.ndarray
    states: np.ndarray
    seed: int

    def slice_at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, abs(t)):
            raise DimensionMismatch(f"time {t} not among snapshots")
        return self.states[:, idx, :]

    def to_binary(self, path: str) -> None:
        """Flat little-endian dump: header 3x uint64 (n_paths, n_times, dim)."""
        n_paths, n_times, dim = self.states.shape
        with open(path, "wb") as fh:
            np.asarray([n_paths, n_times, dim], dtype="<u8").tofile(fh)
            self.states.astype("<f8").tofile(fh)

    @staticmethod
    def from_binary(path: str, times=None, seed: int = 0) -> "PathEnsemble":
        with open(path, "rb") as fh:
            header = np.fromfile(fh, dtype="<u8", count=3)
            n_paths, n_times, dim = (int(v) for v in header)
            flat = np.fromfile(fh, dtype="<f8", count=n_paths * n_times * dim)
        states = flat.reshape(n_paths, n_times, dim)
        if times is None:
            times = np.arange(n_times, dtype=float)
        return PathEnsemble(np.asarray(times, dtype=float), states, seed)


def _check_blowup(z: np.ndarray) -> None:
    if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > BLOWUP_LIMIT:
        raise SimulationBlowup("state exceeded 1e8 or became non-finite")


def _n_substeps(model: DiffusionModel, dt: float) -> int:
    if model.fast_dims <= 0:
        return 0
    return int(np.ceil(dt / (FAST_SUBSTEP_FRACTION * model.eps) - 1e-12))


def _advance_block(model, z, step_idx, dt, seed, path_lo, z2=None):
    """One slow step for a block of paths; z2, when given, is advanced with
    identical noise (synchronous coupling)."""
    fd = model.fast_dims
    n = z.shape[0]
    n_sub = _n_substeps(model, dt)
    if fd > 0 and n_sub > 0:
        h = dt / n_sub
        sqh = np.sqrt(h)
        for j in range(n_sub):
            xi = counter_normals(seed, step_idx, j, path_lo, n, fd)
            for state in (z, z2) if z2 is not None else (z,):
                b = model.drift_at(state)
                s = model.noise_at(state)
                state[:, :fd] += b[:, :fd] * h + np.einsum(
                    "nij,nj->ni", s[:, :fd, :fd], xi
                ) * sqh
        n_slow = model.dim - fd
        if n_slow > 0:
            sqdt = np.sqrt(dt)
            xi = counter_normals(seed, step_idx, n_sub, path_lo, n, n_slow)
            for state in (z, z2) if z2 is not None else (z,):
                b = model.drift_at(state)
                s = model.noise_at(state)
                state[:, fd:] += b[:, fd:] * dt + np.einsum(
                    "nij,nj->ni", s[:, fd:, fd:], xi
                ) * sqdt
    else:
        r = model.n_noise_cols()
        sqdt = np.sqrt(dt)
        xi = counter_normals(seed, step_idx, 0, path_lo, n, r)
        for state in (z, z2) if z2 is not None else (z,):
            b = model.drift_at(state)
            s = model.noise_at(state)
            state += b * dt + np.einsum("nij,nj->ni", s, xi) * sqdt
    _check_blowup(z)
    if z2 is not None:
        _check_blowup(z2)


def _snap_indices(times, dt):
    idx = []
    for t in times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)) or k < 0:
            raise DimensionMismatch(f"snapshot time {t} is not a multiple of dt")
        idx.append(k)
    return idx


def integrate(model: DiffusionModel, z0, dt: float, horizon: float, seed: int):
    """Single Euler-Maruyama path; returns (times, states[(n_steps+1), dim]).

    horizon must be an integral multiple of dt.
    """
    if dt <= 0:
        raise DimensionMismatch("dt must be positive")
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise DimensionMismatch("horizon must be an integral multiple of dt")
    z = np.atleast_2d(np.asarray(z0, dtype=float)).copy()
    if z.shape != (1, model.dim):
        raise DimensionMismatch(f"z0 must have dimension {model.dim}")
    out = np.empty((n_steps + 1, model.dim))
    out[0] = z[0]
    for k in range(n_steps):
        _advance_block(model, z, k, dt, seed, 0)
        out[k + 1] = z[0]
    return dt * np.arange(n_steps + 1), out


def _run_chunk(model, init_block, path_lo, dt, snap_idx, seed, out_block):
    z = init_block.copy()
    n_steps = max(snap_idx) if snap_idx else 0
    pos = {k: i for i, k in enumerate(snap_idx)}
    if 0 in pos:
        out_block[:, pos[0], :] = z
    for k in range(n_steps):
        _advance_block(model, z, k, dt, seed, path_lo)
        if (k + 1) in pos:
            out_block[:, pos[k + 1], :] = z


def ensemble(
    model: DiffusionModel,
    sampler,
    n_paths: int,
    dt: float,
    times: Sequence[float],
    seed: int,
    n_workers: Optional[int] = None,
) -> PathEnsemble:
    """Ensemble of paths with per-path streams derived from (seed, path).

    ``sampler`` maps an integer sub-seed to an initial state; samplers
    built by :func:`gaussian_sampler` expose a vectorized block method that
    is used automatically.  Snapshots are taken at the requested times,
    each of which must sit on the step grid.
    """
    times = np.asarray(list(times), dtype=float)
    snap_idx = _snap_indices(times, dt)
    if n_workers is None:
        n_workers = n_workers_default()
    init = _initial_states(sampler, n_paths, model.dim, seed)
    states = np.empty((n_paths, len(times), model.dim))
    chunk = max(1, min(n_paths, 1 << 15))
    spans = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]

    def work(span):
        lo, hi = span
        _run_chunk(model, init[lo:hi], lo, dt, snap_idx, seed, states[lo:hi])

    if n_workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(work, spans))
    else:
        for span in spans:
            work(span)
    return PathEnsemble(times, states, seed)


def _initial_states(sampler, n_paths, dim, seed):
    block = getattr(sampler, "sample_block", None)
    if block is not None:
        init = np.asarray(block(seed, 0, n_paths), dtype=float)
    else:
        init = np.empty((n_paths, dim))
        for p in range(n_paths):
            init[p] = np.asarray(sampler(derive_seed(seed, p)), dtype=float)
    if init.shape != (n_paths, dim):
        raise DimensionMismatch(
            f"sampler produced shape {init.shape}, expected {(n_paths, dim)}"
        )
    return init


class gaussian_sampler:
    """Initial-state sampler for N(mean, cov) with counter-keyed draws."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        self._chol = np.linalg.cholesky(cov)

    def __call__(self, seed: int) -> np.ndarray:
        xi = counter_normals(seed, 0, 0, 0, 1, self.mean.size, tag=TAG_INIT)[0]
        return self.mean + self._chol @ xi

    def sample_block(self, seed: int, lo: int, hi: int) -> np.ndarray:
        xi = counter_normals(seed, 0, 0, lo, hi - lo, self.mean.size, tag=TAG_INIT)
        return self.mean[None, :] + xi @ self._chol.T


class constant_sampler:
    """Sampler that always returns the same initial state."""

    def __init__(self, z0):
        self.z0 = np.atleast_1d(np.asarray(z0, dtype=float))

    def __call__(self, seed: int) -> np.ndarray:
        return self.z0.copy()

    def sample_block(self, seed: int, lo: int, hi: int) -> np.ndarray:
        return np.tile(self.z0, (hi - lo, 1))


def sample_gaussian(mean, cov, n: int, seed: int) -> np.ndarray:
    """n exact draws from N(mean, cov), reproducible via the counter stream."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    chol = np.linalg.cholesky(np.asarray(cov, dtype=float))
    xi = counter_normals(seed, 0, 0, 0, n, mean.size, tag=TAG_GAUSS)
    return mean[None, :] + xi @ chol.T


def couple(model: DiffusionModel, z1, z2, dt: float, horizon: float, seed: int):
    """Synchronously coupled pair driven by identical noise increments.

    Returns (times, path1, path2, energy) where
    energy[k] = (z1-z2)^T A(z1)^{-1} (z1-z2) at grid time k*dt.
    """
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise DimensionMismatch("horizon must be an integral multiple of dt")
    a = np.atleast_2d(np.asarray(z1, dtype=float)).copy()
    b = np.atleast_2d(np.asarray(z2, dtype=float)).copy()
    out1 = np.empty((n_steps + 1, model.dim))
    out2 = np.empty((n_steps + 1, model.dim))
    energy = np.empty(n_steps + 1)
    out1[0], out2[0] = a[0], b[0]
    energy[0] = _pair_energy(model, a, b)[0]
    for k in range(n_steps):
        _advance_block(model, a, k, dt, seed, 0, z2=b)
        out1[k + 1], out2[k + 1] = a[0], b[0]
        energy[k + 1] = _pair_energy(model, a, b)[0]
    return dt * np.arange(n_steps + 1), out1, out2, energy


def couple_ensemble(
    model: DiffusionModel,
    z1,
    z2,
    n_reps: int,
    dt: float,
    times: Sequence[float],
    seed: int,
):
    """n_reps synchronously coupled replicas of the pair (z1, z2).

    Returns (times, energies) with energies of shape (n_reps, n_times);
    replica r consumes the stream of path index r, so results match any
    other run with the same seed regardless of batching.
    """
    times = np.asarray(list(times), dtype=float)
    snap_idx = _snap_indices(times, dt)
    pos = {k: i for i, k in enumerate(snap_idx)}
    a = np.tile(np.asarray(z1, dtype=float), (n_reps, 1))
    b = np.tile(np.asarray(z2, dtype=float), (n_reps, 1))
    energies = np.empty((n_reps, len(times)))
    if 0 in pos:
        energies[:, pos[0]] = _pair_energy(model, a, b)
    for k in range(max(snap_idx) if snap_idx else 0):
        _advance_block(model, a, k, dt, seed, 0, z2=b)
        if (k + 1) in pos:
            energies[:, pos[k + 1]] = _pair_energy(model, a, b)
    return times, energies


def _pair_energy(model, a, b):
    diff = a - b
    amat = model.a_at(a)
    sol = np.linalg.solve(amat, diff[..., None])[..., 0]
    return np.einsum("ni,ni->n", diff, sol)


def mc_expectation(states, observable):
    """Sample mean and standard error of observable over an ensemble slice.

    ``observable`` may be vectorized over a (n, dim) block (returning (n,))
    or act on single states.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = states.shape[0]
    if n < 2:
        raise DimensionMismatch("need at least 2 paths for a standard error")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            vals = np.asarray(observable(states), dtype=float)
        if vals.shape != (n,):
            raise TypeError
    except (TypeError, ValueError, IndexError, Warning):
        vals = np.asarray([float(observable(s)) for s in states])
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / np.sqrt(n))
    return mean, se
