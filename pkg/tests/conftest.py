import numpy as np
import pytest

from thermoconv.matrix_kit import is_positively_stable, schur_complement, sym
from thermoconv.ou_lab import BlockMatrix


def random_stable_matrix(rng, d, shift=1.5):
    """Random matrix with spectrum in the open right half-plane."""
    m = rng.standard_normal((d, d))
    m = m + (abs(np.linalg.eigvals(m).real.min()) + shift) * np.eye(d)
    assert is_positively_stable(m)
    return m


def random_ou_block(rng, max_dim=4):
    """Random BlockMatrix with Sym(B11) > 0 and stable Schur complement.

    Retries until both standing stability conditions hold, so the draw is
    deterministic given the generator state.
    """
    while True:
        dx = int(rng.integers(1, 3))
        dy = int(rng.integers(1, max_dim - dx + 1))
        d = dx + dy
        b = rng.standard_normal((d, d))
        b = b + (abs(np.linalg.eigvalsh(sym(b)).min()) + 0.8) * np.eye(d)
        if np.linalg.eigvalsh(sym(b[:dx, :dx])).min() <= 1e-6:
            continue
        try:
            c = schur_complement(b, dx)
        except Exception:
            continue
        if is_positively_stable(b[:dx, :dx]) and is_positively_stable(c):
            return BlockMatrix(b, dx, dy)


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
