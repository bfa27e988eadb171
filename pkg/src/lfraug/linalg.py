"""Dense small-matrix kernels: spectral norms and generalized Cayley transforms.

Two flavors live here. The numpy-facing functions (`spectral_norm_exact`,
`cayley_square`, `cayley_general`) validate their inputs and honor the error
contracts; they are the verification path. The jnp core routines
(`spectral_norm_diff`, `cayley_stack`) are differentiable and safe to call
inside jitted training code. Both flavors share one Cayley formula so the
trained parameters and the verified matrices can never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax.numpy as jnp
import numpy as np
from jax import lax

from .errors import InvalidInputError, SingularMatrixError

# Reciprocal-condition threshold below which a solve is treated as singular.
RCOND_SINGULAR = 1e-12


def _as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def spectral_norm_exact(m) -> float:
    """Largest singular value, via symmetric eigendecomposition of the Gram matrix.

    The Gram matrix of the smaller side is used, so the cost is
    O(min(r, c)^3) plus one matrix product.
    """
    a = _as_matrix(m)
    if a.shape[0] < a.shape[1]:
        gram = a @ a.T
    else:
        gram = a.T @ a
    ev = np.linalg.eigvalsh(gram)
    return float(np.sqrt(max(ev[-1], 0.0)))


def _safe_norm(v):
    """2-norm with a well-defined zero gradient at the origin."""
    s = jnp.sum(v * v)
    safe = jnp.where(s > 0.0, s, 1.0)
    return jnp.where(s > 0.0, jnp.sqrt(safe), 0.0)


def spectral_norm_diff(m, iters: int):
    """Differentiable power-iteration estimate of the spectral norm.

    Starts from the deterministic normalized all-ones vector, applies
    ``iters`` rounds of v <- M^T M v (normalized), and returns ||M v||. The
    estimate is monotonically non-decreasing in ``iters`` and never exceeds
    the true spectral norm. A zero matrix yields 0 without dividing by zero.
    """
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    a = jnp.asarray(m, dtype=jnp.float64)
    cols = a.shape[1]
    v0 = jnp.ones(cols) / jnp.sqrt(cols)

    def body(v, _):
        s = a.T @ (a @ v)
        nrm = _safe_norm(s)
        v_next = jnp.where(nrm > 0.0, s / jnp.where(nrm > 0.0, nrm, 1.0), v)
        return v_next, None

    v, _ = lax.scan(body, v0, None, length=iters)
    return _safe_norm(a @ v)


@dataclass(frozen=True)
class CayleyFree:
    """Free variables of the generalized Cayley transform onto the open unit ball.

    Realizes an n x m matrix (n >= m) of spectral norm strictly below one from
    unconstrained ``x``, ``y`` (m x m) and ``z`` ((n - m) x m); ``eps`` keeps
    I + N invertible. ``z`` has zero rows when n = m.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    eps: float = 1e-4

    def __post_init__(self):
        x = _as_matrix(self.x, "x")
        y = _as_matrix(self.y, "y")
        m = x.shape[0]
        if x.shape != (m, m) or y.shape != (m, m):
            raise InvalidInputError("x and y must be square with matching size")
        z = np.asarray(self.z, dtype=float)
        if z.size == 0:
            z = np.zeros((0, m))
        elif z.ndim != 2 or z.shape[1] != m:
            raise InvalidInputError(f"z must have {m} columns, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise InvalidInputError("z contains non-finite entries")
        if self.eps <= 0.0:
            raise InvalidInputError("eps must be positive")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.x.shape[0] + self.z.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @staticmethod
    def random(n: int, m: int, rng: np.random.Generator, scale: float = 1.0,
               eps: float = 1e-4) -> "CayleyFree":
        if n < m:
            raise InvalidInputError("requires n >= m")
        return CayleyFree(
            x=scale * rng.standard_normal((m, m)),
            y=scale * rng.standard_normal((m, m)),
            z=scale * rng.standard_normal((n - m, m)),
            eps=eps,
        )


def cayley_stack(x, y, z, eps):
    """jnp core of the generalized Cayley transform: [Cayley(N); -2 Z (I+N)^-1].

    N = X^T X + (Y - Y^T) + Z^T Z + eps*I has N + N^T positive definite, so
    I + N is always invertible and no guard is needed on the solve.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    y = jnp.asarray(y, dtype=jnp.float64)
    z = jnp.asarray(z, dtype=jnp.float64)
    m = x.shape[0]
    eye = jnp.eye(m)
    n_mat = x.T @ x + (y - y.T) + z.T @ z + eps * eye
    ip = eye + n_mat
    # (I - N)(I + N)^-1 and -2 Z (I + N)^-1 via right solves.
    top = jnp.linalg.solve(ip.T, (eye - n_mat).T).T
    bottom = -2.0 * jnp.linalg.solve(ip.T, z.T).T
    return jnp.concatenate([top, bottom], axis=0)


def _check_solve_conditioning(a: np.ndarray, context: str):
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] / sv[0] < RCOND_SINGULAR:
        raise SingularMatrixError(
            f"{context}: reciprocal condition estimate below {RCOND_SINGULAR:g}"
        )


def cayley_square(n_mat) -> np.ndarray:
    """Square Cayley transform (I - N)(I + N)^-1 with a conditioning guard."""
    a = _as_matrix(n_mat, "N")
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError("N must be square")
    ip = np.eye(a.shape[0]) + a
    _check_solve_conditioning(ip, "I + N in Cayley transform")
    return np.linalg.solve(ip.T, (np.eye(a.shape[0]) - a).T).T


def cayley_general(f: CayleyFree) -> np.ndarray:
    """Generalized Cayley transform; the result has spectral norm < 1 strictly."""
    m = f.m
    n_mat = f.x.T @ f.x + (f.y - f.y.T) + f.z.T @ f.z + f.eps * np.eye(m)
    ip = np.eye(m) + n_mat
    sv = np.linalg.svd(ip, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] / sv[0] < RCOND_SINGULAR:
        # Theoretically excluded: N + N^T >= 2*eps*I makes I + N invertible.
        raise RuntimeError(
            "internal error: I + N singular in generalized Cayley despite eps > 0"
        )
    return np.asarray(cayley_stack(f.x, f.y, f.z, f.eps))


def solve_linear(a, b, context: str = "linear solve") -> np.ndarray:
    """Dense solve with the package-wide singularity guard."""
    a = _as_matrix(a, "A")
    _check_solve_conditioning(a, context)
    return np.linalg.solve(a, np.asarray(b, dtype=float))
