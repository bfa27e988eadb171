"""Reverse-mode differentiation surfaces, including implicit fixed-point gradients.

JAX does the heavy lifting. This module pins down the package conventions on
top of it: a flat named parameter vector (`GradVector`), finiteness checking
with a named culprit, and the implicit-function-theorem gradient through the
algebraic-loop solve. The loop Jacobian dg/dz is assembled explicitly (the
loop dimension is small) and the adjoint system solved densely, never
materializing an inverse.

The unrolled-backprop path (`fixed_point_unrolled`) exists purely as a test
oracle for the implicit gradient; production code differentiates through
`fixed_point_solve`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from .errors import InvalidInputError, NonFiniteError, WellPosednessError

# Finite-difference step used by gradient validation: h = FD_STEP * max(1, |theta_i|).
FD_STEP = 1e-5


@dataclass(frozen=True)
class ParamLayout:
    """Name -> (offset, shape) map over a flat parameter vector."""

    names: tuple[str, ...]
    offsets: tuple[int, ...]
    shapes: tuple[tuple[int, ...], ...]
    size: int

    @staticmethod
    def from_shapes(named_shapes: list[tuple[str, tuple[int, ...]]]) -> "ParamLayout":
        names, offsets, shapes = [], [], []
        off = 0
        for name, shape in named_shapes:
            if name in names:
                raise InvalidInputError(f"duplicate parameter name {name!r}")
            names.append(name)
            offsets.append(off)
            shapes.append(tuple(shape))
            off += int(np.prod(shape, dtype=int))
        return ParamLayout(tuple(names), tuple(offsets), tuple(shapes), off)

    def slot(self, name: str) -> slice:
        i = self.names.index(name)
        n = int(np.prod(self.shapes[i], dtype=int))
        return slice(self.offsets[i], self.offsets[i] + n)

    def unflatten(self, flat):
        flat = jnp.asarray(flat)
        out = {}
        for name, off, shape in zip(self.names, self.offsets, self.shapes):
            n = int(np.prod(shape, dtype=int))
            out[name] = flat[off : off + n].reshape(shape)
        return out

    def flatten(self, values: dict) -> np.ndarray:
        flat = np.zeros(self.size)
        for name, off, shape in zip(self.names, self.offsets, self.shapes):
            n = int(np.prod(shape, dtype=int))
            v = np.asarray(values[name], dtype=float)
            if v.shape != shape:
                raise InvalidInputError(
                    f"parameter {name!r} has shape {v.shape}, layout expects {shape}"
                )
            flat[off : off + n] = v.ravel()
        return flat

    def name_at(self, index: int) -> str:
        for name, off, shape in zip(self.names, self.offsets, self.shapes):
            if off <= index < off + int(np.prod(shape, dtype=int)):
                return name
        raise IndexError(index)


@dataclass
class GradVector:
    """A flat parameter vector together with its layout (and optionally a gradient)."""

    values: np.ndarray
    layout: ParamLayout
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.layout.size:
            raise InvalidInputError(
                f"vector length {self.values.size} != layout size {self.layout.size}"
            )
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=float).ravel()
            if self.grad.size != self.layout.size:
                raise InvalidInputError("gradient length does not match layout")

    @staticmethod
    def from_dict(values: dict, order: list[str] | None = None) -> "GradVector":
        names = list(values) if order is None else order
        layout = ParamLayout.from_shapes(
            [(n, np.asarray(values[n]).shape) for n in names]
        )
        return GradVector(layout.flatten(values), layout)

    def to_dict(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in self.layout.unflatten(self.values).items()}

    def get(self, name: str) -> np.ndarray:
        i = self.layout.names.index(name)
        return self.values[self.layout.slot(name)].reshape(self.layout.shapes[i])


def _first_nonfinite_name(vec: np.ndarray, layout: ParamLayout) -> str:
    bad = np.flatnonzero(~np.isfinite(vec))
    return layout.name_at(int(bad[0])) if bad.size else "<unknown>"


def grad(loss_fn, params: GradVector) -> GradVector:
    """Gradient of a scalar function of the flat parameter vector.

    Raises NonFiniteError if the loss value or any gradient entry is
    non-finite, naming the offending parameter block.
    """
    if not np.all(np.isfinite(params.values)):
        raise NonFiniteError(
            f"non-finite parameter entry in {_first_nonfinite_name(params.values, params.layout)!r}"
        )
    value, g = jax.value_and_grad(loss_fn)(jnp.asarray(params.values))
    value = float(value)
    g = np.asarray(g)
    if not np.isfinite(value):
        raise NonFiniteError("loss value is non-finite")
    if not np.all(np.isfinite(g)):
        raise NonFiniteError(
            f"non-finite gradient in {_first_nonfinite_name(g, params.layout)!r}"
        )
    return GradVector(params.values, params.layout, grad=g)


def value_and_grad_fn(loss_fn, jit: bool = True):
    """Compiled (value, gradient) evaluator over a flat vector."""
    vg = jax.value_and_grad(loss_fn)
    return jax.jit(vg) if jit else vg


# ---------------------------------------------------------------------------
# Fixed-point solve with implicit differentiation
# ---------------------------------------------------------------------------


@partial(jax.custom_vjp, nondiff_argnums=(0, 3, 4))
def fixed_point_solve(g, z0, args, tol, n_max):
    """Iterate z <- g(z, args) from z0 until the step shrinks below tol.

    Returns (z_star, iters, residual) where ``iters`` counts applications of
    g and ``residual`` is the final step norm. Gradients w.r.t. ``args`` flow
    through the implicit function theorem at z_star; z0 receives a zero
    gradient (the fixed point does not depend on the start).
    """
    return _fpi_forward(g, z0, args, tol, n_max)


def _fpi_forward(g, z0, args, tol, n_max):
    z1 = g(z0, args)
    res = jnp.linalg.norm(z1 - z0)

    def cond(carry):
        _, r, n = carry
        return jnp.logical_and(r >= tol, n < n_max)

    def body(carry):
        z, _, n = carry
        z_next = g(z, args)
        return z_next, jnp.linalg.norm(z_next - z), n + 1

    z, res, iters = lax.while_loop(cond, body, (z1, res, jnp.asarray(1)))
    return z, iters, res


def _fpi_fwd(g, z0, args, tol, n_max):
    out = _fpi_forward(g, z0, args, tol, n_max)
    z_star = out[0]
    return out, (z_star, args)


def _fpi_bwd(g, tol, n_max, saved, cotangents):
    z_star, args = saved
    z_bar = cotangents[0]  # iter-count and residual cotangents are discarded
    jac = jax.jacobian(lambda z: g(z, args))(z_star)
    eye = jnp.eye(z_star.shape[0])
    adjoint = jnp.linalg.solve((eye - jac).T, z_bar)
    _, vjp_args = jax.vjp(lambda a: g(z_star, a), args)
    (args_bar,) = vjp_args(adjoint)
    return jnp.zeros_like(z_star), args_bar


fixed_point_solve.defvjp(_fpi_fwd, _fpi_bwd)


def fixed_point_unrolled(g, z0, args, n_steps):
    """Plain n_steps-fold application of g; differentiated by ordinary backprop.

    Test oracle for the implicit gradient, not a production path.
    """

    def body(z, _):
        return g(z, args), None

    z, _ = lax.scan(body, z0, None, length=n_steps)
    return z


def grad_through_fixed_point(fp_residual, z_star, params: GradVector, upstream) -> GradVector:
    """Parameter gradient contribution of a converged fixed point.

    ``fp_residual`` is the loop map g(z, theta) over the flat parameter
    vector; ``upstream`` is the adjoint of z_star. Returns
    upstream^T (I - dg/dz)^-1 dg/dtheta as a GradVector, computed by one
    dense adjoint solve plus one VJP.
    """
    z_star = jnp.asarray(z_star, dtype=jnp.float64)
    upstream = jnp.asarray(upstream, dtype=jnp.float64)
    theta = jnp.asarray(params.values)
    jac = np.asarray(jax.jacobian(lambda z: fp_residual(z, theta))(z_star))
    eye = np.eye(z_star.shape[0])
    sv = np.linalg.svd(eye - jac, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] / sv[0] < 1e-12:
        raise WellPosednessError(
            "I - dg/dz is singular to tolerance at the fixed point; "
            "the model is not well-posed (bug signal under Cayley parametrization)"
        )
    adjoint = np.linalg.solve((eye - jac).T, np.asarray(upstream))
    _, vjp_theta = jax.vjp(lambda t: fp_residual(z_star, t), theta)
    (contribution,) = vjp_theta(jnp.asarray(adjoint))
    return GradVector(params.values, params.layout, grad=np.asarray(contribution))


def finite_difference_grad(loss_fn, values: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences with magnitude-scaled steps; validation oracle."""
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    for i in range(values.size):
        h = step * max(1.0, abs(values[i]))
        up = values.copy()
        dn = values.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (float(loss_fn(jnp.asarray(up))) - float(loss_fn(jnp.asarray(dn)))) / (2 * h)
    return out
