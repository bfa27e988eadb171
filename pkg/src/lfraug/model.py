"""The LFR augmentation structure: blocks, nonlinear feedback, and simulation.

The interconnection matrix W couples the combined state x_hat, the input, and
the feedback signal w:

    [x_hat(k+1); y_hat(k); z(k)] = W [x_hat(k); u(k); w(k)],
    w(k) = phi_nl(z(k)) = [f_baseline; h_baseline; ann](z)

Internally the model runs in normalized coordinates: inputs are shifted and
scaled, outputs are produced scaled and de-normalized at the boundary, and the
baseline component is evaluated in physical units behind scaling wrappers.
The algebraic loop z = g(z, x, u) is solved by fixed-point iteration, which
converges whenever the parametrization keeps L_phi * ||D_zw||_2 < 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from .diff import ParamLayout, fixed_point_solve, fixed_point_unrolled
from .errors import DivergenceError, InvalidInputError, NonFiniteError
from .linalg import cayley_stack

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class LfrDims:
    """Partitioned dimensions of the augmentation structure.

    n_xb baseline states, n_xa augmentation states, n_u inputs, n_y outputs,
    n_za ANN input width, n_wa ANN output width. The latent dimensions are
    derived: z stacks (x_b, u)-bound z_b with z_a, w stacks the baseline
    outputs (f, h) with w_a.
    """

    n_xb: int
    n_xa: int
    n_u: int
    n_y: int
    n_za: int
    n_wa: int

    def __post_init__(self):
        if min(self.n_xb, self.n_u, self.n_y) < 1:
            raise InvalidInputError("n_xb, n_u, n_y must all be >= 1")
        if min(self.n_xa, self.n_za, self.n_wa) < 0:
            raise InvalidInputError("dimensions must be non-negative")

    @property
    def n_x(self) -> int:
        return self.n_xb + self.n_xa

    @property
    def n_zb(self) -> int:
        return self.n_xb + self.n_u

    @property
    def n_wb(self) -> int:
        return self.n_xb + self.n_y

    @property
    def n_z(self) -> int:
        return self.n_zb + self.n_za

    @property
    def n_w(self) -> int:
        return self.n_wb + self.n_wa

    @property
    def has_ann(self) -> bool:
        return self.n_za > 0 and self.n_wa > 0


@jax.tree_util.register_pytree_node_class
@dataclass
class LfrBlocks:
    """The nine blocks of the interconnection matrix W."""

    a: jnp.ndarray
    b_u: jnp.ndarray
    b_w: jnp.ndarray
    c_y: jnp.ndarray
    d_yu: jnp.ndarray
    d_yw: jnp.ndarray
    c_z: jnp.ndarray
    d_zu: jnp.ndarray
    d_zw: jnp.ndarray

    _FIELDS = ("a", "b_u", "b_w", "c_y", "d_yu", "d_yw", "c_z", "d_zu", "d_zw")

    def tree_flatten(self):
        return tuple(getattr(self, f) for f in self._FIELDS), None

    @classmethod
    def tree_unflatten(cls, aux, children):
        return cls(*children)

    def assemble(self):
        """Full W matrix: rows (x, y, z), columns (x, u, w)."""
        rows = [
            jnp.concatenate([self.a, self.b_u, self.b_w], axis=1),
            jnp.concatenate([self.c_y, self.d_yu, self.d_yw], axis=1),
            jnp.concatenate([self.c_z, self.d_zu, self.d_zw], axis=1),
        ]
        return jnp.concatenate(rows, axis=0)

    def to_numpy(self) -> "LfrBlocks":
        return LfrBlocks(*(np.asarray(getattr(self, f)) for f in self._FIELDS))

    def validate_shapes(self, dims: LfrDims):
        expected = {
            "a": (dims.n_x, dims.n_x),
            "b_u": (dims.n_x, dims.n_u),
            "b_w": (dims.n_x, dims.n_w),
            "c_y": (dims.n_y, dims.n_x),
            "d_yu": (dims.n_y, dims.n_u),
            "d_yw": (dims.n_y, dims.n_w),
            "c_z": (dims.n_z, dims.n_x),
            "d_zu": (dims.n_z, dims.n_u),
            "d_zw": (dims.n_z, dims.n_w),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise InvalidInputError(f"block {name} has shape {got}, expected {shape}")


def block_slices(dims: LfrDims) -> dict[str, tuple[slice, slice]]:
    """Row/column slices of each block inside the assembled W matrix."""
    n_x, n_u, n_w, n_y, n_z = dims.n_x, dims.n_u, dims.n_w, dims.n_y, dims.n_z
    rx, ry, rz = slice(0, n_x), slice(n_x, n_x + n_y), slice(n_x + n_y, n_x + n_y + n_z)
    cx, cu, cw = slice(0, n_x), slice(n_x, n_x + n_u), slice(n_x + n_u, n_x + n_u + n_w)
    return {
        "a": (rx, cx), "b_u": (rx, cu), "b_w": (rx, cw),
        "c_y": (ry, cx), "d_yu": (ry, cu), "d_yw": (ry, cw),
        "c_z": (rz, cx), "d_zu": (rz, cu), "d_zw": (rz, cw),
    }


@dataclass
class BaselineModel:
    """First-principles state transition and output maps with physical parameters.

    ``f`` and ``h`` are jnp-traceable callables (x_b, u, theta_b) -> array in
    physical units. ``lip_f`` / ``lip_h`` are known Lipschitz constants over
    the operating box; they drive the well-posedness budget.
    """

    name: str
    f: Callable
    h: Callable
    theta_b: np.ndarray
    theta_b0: np.ndarray
    lip_f: float
    lip_h: float
    x_box: tuple[np.ndarray, np.ndarray]
    u_box: tuple[np.ndarray, np.ndarray]
    n_xb: int
    n_u: int
    n_y: int
    trainable: bool = False
    builder: dict = field(default_factory=dict)  # reconstruction metadata for dumps

    def __post_init__(self):
        self.theta_b = np.atleast_1d(np.asarray(self.theta_b, dtype=float))
        self.theta_b0 = np.atleast_1d(np.asarray(self.theta_b0, dtype=float))
        if self.theta_b.shape != self.theta_b0.shape:
            raise InvalidInputError("theta_b and theta_b0 must have the same length")
        if self.lip_f < 0 or self.lip_h < 0:
            raise InvalidInputError("Lipschitz constants must be non-negative")
        self.x_box = (np.asarray(self.x_box[0], float), np.asarray(self.x_box[1], float))
        self.u_box = (np.asarray(self.u_box[0], float), np.asarray(self.u_box[1], float))
        if np.any(self.x_box[1] <= self.x_box[0]) or np.any(self.u_box[1] <= self.u_box[0]):
            raise InvalidInputError("operating box must have positive extent")


ACTIVATIONS = {
    "tanh": jnp.tanh,
    # swish has Lipschitz constant ~1.0998 > 1, which would break the
    # 1-Lipschitz activation assumption behind the ANN bound; the scaled
    # variant restores the contract.
    "swish_scaled": lambda x: x * jax.nn.sigmoid(x) / 1.1,
}


@dataclass
class AnnParams:
    """Feedforward network weights/biases with a 1-Lipschitz activation tag."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("weights and biases must pair up")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidInputError("consecutive layer dimensions must chain")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise InvalidInputError("bias length must match layer output")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @staticmethod
    def init(n_in: int, hidden: tuple[int, ...], n_out: int, activation: str,
             rng: np.random.Generator, zero_last: bool = True) -> "AnnParams":
        sizes = [n_in, *hidden, n_out]
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            fan_in = max(sizes[i], 1)
            w = rng.standard_normal((sizes[i + 1], sizes[i])) / np.sqrt(fan_in)
            weights.append(w)
            biases.append(np.zeros(sizes[i + 1]))
        if zero_last:
            weights[-1] = np.zeros_like(weights[-1])
        return AnnParams(weights, biases, activation)


def ann_apply(weights, biases, activation: str, z_a):
    """Forward pass; the activation is skipped on the output layer."""
    act = ACTIVATIONS[activation]
    h = z_a
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = w @ h + b
        if i < last:
            h = act(h)
    return h


@dataclass
class Normalizer:
    """Per-channel input/output statistics and baseline-state scales."""

    u_mean: np.ndarray
    u_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    x_scale: np.ndarray

    def __post_init__(self):
        for name in ("u_scale", "y_scale", "x_scale"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any(v <= 0):
                raise InvalidInputError(f"{name} entries must be positive")

    @staticmethod
    def identity(n_u: int, n_y: int, n_xb: int) -> "Normalizer":
        return Normalizer(
            u_mean=np.zeros(n_u), u_scale=np.ones(n_u),
            y_mean=np.zeros(n_y), y_scale=np.ones(n_y),
            x_scale=np.ones(n_xb),
        )

    def normalize_u(self, u):
        return (np.asarray(u) - self.u_mean) / self.u_scale

    def normalize_y(self, y):
        return (np.asarray(y) - self.y_mean) / self.y_scale

    def denormalize_y(self, y_norm):
        return np.asarray(y_norm) * self.y_scale + self.y_mean

    def scale_state(self, x_phys):
        return np.asarray(x_phys) / self.x_scale

    def unscale_state(self, x_scaled):
        return np.asarray(x_scaled) * self.x_scale


def baseline_simulate(baseline: BaselineModel, x0, u_seq, theta_b=None):
    """Free-run simulation of the first-principles model in physical units."""
    u_seq = jnp.asarray(u_seq, dtype=jnp.float64)
    theta = jnp.asarray(baseline.theta_b if theta_b is None else theta_b)
    f, h = baseline.f, baseline.h

    def body(x, u):
        return f(x, u, theta), (x, h(x, u, theta))

    _, (xs, ys) = jax.jit(lambda x0_, u_: lax.scan(body, x0_, u_))(
        jnp.asarray(x0, dtype=jnp.float64), u_seq
    )
    return np.asarray(xs), np.asarray(ys)


def fit_normalizer(data, baseline: BaselineModel, x0=None) -> Normalizer:
    """Channel statistics from training data; state scales from a baseline run.

    Scales are floored at 1e-8; a constant channel triggers a warning and the
    floor.
    """
    u = np.asarray(data.u, dtype=float)
    y = np.asarray(data.y, dtype=float)
    if u.shape[0] < 2:
        raise InvalidInputError("dataset must contain at least 2 samples")
    u_scale = u.std(axis=0)
    y_scale = y.std(axis=0)
    if np.any(u_scale < SCALE_FLOOR) or np.any(y_scale < SCALE_FLOOR):
        warnings.warn("constant input/output channel; scale floored at 1e-8")
    x0 = np.zeros(baseline.n_xb) if x0 is None else np.asarray(x0, dtype=float)
    xs, _ = baseline_simulate(baseline, x0, u)
    x_scale = xs.std(axis=0)
    if np.any(x_scale < SCALE_FLOOR):
        warnings.warn("baseline state with (near-)zero excursion; scale floored")
    return Normalizer(
        u_mean=u.mean(axis=0),
        u_scale=np.maximum(u_scale, SCALE_FLOOR),
        y_mean=y.mean(axis=0),
        y_scale=np.maximum(y_scale, SCALE_FLOOR),
        x_scale=np.maximum(x_scale, SCALE_FLOOR),
    )


@dataclass
class EvalConfig:
    """Fixed-point-iteration and gradient-path settings."""

    eps_fpi: float = 1e-5
    n_max: int = 10
    fpi_grad: str = "implicit"  # "implicit" | "unrolled"
    unroll_steps: int = 30
    x_sat: float = 1e6  # state saturation in the training path (scaled coords)


PARAM_MODES = ("free", "dzw_zero", "dzw_ab_only", "well_posed", "contracting")


@dataclass
class LfrModel:
    """An LFR augmentation model: static structure plus free parameters.

    ``params`` maps parameter names to numpy arrays; the realization of the
    nine W blocks from them depends on ``mode``. ``mask`` (optional) is a
    boolean keep-mask over the assembled W used after structure discovery.
    """

    dims: LfrDims
    mode: str
    baseline: BaselineModel
    norm: Normalizer
    params: dict[str, np.ndarray]
    l_phi: float
    lipschitz_bound: float
    activation: str = "tanh"
    alpha_bar: float = 1.0
    cayley_eps: float = 1e-4
    safe_sigma_c: bool = True
    eval_cfg: EvalConfig = field(default_factory=EvalConfig)
    mask: np.ndarray | None = None
    init_info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in PARAM_MODES:
            raise InvalidInputError(f"unknown param mode {self.mode!r}")
        if not (0.0 < self.alpha_bar <= 1.0):
            raise InvalidInputError("alpha_bar must lie in (0, 1]")
        self.params = {k: np.asarray(v, dtype=float) for k, v in self.params.items()}
        self._sim_cache: dict = {}

    # -- parameter plumbing -------------------------------------------------

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def layout(self, extra: list[tuple[str, tuple[int, ...]]] | None = None) -> ParamLayout:
        shapes = [(n, self.params[n].shape) for n in self.param_names()]
        if extra:
            shapes.extend(extra)
        return ParamLayout.from_shapes(shapes)

    def flat_params(self) -> np.ndarray:
        return self.layout().flatten(self.params)

    def with_params(self, new_params: dict[str, np.ndarray]) -> "LfrModel":
        out = replace(self, params={k: np.asarray(v, float) for k, v in new_params.items()})
        out._sim_cache = self._sim_cache  # static structure unchanged
        return out

    def ann_params(self) -> AnnParams | None:
        if not self.dims.has_ann:
            return None
        n_layers = len([k for k in self.params if k.startswith("ann.w")])
        return AnnParams(
            weights=[self.params[f"ann.w{i}"] for i in range(n_layers)],
            biases=[self.params[f"ann.b{i}"] for i in range(n_layers)],
            activation=self.activation,
        )

    def theta_b(self) -> np.ndarray:
        if self.baseline.trainable:
            return self.params["theta_b"]
        return self.baseline.theta_b

    # -- realization --------------------------------------------------------

    def realize(self, params: dict | None = None) -> LfrBlocks:
        p = {k: jnp.asarray(v) for k, v in (params or self.params).items()}
        return realize_blocks(self, p)

    def certificates(self) -> dict:
        """Exact-norm well-posedness / contraction certificates for reporting."""
        from .linalg import spectral_norm_exact

        blocks = self.realize().to_numpy()
        out = {"mode": self.mode, "l_phi": self.l_phi}
        dzw_norm = spectral_norm_exact(blocks.d_zw) if blocks.d_zw.size else 0.0
        out["dzw_norm"] = dzw_norm
        out["wp_margin"] = 1.0 - self.l_phi * dzw_norm
        if self.mode == "contracting":
            kappa = self.l_phi / (1.0 - self.l_phi * dzw_norm)
            bound = (
                spectral_norm_exact(blocks.a)
                + kappa * spectral_norm_exact(blocks.b_w) * spectral_norm_exact(blocks.c_z)
            )
            out["kappa"] = kappa
            out["contraction_bound"] = bound
            out["contraction_margin"] = self.alpha_bar - bound
        return out


def _mask_factors(model: LfrModel) -> dict[str, np.ndarray] | None:
    """Per-block keep factors derived from the W-level mask.

    Directly parametrized blocks are masked entrywise; Cayley-parametrized
    blocks can only be zeroed as a whole (all entries below threshold).
    """
    if model.mask is None:
        return None
    mask = np.asarray(model.mask, dtype=float)
    slices = block_slices(model.dims)
    constrained = set()
    if model.mode in ("well_posed", "contracting"):
        constrained.add("d_zw")
    if model.mode == "contracting":
        constrained.update({"a", "b_w", "c_z"})
    out = {}
    for name, (rs, cs) in slices.items():
        sub = mask[rs, cs]
        if name in constrained:
            out[name] = np.ones_like(sub) if sub.any() else np.zeros_like(sub)
        else:
            out[name] = sub
    return out


def realize_blocks(model: LfrModel, p: dict) -> LfrBlocks:
    """Free parameters -> the nine W blocks (jnp, differentiable)."""
    dims = model.dims
    blocks = {
        "b_u": p["B_u"], "c_y": p["C_y"], "d_yu": p["D_yu"],
        "d_yw": p["D_yw"], "d_zu": p["D_zu"],
    }
    if model.mode != "contracting":
        blocks["a"] = p["A"]
        blocks["b_w"] = p["B_w"]
        blocks["c_z"] = p["C_z"]

    if model.mode == "free":
        blocks["d_zw"] = p["D_zw"]
    elif model.mode == "dzw_zero":
        blocks["d_zw"] = jnp.zeros((dims.n_z, dims.n_w))
    elif model.mode == "dzw_ab_only":
        d_zw = jnp.zeros((dims.n_z, dims.n_w))
        blocks["d_zw"] = d_zw.at[dims.n_zb :, : dims.n_wb].set(p["D_zw_ab"])
    else:
        sigma_d = jax.nn.sigmoid(p["wp.d"])
        core = cayley_stack(p["wp.x"], p["wp.y"], p["wp.z"], model.cayley_eps)
        if dims.n_z < dims.n_w:
            core = core.T
        blocks["d_zw"] = (sigma_d / model.l_phi) * core

    if model.mode == "contracting":
        # kappa from the certified bound ||D_zw|| <= sigma_D / L: smooth and
        # always on the safe side of the exact-norm kappa.
        sigma_d = jax.nn.sigmoid(p["wp.d"])
        kappa = model.l_phi / (1.0 - sigma_d)
        a_bar = cayley_stack(p["ca.x"], p["ca.y"], p["ca.z"], model.cayley_eps)
        b_bar = cayley_stack(p["cb.x"], p["cb.y"], p["cb.z"], model.cayley_eps)
        if dims.n_x < dims.n_w:
            b_bar = b_bar.T
        c_bar = cayley_stack(p["cc.x"], p["cc.y"], p["cc.z"], model.cayley_eps)
        if dims.n_z < dims.n_x:
            c_bar = c_bar.T
        sigma_a, sigma_b, sigma_c = contracting_scales(
            p["con.alpha"], p["con.beta"], p["con.gamma"],
            model.alpha_bar, kappa, safe=model.safe_sigma_c,
        )
        blocks["a"] = model.alpha_bar * sigma_a * a_bar
        blocks["b_w"] = sigma_b * b_bar
        blocks["c_z"] = sigma_c * c_bar

    factors = _mask_factors(model)
    if factors is not None:
        blocks = {k: blocks[k] * jnp.asarray(factors[k]) for k in blocks}
    return LfrBlocks(**{k: jnp.asarray(v, dtype=jnp.float64) for k, v in blocks.items()})


def contracting_scales(alpha, beta, gamma, alpha_bar, kappa, safe: bool = True):
    """The scalar scales (sigma_A, sigma_B, sigma_C) of the contracting parametrization.

    In safe mode sigma_C carries the multiplicative (1 - sigmoid(gamma))
    factor and is non-negative by construction; in paper mode it follows the
    two-term formula and may go negative (callers must reject such draws).
    """
    sigma_a = jax.nn.sigmoid(alpha)
    s_gamma = jax.nn.sigmoid(gamma)
    root = jnp.sqrt((1.0 - sigma_a) / kappa)
    sigma_b = jnp.sqrt(alpha_bar) * jnp.exp(beta) * root
    if safe:
        sigma_c = jnp.sqrt(alpha_bar) * jnp.exp(-beta) * root * (1.0 - s_gamma)
    else:
        sigma_c = jnp.sqrt(alpha_bar) * jnp.exp(-beta) * root - (
            jnp.sqrt(alpha_bar) * s_gamma / (kappa * jnp.exp(beta) * root)
        )
    return sigma_a, sigma_b, sigma_c


# ---------------------------------------------------------------------------
# Evaluation: phi_nl, the loop map g, the fixed point, step and simulate
# ---------------------------------------------------------------------------


def _phi_factory(model: LfrModel):
    """phi_nl(z, bundle) with static structure baked in.

    bundle = (blocks, theta_b, ann_weights, ann_biases); everything traced
    flows through the bundle so the closure stays tracer-free.
    """
    dims = model.dims
    f, h = model.baseline.f, model.baseline.h
    activation = model.activation
    x_scale = jnp.asarray(model.norm.x_scale)
    u_scale = jnp.asarray(model.norm.u_scale)
    u_mean = jnp.asarray(model.norm.u_mean)
    y_scale = jnp.asarray(model.norm.y_scale)
    y_mean = jnp.asarray(model.norm.y_mean)
    n_xb, n_zb, n_wa = dims.n_xb, dims.n_zb, dims.n_wa
    has_ann = dims.has_ann

    def phi(z, bundle):
        _, theta_b, ws, bs = bundle
        z_b, z_a = z[:n_zb], z[n_zb:]
        x_phys = z_b[:n_xb] * x_scale
        u_phys = z_b[n_xb:] * u_scale + u_mean
        w_f = f(x_phys, u_phys, theta_b) / x_scale
        w_h = (h(x_phys, u_phys, theta_b) - y_mean) / y_scale
        if has_ann:
            w_a = ann_apply(ws, bs, activation, z_a)
        else:
            w_a = jnp.zeros(n_wa)
        return jnp.concatenate([w_f, w_h, w_a])

    return phi


def _g_factory(model: LfrModel):
    phi = _phi_factory(model)

    def g(z, args):
        x, u_n, bundle = args
        blocks = bundle[0]
        return blocks.d_zw @ phi(z, bundle) + blocks.c_z @ x + blocks.d_zu @ u_n

    return g, phi


def _bundle(model: LfrModel, params: dict | None = None):
    p = {k: jnp.asarray(v) for k, v in (params or model.params).items()}
    blocks = realize_blocks(model, p)
    theta_b = p["theta_b"] if model.baseline.trainable else jnp.asarray(model.baseline.theta_b)
    if model.dims.has_ann:
        n_layers = len([k for k in p if k.startswith("ann.w")])
        ws = tuple(p[f"ann.w{i}"] for i in range(n_layers))
        bs = tuple(p[f"ann.b{i}"] for i in range(n_layers))
    else:
        ws, bs = (), ()
    return (blocks, theta_b, ws, bs)


def phi_nl(z, model: LfrModel, params: dict | None = None) -> np.ndarray:
    """Evaluate the stacked nonlinear feedback [f; h; ann] at latent z (eager)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.dims.n_z,):
        raise InvalidInputError(f"z must have shape ({model.dims.n_z},)")
    phi = _phi_factory(model)
    out = np.asarray(phi(jnp.asarray(z), _bundle(model, params)))
    if not np.all(np.isfinite(out)):
        x_phys = z[: model.dims.n_xb] * model.norm.x_scale
        u_phys = z[model.dims.n_xb : model.dims.n_zb] * model.norm.u_scale + model.norm.u_mean
        raise NonFiniteError(
            f"baseline/ANN evaluation returned non-finite values at x={x_phys}, u={u_phys}"
        )
    return out


def g_map(z, x, u, model: LfrModel, params: dict | None = None) -> np.ndarray:
    """The algebraic-loop map g(z, x, u) = D_zw phi_nl(z) + C_z x + D_zu u_norm (eager).

    ``u`` is physical; ``x`` is the model's internal (scaled) state.
    """
    g, _ = _g_factory(model)
    u_n = jnp.asarray(model.norm.normalize_u(u))
    args = (jnp.asarray(x, dtype=jnp.float64), u_n, _bundle(model, params))
    return np.asarray(g(jnp.asarray(z, dtype=jnp.float64), args))


def solve_fixed_point(x, u, model: LfrModel, tol: float | None = None,
                      n_max: int | None = None, params: dict | None = None,
                      trace: bool = False):
    """Solve z = g(z, x, u) by fixed-point iteration from z0 = C_z x + D_zu u.

    Returns (z_star, iters, residual); with ``trace=True`` also the list of
    iterates (for convergence-bound verification). Reaching n_max without
    convergence is reported through the residual, not an exception.
    """
    tol = model.eval_cfg.eps_fpi if tol is None else tol
    n_max = model.eval_cfg.n_max if n_max is None else n_max
    g, _ = _g_factory(model)
    bundle = _bundle(model, params)
    u_n = jnp.asarray(model.norm.normalize_u(u))
    x = jnp.asarray(x, dtype=jnp.float64)
    args = (x, u_n, bundle)
    z0 = bundle[0].c_z @ x + bundle[0].d_zu @ u_n
    if not trace:
        z, iters, res = fixed_point_solve(g, z0, args, tol, n_max)
        return np.asarray(z), int(iters), float(res)
    iterates = [np.asarray(z0)]
    z_prev = z0
    iters = 0
    res = np.inf
    while iters < n_max:
        z = g(z_prev, args)
        iters += 1
        res = float(jnp.linalg.norm(z - z_prev))
        iterates.append(np.asarray(z))
        z_prev = z
        if res < tol:
            break
    return np.asarray(z_prev), iters, res, iterates


def step(x, u, model: LfrModel, params: dict | None = None):
    """One model step: solve the loop, then advance state and produce the output.

    Returns (x_next, y_hat_physical, z_star, diag) where diag carries the FPI
    iteration count and final residual.
    """
    g, phi = _g_factory(model)
    bundle = _bundle(model, params)
    u_n = jnp.asarray(model.norm.normalize_u(u))
    x = jnp.asarray(x, dtype=jnp.float64)
    blocks = bundle[0]
    z0 = blocks.c_z @ x + blocks.d_zu @ u_n
    z, iters, res = fixed_point_solve(g, z0, (x, u_n, bundle), model.eval_cfg.eps_fpi,
                                      model.eval_cfg.n_max)
    w = phi(z, bundle)
    x_next = blocks.a @ x + blocks.b_u @ u_n + blocks.b_w @ w
    y_n = blocks.c_y @ x + blocks.d_yu @ u_n + blocks.d_yw @ w
    y = model.norm.denormalize_y(np.asarray(y_n))
    return np.asarray(x_next), y, np.asarray(z), {"iters": int(iters), "residual": float(res)}


def make_sim_fn(model: LfrModel, saturate: bool = False):
    """Build the scan-based simulator: (bundle, x0, u_norm_seq) -> trajectories.

    Pure jnp; callers jit the composition. Outputs are normalized; the y
    de-normalization happens at the caller boundary.
    """
    g, phi = _g_factory(model)
    cfg = model.eval_cfg
    x_sat = cfg.x_sat
    use_implicit = cfg.fpi_grad == "implicit"
    unroll_steps = cfg.unroll_steps

    def run(bundle, x0, u_norm_seq):
        blocks = bundle[0]

        def body(x, u_n):
            z0 = blocks.c_z @ x + blocks.d_zu @ u_n
            args = (x, u_n, bundle)
            if use_implicit:
                z, iters, res = fixed_point_solve(g, z0, args, cfg.eps_fpi, cfg.n_max)
            else:
                z = fixed_point_unrolled(g, z0, args, unroll_steps)
                iters = jnp.asarray(unroll_steps)
                res = jnp.linalg.norm(g(z, args) - z)
            w = phi(z, bundle)
            x_next = blocks.a @ x + blocks.b_u @ u_n + blocks.b_w @ w
            if saturate:
                x_next = jnp.clip(x_next, -x_sat, x_sat)
            y_n = blocks.c_y @ x + blocks.d_yu @ u_n + blocks.d_yw @ w
            return x_next, (y_n, x, iters, res)

        _, (y_n, xs, iters, res) = lax.scan(body, x0, u_norm_seq)
        return y_n, xs, iters, res

    return run


def simulate(x0, u_seq, model: LfrModel, params: dict | None = None,
             jit: bool = True, strict_fpi: bool = False):
    """Free-run simulation over an input sequence (physical units in and out).

    Returns (y_hat_seq, x_seq, fpi_stats). Raises DivergenceError at the
    first non-finite state; with ``strict_fpi`` a fixed-point iteration that
    exhausts n_max above tolerance is an error instead of a statistic.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    if u_seq.ndim != 2 or u_seq.shape[0] < 1:
        raise InvalidInputError("u_seq must be (N, n_u) with N >= 1")
    key = ("sim", model.eval_cfg.fpi_grad)
    if key not in model._sim_cache:
        run = make_sim_fn(model, saturate=False)
        model._sim_cache[key] = jax.jit(run)
    run = model._sim_cache[key] if jit else make_sim_fn(model, saturate=False)
    bundle = _bundle(model, params)
    u_norm = jnp.asarray(model.norm.normalize_u(u_seq))
    y_n, xs, iters, res = run(bundle, jnp.asarray(x0, dtype=jnp.float64), u_norm)
    xs = np.asarray(xs)
    bad = ~np.all(np.isfinite(xs), axis=1)
    if bad.any():
        raise DivergenceError(int(np.flatnonzero(bad)[0]))
    iters = np.asarray(iters)
    res = np.asarray(res)
    nonconverged = int(np.sum(res >= model.eval_cfg.eps_fpi))
    if strict_fpi and nonconverged:
        k = int(np.flatnonzero(res >= model.eval_cfg.eps_fpi)[0])
        raise NonFiniteError(
            f"FPI did not converge at step {k}: residual {res[k]:.3e} >= "
            f"{model.eval_cfg.eps_fpi:g} after {int(iters[k])} iterations"
        )
    stats = {
        "max_iters": int(iters.max()),
        "mean_iters": float(iters.mean()),
        "max_residual": float(res.max()),
        "nonconverged_steps": nonconverged,
    }
    y = model.norm.denormalize_y(np.asarray(y_n))
    return y, xs, stats
