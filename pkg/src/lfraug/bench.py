"""Built-in benchmark systems and dataset I/O.

The mass-spring-damper generator produces data from a stable discrete-time
system with an unmodeled smooth friction term (Coulomb-like tanh plus viscous
drag); its baseline model simply drops the friction. The cascaded-tanks
baseline implements the Bernoulli-effect two-tank model with trainable flow
coefficients. Datasets are plain CSV: header ``k,u1..un_u,y1..yn_y``, one
sample per row.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import jax.numpy as jnp
import numpy as np

from .errors import DataFormatError, InvalidInputError
from .model import BaselineModel
from .param import lti_lipschitz


@dataclass
class Dataset:
    """Input/output sequences in physical units."""

    u: np.ndarray  # (N, n_u)
    y: np.ndarray  # (N, n_y)
    ts: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.u.shape[0] == 1 and self.u.shape[1] > 1:
            self.u = self.u.T
        if self.y.shape[0] == 1 and self.y.shape[1] > 1:
            self.y = self.y.T
        if self.u.shape[0] != self.y.shape[0]:
            raise InvalidInputError("u and y must have equal row counts")
        if self.ts <= 0:
            raise InvalidInputError("sampling time must be positive")

    @property
    def n(self) -> int:
        return self.u.shape[0]


@dataclass(frozen=True)
class MsdParams:
    """Mass-spring-damper parameters; friction is the unmodeled part."""

    m: float = 1.0          # kg
    k_s: float = 1e3        # N/m
    c_d: float = 90.0       # N*s/m
    ts: float = 0.01        # s
    f_c: float = 20.0       # N, Coulomb-like friction level
    v_eps: float = 0.05     # m/s, friction smoothing velocity
    c_v: float = 5.0        # N*s/m, viscous friction

    def __post_init__(self):
        if min(self.m, self.k_s, self.ts) <= 0:
            raise InvalidInputError("m, k_s, ts must be positive")
        if min(self.c_d, self.f_c, self.v_eps, self.c_v) < 0:
            raise InvalidInputError("friction parameters must be non-negative")


def msd_friction(v, params: MsdParams):
    """Smooth Coulomb + viscous friction; globally Lipschitz."""
    return params.f_c * np.tanh(v / params.v_eps) + params.c_v * v


def msd_generate(params: MsdParams, n: int, input_range=(-100.0, 100.0),
                 seed: int = 0, noise_snr_db: float | None = None,
                 x0=(0.0, 0.0)) -> Dataset:
    """Simulate the friction-laden MSD under i.i.d. uniform inputs.

    The measured output is the position; optional white Gaussian noise is
    scaled per channel to the requested SNR. Deterministic per seed.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = input_range
    u = rng.uniform(lo, hi, size=(n, 1))
    x = np.zeros((n, 2))
    xk = np.asarray(x0, dtype=float).copy()
    ts, m = params.ts, params.m
    for k in range(n):
        x[k] = xk
        x1, x2 = xk
        force = -params.k_s * x1 - params.c_d * x2 - msd_friction(x2, params) + u[k, 0]
        xk = np.array([x1 + ts * x2, x2 + (ts / m) * force])
    y = x[:, :1].copy()
    meta = {"name": "msd", "seed": seed, "noise": "none"}
    if noise_snr_db is not None:
        rms = np.sqrt(np.mean(y**2, axis=0))
        sigma = rms * 10.0 ** (-noise_snr_db / 20.0)
        y = y + rng.standard_normal(y.shape) * sigma
        meta["noise"] = f"awgn {noise_snr_db:g} dB"
    return Dataset(u=u, y=y, ts=ts, meta=meta)


def msd_baseline(params: MsdParams | None = None) -> BaselineModel:
    """The MSD model with friction removed; physical parameters known and fixed."""
    p = params or MsdParams()
    ts, m, k_s, c_d = p.ts, p.m, p.k_s, p.c_d
    theta = np.array([m, k_s, c_d])

    def f(x, u, th):
        x1, x2 = x[0], x[1]
        return jnp.stack([
            x1 + ts * x2,
            x2 + (ts / m) * (-k_s * x1 - c_d * x2 + u[0]),
        ])

    def h(x, u, th):
        return x[:1]

    a_lin = np.array([[1.0, ts], [-ts * k_s / m, 1.0 - ts * c_d / m]])
    b_lin = np.array([[0.0], [ts / m]])
    lip_f = lti_lipschitz(a_lin, b_lin)
    return BaselineModel(
        name="msd", f=f, h=h, theta_b=theta, theta_b0=theta.copy(),
        lip_f=lip_f, lip_h=1.0,
        x_box=(np.array([-0.5, -10.0]), np.array([0.5, 10.0])),
        u_box=(np.array([-100.0]), np.array([100.0])),
        n_xb=2, n_u=1, n_y=1, trainable=False,
        builder={"kind": "msd", "m": m, "k_s": k_s, "c_d": c_d, "ts": ts},
    )


def cct_baseline(k_init=(0.05, 0.05, 0.05, 0.05), ts: float = 4.0) -> BaselineModel:
    """Bernoulli-effect cascaded-tanks model with trainable flow coefficients.

    Square roots are evaluated on max(x, 0): the physical levels are
    non-negative, and optimizer excursions below zero must not produce NaNs.
    """
    if ts <= 0:
        raise InvalidInputError("ts must be positive")
    theta0 = np.asarray(k_init, dtype=float)
    if theta0.shape != (4,):
        raise InvalidInputError("k_init must provide the 4 flow coefficients")

    def f(x, u, th):
        r1 = jnp.sqrt(jnp.maximum(x[0], 0.0))
        r2 = jnp.sqrt(jnp.maximum(x[1], 0.0))
        return jnp.stack([
            x[0] + ts * (-th[0] * r1 + th[1] * u[0]),
            x[1] + ts * (th[2] * r1 - th[3] * r2),
        ])

    def h(x, u, th):
        return x[1:2]

    return BaselineModel(
        name="cct", f=f, h=h, theta_b=theta0.copy(), theta_b0=theta0.copy(),
        lip_f=1.0, lip_h=1.0,
        x_box=(np.array([0.01, 0.01]), np.array([20.0, 20.0])),
        u_box=(np.array([0.0]), np.array([5.0])),
        n_xb=2, n_u=1, n_y=1, trainable=True,
        builder={"kind": "cct", "k_init": theta0.tolist(), "ts": ts},
    )


# ---------------------------------------------------------------------------
# CSV dataset files
# ---------------------------------------------------------------------------


def save_dataset(data: Dataset, path) -> None:
    """Write ``k,u1..,y1..`` CSV with full float precision.

    The sampling time is not part of the file format; it travels through the
    run configuration (a ``#ts`` comment row is accepted on load as an
    extension).
    """
    path = Path(path)
    n_u, n_y = data.u.shape[1], data.y.shape[1]
    header = ["k"] + [f"u{i+1}" for i in range(n_u)] + [f"y{i+1}" for i in range(n_y)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(data.n):
            row = ([str(k)] + [repr(float(v)) for v in data.u[k]]
                   + [repr(float(v)) for v in data.y[k]])
            writer.writerow(row)


def load_dataset(path, ts: float | None = None) -> Dataset:
    """Read a dataset CSV; raises DataFormatError with the offending line number."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file", line=1)
    header = [c.strip() for c in rows[0]]
    if not header or header[0] != "k":
        raise DataFormatError("header must start with 'k'", line=1)
    u_cols = [i for i, c in enumerate(header) if c.startswith("u")]
    y_cols = [i for i, c in enumerate(header) if c.startswith("y")]
    if not u_cols or not y_cols:
        raise DataFormatError("header must declare u and y columns", line=1)
    expected = [f"u{i+1}" for i in range(len(u_cols))] + [f"y{i+1}" for i in range(len(y_cols))]
    if header[1:] != expected:
        raise DataFormatError(
            f"columns must be k,{','.join(expected)}; got {','.join(header)}", line=1
        )
    u_rows, y_rows = [], []
    file_ts = ts
    for ln, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if row[0].startswith("#"):
            if row[0] == "#ts":
                try:
                    file_ts = float(row[1])
                except (IndexError, ValueError) as exc:
                    raise DataFormatError("malformed #ts row", line=ln) from exc
            continue
        if len(row) != len(header):
            raise DataFormatError(
                f"expected {len(header)} fields, got {len(row)}", line=ln
            )
        try:
            u_rows.append([float(row[i]) for i in u_cols])
            y_rows.append([float(row[i]) for i in y_cols])
        except ValueError as exc:
            raise DataFormatError(f"non-numeric field: {exc}", line=ln) from exc
    if not u_rows:
        raise DataFormatError("no data rows", line=len(rows))
    if file_ts is None:
        raise DataFormatError("sampling time missing (no #ts row; pass ts=...)", line=1)
    return Dataset(u=np.asarray(u_rows), y=np.asarray(y_rows), ts=file_ts,
                   meta={"path": str(path)})
