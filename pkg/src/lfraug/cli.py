"""Command-line front end.

Commands: ``train``, ``simulate``, ``discover``, ``order-select``,
``gen-data``, ``eval``. Exit codes: 0 success, 2 config error, 3 data error,
4 numerical failure. Every command is reproducible: the config file and seed
fully determine the outputs.

The model dump is self-describing JSON carrying dims, mode, the normalizer,
every free variable, and the realized interconnection blocks, so external
tools can re-verify the certificates without this package.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import Dataset, load_dataset, msd_generate, save_dataset
from .config import (
    RunConfig,
    load_run_config,
    make_baseline,
    resolve_datasets,
    validate_only,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DivergenceError,
    InvalidInputError,
    NonFiniteError,
    SingularMatrixError,
    WellPosednessError,
)
from .model import EvalConfig, LfrDims, LfrModel, Normalizer, simulate
from .train import (
    TrainConfig,
    estimate_x0_test,
    fit,
    group_lasso_select,
    metrics,
    reweighted_l1_discover,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# Model dump
# ---------------------------------------------------------------------------


def save_model(model: LfrModel, x0, path, extra: dict | None = None) -> None:
    blocks = model.realize().to_numpy()
    doc = {
        "format": "lfraug-model",
        "version": 1,
        "package_version": __version__,
        "dims": {k: getattr(model.dims, k)
                 for k in ("n_xb", "n_xa", "n_u", "n_y", "n_za", "n_wa")},
        "mode": model.mode,
        "activation": model.activation,
        "l_phi": model.l_phi,
        "lipschitz_bound": model.lipschitz_bound,
        "alpha_bar": model.alpha_bar,
        "cayley_eps": model.cayley_eps,
        "safe_sigma_c": model.safe_sigma_c,
        "eval_cfg": {
            "eps_fpi": model.eval_cfg.eps_fpi,
            "n_max": model.eval_cfg.n_max,
            "fpi_grad": model.eval_cfg.fpi_grad,
            "unroll_steps": model.eval_cfg.unroll_steps,
        },
        "baseline": {
            "name": model.baseline.name,
            "builder": model.baseline.builder,
            "theta_b": model.theta_b().tolist(),
            "theta_b0": model.baseline.theta_b0.tolist(),
            "trainable": model.baseline.trainable,
            "lip_f": model.baseline.lip_f,
            "lip_h": model.baseline.lip_h,
        },
        "normalizer": {
            "u_mean": model.norm.u_mean.tolist(),
            "u_scale": model.norm.u_scale.tolist(),
            "y_mean": model.norm.y_mean.tolist(),
            "y_scale": model.norm.y_scale.tolist(),
            "x_scale": model.norm.x_scale.tolist(),
        },
        "params": {k: v.tolist() for k, v in model.params.items()},
        "param_shapes": {k: list(v.shape) for k, v in model.params.items()},
        "mask": None if model.mask is None else np.asarray(model.mask, int).tolist(),
        "x0": np.asarray(x0, float).tolist(),
        "realized_blocks": {f: getattr(blocks, f).tolist() for f in blocks._FIELDS},
        "certificates": _jsonable(model.certificates()),
    }
    if extra:
        doc.update(_jsonable(extra))
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_model(path, baseline=None) -> tuple[LfrModel, np.ndarray]:
    """Rebuild a model from its dump. Built-in baselines are reconstructed
    from the stored sampling metadata; plugin baselines must be passed in."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot parse model file {path}: {exc}") from exc
    if doc.get("format") != "lfraug-model":
        raise DataFormatError(f"{path} is not an lfraug model dump")
    dims = LfrDims(**doc["dims"])
    if baseline is None:
        from .bench import MsdParams, cct_baseline, msd_baseline

        builder = doc["baseline"].get("builder") or {}
        kind = builder.get("kind", doc["baseline"]["name"])
        if kind == "msd":
            baseline = msd_baseline(MsdParams(
                m=builder.get("m", 1.0), k_s=builder.get("k_s", 1e3),
                c_d=builder.get("c_d", 90.0), ts=builder.get("ts", 0.01),
            ))
        elif kind == "cct":
            baseline = cct_baseline(k_init=builder.get("k_init", doc["baseline"]["theta_b0"]),
                                    ts=builder.get("ts", 4.0))
        else:
            raise ConfigError(
                f"model uses baseline {kind!r}; pass the baseline object explicitly"
            )
        baseline.theta_b = np.asarray(doc["baseline"]["theta_b"], float)
        baseline.lip_f = float(doc["baseline"]["lip_f"])
        baseline.lip_h = float(doc["baseline"]["lip_h"])
    nz = doc["normalizer"]
    norm = Normalizer(
        u_mean=np.asarray(nz["u_mean"]), u_scale=np.asarray(nz["u_scale"]),
        y_mean=np.asarray(nz["y_mean"]), y_scale=np.asarray(nz["y_scale"]),
        x_scale=np.asarray(nz["x_scale"]),
    )
    params = {
        k: np.asarray(v, float).reshape(doc["param_shapes"][k])
        for k, v in doc["params"].items()
    }
    ec = doc["eval_cfg"]
    model = LfrModel(
        dims=dims, mode=doc["mode"], baseline=baseline, norm=norm, params=params,
        l_phi=float(doc["l_phi"]), lipschitz_bound=float(doc["lipschitz_bound"]),
        activation=doc["activation"], alpha_bar=float(doc["alpha_bar"]),
        cayley_eps=float(doc["cayley_eps"]), safe_sigma_c=bool(doc["safe_sigma_c"]),
        eval_cfg=EvalConfig(eps_fpi=float(ec["eps_fpi"]), n_max=int(ec["n_max"]),
                            fpi_grad=ec["fpi_grad"], unroll_steps=int(ec["unroll_steps"])),
        mask=None if doc["mask"] is None else np.asarray(doc["mask"], bool),
    )
    return model, np.asarray(doc["x0"], float)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, LfrDims):
        return {k: getattr(obj, k) for k in ("n_xb", "n_xa", "n_u", "n_y", "n_za", "n_wa")}
    return obj


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------


def _write_metrics_csv(path, rows: dict[str, dict]):
    keys = ["rmse", "nrmse_percent", "bfr_percent"]
    lines = ["split," + ",".join(keys)]
    for split, m in rows.items():
        if m is None:
            continue
        lines.append(split + "," + ",".join(f"{m[k]:.10g}" for k in keys))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_loss_trace(path, trace):
    lines = ["phase,epoch,loss"]
    for phase, epoch, val in trace:
        lines.append(f"{phase},{epoch},{val:.12g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_certificates(path, certificates: dict, flags: dict):
    lines = ["# certificates (exact spectral norms)"]
    for k, v in certificates.items():
        lines.append(f"{k} = {v}")
    lines.append("# flags")
    for k, v in flags.items():
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _prepare_out(rc_or_path) -> Path:
    out = Path(rc_or_path.out_dir if isinstance(rc_or_path, RunConfig) else rc_or_path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    rc = _apply_overrides(rc, args)
    notes = validate_only(rc)
    if args.validate_only:
        print("\n".join(notes))
        return EXIT_OK
    baseline = make_baseline(rc)
    train_data, test_data = resolve_datasets(rc)
    result = fit(train_data, baseline, rc.dims, rc.train, test_data=test_data)
    out = _prepare_out(rc)
    save_model(result.model, result.x0, out / "model.json",
               extra={"experiment": rc.experiment, "flags": result.flags})
    _write_metrics_csv(out / "metrics.csv",
                       {"train": result.metrics_train, "test": result.metrics_test})
    _write_certificates(out / "certificates.txt", result.certificates, result.flags)
    _write_loss_trace(out / "loss_trace.csv", result.loss_trace)
    m = result.metrics_test or result.metrics_train
    print(f"train: done; NRMSE {m['nrmse_percent']:.4f}% -> {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, _ = load_model(args.model)
    data = load_dataset(args.dataset, ts=args.ts)
    n_init = args.n_init
    x0 = estimate_x0_test(model, data, n_init)
    y_hat, _, fpi = simulate(x0, data.u, model)
    out = _prepare_out(args.out)
    header = ",".join(
        ["k"] + [f"y{i+1}" for i in range(data.y.shape[1])]
        + [f"yhat{i+1}" for i in range(y_hat.shape[1])]
    )
    rows = [header]
    for k in range(data.n):
        rows.append(",".join([str(k)] + [repr(float(v)) for v in data.y[k]]
                             + [repr(float(v)) for v in y_hat[k]]))
    (out / "y_hat.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    m = metrics(data.y, y_hat, skip=n_init)
    _write_metrics_csv(out / "metrics.csv", {"test": m})
    print(f"simulate: RMSE {m['rmse']:.6g}, NRMSE {m['nrmse_percent']:.4f}% "
          f"(skip {n_init}); FPI max iters {fpi['max_iters']} -> {out}")
    return EXIT_OK


def cmd_discover(args) -> int:
    rc = load_run_config(args.config)
    rc = _apply_overrides(rc, args)
    notes = validate_only(rc)
    if args.validate_only:
        print("\n".join(notes))
        return EXIT_OK
    baseline = make_baseline(rc)
    train_data, test_data = resolve_datasets(rc)
    result = reweighted_l1_discover(train_data, baseline, rc.dims, rc.train,
                                    test_data=test_data)
    out = _prepare_out(rc)
    sp = result.sparsity
    save_model(result.model, result.x0, out / "model.json",
               extra={"experiment": rc.experiment,
                      "sparsity": {k: v for k, v in sp.items() if k != "mask"}})
    _write_metrics_csv(out / "metrics.csv",
                       {"train": result.metrics_train, "test": result.metrics_test})
    _write_certificates(out / "certificates.txt", result.certificates, result.flags)
    _write_loss_trace(out / "loss_trace.csv", result.loss_trace)
    report = [
        f"rho_lfr = {sp['rho_lfr']:.6g} (rule of thumb)" if rc.train.rho_lfr == 0
        else f"rho_lfr = {sp['rho_lfr']:.6g}",
        f"reweight iterations = {sp['reweight_iterations']} "
        f"(converged: {sp['reweight_converged']})",
        f"zeroed entries = {sp['n_zeroed']}/{sp['n_entries']} "
        f"({100 * sp['fraction_zeroed']:.1f}%)",
        f"D_zw block zeroed = {sp['dzw_zeroed']}",
        "per-block zeroed fractions:",
    ] + [f"  {k} = {100 * v:.1f}%" for k, v in sp["per_block_zeroed"].items()]
    (out / "sparsity_report.txt").write_text("\n".join(report) + "\n", encoding="utf-8")
    print("\n".join(report))
    print(f"discover: done -> {out}")
    return EXIT_OK


def cmd_order_select(args) -> int:
    rc = load_run_config(args.config)
    rc = _apply_overrides(rc, args)
    target = args.target or rc.order_target
    rho_grid = ([float(v) for v in args.rho_grid.split(",")] if args.rho_grid
                else list(rc.order_rho_grid))
    if not rho_grid:
        raise ConfigError("empty rho grid: pass --rho-grid or set order.rho_grid")
    notes = validate_only(rc)
    if args.validate_only:
        print("\n".join(notes))
        return EXIT_OK
    baseline = make_baseline(rc)
    train_data, test_data = resolve_datasets(rc)
    rows = group_lasso_select(train_data, test_data, baseline, rc.dims, rc.train,
                              target, rho_grid)
    out = _prepare_out(rc)
    lines = ["rho,target,surviving_dims,n_xa,n_za,n_wa,refit_nrmse_percent,refit_bfr_percent"]
    for r in rows:
        d = r["dims"]
        lines.append(
            f"{r['rho']:.10g},{r['target']},{r['surviving_dims']},"
            f"{d.n_xa},{d.n_za},{d.n_wa},"
            f"{r['refit_nrmse_percent']:.6g},{r['refit_bfr_percent']:.6g}"
        )
    (out / "order_select.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    print(f"order-select: done -> {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    rc = load_run_config(args.config)
    rc = _apply_overrides(rc, args)
    if rc.generator is None:
        raise ConfigError("gen-data needs a generator section in the config")
    if args.validate_only:
        print(f"generator {rc.generator.name}: {rc.generator.n_train} train / "
              f"{rc.generator.n_test} test samples")
        return EXIT_OK
    train_data, test_data = resolve_datasets(rc)
    out = _prepare_out(rc)
    save_dataset(train_data, out / "train.csv")
    paths = [out / "train.csv"]
    if test_data is not None:
        save_dataset(test_data, out / "test.csv")
        paths.append(out / "test.csv")
    print("gen-data: wrote " + ", ".join(str(p) for p in paths)
          + f" (ts = {train_data.ts})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, x0 = load_model(args.model)
    certs = model.certificates()
    lines = [f"{k} = {v}" for k, v in certs.items()]
    if args.dataset is not None:
        data = load_dataset(args.dataset, ts=args.ts)
        if args.n_init > 0:
            x0 = estimate_x0_test(model, data, args.n_init)
        y_hat, _, fpi = simulate(x0, data.u, model)
        m = metrics(data.y, y_hat, skip=max(args.n_init, 0))
        lines += [f"rmse = {m['rmse']}", f"nrmse_percent = {m['nrmse_percent']}",
                  f"bfr_percent = {m['bfr_percent']}",
                  f"fpi_max_iters = {fpi['max_iters']}",
                  f"fpi_nonconverged_steps = {fpi['nonconverged_steps']}"]
    print("\n".join(lines))
    if args.out:
        out = _prepare_out(args.out)
        (out / "eval.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def _apply_overrides(rc: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        rc = replace(rc, train=replace(rc.train, seed=args.seed))
    if getattr(args, "out", None):
        from dataclasses import replace

        rc = replace(rc, out_dir=Path(args.out))
    return rc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lfraug",
        description="Gray-box identification with well-posed/contracting LFR augmentation",
    )
    parser.add_argument("--version", action="version", version=f"lfraug {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--validate-only", action="store_true",
                       help="validate config and data, no compute")

    p = sub.add_parser("train", help="fit a model per the config")
    add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("simulate", help="simulate a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--ts", type=float, default=None, help="dataset sampling time")
    p.add_argument("--n-init", type=int, default=50,
                   help="initial-state estimation window length")
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("discover", help="reweighted-l1 structure discovery")
    add_common(p)
    p.set_defaults(fn=cmd_discover)

    p = sub.add_parser("order-select", help="group-lasso model-order selection")
    add_common(p)
    p.add_argument("--target", choices=["za", "wa", "xa"], default=None)
    p.add_argument("--rho-grid", default=None, help="comma-separated rho values")
    p.set_defaults(fn=cmd_order_select)

    p = sub.add_parser("gen-data", help="write generator datasets to CSV")
    add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("eval", help="certificates and metrics for a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--ts", type=float, default=None)
    p.add_argument("--n-init", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NonFiniteError, SingularMatrixError,
            WellPosednessError, InvalidInputError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
