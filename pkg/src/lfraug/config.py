"""Run configuration: a diff-able line-based text format with dotted keys.

Example::

    schema_version = 1
    experiment = msd-quickstart
    baseline = msd
    seed = 0
    generator.name = msd
    generator.n_train = 10000
    generator.n_test = 1000
    dims.n_xb = 2
    dims.n_xa = 0
    dims.n_za = 1
    dims.n_wa = 1
    train.param_mode = well_posed
    train.adam_epochs = 500

Values are parsed as JSON where possible (numbers, booleans, quoted strings,
lists); bare words fall back to strings. Validation collects every problem
before reporting, so a broken config fails with the full list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .bench import Dataset, MsdParams, cct_baseline, load_dataset, msd_baseline, msd_generate
from .errors import ConfigError, DataFormatError
from .model import BaselineModel, LfrDims
from .train import TrainConfig

SCHEMA_VERSION = 1


def parse_value(raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> dict:
    """Dotted-key lines -> nested dict. '#' starts a comment."""
    tree: dict = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {ln}: expected 'key = value', got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {ln}: empty key")
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {ln}: key {key!r} conflicts with a scalar entry")
        node[parts[-1]] = parse_value(raw)
    return tree


@dataclass
class GeneratorSpec:
    name: str = "msd"
    n_train: int = 10000
    n_test: int = 1000
    seed: int = 1
    input_lo: float = -100.0
    input_hi: float = 100.0
    noise_snr_db: float | None = None
    msd: MsdParams = field(default_factory=MsdParams)


@dataclass
class RunConfig:
    """Everything one command needs: experiment, data, dims, and training knobs."""

    experiment: str
    baseline: str  # "msd" | "cct" | "module:callable"
    dims: LfrDims
    train: TrainConfig
    out_dir: Path
    train_path: Path | None = None
    test_path: Path | None = None
    ts: float | None = None
    generator: GeneratorSpec | None = None
    cct_k_init: tuple = (0.05, 0.05, 0.05, 0.05)
    order_target: str = "xa"
    order_rho_grid: tuple = ()
    n_init: int = 50


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_DIMS_FIELDS = {"n_xb", "n_xa", "n_u", "n_y", "n_za", "n_wa"}


def build_run_config(tree: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed config tree, collecting every error before raising."""
    errors: list[str] = []
    base_dir = Path(base_dir) if base_dir is not None else Path(".")

    version = tree.get("schema_version")
    if version != SCHEMA_VERSION:
        errors.append(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    experiment = tree.get("experiment") or "experiment"
    baseline = tree.get("baseline")
    if baseline is None:
        errors.append("missing 'baseline' (msd, cct, or module:callable)")

    dims = None
    dims_tree = tree.get("dims", {})
    unknown = set(dims_tree) - _DIMS_FIELDS
    if unknown:
        errors.append(f"unknown dims keys: {sorted(unknown)}")
    try:
        dims = LfrDims(
            n_xb=int(dims_tree.get("n_xb", 0)), n_xa=int(dims_tree.get("n_xa", 0)),
            n_u=int(dims_tree.get("n_u", 1)), n_y=int(dims_tree.get("n_y", 1)),
            n_za=int(dims_tree.get("n_za", 0)), n_wa=int(dims_tree.get("n_wa", 0)),
        )
    except Exception as exc:
        errors.append(f"dims: {exc}")

    train_tree = dict(tree.get("train", {}))
    unknown = set(train_tree) - _TRAIN_FIELDS
    if unknown:
        errors.append(f"unknown train keys: {sorted(unknown)}")
        for k in unknown:
            train_tree.pop(k)
    if "ann_hidden" in train_tree and train_tree["ann_hidden"] is not None:
        train_tree["ann_hidden"] = tuple(
            int(v) for v in np.atleast_1d(train_tree["ann_hidden"])
        )
    if "seed" in tree and "seed" not in train_tree:
        train_tree["seed"] = int(tree["seed"])
    train_cfg = None
    try:
        train_cfg = TrainConfig(**train_tree)
    except (TypeError, ConfigError) as exc:
        errors.append(f"train: {exc}")

    dataset_tree = tree.get("dataset", {})
    train_path = dataset_tree.get("train")
    test_path = dataset_tree.get("test")
    ts = dataset_tree.get("ts")
    generator = None
    if "generator" in tree:
        gen_tree = tree["generator"]
        msd_tree = tree.get("msd", {})
        try:
            msd_params = MsdParams(**{k: float(v) for k, v in msd_tree.items()})
            generator = GeneratorSpec(
                name=gen_tree.get("name", "msd"),
                n_train=int(gen_tree.get("n_train", 10000)),
                n_test=int(gen_tree.get("n_test", 1000)),
                seed=int(gen_tree.get("seed", 1)),
                input_lo=float(gen_tree.get("input_lo", -100.0)),
                input_hi=float(gen_tree.get("input_hi", 100.0)),
                noise_snr_db=(None if gen_tree.get("noise_snr_db") is None
                              else float(gen_tree["noise_snr_db"])),
                msd=msd_params,
            )
            if generator.name != "msd":
                errors.append(f"unknown generator {generator.name!r} (only 'msd' is built in)")
        except (TypeError, ValueError, ConfigError) as exc:
            errors.append(f"generator: {exc}")
    if train_path is None and generator is None:
        errors.append("no training data: set dataset.train or a generator section")
    if train_path is not None and ts is None:
        errors.append("dataset.ts is required when loading CSV datasets")

    order_tree = tree.get("order", {})
    order_target = order_tree.get("target", "xa")
    order_rho_grid = tuple(float(v) for v in order_tree.get("rho_grid", []) or [])

    cct_tree = tree.get("cct", {})
    cct_k_init = tuple(float(v) for v in cct_tree.get("k_init", (0.05,) * 4))

    if errors:
        raise ConfigError("invalid configuration:\n  - " + "\n  - ".join(errors))

    return RunConfig(
        experiment=str(experiment),
        baseline=str(baseline),
        dims=dims,
        train=train_cfg,
        out_dir=base_dir / str(tree.get("out_dir", "out")),
        train_path=None if train_path is None else base_dir / str(train_path),
        test_path=None if test_path is None else base_dir / str(test_path),
        ts=None if ts is None else float(ts),
        generator=generator,
        cct_k_init=cct_k_init,
        order_target=str(order_target),
        order_rho_grid=order_rho_grid,
        n_init=int(tree.get("n_init", 50)),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    tree = parse_config_text(path.read_text(encoding="utf-8"))
    return build_run_config(tree, base_dir=path.parent)


def make_baseline(rc: RunConfig) -> BaselineModel:
    if rc.baseline == "msd":
        params = rc.generator.msd if rc.generator is not None else MsdParams(
            ts=rc.ts if rc.ts is not None else 0.01
        )
        return msd_baseline(params)
    if rc.baseline == "cct":
        ts = rc.ts if rc.ts is not None else 4.0
        return cct_baseline(k_init=rc.cct_k_init, ts=ts)
    if ":" in rc.baseline:
        import importlib

        mod_name, fn_name = rc.baseline.split(":", 1)
        try:
            factory = getattr(importlib.import_module(mod_name), fn_name)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load baseline plugin {rc.baseline!r}: {exc}") from exc
        baseline = factory()
        if not isinstance(baseline, BaselineModel):
            raise ConfigError(f"plugin {rc.baseline!r} did not return a BaselineModel")
        return baseline
    raise ConfigError(f"unknown baseline {rc.baseline!r}")


def resolve_datasets(rc: RunConfig) -> tuple[Dataset, Dataset | None]:
    """Load CSV datasets or run the configured generator."""
    if rc.train_path is not None:
        train = load_dataset(rc.train_path, ts=rc.ts)
        test = load_dataset(rc.test_path, ts=rc.ts) if rc.test_path else None
        return train, test
    gen = rc.generator
    train = msd_generate(gen.msd, gen.n_train, (gen.input_lo, gen.input_hi),
                         seed=gen.seed, noise_snr_db=gen.noise_snr_db)
    test = msd_generate(gen.msd, gen.n_test, (gen.input_lo, gen.input_hi),
                        seed=gen.seed + 1, noise_snr_db=None)
    return train, test


def validate_only(rc: RunConfig) -> list[str]:
    """Full config/dataset validation without any compute; returns findings."""
    notes = [f"experiment: {rc.experiment}", f"baseline: {rc.baseline}",
             f"dims: {rc.dims}", f"mode: {rc.train.param_mode}"]
    baseline = make_baseline(rc)
    if rc.dims.n_xb != baseline.n_xb or rc.dims.n_u != baseline.n_u \
            or rc.dims.n_y != baseline.n_y:
        raise ConfigError(
            f"dims (n_xb={rc.dims.n_xb}, n_u={rc.dims.n_u}, n_y={rc.dims.n_y}) "
            f"inconsistent with baseline ({baseline.n_xb}, {baseline.n_u}, {baseline.n_y})"
        )
    if rc.train_path is not None:
        if not rc.train_path.exists():
            raise DataFormatError(f"training dataset not found: {rc.train_path}")
        data = load_dataset(rc.train_path, ts=rc.ts)
        if data.u.shape[1] != rc.dims.n_u or data.y.shape[1] != rc.dims.n_y:
            raise ConfigError(
                f"dataset channels (n_u={data.u.shape[1]}, n_y={data.y.shape[1]}) "
                f"do not match dims"
            )
        notes.append(f"train data: {data.n} samples from {rc.train_path}")
        if rc.test_path is not None:
            if not rc.test_path.exists():
                raise DataFormatError(f"test dataset not found: {rc.test_path}")
            notes.append(f"test data: {load_dataset(rc.test_path, ts=rc.ts).n} samples")
    else:
        notes.append(
            f"generator: {rc.generator.name} ({rc.generator.n_train} train / "
            f"{rc.generator.n_test} test samples)"
        )
    return notes
