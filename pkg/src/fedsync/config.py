"""Experiment file parsing and validation.

Experiment files are JSON.  Unknown keys are rejected and every
validation error names the offending key (with a best-effort line number
in the source file) so misconfigured runs fail before any compute starts.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .aggregation import KuramotoMode
from .engine import (
    AggregatorSpec,
    ConfigError,
    DatasetSpec,
    FederatedConfig,
    ModelSpec,
)
from .objectives import NoiseModel

__all__ = [
    "ExperimentFile",
    "SweepCell",
    "TheorySpec",
    "expand_sweep",
    "load_experiment",
]

_TOP_KEYS = {
    "name", "kind", "out_dir", "sweep",
    # federated knobs
    "rounds", "clients", "local_epochs", "batch_size", "lr0", "momentum",
    "lr_schedule", "lr_restart_each_round", "shards_per_client", "seed",
    "threads", "aggregator", "dataset", "model", "noise",
    # theory knobs
    "dim", "eta", "sigma", "num_mc", "eval_points", "smoothness_scale",
    "drift_rounds", "drift_kappa0", "drift_eta",
}
_AGG_KEYS = {"kind", "kappa0", "beta", "variant", "epsilon_sync", "rho_max",
             "clamp_negative", "mu_prox"}
_DATASET_KEYS = {"kind", "classes", "per_class", "dim", "spread",
                 "test_per_class", "train_images", "train_labels",
                 "test_images", "test_labels", "subset"}
_MODEL_KEYS = {"kind", "hidden"}
_NOISE_KEYS = {"mode", "sigma"}
_SWEEP_KEYS = {"kappa0", "shards_per_client", "seed"}


@dataclass(frozen=True)
class TheorySpec:
    """Controlled quadratic instance for the convergence checks."""

    clients: int = 5
    dim: int = 8
    eta: float = 0.05
    sigma: float = 1.0
    num_mc: int = 20_000
    seed: int = 7
    eval_points: int = 3
    smoothness_scale: float = 1.0
    drift_rounds: int = 60
    drift_kappa0: float = 1.0
    drift_eta: float = 0.05

    def validate(self) -> None:
        if self.clients < 1 or self.dim < 1:
            raise ConfigError("theory instance needs clients >= 1, dim >= 1")
        if self.eta <= 0.0 or self.drift_eta <= 0.0:
            raise ConfigError("eta must be > 0")
        if self.sigma < 0.0:
            raise ConfigError("sigma must be >= 0")
        if self.num_mc < 10_000:
            raise ConfigError("num_mc must be >= 10000")
        if self.eval_points < 1:
            raise ConfigError("eval_points must be >= 1")
        if self.smoothness_scale <= 0.0:
            raise ConfigError("smoothness_scale must be > 0")
        if self.drift_rounds < 1:
            raise ConfigError("drift_rounds must be >= 1")
        if self.drift_kappa0 <= 0.0:
            raise ConfigError("drift_kappa0 must be > 0")


@dataclass(frozen=True)
class ExperimentFile:
    """Parsed and validated experiment description."""

    name: str
    kind: str                      # federated | theory
    out_dir: str
    path: str
    federated: FederatedConfig | None = None
    theory: TheorySpec | None = None
    sweep: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SweepCell:
    label: str
    kappa0: float | None           # None means the no-sync baseline
    shards_per_client: int
    seed: int
    config: FederatedConfig


def _line_of_key(text: str, key: str) -> int | None:
    pattern = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return lineno
    return None


def _fail(path: str, text: str, key: str, message: str) -> None:
    line = _line_of_key(text, key.split(".")[-1])
    location = f"{path}:{line}" if line is not None else path
    raise ConfigError(f"{location}: {message}")


def _check_keys(path: str, text: str, section: str, obj: dict,
                allowed: set) -> None:
    if not isinstance(obj, dict):
        _fail(path, text, section or "config",
              f"'{section or 'config'}' must be an object")
    for key in obj:
        if key not in allowed:
            full = f"{section}.{key}" if section else key
            _fail(path, text, key, f"unknown key '{full}'")


def _typed(path: str, text: str, obj: dict, key: str, types, default,
           section: str = ""):
    if key not in obj:
        return default
    value = obj[key]
    allowed = types if isinstance(types, tuple) else (types,)
    # bool is an int subclass, so reject it explicitly unless asked for
    if (isinstance(value, bool) and bool not in allowed) \
            or not isinstance(value, allowed):
        full = f"{section}.{key}" if section else key
        names = "/".join(t.__name__ for t in allowed)
        _fail(path, text, key, f"'{full}' must be of type {names}")
    return value


def _parse_aggregator(path: str, text: str, obj: dict) -> AggregatorSpec:
    _check_keys(path, text, "aggregator", obj, _AGG_KEYS)
    mode = KuramotoMode(
        variant=_typed(path, text, obj, "variant", str, "stabilized",
                       "aggregator"),
        epsilon_sync=float(_typed(path, text, obj, "epsilon_sync",
                                  (int, float), 1e-3, "aggregator")),
        rho_max=float(_typed(path, text, obj, "rho_max", (int, float), 10.0,
                             "aggregator")),
        clamp_negative=_typed(path, text, obj, "clamp_negative", bool, False,
                              "aggregator"),
    )
    return AggregatorSpec(
        kind=_typed(path, text, obj, "kind", str, "fedavg", "aggregator"),
        kappa0=float(_typed(path, text, obj, "kappa0", (int, float), 0.1,
                            "aggregator")),
        beta=float(_typed(path, text, obj, "beta", (int, float), 0.0,
                          "aggregator")),
        mode=mode,
        mu_prox=float(_typed(path, text, obj, "mu_prox", (int, float), 0.0,
                             "aggregator")),
    )


def _parse_dataset(path: str, text: str, obj: dict) -> DatasetSpec:
    _check_keys(path, text, "dataset", obj, _DATASET_KEYS)
    return DatasetSpec(
        kind=_typed(path, text, obj, "kind", str, "synthetic", "dataset"),
        classes=_typed(path, text, obj, "classes", int, 10, "dataset"),
        per_class=_typed(path, text, obj, "per_class", int, 100, "dataset"),
        dim=_typed(path, text, obj, "dim", int, 32, "dataset"),
        spread=float(_typed(path, text, obj, "spread", (int, float), 0.35,
                            "dataset")),
        test_per_class=_typed(path, text, obj, "test_per_class", int, 20,
                              "dataset"),
        train_images=_typed(path, text, obj, "train_images", str, "",
                            "dataset"),
        train_labels=_typed(path, text, obj, "train_labels", str, "",
                            "dataset"),
        test_images=_typed(path, text, obj, "test_images", str, "",
                           "dataset"),
        test_labels=_typed(path, text, obj, "test_labels", str, "",
                           "dataset"),
        subset=_typed(path, text, obj, "subset", int, 0, "dataset"),
    )


def _parse_model(path: str, text: str, obj: dict) -> ModelSpec:
    _check_keys(path, text, "model", obj, _MODEL_KEYS)
    hidden = _typed(path, text, obj, "hidden", list, [64, 64], "model")
    if not all(isinstance(h, int) and h > 0 for h in hidden):
        _fail(path, text, "hidden", "'model.hidden' must be positive integers")
    return ModelSpec(kind=_typed(path, text, obj, "kind", str, "mlp", "model"),
                     hidden=tuple(hidden))


def _parse_noise(path: str, text: str, obj: dict) -> NoiseModel:
    _check_keys(path, text, "noise", obj, _NOISE_KEYS)
    return NoiseModel(
        mode=_typed(path, text, obj, "mode", str, "minibatch", "noise"),
        sigma=float(_typed(path, text, obj, "sigma", (int, float), 0.0,
                           "noise")),
    )


def _parse_sweep(path: str, text: str, obj: dict) -> dict:
    _check_keys(path, text, "sweep", obj, _SWEEP_KEYS)
    sweep = {}
    for key in _SWEEP_KEYS:
        if key not in obj:
            continue
        values = obj[key]
        if not isinstance(values, list) or not values:
            _fail(path, text, key, f"'sweep.{key}' must be a non-empty list")
        sweep[key] = values
    return sweep


def load_experiment(path) -> ExperimentFile:
    """Load, validate, and resolve an experiment file."""
    path = str(path)
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    _check_keys(path, text, "", raw, _TOP_KEYS)

    name = _typed(path, text, raw, "name", str, Path(path).stem)
    kind = _typed(path, text, raw, "kind", str, "federated")
    out_dir = _typed(path, text, raw, "out_dir", str, "runs")
    if kind not in ("federated", "theory"):
        _fail(path, text, "kind", f"unknown experiment kind {kind!r}")

    if kind == "theory":
        spec = TheorySpec(
            clients=_typed(path, text, raw, "clients", int, 5),
            dim=_typed(path, text, raw, "dim", int, 8),
            eta=float(_typed(path, text, raw, "eta", (int, float), 0.05)),
            sigma=float(_typed(path, text, raw, "sigma", (int, float), 1.0)),
            num_mc=_typed(path, text, raw, "num_mc", int, 20_000),
            seed=_typed(path, text, raw, "seed", int, 7),
            eval_points=_typed(path, text, raw, "eval_points", int, 3),
            smoothness_scale=float(_typed(path, text, raw, "smoothness_scale",
                                          (int, float), 1.0)),
            drift_rounds=_typed(path, text, raw, "drift_rounds", int, 60),
            drift_kappa0=float(_typed(path, text, raw, "drift_kappa0",
                                      (int, float), 1.0)),
            drift_eta=float(_typed(path, text, raw, "drift_eta", (int, float),
                                   0.05)),
        )
        try:
            spec.validate()
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return ExperimentFile(name=name, kind=kind, out_dir=out_dir,
                              path=path, theory=spec)

    cfg = FederatedConfig(
        num_clients=_typed(path, text, raw, "clients", int, 10),
        rounds=_typed(path, text, raw, "rounds", int, 100),
        local_epochs=_typed(path, text, raw, "local_epochs", int, 2),
        batch_size=_typed(path, text, raw, "batch_size", int, 64),
        lr0=float(_typed(path, text, raw, "lr0", (int, float), 0.01)),
        momentum=float(_typed(path, text, raw, "momentum", (int, float),
                              0.9)),
        lr_schedule=_typed(path, text, raw, "lr_schedule", str, "cosine"),
        lr_restart_each_round=_typed(path, text, raw, "lr_restart_each_round",
                                     bool, False),
        shards_per_client=_typed(path, text, raw, "shards_per_client", int,
                                 3),
        seed=_typed(path, text, raw, "seed", int, 1),
        threads=_typed(path, text, raw, "threads", int, 1),
        aggregator=_parse_aggregator(path, text,
                                     raw.get("aggregator", {}) or {}),
        dataset=_parse_dataset(path, text, raw.get("dataset", {}) or {}),
        model=_parse_model(path, text, raw.get("model", {}) or {}),
        noise=_parse_noise(path, text, raw.get("noise", {}) or {}),
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    sweep = _parse_sweep(path, text, raw.get("sweep", {}) or {})
    return ExperimentFile(name=name, kind=kind, out_dir=out_dir, path=path,
                          federated=cfg, sweep=sweep)


def _fmt_kappa(value: float | None) -> str:
    if value is None:
        return "nosync"
    return f"kappa{value:g}"


def expand_sweep(exp: ExperimentFile) -> list:
    """Cartesian product of the sweep axes into per-cell configs.

    The ``kappa0`` axis accepts numbers (synchronized cells using the base
    aggregator's weight variant and guards) and ``null`` for the no-sync
    FedAvg baseline.  Missing axes fall back to the base config's value.
    """
    base = exp.federated
    if base is None:
        raise ConfigError("sweep requires a federated experiment")
    kappa_axis = exp.sweep.get("kappa0", [
        base.aggregator.kappa0 if base.aggregator.kind == "kuramoto" else None
    ])
    shards_axis = exp.sweep.get("shards_per_client", [base.shards_per_client])
    seed_axis = exp.sweep.get("seed", [base.seed])

    cells = []
    for kappa0 in kappa_axis:
        if kappa0 is not None and not isinstance(kappa0, (int, float)):
            raise ConfigError("sweep.kappa0 entries must be numbers or null")
        for shards in shards_axis:
            if not isinstance(shards, int):
                raise ConfigError("sweep.shards_per_client entries must be "
                                  "integers")
            for seed in seed_axis:
                if not isinstance(seed, int):
                    raise ConfigError("sweep.seed entries must be integers")
                if kappa0 is None:
                    agg = AggregatorSpec(kind="fedavg")
                else:
                    agg = replace(base.aggregator, kind="kuramoto",
                                  kappa0=float(kappa0))
                cfg = replace(base, aggregator=agg, shards_per_client=shards,
                              seed=seed)
                label = "_".join([_fmt_kappa(kappa0), f"s{shards}",
                                  f"seed{seed}"])
                cells.append(SweepCell(label=label, kappa0=kappa0,
                                       shards_per_client=shards, seed=seed,
                                       config=cfg))
    return cells
