"""Config-driven command line: run, sweep, check-theory, partition-stats.

Every run writes one metrics CSV (fixed column order, see CSV_COLUMNS)
plus a JSON run manifest carrying the resolved configuration, seed, and a
content hash of the inputs, so any output is reconstructible from its
manifest.  Metric values in the CSV are fully deterministic; wall-clock
timing is reported on the progress stream and in the manifest instead so
reruns of one config are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentFile, expand_sweep, load_experiment
from .data import partition_stats
from .engine import ConfigError, FederatedConfig, build_problem, run_federated
from .theory import (
    descent_inequality_check,
    drift_comparison,
    equality_case_instance,
    make_random_instance,
    quadratic_clients,
    variance_decomposition_check,
)

__all__ = ["CSV_COLUMNS", "main", "write_metrics_csv"]

CSV_COLUMNS = (
    "round", "mean_train_loss", "loss_variance", "test_accuracy", "gamma",
    "gamma_weighted", "kappa_t", "fallback", "order_parameter",
    "wall_time_ms",
)

SUMMARY_COLUMNS = ("cell", "aggregator", "kappa0", "shards_per_client",
                   "seed", "max_test_accuracy", "best_round", "rounds",
                   "metrics_csv")

THEORY_COLUMNS = ("check", "point", "assertable", "holds", "lhs", "rhs",
                  "margin", "detail")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            sync = rec.sync
            writer.writerow([
                _fmt(rec.round),
                _fmt(rec.mean_train_loss),
                _fmt(rec.loss_variance),
                _fmt(rec.test_accuracy),
                _fmt(rec.gamma),
                _fmt(rec.gamma_weighted),
                _fmt(rec.kappa_t),
                _fmt(sync.fallback_used if sync is not None else None),
                _fmt(sync.order_parameter if sync is not None else None),
                _fmt(None),  # timing lives in the manifest; see module docstring
            ])


def _config_as_dict(cfg: FederatedConfig) -> dict:
    return dataclasses.asdict(cfg)


def _content_hash(payload: bytes) -> str:
    """Git-style blob hash of a byte payload."""
    header = f"blob {len(payload)}\0".encode()
    return hashlib.sha1(header + payload).hexdigest()


def _input_hashes(cfg: FederatedConfig) -> dict:
    hashes = {}
    ds = cfg.dataset
    if ds.kind == "idx":
        for label, path in (("train_images", ds.train_images),
                            ("train_labels", ds.train_labels),
                            ("test_images", ds.test_images),
                            ("test_labels", ds.test_labels)):
            if path:
                hashes[label] = _content_hash(Path(path).read_bytes())
    return hashes


def write_manifest(path: Path, name: str, cfg: FederatedConfig,
                   total_wall_time_ms: float, metrics_csv: str) -> None:
    resolved = _config_as_dict(cfg)
    canonical = json.dumps(resolved, sort_keys=True).encode()
    manifest = {
        "name": name,
        "tool": {"package": "fedsync", "version": __version__},
        "resolved_config": resolved,
        "seed": cfg.seed,
        "config_hash": _content_hash(canonical),
        "input_hashes": _input_hashes(cfg),
        "metrics_csv": metrics_csv,
        "timing": {"total_wall_time_ms": round(total_wall_time_ms, 3)},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _progress_printer(name: str, total: int):
    stride = max(1, total // 10)

    def emit(rec):
        if rec.round % stride == 0 or rec.round == total:
            acc = "" if rec.test_accuracy is None \
                else f" acc={rec.test_accuracy:.4f}"
            print(f"[{name}] round {rec.round}/{total} "
                  f"loss={rec.mean_train_loss:.4f}"
                  f" var={rec.loss_variance:.5f}{acc}"
                  f" ({rec.wall_time * 1000.0:.1f} ms)",
                  file=sys.stderr)

    return emit


def cmd_run(exp: ExperimentFile, out_dir: Path) -> int:
    cfg = exp.federated
    clients, test_set, _, w0, _, _ = build_problem(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    progress = _progress_printer(exp.name, cfg.rounds)
    t0 = time.perf_counter()
    records, _ = run_federated(clients, w0, cfg, test_set, progress)
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    csv_path = out_dir / f"{exp.name}.csv"
    write_metrics_csv(csv_path, records)
    write_manifest(out_dir / f"{exp.name}.manifest.json", exp.name, cfg,
                   elapsed_ms, csv_path.name)
    final = records[-1]
    acc = "" if final.test_accuracy is None \
        else f", final accuracy {final.test_accuracy:.4f}"
    print(f"wrote {csv_path} ({len(records)} rounds{acc})")
    return 0


def cmd_sweep(exp: ExperimentFile, out_dir: Path) -> int:
    cells = expand_sweep(exp)
    cell_dir = out_dir / exp.name
    cell_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    failures = 0
    for cell in cells:
        try:
            clients, test_set, _, w0, _, _ = build_problem(cell.config)
            progress = _progress_printer(cell.label, cell.config.rounds)
            t0 = time.perf_counter()
            records, _ = run_federated(clients, w0, cell.config, test_set,
                                       progress)
            elapsed_ms = (time.perf_counter() - t0) * 1000.0
            csv_path = cell_dir / f"{cell.label}.csv"
            write_metrics_csv(csv_path, records)
            write_manifest(cell_dir / f"{cell.label}.manifest.json",
                           cell.label, cell.config, elapsed_ms, csv_path.name)
        except (ConfigError, OSError, ValueError) as exc:
            print(f"cell {cell.label} failed: {exc}", file=sys.stderr)
            failures += 1
            continue
        accs = [r.test_accuracy for r in records]
        best_idx = int(np.argmax(accs))
        rows.append([
            cell.label,
            cell.config.aggregator.kind,
            _fmt(cell.kappa0),
            _fmt(cell.shards_per_client),
            _fmt(cell.seed),
            _fmt(accs[best_idx]),
            _fmt(records[best_idx].round),
            _fmt(len(records)),
            str(csv_path),
        ])
    summary_path = out_dir / f"{exp.name}_summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerows(rows)
    print(f"wrote {summary_path} ({len(rows)} cells, {failures} failed)")
    return 1 if failures else 0


def _theory_rows(spec) -> tuple:
    """Run every convergence check; returns (rows, any assertable failure)."""
    rows = []
    failed = False

    def add(check, point, report, detail=""):
        nonlocal failed
        rows.append([
            check, point, _fmt(report.assertable), _fmt(report.holds),
            _fmt(report.lhs_mean), _fmt(report.rhs), _fmt(report.margin),
            detail,
        ])
        if report.assertable and not report.holds:
            failed = True

    inst = make_random_instance(spec.clients, spec.dim, spec.sigma, spec.eta,
                                seed=[spec.seed, 1], num_mc=spec.num_mc)
    noiseless = dataclasses.replace(inst, sigmas=np.zeros(spec.clients))
    point_rng = np.random.default_rng([spec.seed, 2])

    for i in range(spec.eval_points):
        w = 2.0 * point_rng.standard_normal(spec.dim)
        mc_rng = np.random.default_rng([spec.seed, 3, i])

        var_report = variance_decomposition_check(inst, w, mc_rng)
        rows.append([
            "variance-decomposition", f"w{i}", "1", _fmt(var_report.ok),
            _fmt(var_report.mc_mean),
            _fmt(var_report.grad_norm_sq + var_report.sigma_sq),
            _fmt(var_report.mc_se), "4-SE equality, upper bound, cross terms",
        ])
        if not var_report.ok:
            failed = True

        gamma = inst.gamma(w)
        rows.append(["gamma-nonnegative", f"w{i}", "1",
                     _fmt(gamma >= -1e-9), _fmt(gamma), "0.0", _fmt(gamma),
                     "gradient diversity"])
        if gamma < -1e-9:
            failed = True

        add("descent-proof-consistent-noiseless", f"w{i}",
            descent_inequality_check(noiseless, w, "proof-consistent",
                                     smoothness_scale=spec.smoothness_scale))
        add("descent-proof-consistent-noisy", f"w{i}",
            descent_inequality_check(inst, w, "proof-consistent",
                                     np.random.default_rng([spec.seed, 4, i]),
                                     smoothness_scale=spec.smoothness_scale))
        add("descent-stated-form", f"w{i}",
            descent_inequality_check(inst, w, "stated",
                                     np.random.default_rng([spec.seed, 5, i]),
                                     smoothness_scale=spec.smoothness_scale),
            detail="informational only")

    eq_inst = equality_case_instance(dim=spec.dim, eta=spec.eta)
    w_eq = 2.0 * np.random.default_rng([spec.seed, 6]).standard_normal(
        spec.dim)
    eq_report = descent_inequality_check(eq_inst, w_eq, "proof-consistent")
    eq_tight = abs(eq_report.margin) <= 1e-12 * max(1.0, abs(eq_report.rhs))
    rows.append(["descent-equality-case", "single-client", "1",
                 _fmt(eq_report.holds and eq_tight), _fmt(eq_report.lhs_mean),
                 _fmt(eq_report.rhs), _fmt(eq_report.margin),
                 "bound met with equality"])
    if not (eq_report.holds and eq_tight):
        failed = True

    drift_rows, drift_failed = _drift_rows(spec)
    rows.extend(drift_rows)
    failed = failed or drift_failed
    return rows, failed


def _drift_rows(spec) -> tuple:
    """Paired baseline/synchronized runs on the drift instance."""
    from .aggregation import KuramotoMode
    from .engine import AggregatorSpec

    inst = make_random_instance(spec.clients, spec.dim, 0.0, spec.drift_eta,
                                seed=[spec.seed, 7], num_mc=spec.num_mc)
    clients = quadratic_clients(inst)
    w0 = 2.0 * np.random.default_rng([spec.seed, 8]).standard_normal(spec.dim)
    base_cfg = FederatedConfig(
        num_clients=spec.clients, rounds=spec.drift_rounds, local_epochs=1,
        batch_size=1, lr0=spec.drift_eta, momentum=0.0,
        lr_schedule="constant", shards_per_client=1, seed=spec.seed,
        aggregator=AggregatorSpec(kind="fedavg"),
    )
    sync_cfg = replace(base_cfg, aggregator=AggregatorSpec(
        kind="kuramoto", kappa0=spec.drift_kappa0,
        mode=KuramotoMode(variant="stabilized")))
    base_records, _ = run_federated(clients, w0, base_cfg)
    sync_records, _ = run_federated(clients, w0, sync_cfg)
    target = max(1e-8, 0.25 * base_records[0].mean_train_loss)
    report = drift_comparison(base_records, sync_records, target)
    row = [
        "drift-comparison", "paired-runs", "0", "1",
        _fmt(report.fraction_weighted_below),
        _fmt(report.rounds_to_target_baseline),
        _fmt(report.rounds_to_target_synced),
        (f"non-fallback rounds {report.compared_rounds}/{report.rounds}, "
         f"target loss {report.target_loss:.3e}"),
    ]
    return [row], False


def cmd_check_theory(exp: ExperimentFile, out_dir: Path) -> int:
    spec = exp.theory
    rows, failed = _theory_rows(spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f"{exp.name}_theory.csv"
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(THEORY_COLUMNS)
        writer.writerows(rows)
    width = max(len(r[0]) for r in rows)
    for r in rows:
        status = "ok" if r[3] == "1" else ("FAIL" if r[2] == "1" else "info")
        print(f"{r[0]:<{width}}  {r[1]:<12} {status:<5} "
              f"lhs={r[4]} rhs={r[5]} margin={r[6]}  {r[7]}")
    print(f"wrote {report_path}")
    if failed:
        print("assertable convergence checks FAILED", file=sys.stderr)
        return 1
    return 0


def cmd_partition_stats(exp: ExperimentFile) -> int:
    cfg = exp.federated
    _, _, _, _, partition, train_ds = build_problem(cfg)
    stats = partition_stats(partition, train_ds)
    header = "client  " + " ".join(f"c{j:<4}" for j in
                                   range(train_ds.num_classes)) + "  total"
    print(header)
    for k in range(cfg.num_clients):
        row = " ".join(f"{int(n):<5}" for n in stats.label_counts[k])
        print(f"{k:<7} {row}  {stats.client_sizes[k]}")
    print(f"mean distinct labels per client: "
          f"{stats.mean_distinct_labels:.2f}")
    print(f"shard size: {partition.shard_size}, shards per client: "
          f"{partition.shards_per_client}")
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsync",
        description="Federated-learning simulation with phase-synchronized "
                    "aggregation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("run", "run a single experiment to a metrics CSV"),
            ("sweep", "run the config's sweep axes and write a summary"),
            ("check-theory", "verify the convergence inequalities "
                             "numerically"),
            ("partition-stats", "print per-client label histograms")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True,
                         help="path to the experiment JSON file")
        cmd.add_argument("--out", default=None,
                         help="output directory (default: config out_dir)")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the experiment seed")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker threads for client training")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        exp = load_experiment(args.config)
        if exp.federated is not None:
            cfg = exp.federated
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            if args.threads is not None:
                cfg = replace(cfg, threads=args.threads)
            exp = dataclasses.replace(exp, federated=cfg)
        elif args.seed is not None:
            exp = dataclasses.replace(
                exp, theory=dataclasses.replace(exp.theory, seed=args.seed))
        out_dir = Path(args.out) if args.out is not None else Path(exp.out_dir)

        if args.command == "run":
            if exp.federated is None:
                raise ConfigError(f"{exp.path}: 'run' needs a federated "
                                  "experiment (kind is 'theory')")
            return cmd_run(exp, out_dir)
        if args.command == "sweep":
            if exp.federated is None:
                raise ConfigError(f"{exp.path}: 'sweep' needs a federated "
                                  "experiment (kind is 'theory')")
            return cmd_sweep(exp, out_dir)
        if args.command == "check-theory":
            if exp.theory is None:
                raise ConfigError(f"{exp.path}: 'check-theory' needs kind "
                                  "'theory'")
            return cmd_check_theory(exp, out_dir)
        if args.command == "partition-stats":
            if exp.federated is None:
                raise ConfigError(f"{exp.path}: 'partition-stats' needs a "
                                  "federated experiment")
            return cmd_partition_stats(exp)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
