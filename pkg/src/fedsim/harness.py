"""Config-driven experiment harness behind the CLI.

Commands: materialize a partition (text + stats CSV), run a sweep of
federation experiments (JSONL records + summary CSV), render a comparison
report over saved results, and self-check gradients against finite
differences. Everything except wall-clock fields is reproducible byte for
byte from (config, seed).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .config import ExperimentConfig
from .datasets import (
    FcubeSpec,
    LabeledDataset,
    blobs_generate,
    fcube_generate,
    load_container,
    read_idx,
    read_libsvm,
    split_train_test,
)
from .engine import run_experiment
from .errors import ConfigError, ReportError
from .nn import Batch, MlpArch, backward, finite_diff_grad, init_mlp
from .partition import build_partition, export_partition, export_stats_csv, partition_stats

RESULTS_FILE = "results.jsonl"
SUMMARY_FILE = "summary.csv"
REPORT_FILE = "report.csv"
WINS_FILE = "wins.csv"
CURVES_DIR = "curves"

GRADCHECK_CASES = 100
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-5
GRADCHECK_SEED = 7


def build_dataset(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Materialize (train, test) from the config's dataset selector."""
    spec = config.dataset
    options = spec.options
    seed = options.get("seed", config.fed.master_seed)
    if spec.kind == "fcube":
        train, test, _ = fcube_generate(
            FcubeSpec(
                n_train=options.get("n_train", 4000),
                n_test=options.get("n_test", 1000),
                seed=seed,
            )
        )
        return train, test
    if spec.kind == "blobs":
        ds = blobs_generate(
            n_classes=options.get("n_classes", 10),
            n_per_class=options.get("n_per_class", 500),
            dim=options.get("dim", 32),
            spread=options.get("spread", 0.3),
            seed=seed,
        )
        return split_train_test(ds, options.get("test_fraction", 0.2), rng.derive_seed(seed, 1))
    if spec.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in options:
                raise ConfigError(f"config.dataset.{key}: required for idx datasets")
        train = read_idx(options["train_images"], options["train_labels"])
        test = read_idx(options["test_images"], options["test_labels"])
        return train, test
    if spec.kind == "libsvm":
        for key in ("train_path", "n_features", "n_classes", "label_map"):
            if key not in options:
                raise ConfigError(f"config.dataset.{key}: required for libsvm datasets")
        full = read_libsvm(
            options["train_path"], options["n_features"], options["n_classes"],
            options["label_map"],
        )
        if "test_path" in options:
            test = read_libsvm(
                options["test_path"], options["n_features"], options["n_classes"],
                options["label_map"],
            )
            return full, test
        return split_train_test(
            full, options.get("test_fraction", 0.2), rng.derive_seed(seed, 1)
        )
    if spec.kind == "container":
        for key in ("train_path", "test_path"):
            if key not in options:
                raise ConfigError(f"config.dataset.{key}: required for container datasets")
        return load_container(options["train_path"]), load_container(options["test_path"])
    raise ConfigError(f"unknown dataset kind {spec.kind!r}")


@dataclass(frozen=True)
class Setting:
    """One (algorithm, local epochs, prox mu) cell of the sweep grid."""

    algorithm: str
    local_epochs: int
    mu: float | None


def enumerate_settings(config: ExperimentConfig) -> list[Setting]:
    settings = []
    for algorithm in config.algorithms:
        for epochs in config.epoch_sweep:
            if algorithm == "fedprox":
                settings.extend(
                    Setting(algorithm, epochs, mu) for mu in config.mu_sweep
                )
            else:
                settings.append(Setting(algorithm, epochs, None))
    return settings


def cmd_partition(config: ExperimentConfig, out_dir) -> dict:
    """Write the partition index file and its class-count CSV; print a summary."""
    os.makedirs(out_dir, exist_ok=True)
    train, _ = build_dataset(config)
    pmap = build_partition(
        train,
        config.partition,
        config.fed.n_parties,
        rng.derive_seed(config.fed.master_seed, rng.TAG_PARTITION, 0),
    )
    stats = partition_stats(pmap, train)
    partition_path = os.path.join(out_dir, "partition.txt")
    stats_path = os.path.join(out_dir, "partition_stats.csv")
    export_partition(pmap, train.n, partition_path)
    export_stats_csv(stats, stats_path)
    print(
        f"partitioned {train.n} samples over {pmap.n_parties} parties "
        f"({config.partition.kind}): size_cv={stats.size_cv:.4f} "
        f"label_tv={stats.mean_label_tv:.4f}"
    )
    return {"partition": partition_path, "stats": stats_path}


def _trial_seed(master_seed: int, trial: int) -> int:
    return rng.derive_seed(master_seed, rng.TAG_TRIAL, trial)


def _json_float(value) -> float | None:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def cmd_run(config: ExperimentConfig, out_dir, n_threads: int = 1) -> dict:
    """Run the sweep grid x trials; write JSONL records and a summary CSV.

    Per (setting, trial) the run seed derives only from (master seed, trial),
    so algorithms see identical partitions, initial models and batch orders.
    Diverged runs are flagged in their records, never fatal.
    """
    os.makedirs(out_dir, exist_ok=True)
    train, test = build_dataset(config)
    arch = MlpArch((train.n_features, *config.hidden, train.n_classes))
    settings = enumerate_settings(config)

    results_path = os.path.join(out_dir, RESULTS_FILE)
    finals: dict[Setting, list[float]] = {s: [] for s in settings}
    with open(results_path, "w", encoding="ascii") as fh:
        for setting in settings:
            for trial in range(config.trials):
                cfg = replace(
                    config.fed,
                    algorithm=setting.algorithm,
                    local_epochs=setting.local_epochs,
                    prox_mu=setting.mu if setting.mu is not None else config.fed.prox_mu,
                    master_seed=_trial_seed(config.fed.master_seed, trial),
                )
                records = run_experiment(
                    train, test, config.partition, arch, cfg, n_threads=n_threads
                )
                finals[setting].append(records[-1].test_accuracy)
                for record in records:
                    line = {
                        "trial": trial,
                        "round": record.round,
                        "algorithm": setting.algorithm,
                        "mu": setting.mu,
                        "local_epochs": setting.local_epochs,
                        "test_accuracy": record.test_accuracy,
                        "mean_train_loss": _json_float(record.mean_train_loss),
                        "bytes": record.bytes,
                        "wall_ms": record.wall_ms,
                        "diverged": record.diverged,
                    }
                    fh.write(json.dumps(line) + "\n")

    summary_path = os.path.join(out_dir, SUMMARY_FILE)
    with open(summary_path, "w", encoding="ascii") as fh:
        fh.write("algorithm,mu,local_epochs,trials,final_accuracy_mean,final_accuracy_std\n")
        for setting in settings:
            values = np.array(finals[setting])
            std = float(values.std(ddof=1)) if values.size > 1 else 0.0
            mu_txt = "" if setting.mu is None else repr(setting.mu)
            fh.write(
                f"{setting.algorithm},{mu_txt},{setting.local_epochs},"
                f"{values.size},{float(values.mean())!r},{std!r}\n"
            )
    return {"results": results_path, "summary": summary_path}


def _load_results(results_dir) -> list[tuple[str, dict]]:
    try:
        names = sorted(
            name for name in os.listdir(results_dir) if name.endswith(".jsonl")
        )
    except OSError as exc:
        raise ReportError(f"cannot list {results_dir}: {exc}") from None
    rows = []
    for name in names:
        with open(os.path.join(results_dir, name), "r", encoding="ascii") as fh:
            for line in fh:
                if line.strip():
                    rows.append((name[: -len(".jsonl")], json.loads(line)))
    if not rows:
        raise ReportError(f"no .jsonl results under {results_dir}")
    return rows


def cmd_report(results_dir) -> dict:
    """Pivot saved results into algorithms x settings with a wins tally.

    Rows are (source file, local epochs); each cell is the mean final
    accuracy over trials, maximized over mu where a mu sweep exists. The
    best algorithm(s) per row are marked and counted.
    """
    rows = _load_results(results_dir)

    # Final accuracy per (source, epochs, algorithm, mu, trial): keep the
    # record with the highest round number.
    finals: dict[tuple, tuple[int, float]] = {}
    curves: dict[tuple, list] = {}
    for source, record in rows:
        key = (
            source, record["local_epochs"], record["algorithm"], record["mu"],
            record["trial"],
        )
        best = finals.get(key)
        if best is None or record["round"] > best[0]:
            finals[key] = (record["round"], record["test_accuracy"])
        curves.setdefault(key, []).append(record)

    # Mean over trials, then best over mu.
    by_cell: dict[tuple, dict[float | None, list[float]]] = {}
    algorithms = sorted({record["algorithm"] for _, record in rows})
    for (source, epochs, algorithm, mu, _trial), (_round, acc) in finals.items():
        by_cell.setdefault((source, epochs, algorithm), {}).setdefault(mu, []).append(acc)
    table: dict[tuple, dict[str, float]] = {}
    for (source, epochs, algorithm), by_mu in by_cell.items():
        best = max(float(np.mean(accs)) for accs in by_mu.values())
        table.setdefault((source, epochs), {})[algorithm] = best

    wins = {algorithm: 0 for algorithm in algorithms}
    report_path = os.path.join(results_dir, REPORT_FILE)
    with open(report_path, "w", encoding="ascii") as fh:
        fh.write("source,local_epochs," + ",".join(algorithms) + ",best\n")
        for (source, epochs) in sorted(table):
            cells = table[(source, epochs)]
            best_value = max(cells.values())
            winners = [a for a in algorithms if cells.get(a) == best_value]
            for winner in winners:
                wins[winner] += 1
            fh.write(
                f"{source},{epochs},"
                + ",".join(
                    repr(cells[a]) if a in cells else "" for a in algorithms
                )
                + ","
                + ";".join(winners)
                + "\n"
            )

    wins_path = os.path.join(results_dir, WINS_FILE)
    with open(wins_path, "w", encoding="ascii") as fh:
        fh.write("algorithm,wins\n")
        for algorithm in algorithms:
            fh.write(f"{algorithm},{wins[algorithm]}\n")

    curves_dir = os.path.join(results_dir, CURVES_DIR)
    os.makedirs(curves_dir, exist_ok=True)
    for (source, epochs, algorithm, mu, trial), records in curves.items():
        mu_txt = "none" if mu is None else repr(mu)
        name = f"{source}__{algorithm}__E{epochs}__mu{mu_txt}__t{trial}.csv"
        with open(os.path.join(curves_dir, name), "w", encoding="ascii") as fh:
            fh.write("round,test_accuracy,mean_train_loss,bytes\n")
            for record in sorted(records, key=lambda r: r["round"]):
                loss = record["mean_train_loss"]
                fh.write(
                    f"{record['round']},{record['test_accuracy']!r},"
                    f"{'' if loss is None else repr(loss)},{record['bytes']}\n"
                )

    print(f"{'source':<24}{'E':>4}  " + "  ".join(f"{a:>10}" for a in algorithms))
    for (source, epochs) in sorted(table):
        cells = table[(source, epochs)]
        best_value = max(cells.values())
        line = f"{source:<24}{epochs:>4}  "
        for algorithm in algorithms:
            if algorithm in cells:
                mark = "*" if cells[algorithm] == best_value else " "
                line += f"  {cells[algorithm]:>9.4f}{mark}"
            else:
                line += "           "
        print(line)
    print("wins: " + ", ".join(f"{a}={wins[a]}" for a in algorithms))
    return {"report": report_path, "wins": wins_path, "curves_dir": curves_dir}


def gradient_check(
    n_cases: int = GRADCHECK_CASES,
    seed: int = GRADCHECK_SEED,
    sign_flip_layer: int | None = None,
) -> float:
    """Max mixed absolute/relative error between backprop and central
    finite differences over random small nets.

    sign_flip_layer negates one layer's weight gradient before comparison;
    it exists so tests can prove the check catches a broken gradient.
    """
    worst = 0.0
    for case in range(n_cases):
        generator = np.random.default_rng(np.random.SeedSequence([seed, case]))
        depth = int(generator.integers(1, 4))
        dims = [int(generator.integers(2, 7)) for _ in range(depth + 1)]
        dims.append(int(generator.integers(2, 5)))
        arch = MlpArch(tuple(dims))
        params = init_mlp(arch, rng.derive_seed(seed, case, 1))
        params = params.with_values(
            params.values + 0.1 * generator.standard_normal(len(params))
        )
        m = int(generator.integers(1, 6))
        batch = Batch(
            generator.standard_normal((m, arch.in_dim)),
            generator.integers(0, arch.out_dim, size=m),
        )
        _, analytic = backward(params, arch, batch)
        numeric = finite_diff_grad(params, arch, batch, GRADCHECK_STEP)
        analytic_values = analytic.values
        if sign_flip_layer is not None:
            parts = [p.copy() for p in analytic.split()]
            parts[2 * sign_flip_layer] *= -1.0
            analytic_values = np.concatenate([p.reshape(-1) for p in parts])
        gap = np.abs(analytic_values - numeric.values)
        scale = np.maximum(
            1.0, np.maximum(np.abs(analytic_values), np.abs(numeric.values))
        )
        worst = max(worst, float((gap / scale).max()))
    return worst


def cmd_gradcheck(
    n_cases: int = GRADCHECK_CASES, seed: int = GRADCHECK_SEED
) -> int:
    """Run the gradient self-test; exit code 1 above tolerance."""
    worst = gradient_check(n_cases=n_cases, seed=seed)
    ok = worst < GRADCHECK_TOLERANCE
    print(
        f"gradcheck: {n_cases} cases, max relative error {worst:.3e} "
        f"({'PASS' if ok else 'FAIL'}, tolerance {GRADCHECK_TOLERANCE:g})"
    )
    return 0 if ok else 1
