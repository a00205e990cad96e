"""Command-line entry point binding data generation, training, and checks.

Subcommands:
  gen-data    write the synthetic dataset described by the config
  train       run one training experiment, emitting metrics.csv/summary.json
  verify      duality-gap certification suite on random convex QPs (JSONL)
  grad-check  finite-difference audit of every differentiable component

Exit codes: 0 success, 1 config error, 2 runtime/training error,
3 verification failure. ``BARRIER_EXT_THREADS`` caps worker fan-out for
parallel sections (grid drivers); single runs are single-threaded.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import sys
from pathlib import Path

import numpy as np

from barrier_ext.autodiff import Tape, Var, grad_check, index_select, softmax_rows
from barrier_ext.barriers import ConstraintHandlerKind
from barrier_ext.config import ConfigError, ExperimentConfig, load_config, write_resolved
from barrier_ext.constraints import CoordGrid, region_centroid, region_size
from barrier_ext.optimize import (
    OptimizerConfig,
    TrainingAbort,
    handler_term,
    partial_cross_entropy,
)
from barrier_ext.segbench import (
    PixelModelConfig,
    SynthConfig,
    generate_dataset,
    load_dataset,
    run_experiment,
)
from barrier_ext.verify import (
    CertificationError,
    ConvergenceError,
    certify_epsilon_subopt,
    certify_prop1,
    certify_prop2,
    random_qp,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

METRICS_COLUMNS = (
    "epoch",
    "t",
    "data_loss",
    "constraint_loss",
    "mean_violation",
    "max_violation",
    "train_dice",
    "val_dice",
    "wall_ms",
)

MODEL_MAGIC = "barrier-ext-model"


def worker_count() -> int:
    """Worker cap for parallel sections: BARRIER_EXT_THREADS or the CPU count."""
    env = os.environ.get("BARRIER_EXT_THREADS")
    cpus = os.cpu_count() or 1
    if env is None:
        return cpus
    try:
        requested = int(env)
    except ValueError:
        raise ConfigError(f"BARRIER_EXT_THREADS must be an integer, got {env!r}") from None
    return max(1, min(requested, cpus))


# ---------------------------------------------------------------------------
# model artifact


def save_model(path: Path, params: dict[str, np.ndarray]) -> None:
    """Versioned flat little-endian float64 dump with a JSON header."""
    header = {
        "format": MODEL_MAGIC,
        "version": 1,
        "dtype": "<f8",
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for value in params.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_model(path: Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != MODEL_MAGIC or header.get("version") != 1:
            raise ValueError(f"{path}: not a version-1 model file")
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            params[entry["name"]] = data.reshape(shape).astype(np.float64)
    return params


# ---------------------------------------------------------------------------
# metrics emission


def format_metric(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            values = []
            for col in METRICS_COLUMNS:
                if col == "wall_ms":
                    values.append(str(int(row.get("wall_ms", 0))))
                elif col == "epoch":
                    values.append(str(int(row["epoch"])))
                else:
                    values.append(format_metric(row.get(col, float("nan"))))
            fh.write(",".join(values) + "\n")


# ---------------------------------------------------------------------------
# gradient-check components


def gradcheck_components(seed: int) -> dict[str, float]:
    """Max relative finite-difference error of every differentiable piece."""
    rng = np.random.default_rng(seed)
    t = 3.0
    results: dict[str, float] = {}

    def handler_program(kind: ConstraintHandlerKind):
        def program(z: Var) -> Var:
            terms = [
                handler_term(index_select(z, 0, (i,)).sum(), kind, t)
                for i in range(z.shape[0])
            ]
            acc = terms[0]
            for term in terms[1:]:
                acc = acc + term
            return acc

        return program

    # Stay clear of the relu kink at 0 and of the extension junction -1/t^2.
    z_any = rng.uniform(-2.0, 2.0, size=6)
    z_any[np.abs(z_any) < 1e-3] = 0.5
    z_any[np.abs(z_any + 1.0 / (t * t)) < 1e-3] = 0.7
    z_neg = rng.uniform(-3.0, -0.5, size=6)

    results["sum_of_squares"] = grad_check(lambda x: (x * x).sum(), rng.normal(size=7))
    results["quadratic_penalty"] = grad_check(
        handler_program(ConstraintHandlerKind.QUADRATIC_PENALTY), z_any
    )
    results["relu_penalty"] = grad_check(
        handler_program(ConstraintHandlerKind.RELU_PENALTY), z_any
    )
    results["standard_log_barrier"] = grad_check(
        handler_program(ConstraintHandlerKind.STANDARD_LOG_BARRIER), z_neg
    )
    results["log_barrier_extension"] = grad_check(
        handler_program(ConstraintHandlerKind.LOG_BARRIER_EXTENSION), z_any
    )

    grid = CoordGrid(width=4, height=4)
    logits = rng.normal(size=(grid.n_pixels, 2))

    def size_program(x: Var) -> Var:
        s = softmax_rows(x, temperature=5.0)
        return region_size(s, 1)

    def centroid_program(x: Var) -> Var:
        s = softmax_rows(x, temperature=5.0)
        cx, cy = region_centroid(s, 1, grid)
        return cx + cy * 2.0

    def size_constraint_loss(x: Var) -> Var:
        s = softmax_rows(x, temperature=5.0)
        v = region_size(s, 1)
        return handler_term(v - 6.0, ConstraintHandlerKind.LOG_BARRIER_EXTENSION, t) + handler_term(
            4.0 - v, ConstraintHandlerKind.QUADRATIC_PENALTY, t
        )

    results["size_constraint"] = grad_check(size_program, logits)
    results["centroid_constraint"] = grad_check(centroid_program, logits)
    results["size_constraint_loss"] = grad_check(size_constraint_loss, logits)

    labels = np.zeros((6, 2))
    labels[np.arange(6), rng.integers(0, 2, size=6)] = 1.0
    labeled = np.array([0, 2, 5], dtype=np.intp)

    def cross_entropy_program(x: Var) -> Var:
        s = softmax_rows(x, temperature=5.0)
        return partial_cross_entropy(s, labels, labeled)

    results["partial_cross_entropy"] = grad_check(cross_entropy_program, rng.normal(size=(6, 2)))
    return results


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: ExperimentConfig, out_override: str | None) -> int:
    root = Path(out_override) if out_override else Path(cfg.dataset.root)
    synth = SynthConfig(
        n_train=cfg.dataset.n_train,
        n_val=cfg.dataset.n_val,
        image_size=cfg.dataset.image_size,
        radius=cfg.dataset.radius,
        dark=cfg.dataset.dark,
        bright=cfg.dataset.bright,
        background=cfg.dataset.background,
        noise_sigmas=tuple(cfg.dataset.noise_sigmas),
        seed=cfg.dataset.seed,
    )
    manifest = generate_dataset(synth, root)
    print(manifest)
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out_override: str | None) -> int:
    out_dir = Path(out_override) if out_override else Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir)

    dataset_root = Path(cfg.dataset.root)
    if not (dataset_root / "manifest.json").is_file():
        raise ConfigError(f"dataset not found under {dataset_root}; run gen-data first")
    data = load_dataset(dataset_root)

    opt_config = OptimizerConfig(
        method=cfg.optimizer.method,
        learning_rate=cfg.optimizer.learning_rate,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
        epochs=cfg.optimizer.epochs,
        batch_size=cfg.optimizer.batch_size,
        seed=cfg.optimizer.seed,
    )
    model_cfg = PixelModelConfig(
        hidden_width=cfg.model.hidden_width, temperature=cfg.model.temperature
    )
    try:
        result = run_experiment(
            data["train"],
            data["val"],
            cfg.constraint_setting(),
            cfg.handler_kind(),
            opt_config,
            model_cfg=model_cfg,
            t0=cfg.method.t0,
            mu=cfg.method.mu,
            constraint_weight=cfg.method.constraint_weight,
            dual_lr=cfg.method.dual_lr,
            plateau_patience=cfg.optimizer.plateau_patience,
            size_factors=tuple(cfg.constraints.size_factors),
            centroid_margin=cfg.constraints.centroid_margin,
            record_wall_time=cfg.output.record_wall_time,
        )
    except TrainingAbort as exc:
        write_metrics_csv(out_dir / "metrics.csv", getattr(exc, "partial_rows", []))
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    write_metrics_csv(out_dir / "metrics.csv", result.rows)
    assert result.params is not None
    save_model(out_dir / "final_model.bin", result.params)
    summary = result.summary()
    summary["epochs"] = len(result.rows)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_verify(t_values: list[float], instances: int, seed: int) -> int:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(instances):
        dim = int(rng.integers(1, 6))
        n_constraints = int(rng.integers(1, 9))
        qp = random_qp(rng, dim, n_constraints)
        for t in t_values:
            for prop, runner in ((1, certify_prop1), (2, certify_prop2)):
                try:
                    cert = runner(qp, t)
                    record = cert.to_dict()
                    if prop == 2:
                        subopt = certify_epsilon_subopt(cert, qp)
                        record["epsilon_suboptimal"] = subopt
                        if subopt is False:
                            failures += 1
                except CertificationError as exc:
                    record = exc.certificate.to_dict()
                    record["error"] = str(exc)
                    failures += 1
                except ConvergenceError as exc:
                    record = {"prop": prop, "t": t, "ok": False, "error": str(exc)}
                    failures += 1
                print(json.dumps(record))
    return EXIT_VERIFY if failures else EXIT_OK


def cmd_grad_check(seed: int, tolerance: float = 1e-5) -> int:
    results = gradcheck_components(seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name}: max relative error {err:.3e}")
        worst = max(worst, err)
    if worst > tolerance or not math.isfinite(worst):
        print(f"FAIL: worst error {worst:.3e} exceeds {tolerance:.1e}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"OK: all components within {tolerance:.1e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="barrier-ext",
        description="Constrained training with log-barrier extensions: data, training, certification.",
    )
    parser.add_argument("--config", type=str, default=None, help="JSON experiment config path")
    parser.add_argument("--out", type=str, default=None, help="override the output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic dataset")
    sub.add_parser("train", help="train one experiment from the config")

    verify = sub.add_parser("verify", help="duality-gap certification on random convex QPs")
    verify.add_argument("--t", type=float, nargs="+", default=[10.0, 100.0, 1000.0])
    verify.add_argument("--instances", type=int, default=20)

    sub.add_parser("grad-check", help="finite-difference audit of gradients")
    return parser


def _load_config_arg(args) -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg.dataset.seed = args.seed
        cfg.optimizer.seed = args.seed
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return cmd_gen_data(_load_config_arg(args), args.out)
        if args.command == "train":
            return cmd_train(_load_config_arg(args), args.out)
        if args.command == "verify":
            return cmd_verify(args.t, args.instances, args.seed if args.seed is not None else 0)
        if args.command == "grad-check":
            return cmd_grad_check(args.seed if args.seed is not None else 0)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbort, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
