"""``mmfp`` command line: generate, train, evaluate, benchmark, experiment.

Exit codes: 0 ok, 2 I/O, 3 shape or config, 4 provenance mismatch,
5 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from mmfp import cnn, harness, plotting
from mmfp.channel import build_environment
from mmfp.config import PROFILES, RunConfig, load_config
from mmfp.errors import MMFPError, ProvenanceError, ShapeError
from mmfp.transform import energy_support_fraction, forward_transform, unpack

log = logging.getLogger("mmfp")

EXIT_IO = 2


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("MMFP_OUT") or "mmfp-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(out: Path, explicit, default: str) -> Path:
    p = Path(explicit or default)
    return p if p.is_absolute() or explicit else out / p


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_generate(cfg: RunConfig, out: Path) -> dict:
    env = build_environment(cfg.environment.seed, cfg.environment_config())
    env_path = out / cfg.paths.environment
    env.save(env_path)
    meta = {"config": cfg.to_dict(), "environment_sha256": _sha256(env_path)}
    rep = cfg.dataset.representation
    train = harness.make_training_grid(env, cfg.dataset.grid_spacing, rep)
    test = harness.make_test_set(env, cfg.dataset.n_test, cfg.dataset.test_seed, rep)
    train.metadata = test.metadata = meta
    train.save(out / cfg.paths.train)
    test.save(out / cfg.paths.test)
    # sparsity of the angular-delay fingerprints, whatever representation is stored
    ad = forward_transform(train.snapshots()) if rep == "raw" else train.tensors
    support = float(np.mean([energy_support_fraction(unpack(t)) for t in ad]))
    summary = {
        "environment_id": env.environment_id.hex(),
        "N_train": len(train),
        "N_test": len(test),
        "grid_spacing": train.grid_spacing,
        "support_95": support,
    }
    print(f"environment  {summary['environment_id']}")
    print(f"N_train      {len(train)}  (spacing {train.grid_spacing:g} wavelengths)")
    print(f"N_test       {len(test)}")
    print(f"support_95   {support:.4f}  (fraction of bins holding 95% of the energy)")
    return summary


def cmd_train(cfg: RunConfig, out: Path, dataset_path: Path, model_path: Path) -> cnn.FitResult:
    train = harness.LabeledDataset.load(dataset_path)
    want = (cfg.environment.num_antennas, cfg.environment.num_subcarriers, 2)
    if tuple(train.input_shape) != want:
        raise ShapeError(f"dataset fingerprints are {train.input_shape}, config expects {want}")
    hyper = cfg.hyperparams()

    def progress(epoch, value, lr):
        log.info("epoch %d  J %.6g  lr %.3g", epoch, value, lr)

    fit = harness.train_cnn(hyper, train, callback=progress)
    fit.model.provenance = {
        "config": cfg.to_dict(),
        "dataset_sha256": _sha256(dataset_path),
        "environment_id": train.environment_id.hex(),
        "representation": train.representation,
    }
    cnn.save_model(fit.model, model_path)
    trace = model_path.with_suffix(".loss.csv")
    with open(trace, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "learning_rate"])
        w.writerow([0, f"{fit.initial_loss:.10g}", ""])
        for i, (value, lr) in enumerate(zip(fit.losses, fit.learning_rates), 1):
            w.writerow([i, f"{value:.10g}", f"{lr:.6g}"])
    if fit.losses:
        plotting.plot_loss([fit.initial_loss, *fit.losses], model_path.with_suffix(".loss.png"))
    final = fit.losses[-1] if fit.losses else fit.initial_loss
    print(f"initial J    {fit.initial_loss:.6g}")
    print(f"final J      {final:.6g}")
    return fit


def cmd_evaluate(cfg: RunConfig, out: Path, model_path: Path, test_path: Path, dump: bool) -> harness.EvalReport:
    model = cnn.load_model(model_path)
    test = harness.LabeledDataset.load(test_path)
    env_id = model.provenance.get("environment_id")
    if env_id is None or bytes.fromhex(env_id) != test.environment_id:
        raise ProvenanceError("train/test environments differ")
    if model.provenance.get("representation", test.representation) != test.representation:
        raise ShapeError("model and test set use different representations")
    snapshot = {
        "config": cfg.to_dict(),
        "model_sha256": _sha256(model_path),
        "test_sha256": _sha256(test_path),
        "environment_id": env_id,
    }
    report = harness.evaluate(lambda ds: cnn.predict(model, ds.tensors), test, snapshot)
    hp = model.hyper
    row = harness.ExperimentRow(
        model_path.stem, hp.num_cap_layers, hp.kernels_per_layer, test.representation,
        float(model.provenance.get("config", {}).get("dataset", {}).get("grid_spacing", 0.0)),
        report.nrmse, report.nrmse_db, 0.0,
    )
    harness.write_report([row], out / "evaluation.csv")
    _write_json(out / "evaluation.json", {**snapshot, "nrmse": report.nrmse, "nrmse_db": report.nrmse_db})
    if dump:
        harness.write_estimates(out / "estimates.csv", test.positions, {row.config: report.estimates})
        plotting.plot_estimates(test.positions, report.estimates, out / "estimates.png")
    ref = harness.reference_nrmse(cfg.environment.area_side)
    print(f"NRMSE        {report.nrmse:.6g} wavelengths  ({report.nrmse_db:.2f} dB)")
    print(f"reference    {ref:.6g} wavelengths  ({harness.to_db(ref):.2f} dB)")
    return report


def _provenance(cfg, env):
    return {"config": cfg.to_dict(), "environment_id": env.environment_id.hex()}


def cmd_benchmark(cfg: RunConfig, out: Path) -> list:
    env = build_environment(cfg.environment.seed, cfg.environment_config())
    rows = harness.run_spacing_experiment(
        env, cfg.experiment.spacings, cfg.hyperparams(), cfg.dataset.n_test,
        cfg.dataset.test_seed, cfg.dataset.representation,
    )
    harness.write_report(rows, out / "benchmark.csv")
    _write_json(out / "benchmark.json", _provenance(cfg, env))
    plotting.plot_spacing(rows, out / "benchmark.png")
    _print_rows(rows)
    return rows


def cmd_experiment(cfg: RunConfig, out: Path) -> list:
    env = build_environment(cfg.environment.seed, cfg.environment_config())
    configs = [tuple(c) for c in cfg.experiment.configs]
    rows = harness.run_accuracy_experiment(
        env, configs, cfg.hyperparams(), cfg.dataset.grid_spacing, cfg.dataset.n_test, cfg.dataset.test_seed
    )
    harness.write_report(rows, out / "experiment.csv")
    _write_json(out / "experiment.json", _provenance(cfg, env))
    labels = harness.sample_positions(env.area, cfg.dataset.n_test, cfg.dataset.test_seed)
    harness.write_estimates(
        out / "experiment_estimates.csv", labels, {r.config: r.estimates for r in rows if r.estimates is not None}
    )
    plotting.plot_accuracy(rows, out / "experiment.png")
    best = min((r for r in rows if r.estimates is not None), key=lambda r: r.nrmse, default=None)
    if best is not None:
        plotting.plot_estimates(labels, best.estimates, out / "experiment_best.png")
    _print_rows(rows)
    return rows


def _print_rows(rows):
    for r in rows:
        print(f"{r.config:28s} {r.representation:12s} {r.spacing_lambda:6g}  {r.nrmse:.4g}  ({r.nrmse_db:.2f} dB)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--profile", choices=sorted(PROFILES), help="base profile (default: desk)")
    common.add_argument("--seed", type=int, help="environment seed for generate/benchmark/experiment, "
                        "initialization and shuffling seed for train")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-reproducible output")
    common.add_argument("--out", help="output directory (default: $MMFP_OUT or ./mmfp-out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mmfp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="environment, training grid and test set")
    p = sub.add_parser("train", parents=[common], help="fit a CNN on a training grid")
    p.add_argument("--dataset", help="training dataset (default: <out>/<paths.train>)")
    p.add_argument("--model", help="model file to write (default: <out>/<paths.model>)")
    p = sub.add_parser("evaluate", parents=[common], help="score a model on a test set")
    p.add_argument("--model")
    p.add_argument("--test")
    p.add_argument("--dump", action="store_true", help="also write per-point estimates and a scatter plot")
    sub.add_parser("benchmark", parents=[common], help="CNN vs correlation baseline over grid spacings")
    sub.add_parser("experiment", parents=[common], help="accuracy over (L, K, representation) configs")
    return parser


def _apply_seed(cfg: RunConfig, command: str, seed):
    if seed is None:
        return
    if command == "train":
        cfg.training.rng_seed = seed
    else:
        cfg.environment.seed = seed


def run(args) -> int:
    cfg = load_config(args.config, args.profile)
    _apply_seed(cfg, args.command, args.seed)
    out = _out_dir(args)
    if args.command == "generate":
        cmd_generate(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, out, _resolve(out, args.dataset, cfg.paths.train), _resolve(out, args.model, cfg.paths.model))
    elif args.command == "evaluate":
        cmd_evaluate(cfg, out, _resolve(out, args.model, cfg.paths.model),
                     _resolve(out, args.test, cfg.paths.test), args.dump)
    elif args.command == "benchmark":
        cmd_benchmark(cfg, out)
    elif args.command == "experiment":
        cmd_experiment(cfg, out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = 1 if args.deterministic else args.threads
    try:
        with threadpool_limits(limits=threads):
            return run(args)
    except MMFPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
