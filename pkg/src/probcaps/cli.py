"""Command-line entry point: data generation, training, inference and checks.

Exit codes: 0 on success, 1 when a computation or file operation fails,
2 on usage errors (unknown subcommand or flag, invalid flag values).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    FEATURE_MODES,
    SyntheticSpec,
    benchmark_model,
    eval_metrics,
    generate_dataset,
    latent_features,
    load_dataset,
    randomized_init,
    save_dataset,
    train_readout,
)
from .inference import VariationalState, elbo_estimate, init_state, per_image_noise, reconstruct
from .model import FORMAT_VERSION, LatentState, ModelParams, dump_document
from .renderer import write_pgm
from .training import TrainConfig, fit_parameters, infer_batch
from .verify import gradcheck_suite, oracle_suite

MODELS = {"benchmark": benchmark_model}


class UsageError(Exception):
    """Bad flag values detected before any computation."""


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_document(params: ModelParams, config: TrainConfig | None = None) -> dict:
    doc = {"version": FORMAT_VERSION, "kind": "checkpoint", "model": params.to_document()}
    if config is not None:
        doc["train_config"] = config.to_document()
    return doc


def load_checkpoint(path) -> ModelParams:
    """Read a checkpoint or a bare model-parameter document."""
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") == "checkpoint":
        doc = doc["model"]
    return ModelParams.from_document(doc)


def load_latents(path, params: ModelParams) -> VariationalState:
    """A variational state document, or a ground-truth latents sidecar."""
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") == "latents":
        return VariationalState.from_latents(LatentState.from_document(doc))
    return VariationalState.from_document(doc)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    doc = json.loads(Path(args.spec).read_text())
    spec = SyntheticSpec.from_document(doc)
    if args.seed is not None:
        spec.seed = args.seed
    if spec.model not in MODELS:
        raise UsageError(f"unknown model {spec.model!r} in spec (known: {sorted(MODELS)})")
    params = load_checkpoint(args.model) if args.model else MODELS[spec.model]()
    ds = generate_dataset(spec, params)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} images ({ds.n_classes} classes, {ds.hw[0]}x{ds.hw[1]}) to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        config = TrainConfig.from_document(json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.epochs = args.epochs
    config.threads = args.threads
    config.validate()
    return config


def cmd_train(args) -> int:
    config = _train_config(args)
    data = load_dataset(args.data, with_latents=False)
    heldout = load_dataset(args.heldout, with_latents=False) if args.heldout else None
    if args.init:
        init = load_checkpoint(args.init)
    else:
        keep = "templates" not in config.trainable
        init = randomized_init(benchmark_model(), np.random.default_rng(config.seed), keep_templates=keep)
    if init.canvas_hw != data.hw:
        raise ValueError(f"model canvas {init.canvas_hw} does not match data {data.hw}")

    def log(epoch, params, report):
        held = report.heldout_elbo[-1]
        print(f"epoch {epoch:3d}  train_elbo {report.train_elbo[-1]:.4f}  heldout_elbo {held:.4f}", flush=True)

    params, report = fit_parameters(data, config, init, heldout=heldout, callback=log)
    Path(args.out).write_text(dump_document(checkpoint_document(params, config)))
    if args.report:
        Path(args.report).write_text(dump_document(report.to_document()))
    print(f"wrote checkpoint to {args.out}")
    return 0


def cmd_infer(args) -> int:
    params = load_checkpoint(args.ckpt)
    data = load_dataset(args.data, with_latents=False)
    if params.canvas_hw != data.hw:
        raise ValueError(f"model canvas {params.canvas_hw} does not match data {data.hw}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    angles = TrainConfig().init_angles
    q0 = init_state(params, data.images, np.random.default_rng([args.seed, 0]), mode=args.pose_mode, angles=angles)
    seeds = [[args.seed, 1, i] for i in range(len(data))]
    q, traces = infer_batch(
        params, data.images, q0, args.steps, args.step_size, seeds,
        n_samples=args.samples, threads=args.threads, final_step_size=args.step_size / 10, return_traces=True,
    )
    (out / "phi.json").write_text(dump_document(q.to_document()))
    recon = reconstruct(params, q).flatten().data
    for i in range(len(data)):
        write_pgm(out / f"recon_{i:04d}.pgm", recon[i])
        trace, column = traces[i]
        trace.write_csv(out / f"trace_{i:04d}.csv", image=column)
    noise = per_image_noise(q, args.samples, [[args.seed, 2, i] for i in range(len(data))])
    elbo = elbo_estimate(params, q, data.images, noise=noise).per_image
    print(f"inferred {len(data)} images; mean ELBO {np.mean(elbo):.4f}; outputs in {out}")
    return 0


def cmd_reconstruct(args) -> int:
    params = load_checkpoint(args.ckpt)
    q = load_latents(args.latents, params)
    images = reconstruct(params, q).flatten().data
    if args.index is not None:
        if not 0 <= args.index < len(images):
            raise UsageError(f"--index {args.index} out of range for {len(images)} images")
        images = images[args.index:args.index + 1]
    # several images are stacked vertically into one picture
    write_pgm(args.out, np.concatenate(list(images), axis=0))
    print(f"wrote {len(images)} reconstruction(s) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    data = load_dataset(args.data, with_latents=False)
    n_train = int(round(args.train_fraction * len(data)))
    if not 0 < n_train < len(data):
        raise UsageError("--train-fraction leaves an empty training or test split")
    config = TrainConfig(seed=args.seed, threads=args.threads, eval_steps=args.steps)
    angles = config.init_angles
    idx = np.arange(len(data))
    q0 = init_state(params, data.images, np.random.default_rng([args.seed, 0]), angles=angles)
    q = infer_batch(params, data.images, q0, args.steps, config.learning_rate_phi,
                    [[args.seed, 1, int(i)] for i in idx], threads=args.threads,
                    final_step_size=config.learning_rate_phi / 10)
    features = latent_features(q, args.mode)
    readout = train_readout(features[:n_train], data.labels[:n_train])
    pred = readout.predict(features[n_train:])
    noise = per_image_noise(q, 1, [[args.seed, 2, int(i)] for i in idx])
    elbo = elbo_estimate(params, q, data.images, noise=noise).per_image
    metrics = eval_metrics(pred, data.labels[n_train:], elbos=elbo[n_train:])
    metrics.extra["train_accuracy"] = readout.accuracy(features[:n_train], data.labels[:n_train])
    print(f"mode {args.mode}")
    print(metrics.table())
    if args.out:
        Path(args.out).write_text(metrics.to_csv())
    return 0


def _report_checks(results) -> int:
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.value:.3e}  (tol {r.tolerance:.0e})  {status}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed; max error {max(r.value for r in results):.3e}")
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    return _report_checks(gradcheck_suite(seed=args.seed if args.seed is not None else 0))


def cmd_oracle(args) -> int:
    return _report_checks(oracle_suite(seed=args.seed if args.seed is not None else 0))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1), got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probcaps", description="Generative capsule model toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, func, help_text, seed_default=0):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--threads", type=_positive_int, default=default_threads())
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "draw a labelled synthetic dataset", seed_default=None)
    p.add_argument("--spec", required=True, help="synthetic_spec document")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--model", help="checkpoint to sample from instead of the spec's named model")

    p = add("train", cmd_train, "fit model parameters", seed_default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="train_config document")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--init", help="checkpoint to start from (default: random init of the benchmark model)")
    p.add_argument("--heldout", help="dataset for the per-epoch held-out ELBO")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--report", help="where to write the per-epoch training report")

    p = add("infer", cmd_infer, "free-form inference for every image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=_positive_int, default=100)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--step-size", type=_positive_float, default=3e-2)
    p.add_argument("--samples", type=_positive_int, default=1)
    p.add_argument("--pose-mode", choices=("delta", "full"), default="delta")

    p = add("reconstruct", cmd_reconstruct, "render latents or a variational state")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--out", required=True, help="PGM file to write")
    p.add_argument("--index", type=int, help="only this image")

    p = add("eval", cmd_eval, "latent readout accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=FEATURE_MODES, default="t")
    p.add_argument("--steps", type=_positive_int, default=60)
    p.add_argument("--train-fraction", type=_fraction, default=0.5)
    p.add_argument("--out", help="CSV file for the metrics")

    add("gradcheck", cmd_gradcheck, "finite-difference gradient suite", seed_default=None)
    add("oracle", cmd_oracle, "enumeration and quadrature oracles", seed_default=None)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"probcaps {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"probcaps {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
