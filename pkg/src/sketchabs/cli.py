"""``sketchabs`` command-line entry point.

Exit codes: 0 success, 1 computational failure, 2 usage or config error.
``SKETCHABS_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .accq import AccqConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_toml, from_dict, load_config
from .core import InvalidInputError
from .evaluation import (Retriever, curve_csv, early_retrieval_curves, entropy_study,
                         evaluate_retrieval, fixed_mask_ablation)
from .losses import LinearGenerator
from .model import ModelConfig, init_params
from .synth_data import generate_dataset, load_dataset, read_manifest, write_dataset
from .train import (StepNoise, TrainConfig, TrainingError, gradcheck, make_batch, train)

log = logging.getLogger("sketchabs")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
METRIC_COLUMNS = ("epoch", "L_total", "L_recons", "L_accq", "L_abs", "acc1")
CHECKPOINT_FILE = "checkpoint.bin"
METRICS_FILE = "metrics.csv"


class UsageError(Exception):
    pass


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_config(args):
    sys.stdout.write(dump_toml(load_config(args.config)))


def cmd_gen_data(args):
    cfg = load_config(args.config)
    params = cfg.data
    if args.seed is not None:
        params = replace(params, seed=args.seed)
    ds = generate_dataset(params.n_objects, params.d_z, params.d_obs, params.sigma, params.seed)
    manifest = write_dataset(ds, args.out)
    print(f"data_digest {manifest['data_digest']}")
    print(f"train {manifest['n_train']} test {manifest['n_test']}")


def _dataset_for(cfg: RunConfig, data_dir):
    manifest = read_manifest(data_dir)
    if manifest["data_digest"] != cfg.data.digest():
        raise UsageError(
            f"dataset {data_dir} digest {manifest['data_digest'][:12]} does not match "
            f"config data digest {cfg.data.digest()[:12]}; refusing to run")
    return load_dataset(data_dir)


def run_training(cfg: RunConfig, data_dir, out_dir):
    dataset = _dataset_for(cfg, data_dir)
    params, rows = train(dataset, cfg.train, cfg.model, generator_seed=cfg.generator_seed)
    out = Path(out_dir)
    meta = {"config": cfg.as_dict(), "config_digest": cfg.digest(),
            "data_digest": dataset.digest()}
    save_checkpoint(out / CHECKPOINT_FILE, params, meta)
    _write(out / METRICS_FILE, metrics_csv(rows))
    return params, rows


def cmd_train(args):
    cfg = load_config(args.config).with_overrides(loss=args.loss, epochs=args.epochs,
                                                  seed=args.seed)
    _, rows = run_training(cfg, args.data, args.out)
    if rows:
        last = rows[-1]
        print(f"epoch {last['epoch']} L_total {last['L_total']:.6f} acc1 {last['acc1']:.4f}")
    print(f"wrote {Path(args.out) / CHECKPOINT_FILE}")


def _load_run(args):
    params, header = load_checkpoint(args.ckpt)
    meta = header.get("meta", {})
    manifest = read_manifest(args.data)
    if meta.get("data_digest") != manifest["data_digest"]:
        raise CheckpointError(
            f"checkpoint {args.ckpt} was trained on data digest "
            f"{str(meta.get('data_digest'))[:12]}, dataset has {manifest['data_digest'][:12]}")
    cfg = from_dict(meta["config"]) if "config" in meta else RunConfig()
    dataset = load_dataset(args.data)
    return Retriever(params, dataset, cfg.train.group_sizes, cfg.train.use_mask), cfg


def _parse_q(text):
    try:
        qs = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--q expects comma-separated integers, got {text!r}")
    if not qs or min(qs) < 1:
        raise UsageError("--q values must be >= 1")
    return qs


def _grid(steps):
    if steps < 1:
        raise UsageError("--steps must be >= 1")
    return [round(i / steps, 10) for i in range(1, steps + 1)]


def cmd_eval(args):
    retriever, _ = _load_run(args)
    report = evaluate_retrieval(retriever, _parse_q(args.q), t=args.t)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        _write(Path(args.out) / "report.txt", text)


def cmd_entropy(args):
    retriever, _ = _load_run(args)
    curve = entropy_study(retriever, _grid(args.steps))
    body = curve_csv(curve, ("t", "mean_entropy"))
    sys.stdout.write(body)
    if args.out:
        _write(Path(args.out) / "entropy.csv", body)


def cmd_early(args):
    retriever, _ = _load_run(args)
    ma, mb, summary = early_retrieval_curves(retriever, _grid(args.steps))
    ma_csv, mb_csv = curve_csv(ma, ("t", "m@A")), curve_csv(mb, ("t", "m@B"))
    sys.stdout.write(ma_csv + "\n" + mb_csv + "\n")
    sys.stdout.write(f"mean m@A {summary['m@A']:.4f}\nmean m@B {summary['m@B']:.4f}\n")
    if args.out:
        _write(Path(args.out) / "m_at_a.csv", ma_csv)
        _write(Path(args.out) / "m_at_b.csv", mb_csv)


def cmd_ablate(args):
    retriever, _ = _load_run(args)
    qs = _parse_q(args.q)
    table = fixed_mask_ablation(retriever, q_list=qs, seed=args.seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["setting", "level"] + [f"acc@{q}" for q in qs])
    for (setting, level), acc in table.items():
        writer.writerow([setting, level] + [f"{acc[q]:.6f}" for q in qs])
    sys.stdout.write(buf.getvalue())
    if args.out:
        _write(Path(args.out) / "ablation.csv", buf.getvalue())


def reference_gradcheck(tau2=0.1, seed=0, loss="accq"):
    """Gradcheck on a small in-memory problem (d=6, B=4, frozen noise)."""
    ds = generate_dataset(n_objects=20, d_z=8, d_obs=12, sigma=0.1, seed=seed)
    mcfg = ModelConfig(d_obs=12, hidden=10, d=6, r=2)
    tcfg = TrainConfig(batch_size=4, loss=loss, freeze_padding=True,
                       accq=AccqConfig(tau1=1.0, tau2=tau2))
    rngs = [np.random.default_rng(seed + i) for i in range(5)]
    params = init_params(mcfg, rngs[0])
    batch = make_batch(ds, ds.train[:4], rngs[1])
    noise = StepNoise.draw(tuple(rngs[2:]), 4, mcfg.d)
    gen = LinearGenerator(mcfg.d, ds.params.d_obs, seed=seed)
    return gradcheck(params, batch, tcfg, gen, noise)


def cmd_gradcheck(args):
    report = reference_gradcheck(tau2=args.tau2, seed=args.seed, loss=args.loss)
    worst = max(report.items(), key=lambda kv: kv[1]["max_rel_err"])
    for name, r in report.items():
        print(f"{name:12s} max_rel_err {r['max_rel_err']:.3e} at {r['index']}")
    print(f"worst {worst[0]} {worst[1]['max_rel_err']:.3e} (threshold {args.threshold:g})")
    if worst[1]["max_rel_err"] > args.threshold:
        raise TrainingError("gradient check above threshold")


def build_parser():
    parser = argparse.ArgumentParser(prog="sketchabs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the effective config as TOML")
    p.add_argument("--config")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics CSV")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=("accq", "triplet"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    def eval_parser(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out")
        p.set_defaults(func=func)
        return p

    p = eval_parser("eval", cmd_eval, "exact Acc@q on the held-out gallery")
    p.add_argument("--q", default="1,5,10")
    p.add_argument("--t", type=float, default=1.0)
    p = eval_parser("entropy", cmd_entropy, "mean separation entropy vs completion")
    p.add_argument("--steps", type=int, default=10)
    p = eval_parser("early", cmd_early, "m@A / m@B early-retrieval curves")
    p.add_argument("--steps", type=int, default=10)
    p = eval_parser("ablate", cmd_ablate, "fixed / random row-count ablation")
    p.add_argument("--q", default="1,5,10")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of the total loss")
    p.add_argument("--tau2", type=float, default=0.1)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=("accq", "triplet"), default="accq")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _limit_threads():
    n = os.environ.get("SKETCHABS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        args.func(args)
    except (UsageError, ConfigError, CheckpointError, InvalidInputError) as exc:
        print(f"sketchabs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OSError, FloatingPointError, json.JSONDecodeError) as exc:
        print(f"sketchabs: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
