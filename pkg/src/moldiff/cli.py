"""Command-line entry points: train, sample, eval, diffuse, cond-eval.

Exit codes: 0 on success, 1 on a usage error (unknown flag, bad
arguments), 2 on a runtime failure (bad file, divergence, ...).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import chem_eval, harness, sampling, training
from .geometry import zero_com
from .schedule import q_sample
from .score_net import init_model


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage problems; the contract wants 1
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="moldiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on an XYZ dataset")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True)

    p_sample = sub.add_parser("sample", help="generate molecules from a checkpoint")
    p_sample.add_argument("--ckpt", required=True)
    p_sample.add_argument("--num", type=int, required=True)
    p_sample.add_argument("--out", required=True)
    p_sample.add_argument("--zv-mode", choices=sampling.ZV_MODES, default=None)
    p_sample.add_argument("--size", default="histogram",
                          help="'histogram' or a fixed atom count")
    p_sample.add_argument("--condition", default=None, metavar="NAME=VALUE")
    p_sample.add_argument("--dump-trajectory", type=int, default=0, metavar="K",
                          help="write every K-th intermediate state")
    p_sample.add_argument("--seed", type=int, default=None)

    p_eval = sub.add_parser("eval", help="score generated molecules")
    p_eval.add_argument("--samples", required=True)
    p_eval.add_argument("--train", required=True)
    p_eval.add_argument("--report", required=True)
    p_eval.add_argument("--single-bonds-only", action="store_true")

    p_diff = sub.add_parser("diffuse", help="forward-noise a dataset to step t")
    p_diff.add_argument("--data", required=True)
    p_diff.add_argument("--t", type=int, required=True)
    p_diff.add_argument("--out", required=True)
    p_diff.add_argument("--config", default=None)
    p_diff.add_argument("--seed", type=int, default=0)

    p_cond = sub.add_parser("cond-eval", help="conditional-generation MAE report")
    p_cond.add_argument("--samples", required=True)
    p_cond.add_argument("--regressor", required=True)
    p_cond.add_argument("--report", required=True)
    p_cond.add_argument("--data", default=None,
                        help="dataset for the baseline estimates")

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _dispatch(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


def _dispatch(args) -> int:
    return {
        "train": _cmd_train,
        "sample": _cmd_sample,
        "eval": _cmd_eval,
        "diffuse": _cmd_diffuse,
        "cond-eval": _cmd_cond_eval,
    }[args.command](args)


def _cmd_train(args) -> int:
    run_cfg = harness.load_config(args.config)
    dataset = harness.load_dataset(args.data, elements=run_cfg.elements)
    os.makedirs(args.out, exist_ok=True)
    cfg = run_cfg.net_config()
    schedule = run_cfg.schedule()
    train_cfg = run_cfg.train_config()
    items = dataset.training_items(run_cfg.condition_name)
    model = init_model(harness.rng_stream(run_cfg.seed, "init"), cfg)

    ckpt_path = os.path.join(args.out, "checkpoint.ckpt")
    stats = dataset.property_stats

    def checkpoint_sink(step, current):
        harness.save_checkpoint(current, run_cfg, dataset.size_histogram,
                                stats, ckpt_path)

    metrics = training.csv_metrics_sink(os.path.join(args.out, "metrics.csv"))
    try:
        training.train(items, model, schedule, cfg, train_cfg,
                       harness.rng_stream(run_cfg.seed, "noise"),
                       metrics_sink=metrics, checkpoint_sink=checkpoint_sink,
                       shuffle_rng=harness.rng_stream(run_cfg.seed, "shuffle"))
    finally:
        metrics.close()
    print(f"trained; checkpoint at {ckpt_path}")
    return 0


def _parse_condition(raw: str) -> tuple[str, float]:
    if "=" not in raw:
        raise _UsageError("condition must be NAME=VALUE")
    name, _, value = raw.partition("=")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise _UsageError(f"bad condition value in {raw!r}") from None


def _cmd_sample(args) -> int:
    model, run_cfg, histogram, stats = harness.load_checkpoint(args.ckpt)
    cfg = run_cfg.net_config()
    schedule = run_cfg.schedule()
    seed = run_cfg.seed if args.seed is None else args.seed
    rng = harness.rng_stream(seed, "sampler")
    condition = _parse_condition(args.condition) if args.condition else None
    sampler_cfg = sampling.SamplerConfig(
        num_samples=args.num,
        zv_mode=args.zv_mode or run_cfg.zv_prior,
        size_mode="histogram" if args.size == "histogram" else int(args.size),
        condition=condition,
        seed=seed,
    )
    molecules, properties, traj_blocks = [], [], []
    for k in range(args.num):
        if sampler_cfg.size_mode == "histogram":
            n = sampling.sample_size(histogram, rng)
        else:
            n = sampler_cfg.size_mode
        sink = None
        if args.dump_trajectory:
            def sink(t, state, k=k):
                if t % args.dump_trajectory == 0 or t in (0, schedule.T):
                    traj_blocks.append((sampling.decode(state), f"sample={k} t={t}"))
        if condition is not None:
            geom = sampling.sample_conditional(
                n, model, schedule, condition, cfg, sampler_cfg, rng,
                run_cfg.condition_name or None, stats, trajectory_sink=sink)
            properties.append({condition[0]: condition[1]})
        else:
            geom = sampling.sample_molecule(n, model, schedule, cfg,
                                            sampler_cfg, rng,
                                            trajectory_sink=sink)
            properties.append({})
        molecules.append(geom)
    harness.write_xyz(args.out, molecules, properties)
    if args.dump_trajectory:
        harness.write_xyz(args.out + ".traj",
                          [g for g, _ in traj_blocks],
                          comments=[c for _, c in traj_blocks])
    print(f"wrote {args.num} molecules to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    samples = harness.load_dataset(args.samples)
    train_set = harness.load_dataset(args.train)
    valence = chem_eval.ValenceTable()
    table = chem_eval.load_bond_table()
    training_keys = {
        chem_eval.canonical_key(chem_eval.infer_bonds(
            g, table, single_bonds_only=args.single_bonds_only))
        for g in train_set.molecules
    }
    rows = []
    for idx, geom in enumerate(samples.molecules):
        valid, stable, key = chem_eval.evaluate_sample(
            geom, valence, table, single_bonds_only=args.single_bonds_only)
        rows.append({"index": idx, "valid": int(valid), "stable": int(stable),
                     "key": key.hex()})
    summary = chem_eval.metrics_report(samples.molecules, training_keys,
                                       valence, table,
                                       single_bonds_only=args.single_bonds_only)
    with open(args.report, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["index", "valid", "stable", "key"])
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow({"index": "summary",
                         "valid": f"validity={summary['validity']:.4f}",
                         "stable": f"stability={summary['stability']:.4f}",
                         "key": f"uniqueness={summary['uniqueness']:.4f} "
                                f"novelty={summary['novelty']:.4f}"})
    print(" ".join(f"{k}={v:.2f}%" for k, v in summary.items()))
    return 0


def _cmd_diffuse(args) -> int:
    run_cfg = harness.load_config(args.config) if args.config else harness.RunConfig()
    dataset = harness.load_dataset(args.data, elements=run_cfg.elements)
    schedule = run_cfg.schedule()
    if not 1 <= args.t <= schedule.T:
        raise _UsageError(f"--t must be in [1, {schedule.T}]")
    rng = harness.rng_stream(args.seed, "noise")
    out = []
    for geom in dataset.molecules:
        eps = (rng.standard_normal(geom.atom_features.shape),
               zero_com(rng.standard_normal(geom.coords.shape)))
        state = q_sample(geom, args.t, schedule, eps)
        out.append(sampling.decode(state.geometry_t))
    harness.write_xyz(args.out, out)
    print(f"diffused {len(out)} molecules to step {args.t}")
    return 0


def _cmd_cond_eval(args) -> int:
    reg, run_cfg = harness.load_regressor(args.regressor)
    cfg = run_cfg.net_config()
    samples = harness.load_dataset(args.samples)
    name = reg.property_name
    generated = []
    for geom, props in zip(samples.molecules, samples.properties):
        if name not in props:
            raise ValueError(f"sample file lacks prop:{name} targets")
        generated.append((geom, props[name]))
    report = {"model_mae": float(np.mean(
        [abs(chem_eval.predict_property(g, reg, cfg) - c) for g, c in generated]))}
    if args.data:
        dataset = harness.load_dataset(args.data, elements=run_cfg.elements)
        pairs = [(g, p[name]) for g, p in zip(dataset.molecules, dataset.properties)
                 if name in p]
        train_split = pairs[0::2]
        eval_split = pairs[1::2]
        report = chem_eval.conditional_mae_eval(
            generated, reg, cfg, eval_split, train_split,
            harness.rng_stream(run_cfg.seed, "eval"))
    with open(args.report, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(report))
        writer.writerow([f"{report[k]:.6f}" for k in report])
    print(" ".join(f"{k}={v:.4f}" for k, v in report.items()))
    return 0
