"""``branch-distill`` command line: train, distill, eval and ablate."""

import argparse
import csv
import dataclasses
import io
import math
import sys
from pathlib import Path

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .config import KEYS, parse_config
from .data import load_dataset, pipelines
from .errors import BranchDistillError, ConfigError
from .nn import count_params_flops, extract_single
from .train import _precision, evaluate, restore_model, train_run, train_teacher_student

RUNGS = (
    ("ce", dict(alpha=0.0, beta=0.0, gamma=0.0)),
    ("ce+kl", dict(beta=0.0, gamma=0.0)),
    ("ce+kl+l2", dict(gamma=0.0)),
    ("ce+kl+l2+w", {}),
)


def _split_overrides(extra):
    """``--key value`` / ``--key=value`` pairs into a dict of config overrides."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"--{key} needs a value")
            i += 1
            value = extra[i]
        out[key] = value
        i += 1
    return out


def _parser():
    p = argparse.ArgumentParser(prog="branch-distill", description=__doc__, allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a branched model with self-distillation"),
        ("distill", "train a student against a frozen teacher checkpoint"),
        ("eval", "report accuracies and parameter/FLOP counts of a checkpoint"),
        ("ablate", "run the CE / +KL / +L2 / +W loss ladder over one or more seeds"),
    ):
        # no abbreviations: config overrides such as --seed must not match --seeds
        sp = sub.add_parser(name, help=help_text, allow_abbrev=False)
        sp.add_argument("--config", type=Path, help="flat key=value file or a run manifest.json")
        if name == "distill":
            sp.add_argument("--teacher", type=Path, required=True, help="teacher checkpoint")
        if name == "eval":
            sp.add_argument("--checkpoint", type=Path, required=True)
        if name == "ablate":
            sp.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    return p


def _report_line(report):
    best = " ".join(f"c{k}={a:.4f}" for k, a in enumerate(report.best_acc, 1))
    return f"best {best} ensemble={report.best_ensemble:.4f} run_dir={report.run_dir}"


def cmd_train(args, overrides):
    cfg = parse_config(args.config, overrides)
    print(_report_line(train_run(cfg)))
    return 0


def cmd_distill(args, overrides):
    cfg = parse_config(args.config, overrides)
    print(_report_line(train_teacher_student(args.teacher, cfg)))
    return 0


def cmd_eval(args, overrides, out=None):
    out = out or sys.stdout
    cfg = parse_config(args.config, overrides, require_seed=False)
    with _precision(cfg.precision):
        ckpt = load_checkpoint(args.checkpoint)
        model = restore_model(ckpt)
        train_set, test_set = load_dataset(cfg.dataset, cfg.data_root, classes=model.arch.classes)
        if test_set.image_shape != model.input_shape:
            raise ConfigError(f"checkpoint expects inputs {model.input_shape}, dataset has {test_set.image_shape}")
        _, eval_policy = pipelines(train_set)
        res = evaluate(model, test_set, eval_policy)
        params, flops = count_params_flops(model)
        print(f"checkpoint {args.checkpoint} epoch={ckpt.epoch} train_params={params} train_flops={flops}", file=out)
        for k, acc in enumerate(res.per_classifier, 1):
            p, f = count_params_flops(extract_single(model, k))
            print(f"classifier {k}: acc={acc:.4f} params={p} flops={f}", file=out)
        print(f"ensemble: acc={res.ensemble:.4f}", file=out)
    return 0


def cmd_ablate(args, overrides, out=None):
    out = out or sys.stdout
    base = parse_config(args.config, overrides, require_seed=not args.seeds)
    try:
        seeds = [int(s, 0) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    except ValueError:
        raise ConfigError(f"--seeds: {args.seeds!r} is not a comma-separated list of integers") from None
    root = Path(base.checkpoint_dir)
    rows = []
    for rung, changes in RUNGS:
        for seed in seeds:
            weights = dataclasses.replace(base.weights, **changes)
            cfg = dataclasses.replace(base, seed=seed, weights=weights, checkpoint_dir=str(root / rung / f"seed{seed}"))
            report = train_run(cfg)
            losses = [r[c] for r in report.rows for c in ("loss_ce", "loss_kl", "loss_l2", "loss_w", "loss_d")]
            row = {"rung": rung, "seed": seed}
            row.update({f"acc_c{k}": a for k, a in enumerate(report.best_acc, 1)})
            row["acc_ensemble"] = report.best_ensemble
            row["max_abs_loss_w"] = max(abs(r["loss_w"]) for r in report.rows)
            row["max_abs_loss_d"] = max(abs(r["loss_d"]) for r in report.rows)
            row["all_finite"] = int(all(math.isfinite(v) for v in losses))
            rows.append(row)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.csv").write_text(buf.getvalue())
    out.write(buf.getvalue())
    return 0


COMMANDS = {"train": cmd_train, "distill": cmd_distill, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None):
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        return COMMANDS[args.command](args, overrides)
    except BranchDistillError as exc:
        print(f"branch-distill {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        ad.clear_tape()


if __name__ == "__main__":
    sys.exit(main())
