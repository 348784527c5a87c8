"""Command line: synth, train, eval, ablate, gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import config as config_mod
from .config import RunConfig
from .data import load_dataset, save_dataset, synth_dataset

log = logging.getLogger("mstwins")

ABLATIONS = ("no_msfif", "downsample", "no_pretrain")


def _load_config(path, seed=None, ablate=None, epochs=None) -> RunConfig:
    cfg = config_mod.load(path) if path else RunConfig()
    over = {}
    if seed is not None:
        over["seed"] = seed
    if epochs is not None:
        over["epochs"] = epochs
    if over:
        cfg = cfg.replace(**over)
    if ablate:
        from .model import ablate as apply_ablation
        cfg = RunConfig(apply_ablation(cfg.model, ablate), cfg.loss, cfg.augment, cfg.train)
    return cfg


def _load_data(path, cfg: RunConfig) -> list:
    target = tuple(cfg.train.target_spacing) or None
    data = load_dataset(path, target_spacing=target, num_classes=cfg.model.num_classes)
    if not data:
        raise SystemExit(f"no samples found under {path}")
    return data


def split(data: list, fraction: float, seed: int) -> tuple:
    """Seeded train/validation split; the validation part may be empty."""
    n_val = int(round(fraction * len(data))) if len(data) > 1 else 0
    order = np.random.default_rng([seed, 99]).permutation(len(data))
    val = sorted(order[:n_val])
    train = sorted(order[n_val:])
    return [data[i] for i in train], [data[i] for i in val]


def cmd_synth(a) -> int:
    samples = synth_dataset(a.kind, a.n, a.size, a.classes, seed=a.seed)
    save_dataset(a.out, samples, num_classes=a.classes)
    print(f"wrote {len(samples)} {a.kind} samples ({a.size}x{a.size}, {a.classes} classes) to {a.out}")
    return 0


def cmd_train(a) -> int:
    from .train import Trainer, evaluate

    cfg = _load_config(a.config, a.seed, a.ablate, a.epochs)
    data = _load_data(a.data, cfg)
    train_set, val_set = split(data, cfg.train.val_fraction, cfg.train.seed)
    tr = Trainer(cfg, train_set, val_set)
    if tr.import_report is not None:
        print(tr.import_report)
    print(f"training on {len(train_set)} samples ({len(val_set)} held out) for {tr.max_steps} steps")
    tr.run()
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_mod.save(tr.checkpoint(), out)
    print(f"saved {out} (step {tr.state.step}, last loss {tr.losses[-1]:.4f})")
    if val_set:
        print(evaluate(tr.model, val_set).format("table"), end="")
    if a.report:
        from .report import write_report
        tables = {"train": evaluate(tr.model, train_set)}
        if val_set:
            tables["held-out"] = evaluate(tr.model, val_set)
        for p in write_report(a.report, tables, tr.losses):
            print(f"wrote {p}")
    return 0


def cmd_eval(a) -> int:
    from .train import evaluate, model_from_checkpoint

    ck = ckpt_mod.load(a.ckpt)
    data = _load_data(a.data, ck.config)
    table = evaluate(model_from_checkpoint(ck), data)
    print(table.format(a.format), end="")
    if a.report:
        from .report import write_report
        for p in write_report(a.report, {Path(a.ckpt).stem: table}, ck.meta.get("losses")):
            print(f"wrote {p}")
    return 0


def cmd_ablate(a) -> int:
    from .report import write_report
    from .train import run_ablation

    base = _load_config(a.config, epochs=a.epochs)
    data = _load_data(a.data, base)
    if a.eval_data:
        train_set, eval_set = data, _load_data(a.eval_data, base)
    else:
        train_set, eval_set = split(data, base.train.val_fraction, base.train.seed)
    if not eval_set:
        raise SystemExit("ablation needs a held-out split: pass --eval-data or set val_fraction > 0")
    variants = ["full"] + list(a.switches)
    tables = {}
    for v in variants:
        runs = [run_ablation(base.replace(seed=s), v, train_set, eval_set) for s in a.seeds]
        mean = type(runs[0])(np.mean([r.per_class for r in runs], axis=0), np.concatenate([r.per_sample for r in runs]))
        tables[v] = mean
        print(f"{v:<12} mean Dice {100 * mean.mean:.2f} over seeds {list(a.seeds)}")
    for p in write_report(a.out, tables):
        print(f"wrote {p}")
    return 0


def cmd_gradcheck(a) -> int:
    from .gradcheck import GROUPS, main_report

    groups = list(GROUPS) if a.module == "all" else [a.module]
    return 0 if main_report(groups) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mstwins", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic labelled dataset")
    s.add_argument("--kind", default="circles", choices=["circles", "stripes", "blobs"])
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from scratch and write a checkpoint")
    t.add_argument("--config", help="flat key = value file; defaults apply when omitted")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--ablate", choices=ABLATIONS)
    t.add_argument("--report", help="directory for loss/Dice figures and tables")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class Dice of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--format", default="table", choices=["table", "csv"])
    e.add_argument("--report", help="directory for figures and tables")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("ablate", help="train the full model and ablated variants, compare held-out Dice")
    b.add_argument("--config")
    b.add_argument("--data", required=True)
    b.add_argument("--eval-data")
    b.add_argument("--out", required=True, help="report directory")
    b.add_argument("--epochs", type=int)
    b.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    b.add_argument("--switches", nargs="+", default=["no_msfif", "downsample"], choices=ABLATIONS)
    b.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--module", default="all", choices=["all", "tensor", "attention", "msfif", "model", "losses"])
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
