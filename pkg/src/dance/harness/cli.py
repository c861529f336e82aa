"""Command-line entry point: ``dance <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 invalid configuration or arguments,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np

from ..archspace import LayerMask, count_flops, count_params
from ..evalbench import (
    Experiment,
    SENSITIVITY_GRIDS,
    ablation_run,
    ablation_table,
    evaluate_accuracy,
    run_stages,
    sensitivity_sweep,
    sweep_constraints,
)
from ..scoring import combined_score
from ..trainer import Trainer, TrainingError
from .checkpoint import CheckpointError, ConfigMismatchError, load_checkpoint, restore, save_trainer
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, FormatError, build_dataset
from ..diffcore.rng import RngStreams
from .metrics import MetricsError, MetricsWriter

log = logging.getLogger("dance")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# helpers -----------------------------------------------------------------------

def make_data(cfg: ExperimentConfig, seed: int) -> Dataset:
    return build_dataset(cfg.dataset_spec(), RngStreams(seed)["data"])


def experiment(cfg: ExperimentConfig) -> Experiment:
    spec = cfg.dataset_spec()
    probe = make_data(cfg, cfg["seed"])
    run = cfg.run_config(probe.input_dim, probe.num_classes)
    cache = {cfg["seed"]: probe}

    def data_for(seed: int) -> Dataset:
        if seed not in cache:
            cache[seed] = build_dataset(spec, RngStreams(seed)["data"])
        return cache[seed]

    return Experiment(run, data_for, cfg["eval.split"])


def new_trainer(cfg: ExperimentConfig, seed: int | None = None) -> Trainer:
    seed = cfg["seed"] if seed is None else seed
    exp = experiment(cfg)
    return exp.trainer(seed)


def check_constraint(c: float) -> float:
    if not 0.0 < c <= 1.0:
        raise ConfigError(f"constraint {c} outside (0, 1]")
    return c


def format_card(masks: Sequence[LayerMask], header: dict | None = None) -> str:
    lines = ["# architecture card"]
    for k, v in (header or {}).items():
        lines.append(f"# {k}: {v}")
    lines += [f"layer {m.layer} k={m.k} mask={m.to_hex()}" for m in masks]
    return "\n".join(lines) + "\n"


def parse_card(text: str, widths: Sequence[int]) -> list[LayerMask]:
    masks = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tag, l, k, m = line.split()
            if tag != "layer" or not k.startswith("k=") or not m.startswith("mask="):
                raise ValueError
            l, k = int(l), int(k[2:])
        except ValueError:
            raise ConfigError(f"card line {lineno}: expected 'layer <l> k=<k> mask=<hex>', got {raw!r}") from None
        if not 0 <= l < len(widths):
            raise ConfigError(f"card line {lineno}: layer {l} outside [0, {len(widths)})")
        mask = LayerMask.from_hex(l, widths[l], m[5:])
        if mask.k != k:
            raise ConfigError(f"card line {lineno}: k={k} but mask has {mask.k} bits set")
        masks[l] = mask
    if sorted(masks) != list(range(len(widths))):
        raise ConfigError(f"card must list layers 0..{len(widths) - 1}, got {sorted(masks)}")
    return [masks[l] for l in range(len(widths))]


def _ckpt_path(out: Path, explicit: str | None, stages=(3, 2, 1)) -> Path:
    if explicit:
        return Path(explicit)
    for s in stages:
        p = out / f"stage{s}.ckpt"
        if p.exists():
            return p
    raise CheckpointError(f"no checkpoint found in {out} (run `dance train` first)")


def load_trainer(cfg: ExperimentConfig, path: Path, force: bool) -> Trainer:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ckpt = load_checkpoint(path, cfg.hash(), force)
    for w in caught:
        log.warning("%s", w.message)
    tr = new_trainer(cfg, ckpt.state["seed"])
    return restore(tr, ckpt)


# commands ------------------------------------------------------------------------

def cmd_train(args, cfg: ExperimentConfig, out: Path) -> int:
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    text, h = cfg.to_text(), cfg.hash()
    if stages[0] == 1:
        tr = new_trainer(cfg)
    else:
        prev = out / f"stage{stages[0] - 1}.ckpt"
        resume = out / f"stage{stages[0]}.ckpt"
        src = resume if args.resume and resume.exists() else prev
        if not src.exists():
            raise CheckpointError(f"stage {stages[0]} needs {prev}; run the earlier stage first")
        tr = load_trainer(cfg, src, args.force)
    metrics = MetricsWriter(out / "metrics.jsonl", append=stages[0] != 1)
    tr.on_record = metrics.write
    try:
        for stage in stages:
            if stage == 1:
                tr.stage1()
                save_trainer(tr, out / "stage1.ckpt", text, h)
            elif stage == 2:
                every = args.checkpoint_every

                def _save(t: Trainer):
                    if every and t.state.epoch % every == 0:
                        save_trainer(t, out / "stage2.ckpt", text, h)

                tr.stage2(on_epoch_end=_save)
                save_trainer(tr, out / "stage2.ckpt", text, h)
                for w in tr.warnings:
                    log.warning(w)
            else:
                c = check_constraint(args.constraint if args.constraint is not None else tr.tc.eval_constraint)
                sub, info = tr.stage3(c)
                save_trainer(tr, out / "stage3.ckpt", text, h)
                card = format_card(info["masks"], {"constraint": c, "seed": tr.seed,
                                                   "supernet": sub.provenance.get("supernet_checksum")})
                (out / "card.txt").write_text(card, encoding="utf-8")
                print(card, end="")
                print(f"stage3 accuracy before {info['pre_test']:.4f} after {info['post_test']:.4f}")
    finally:
        metrics.close()
    last = tr.records[-1] if tr.records else {}
    print(f"trained stages {stages}; last val_accuracy {last.get('val_accuracy', float('nan')):.4f}; "
          f"output in {out}")
    return EXIT_OK


def cmd_sample(args, cfg, out) -> int:
    c = check_constraint(args.constraint)
    tr = load_trainer(cfg, _ckpt_path(out, args.checkpoint, (2, 1)), args.force)
    gen = tr.rngs["cli/sample"] if args.stochastic else None
    masks = tr.deploy(c, gen=gen)
    card = format_card(masks, {"constraint": c, "seed": tr.seed, "params": count_params(tr.model.net, masks),
                               "flops": count_flops(tr.model.net, masks)})
    if args.write:
        Path(args.write).write_text(card, encoding="utf-8")
    print(card, end="")
    return EXIT_OK


def cmd_evaluate(args, cfg, out) -> int:
    tr = load_trainer(cfg, _ckpt_path(out, args.checkpoint), args.force)
    split = tr.data.split(args.split)
    net = tr.model.net
    if args.card:
        masks = parse_card(Path(args.card).read_text(encoding="utf-8"), net.widths)
        acc = evaluate_accuracy(net, split, masks)
    elif args.constraint is not None:
        masks = tr.deploy(check_constraint(args.constraint))
        acc = evaluate_accuracy(net, split, masks)
    elif tr.subnet is not None and not args.supernet:
        masks = tr.subnet.masks
        acc = evaluate_accuracy(tr.subnet, split)
    else:
        masks = None
        acc = evaluate_accuracy(net, split)
    print(json.dumps({"split": args.split, "accuracy": acc, "params": count_params(net, masks),
                      "flops": count_flops(net, masks)}, sort_keys=True))
    return EXIT_OK


def _seed_trainers(cfg: ExperimentConfig, out: Path, seeds, exp: Experiment) -> dict[int, Trainer]:
    trainers = {}
    text, h = cfg.to_text(), cfg.hash()
    for s in seeds:
        p = out / f"seed{s}" / "stage2.ckpt"
        if p.exists():
            trainers[s] = restore(exp.trainer(s), load_checkpoint(p, h, True))
        else:
            trainers[s] = run_stages(exp, s)
            save_trainer(trainers[s], p, text, h)
    return trainers


def cmd_sweep(args, cfg, out) -> int:
    if args.grid:
        cfg.set("sweep.constraints", args.grid)
    spec = cfg.sweep_spec()
    exp = experiment(cfg)
    trainers = _seed_trainers(cfg, out, spec.seeds, exp)
    res = sweep_constraints(spec, trainers, cfg["eval.split"], out)
    for (b, c), (m, sd) in res.aggregate().items():
        print(f"{b:22s} c={c:.2f} accuracy {m:.4f} +- {sd:.4f}")
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_ablate(args, cfg, out) -> int:
    exp = experiment(cfg)
    recs = ablation_run(exp, cfg["sweep.seeds"], cfg["ablation.modes"], cfg["ablation.constraints"], out)
    table = ablation_table(recs)
    cs = cfg["ablation.constraints"]
    print("mode      " + " ".join(f"{c:>7.2f}" for c in cs))
    for mode, row in table.items():
        print(f"{mode:9s} " + " ".join(f"{row[c]:7.4f}" for c in cs))
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_sensitivity(args, cfg, out) -> int:
    exp = experiment(cfg)
    grid = cfg[f"sensitivity.{args.axis}"]
    recs = sensitivity_sweep(exp, args.axis, grid, cfg["sweep.seeds"], out=out)
    for v in grid:
        acc = [r.accuracy for r in recs if r.value == v]
        print(f"{args.axis}={v}: accuracy {np.mean(acc):.4f} +- {np.std(acc):.4f}")
    print(f"wrote {out / f'sensitivity_{args.axis}.csv'}")
    return EXIT_OK


def cmd_inspect(args, cfg, out) -> int:
    tr = load_trainer(cfg, _ckpt_path(out, args.checkpoint), args.force)
    tr._prime_buffers()
    info = {"seed": tr.seed, "stage": tr.state.stage, "epoch": tr.state.epoch,
            "supernet": tr.model.net.checksum(), "layers": []}
    for s in tr.model.states:
        sv = combined_score(s, tr.config.score)
        info["layers"].append({"layer": s.layer, "score": sv.values.tolist(), **sv.breakdown()})
    print(json.dumps(info, indent=None if args.compact else 2, sort_keys=True))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "sensitivity": cmd_sensitivity, "inspect": cmd_inspect}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies must not overwrite values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = _Parser(add_help=False)
    common.add_argument("--config", default=d(None), help="flat key = value config file")
    common.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    common.add_argument("--out", default=d(None), help="output directory (default: config 'out')")
    common.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--force", action="store_true", default=d(False),
                        help="load checkpoints written with another config")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(True)
    p = _Parser(prog="dance", description="Constraint-aware subnetwork search on a weight-shared SuperNet.",
                parents=[_common(False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="run training stages")
    t.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    t.add_argument("--constraint", type=float, help="stage-3 retain fraction (default: grid median)")
    t.add_argument("--resume", action="store_true", help="continue an interrupted stage-2 checkpoint")
    t.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="also checkpoint stage 2 every N epochs")

    s = sub.add_parser("sample", parents=[common], help="emit an architecture card for a constraint")
    s.add_argument("--constraint", type=float, required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--stochastic", action="store_true", help="keep exploration noise on")
    s.add_argument("--write", metavar="PATH", help="also write the card to PATH")

    e = sub.add_parser("evaluate", parents=[common], help="accuracy of a checkpoint, card or constraint")
    e.add_argument("--checkpoint")
    e.add_argument("--card")
    e.add_argument("--constraint", type=float)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--supernet", action="store_true", help="ignore a stage-3 subnet in the checkpoint")

    w = sub.add_parser("sweep", parents=[common], help="baselines across a constraint grid")
    w.add_argument("--grid", choices=["coarse", "fine"])

    sub.add_parser("ablate", parents=[common], help="single-component score ablation grid")

    n = sub.add_parser("sensitivity", parents=[common], help="hyperparameter sensitivity curves")
    n.add_argument("--axis", choices=sorted(SENSITIVITY_GRIDS), required=True)

    i = sub.add_parser("inspect", parents=[common], help="dump per-layer score breakdowns")
    i.add_argument("--checkpoint")
    i.add_argument("--compact", action="store_true")
    return p


def _configure(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("out", args.out)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cfg.validate()
    for w in caught:
        log.warning("%s", w.message)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _configure(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigError, ConfigMismatchError) as e:
        print(f"dance: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, TrainingError, MetricsError, FormatError, OSError) as e:
        print(f"dance: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"dance: invalid argument: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
