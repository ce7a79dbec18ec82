"""Command-line entry point: ``stswincl {synth,train,eval,ablate,verify,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data, experiments, report, train, verify
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigFileError, ExperimentConfig, load_config
from .contrast import ConfigError
from .data import DatasetError
from .metrics import wilcoxon_signed_rank

logger = logging.getLogger("stswincl")


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.seed)
    if getattr(args, "data", None):
        cfg = replace(cfg, dataset=str(args.data), synth=None)
    return cfg


def _echo(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")


def cmd_synth(args) -> int:
    cfg = _config(args)
    if cfg.synth is None:
        raise UsageError("config has no synth section")
    data.generate_synthetic(cfg.synth, args.out)
    print(f"wrote {cfg.synth.num_videos} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.stage2_epochs:
        cfg = replace(cfg, stage2_epoch_grid=args.stage2_epochs)
    out = Path(args.out)
    _echo(cfg, out)
    stages = sorted(args.stages)
    init = None
    if args.init:
        need = {1: "init", 2: "stage1", 3: "stage2"}[stages[0]]
        init = load_checkpoint(args.init, expect_stage=need)
        if init.model_config != cfg.model.to_dict():
            raise UsageError(f"{args.init}: model config differs from the experiment config")
    elif stages[0] != 1:
        raise UsageError(f"--stages starting at {stages[0]} needs --init")
    dataset = experiments.prepare_dataset(cfg, out)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    res = experiments.run_pipeline(cfg, dataset, stages, init=init, out=out,
                                   log=train.json_log_writer(log_path))
    for row in res.sweep:
        print(f"stage-2 epochs {row['stage2_epochs']}: stage-3 val mIoU {row['val_mIoU']:.4f}")
    if res.report is not None:
        print(f"{cfg.eval_split} mIoU {res.report.overall_miou:.4f}  Dice {res.report.overall_dice:.4f}")
    print(f"checkpoints under {out}")
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    if ck.stage == "stage2":
        raise UsageError("stage-2 checkpoints carry an untrained segmentation head; evaluate stage 1 or 3")
    if args.data:
        dataset = data.load_dataset(args.data)
    else:
        cfg = _config(args)
        dataset = experiments.prepare_dataset(cfg, Path(args.out))
    rep = experiments.evaluate(ck, dataset, args.split)
    if args.against:
        other = experiments.evaluate(load_checkpoint(args.against), dataset, args.split)
        rep.p_values["against"] = wilcoxon_signed_rank(rep.frame_mious(), other.frame_mious()).p_value
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_json(out / f"report_{args.split}.json")
    rep.write_csv(out / f"report_{args.split}.csv")
    d = rep.dataset
    print(f"{args.split}: mIoU {rep.overall_miou:.4f}  Dice {rep.overall_dice:.4f}  "
          f"PA {d.pa:.4f}  PAC {d.pac:.4f}  global mIoU {d.miou:.4f}")
    for k, v in rep.p_values.items():
        print(f"Wilcoxon p vs {k}: {v:.4g}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _echo(cfg, out)
    dataset = experiments.prepare_dataset(cfg, out)
    log_path = out / f"ablation_{args.axis}_log.jsonl"
    log_path.write_text("")
    rows = experiments.ablate(cfg, dataset, args.axis, log=train.json_log_writer(log_path))
    path = out / f"ablation_{args.axis}.csv"
    experiments.write_ablation(rows, path)
    for r in rows:
        print(f"{r['setting']!s:>6}  mIoU {r['mIoU']:.4f}  Dice {r['Dice']:.4f}  p {r['p_value']:.4g}")
    print(f"wrote {path}")
    return 0


def cmd_verify(args) -> int:
    results = verify.run_all(args.only or None)
    failed = [c.name for c in results if not c.passed]
    print(f"{len(results) - len(failed)}/{len(results)} oracle checks passed")
    return 1 if failed else 0


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"{run} is not a directory")
    for p in report.render(run, args.out):
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stswincl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="experiment config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed and STSWIN_SEED")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run training stages")
    common(p)
    p.add_argument("--data", help="existing dataset root (instead of the synth section)")
    p.add_argument("--stages", type=_int_list, default=(1, 2, 3), help="e.g. 1,2,3 or 2,3")
    p.add_argument("--init", help="checkpoint directory the first stage starts from")
    p.add_argument("--stage2-epochs", type=_int_list, default=(),
                   help="contrast epoch grid; picks the one with the best stage-3 val mIoU")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--against", help="second checkpoint for a paired Wilcoxon test")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="clip-length or pair-config sweep")
    common(p)
    p.add_argument("--data")
    p.add_argument("--axis", required=True, choices=("clip-length", "pairs"))
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="run the oracle checks")
    p.add_argument("--only", nargs="*", choices=sorted(verify.ORACLE_CHECKS))
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("report", help="CSV summary and SVG charts for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "stages", None) is not None:
        s = sorted(args.stages)
        if not s or s != list(range(s[0], s[-1] + 1)) or not set(s) <= {1, 2, 3}:
            ap.error(f"--stages must be consecutive stages within 1..3, got {args.stages}")
    try:
        return args.fn(args)
    except (UsageError, ConfigFileError) as exc:
        print(f"stswincl: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, ConfigError) as exc:
        print(f"stswincl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
