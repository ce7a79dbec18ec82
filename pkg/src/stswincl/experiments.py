"""Staged pipelines, ablation sweeps and the ordering experiment."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data, metrics, train
from .checkpoint import Checkpoint, CheckpointError, save_checkpoint
from .config import ExperimentConfig
from .contrast import KeySourceSpec
from .segnet import ModelConfig
from .train import StagePlan

logger = logging.getLogger(__name__)

Log = Callable[[dict], None]

PAIR_AXIS = ((0, 0), (1, 0), (1, 1), (1, 2), (1, 3), (1, 4), (2, 3))
CLIP_AXIS = (1, 2, 3, 4, 5)


def prepare_dataset(cfg: ExperimentConfig, out: Path | None) -> data.Dataset:
    """Load ``cfg.dataset`` or generate the synthetic set under ``out/data``."""
    if cfg.dataset is not None:
        return data.load_dataset(cfg.dataset)
    root = (out if out is not None else Path.cwd()) / "data"
    if not (root / "manifest.json").exists():
        data.generate_synthetic(cfg.synth, root)
    return data.load_dataset(root)


def evaluate(ckpt: Checkpoint, dataset: data.Dataset, split: str) -> metrics.MetricsReport:
    mc, params = train.params_from_checkpoint(ckpt)
    return train.evaluate_split(params, mc, dataset, split)


@dataclass
class PipelineResult:
    checkpoints: dict[str, Checkpoint]
    report: metrics.MetricsReport | None = None
    sweep: list[dict] = field(default_factory=list)


def run_pipeline(cfg: ExperimentConfig, dataset: data.Dataset, stages: Sequence[int] = (1, 2, 3),
                 init: Checkpoint | None = None, out: Path | None = None, log: Log | None = None,
                 evaluate_final: bool = True) -> PipelineResult:
    """Run consecutive stages, each starting from the previous checkpoint.

    With a non-empty ``cfg.stage2_epoch_grid`` and both stages 2 and 3
    requested, stage 2 is snapshotted at each grid epoch, every snapshot is
    finetuned by stage 3, and the snapshot with the best validation mIoU is
    kept (ties go to the fewer epochs).
    """
    stages = sorted(stages)
    if not stages or stages != list(range(stages[0], stages[-1] + 1)) or not set(stages) <= {1, 2, 3}:
        raise ValueError(f"stages must be consecutive within 1..3, got {stages}")
    cks: dict[str, Checkpoint] = {}
    current = init
    res = PipelineResult(cks)
    val = cfg.val_split if dataset.split(cfg.val_split) else None
    sweep = cfg.stage2_epoch_grid if {2, 3} <= set(stages) else ()
    for s in stages:
        plan = cfg.stages[s]
        if s == 2 and sweep:
            grid = sorted(set(sweep))
            snaps = train.run_stage(replace(plan, epochs=grid[-1]), cfg.model, dataset, cfg.seed,
                                    init=current, log=log, val_split=None, snapshot_epochs=grid)
            best = None
            for e in grid:
                ck3 = train.run_stage(cfg.stages[3], cfg.model, dataset, cfg.seed, init=snaps[e], val_split=None)
                score = evaluate(ck3, dataset, val).overall_miou if val else math.nan
                res.sweep.append({"stage2_epochs": e, "val_mIoU": score})
                if log is not None:
                    log({"stage": 2, "sweep_epoch": e, "val_mIoU": score})
                if best is None or score > best[0]:
                    best = (score, e, ck3)
            _, e, ck3 = best
            cks["stage2"], cks["stage3"] = snaps[e], ck3
            current = ck3
            if out is not None:
                save_checkpoint(snaps[e], out / "stage2")
                save_checkpoint(ck3, out / "stage3")
                _write_rows(out / "stage2_sweep.csv", res.sweep)
            break
        current = train.run_stage(plan, cfg.model, dataset, cfg.seed, init=current, log=log,
                                  val_split=val if s != 2 else None)
        cks[f"stage{s}"] = current
        if out is not None:
            save_checkpoint(current, out / f"stage{s}")
    final = cks[f"stage{stages[-1]}"] if f"stage{stages[-1]}" in cks else current
    if evaluate_final and final.stage != "stage2" and dataset.split(cfg.eval_split):
        res.report = evaluate(final, dataset, cfg.eval_split)
        if out is not None:
            res.report.write_json(out / f"report_{cfg.eval_split}.json")
            res.report.write_csv(out / f"report_{cfg.eval_split}.csv")
    return res


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# ablations


def _no_contrast(cfg: ExperimentConfig) -> ExperimentConfig:
    stages = dict(cfg.stages)
    stages[2] = replace(stages[2], epochs=0)
    return replace(cfg, stages=stages, stage2_epoch_grid=())


def _with_keys(cfg: ExperimentConfig, pos: int, neg: int) -> ExperimentConfig:
    stages = dict(cfg.stages)
    stages[2] = replace(stages[2], keys=KeySourceSpec(pos, neg, True))
    return replace(cfg, stages=stages, stage2_epoch_grid=())


def _with_clip_length(cfg: ExperimentConfig, N: int) -> ExperimentConfig:
    return replace(cfg, model=replace(cfg.model, clip_length=N))


def ablate(cfg: ExperimentConfig, dataset: data.Dataset, axis: str, log: Log | None = None,
           values: Sequence | None = None) -> list[dict]:
    """One row per setting with test scores and a Wilcoxon p-value against the reference row.

    ``clip-length`` trains the no-contrast pipeline for each N (reference N=4);
    ``pairs`` shares one stage-1 run and varies the stage-2 key sources
    (reference (1, 3)).
    """
    rows, reports = [], {}
    if axis == "clip-length":
        values = tuple(values or CLIP_AXIS)
        ref = 4 if 4 in values else values[0]
        for N in values:
            c = _no_contrast(_with_clip_length(cfg, N))
            reports[N] = run_pipeline(c, dataset, log=log).report
    elif axis == "pairs":
        values = tuple(tuple(v) for v in (values or PAIR_AXIS))
        ref = (1, 3) if (1, 3) in values else values[0]
        ck1 = train.run_stage(cfg.stages[1], cfg.model, dataset, cfg.seed, log=log, val_split=None)
        for pos, neg in values:
            c = _with_keys(cfg, pos, neg)
            reports[(pos, neg)] = run_pipeline(c, dataset, stages=(2, 3), init=ck1, log=log).report
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    base = reports[ref].frame_mious()
    for v in values:
        rep = reports[v]
        fm = rep.frame_mious()
        p = 1.0 if v == ref else metrics.wilcoxon_signed_rank(fm, base).p_value
        rows.append({
            "axis": axis,
            "setting": v if axis == "clip-length" else f"({v[0]},{v[1]})",
            "mIoU": rep.overall_miou, "Dice": rep.overall_dice,
            "PA": rep.dataset.pa, "PAC": rep.dataset.pac, "dataset_mIoU": rep.dataset.miou,
            "reference": ref if axis == "clip-length" else f"({ref[0]},{ref[1]})",
            "p_value": p, "frames": len(fm),
        })
    return rows


def write_ablation(rows: list[dict], path: Path) -> None:
    _write_rows(path, rows)


# ---------------------------------------------------------------------------
# ordering experiment


@dataclass
class OrderingProtocol:
    """Desk-scale protocol for the three ordering claims; defaults run in about 15 CPU minutes."""

    seeds: tuple[int, ...] = (0, 1, 2)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(height=32, width=32, clip_length=4))
    synth: data.SynthConfig = field(default_factory=lambda: data.SynthConfig(height=32, width=32))
    stage1_epochs: int = 30
    stage2_epochs: int = 10
    stage3_epochs: int = 20
    iters_per_epoch: int = 8
    batch_size: int = 4
    stage2_lr: float = 1.0
    ema_momentum: float = 0.9

    def experiment(self, seed: int, clip_length: int | None = None) -> ExperimentConfig:
        mk = lambda s, e, **kw: StagePlan(s, epochs=e, iters_per_epoch=self.iters_per_epoch,
                                          batch_size=self.batch_size, **kw)
        model = self.model if clip_length is None else replace(self.model, clip_length=clip_length)
        return ExperimentConfig(
            model=model,
            stages={1: mk(1, self.stage1_epochs),
                    2: mk(2, self.stage2_epochs, lr=self.stage2_lr, ema_momentum=self.ema_momentum),
                    3: mk(3, self.stage3_epochs)},
            synth=self.synth, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


RUNS = ("sswin_n1", "stswin", "stswincl_13", "stswincl_00")


@dataclass
class OrderingResult:
    per_seed: dict[int, dict[str, float]]
    medians: dict[str, float]
    checks: dict[str, bool]
    seconds: float

    def to_dict(self) -> dict:
        return {"per_seed": {str(k): v for k, v in self.per_seed.items()}, "medians": self.medians,
                "checks": self.checks, "seconds": self.seconds}


def ordering_checks(medians: dict[str, float]) -> dict[str, bool]:
    return {
        "a_temporal_beats_spatial": medians["stswin"] > medians["sswin_n1"],
        "b_contrast_not_worse": medians["stswincl_13"] >= medians["stswin"],
        "c_00_not_above_13": not medians["stswincl_00"] > medians["stswincl_13"],
    }


def run_ordering(protocol: OrderingProtocol, workdir: Path, log: Log | None = None) -> OrderingResult:
    """Test mIoU of the four runs for every seed, their medians and the ordering checks."""
    t0 = time.time()
    workdir = Path(workdir)
    dataset = prepare_dataset(protocol.experiment(protocol.seeds[0]), workdir)
    per_seed = {}
    for seed in protocol.seeds:
        cfg = protocol.experiment(seed)
        ck1 = train.run_stage(cfg.stages[1], cfg.model, dataset, seed, val_split=None)
        scores = {}
        for name, c in (("stswin", _no_contrast(cfg)), ("stswincl_13", _with_keys(cfg, 1, 3)),
                        ("stswincl_00", _with_keys(cfg, 0, 0))):
            scores[name] = run_pipeline(c, dataset, stages=(2, 3), init=ck1).report.overall_miou
        n1 = _no_contrast(protocol.experiment(seed, clip_length=1))
        scores["sswin_n1"] = run_pipeline(n1, dataset).report.overall_miou
        per_seed[seed] = scores
        if log is not None:
            log({"seed": seed, **scores, "elapsed": round(time.time() - t0, 1)})
    medians = {r: float(np.median([per_seed[s][r] for s in protocol.seeds])) for r in RUNS}
    return OrderingResult(per_seed, medians, ordering_checks(medians), time.time() - t0)
