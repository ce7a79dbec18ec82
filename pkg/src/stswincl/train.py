"""Losses, optimizers, schedules, augmentation, staged training and inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import contrast, metrics, segnet
from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .contrast import KeySourceSpec, MomentumEncoder
from .data import IGNORE, Dataset, VideoClip, clip_sampler
from .tensor import Tensor

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossResult:
    loss: Tensor
    count: int     # pixels that entered the mean
    empty: bool    # no labeled pixel: loss defined as zero


def ce_ohem_loss(logits: Tensor, labels: np.ndarray, keep_fraction: float = 0.7,
                 ignore: int = IGNORE) -> LossResult:
    """Cross entropy averaged over the ``keep_fraction`` hardest labeled pixels.

    ``logits`` is ``(..., H, W, K)`` and ``labels`` ``(..., H, W)``. Ignore
    pixels are dropped before ranking; ties are broken by pixel order.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    K = logits.shape[-1]
    labels = np.asarray(labels).reshape(-1)
    if labels.size * K != logits.size:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    sel = np.flatnonzero(labels != ignore)
    if sel.size == 0:
        logger.warning("CE batch has no labeled pixels")
        return LossResult(T.mul(T.tsum(logits), 0.0), 0, True)
    if labels[sel].max() >= K:
        raise ValueError(f"label {int(labels[sel].max())} out of range for {K} classes")
    logp = T.log_softmax_lastdim(T.take(T.reshape(logits, (-1, K)), sel, axis=0))
    onehot = np.zeros((sel.size, K))
    onehot[np.arange(sel.size), labels[sel]] = 1.0
    nll = T.mul(T.tsum(T.mul(logp, onehot), axis=1), -1.0)
    if keep_fraction < 1.0:
        k = max(1, int(math.ceil(keep_fraction * sel.size)))
        order = T.decide(np.sort(np.argsort(-nll.data, kind="stable")[:k]))
        nll = T.take(nll, order, axis=0)
    return LossResult(T.mean(nll), nll.size, False)


# ---------------------------------------------------------------------------
# optimizers and schedules


@dataclass
class OptimConfig:
    kind: str = "sgd"               # "sgd" or "lars"
    momentum: float = 0.9
    weight_decay: float = 1e-4
    trust_coefficient: float = 0.001
    eps: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("sgd", "lars"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def lars_trust_ratio(w: np.ndarray, g: np.ndarray, weight_decay: float, eps: float = 1e-9) -> float:
    """``||w|| / (||g|| + wd ||w|| + eps)``; 1 when either norm vanishes."""
    wn, gn = float(np.linalg.norm(w)), float(np.linalg.norm(g))
    if wn == 0.0 or gn == 0.0:
        return 1.0
    return wn / (gn + weight_decay * wn + eps)


def optimizer_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
                   state: dict[str, np.ndarray], cfg: OptimConfig, lr: float) -> dict[str, np.ndarray]:
    """One update; returns new arrays and mutates the momentum ``state``.

    SGD:  v <- mu v + (g + wd w);                 w <- w - lr v
    LARS: v <- mu v + eta r (g + wd w), r = trust; w <- w - lr v
    Parameters with no gradient are left untouched.
    """
    out = {}
    for k, w in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = w
            continue
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {k}")
        d = g + cfg.weight_decay * w
        if cfg.kind == "lars":
            d = cfg.trust_coefficient * lars_trust_ratio(w, g, cfg.weight_decay, cfg.eps) * d
        v = state.get(k)
        v = d if v is None else cfg.momentum * v + d
        state[k] = v
        out[k] = w - lr * v
    return out


class Optimizer:
    """Stateful wrapper applying :func:`optimizer_step` to Tensor parameters in place."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.state: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], lr: float) -> None:
        arrays = {k: p.data for k, p in params.items()}
        grads = {k: p.grad for k, p in params.items()}
        for k, v in optimizer_step(arrays, grads, self.state, self.cfg, lr).items():
            params[k].data = v


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the old norm."""
    params = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / norm)
    return norm


def lr_schedule(kind: str, base: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    frac = step / total
    if kind == "poly":
        return base * (1.0 - frac) ** power
    if kind == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown schedule {kind!r}")


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugProfile:
    scale_range: tuple[float, float] = (1.0, 1.0)
    rotation_range: tuple[float, float] = (0.0, 0.0)     # degrees
    crop_range: tuple[float, float] = (1.0, 1.0)         # kept side fraction, resized back
    aggressive_crop: tuple[float, float] | None = None   # extra crop + resize (contrastive stage)
    max_retries: int = 10

    @classmethod
    def identity(cls) -> "AugProfile":
        return cls()

    @classmethod
    def standard(cls) -> "AugProfile":
        return cls(scale_range=(0.85, 1.2), rotation_range=(-15.0, 15.0), crop_range=(0.85, 1.0))

    @classmethod
    def contrastive(cls) -> "AugProfile":
        return replace(cls.standard(), aggressive_crop=(0.6, 0.9))

    @property
    def is_identity(self) -> bool:
        return (self.scale_range == (1.0, 1.0) and self.rotation_range == (0.0, 0.0)
                and self.crop_range == (1.0, 1.0) and self.aggressive_crop is None)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "AugProfile":
        d = dict(d)
        for k in ("scale_range", "rotation_range", "crop_range", "aggressive_crop"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def rotation_transform(degrees: float, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Output->input map rotating the frame by ``degrees`` about its centre."""
    return affine_transform_params(degrees, 1.0, (0.0, 0.0), H, W)


def affine_transform_params(degrees: float, zoom: float, shift: tuple[float, float],
                            H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """``(matrix, offset)`` such that input = matrix @ output + offset (row, col coords).

    ``zoom`` < 1 magnifies (the output shows a smaller input region).
    """
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    A = zoom * np.array([[c, -s], [s, c]])
    centre = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    off = centre - A @ centre + np.asarray(shift, dtype=np.float64)
    # exact right-angle rotations: cos(90 deg) is 6e-17, which pushes border pixels outside
    return _snap(A), _snap(off)


def _snap(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.round(a)
    return np.where(np.abs(a - r) < tol, r, a)


def apply_affine(clip: VideoClip, matrix: np.ndarray, offset: np.ndarray) -> VideoClip:
    """Same geometric map for every frame; bilinear for images, nearest for labels."""
    m3 = np.eye(3)
    m3[:2, :2] = matrix
    o3 = np.array([offset[0], offset[1], 0.0])
    frames = np.stack([ndimage.affine_transform(f, m3, o3, order=1, mode="constant", cval=0.0)
                       for f in clip.frames])
    labels = np.stack([ndimage.affine_transform(l, matrix, offset, order=0, mode="constant", cval=IGNORE)
                       for l in clip.labels]).astype(np.uint8)
    return VideoClip(np.clip(frames, 0.0, 1.0), labels, clip.video_id, clip.timesteps)


def _draw_params(profile: AugProfile, rng: np.random.Generator, H: int, W: int):
    scale = rng.uniform(*profile.scale_range)
    deg = rng.uniform(*profile.rotation_range)
    crop = rng.uniform(*profile.crop_range)
    if profile.aggressive_crop is not None:
        crop *= rng.uniform(*profile.aggressive_crop)
    zoom = crop / scale
    slack = max(0.0, 1.0 - zoom)
    shift = (rng.uniform(-slack, slack) * (H - 1) / 2.0, rng.uniform(-slack, slack) * (W - 1) / 2.0)
    return affine_transform_params(deg, zoom, shift, H, W)


def augment(clip: VideoClip, profile: AugProfile, rng: np.random.Generator) -> VideoClip:
    """Random crop/scale/rotation shared by all frames and labels of the clip.

    Draws leaving the current frame without any labeled pixel are retried up
    to ``max_retries`` times; after that the clip is returned unchanged.
    """
    if profile.is_identity:
        return VideoClip(clip.frames.copy(), clip.labels.copy(), clip.video_id, clip.timesteps)
    H, W = clip.frames.shape[1:3]
    for _ in range(profile.max_retries):
        out = apply_affine(clip, *_draw_params(profile, rng, H, W))
        if (out.labels[-1] != IGNORE).any():
            return out
    logger.warning("augmentation degenerate after %d retries; using identity", profile.max_retries)
    return VideoClip(clip.frames.copy(), clip.labels.copy(), clip.video_id, clip.timesteps)


# ---------------------------------------------------------------------------
# stage plans


STAGE_DEFAULTS = {
    1: dict(optimizer="sgd", schedule="poly", lr=0.05),
    2: dict(optimizer="lars", schedule="cosine", lr=1.0),
    3: dict(optimizer="sgd", schedule="poly", lr=0.02),
}


@dataclass
class StagePlan:
    stage: int
    epochs: int = 10
    iters_per_epoch: int = 8
    batch_size: int = 4
    lr: float | None = None
    optimizer: str | None = None
    schedule: str | None = None
    keep_fraction: float = 0.7
    aug: AugProfile | None = None
    keys: KeySourceSpec = field(default_factory=KeySourceSpec)
    ema_momentum: float = 0.999
    temperature: float = 1.0
    joint: bool = False           # add the contrast loss to CE (ablation only)
    val_every: int = 0            # 0: validate after the last epoch only
    clip_grad_norm: float | None = 5.0
    optim: OptimConfig | None = None

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        d = STAGE_DEFAULTS[self.stage]
        self.lr = d["lr"] if self.lr is None else self.lr
        self.optimizer = d["optimizer"] if self.optimizer is None else self.optimizer
        self.schedule = d["schedule"] if self.schedule is None else self.schedule
        if self.aug is None:
            self.aug = AugProfile.contrastive() if self.stage == 2 else AugProfile.standard()
        if self.optim is None:
            self.optim = OptimConfig(kind=self.optimizer)
        if self.optim.kind != self.optimizer:
            raise ValueError(f"optimizer {self.optimizer!r} disagrees with optim.kind {self.optim.kind!r}")
        if self.epochs < 0 or self.iters_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, iters_per_epoch >= 1 and batch_size >= 1 required")

    @property
    def head(self) -> str:
        return "projection" if self.stage == 2 else "segmentation"

    @property
    def objective(self) -> str:
        return "contrast" if self.stage == 2 else "CE+OHEM"

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aug"] = self.aug.to_dict()
        d["head"], d["objective"] = self.head, self.objective
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "StagePlan":
        d = {k: v for k, v in d.items() if k not in ("head", "objective")}
        if d.get("aug") is not None:
            d["aug"] = AugProfile.from_dict(d["aug"])
        if d.get("keys") is not None:
            d["keys"] = KeySourceSpec(**d["keys"])
        if d.get("optim") is not None:
            d["optim"] = OptimConfig(**d["optim"])
        return cls(**d)


# ---------------------------------------------------------------------------
# inference


def sliding_inference(frames: np.ndarray, params: Mapping[str, Tensor], cfg: segnet.ModelConfig,
                      batch_size: int = 16) -> np.ndarray:
    """Causal per-frame prediction: frame t sees frames t-N+1..t, left-padded with frame 0.

    ``frames`` is ``(T, H, W, 3)``; returns ``(T, H, W)`` uint8 class maps.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, N = len(frames), cfg.clip_length
    if n < 1:
        raise ValueError("video must have at least one frame")
    preds = []
    with T.no_grad():
        for s in range(0, n, batch_size):
            ts = range(s, min(n, s + batch_size))
            idx = np.array([[max(0, t - N + 1 + k) for k in range(N)] for t in ts])
            logits = segnet.segment(frames[idx], params, cfg).data
            preds.append(np.argmax(logits, axis=-1).astype(np.uint8))
    return np.concatenate(preds, axis=0)


def evaluate_split(params: Mapping[str, Tensor], cfg: segnet.ModelConfig, dataset: Dataset,
                   split: str = "test") -> metrics.MetricsReport:
    items = []
    for vid in dataset.split(split):
        pairs = [dataset.frame(vid, t) for t in range(dataset.num_frames(vid))]
        frames = np.stack([p[0] for p in pairs])
        preds = sliding_inference(frames, params, cfg)
        items.extend((vid, f"{vid}/{t:04d}", preds[t], pairs[t][1]) for t in range(len(pairs)))
    return metrics.build_report(items, dataset.num_classes, dataset.background, dataset.ignore_index)


# ---------------------------------------------------------------------------
# staged training


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    """Independent stream per (seed, stage) so stages can be run separately."""
    return np.random.default_rng([seed, stage])


def _tensor_params(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    # sorted names: float reductions over parameters (gradient norm) must not depend on
    # whether the arrays came from init_params or from a checkpoint on disk
    return {k: Tensor(np.array(arrays[k], dtype=np.float64), requires_grad=True, name=k) for k in sorted(arrays)}


def _contrast_loss(clips: Sequence[VideoClip], queries: Sequence[VideoClip], plan: StagePlan,
                   params, encoder, cfg, dataset, rng) -> contrast.ContrastResult:
    key_sets = [contrast.assemble_key_batch(c, dataset, plan.keys, rng,
                                            augment=lambda k, r: augment(k, plan.aug, r)) for c in clips]
    return contrast.contrast_step(queries, key_sets, params, encoder, cfg, plan.temperature)


def run_stage(plan: StagePlan, cfg: segnet.ModelConfig, dataset: Dataset, seed: int,
              init: Checkpoint | None = None, log: Callable[[dict], None] | None = None,
              val_split: str | None = "val", snapshot_epochs: Iterable[int] = ()) -> Checkpoint | dict[int, Checkpoint]:
    """Train one stage and return its checkpoint.

    Stage 1 starts from ``init`` if given (tag ``init``) or fresh weights;
    stage 2 requires a stage-1 checkpoint and stage 3 a stage-2 checkpoint.
    With ``snapshot_epochs`` a dict ``{epoch: checkpoint}`` is returned instead,
    holding a snapshot after each listed epoch (the final epoch is always included).
    """
    need = {1: (None, "init"), 2: ("stage1",), 3: ("stage2",)}[plan.stage]
    if init is None and None not in need:
        raise CheckpointError(f"stage {plan.stage} requires a {need[0]} checkpoint")
    if init is not None and init.stage not in need:
        raise CheckpointError(f"stage {plan.stage} cannot start from a {init.stage} checkpoint")
    arrays = segnet.init_params(cfg, seed) if init is None else init.params
    params = _tensor_params(arrays)
    rng = stage_rng(seed, plan.stage)
    opt = Optimizer(plan.optim)
    encoder = MomentumEncoder(params, plan.ema_momentum) if (plan.stage == 2 or plan.joint) else None
    sampler = clip_sampler(dataset, cfg.clip_length, plan.batch_size, rng)
    total = max(1, plan.total_steps)
    snapshot_epochs = set(snapshot_epochs)
    snaps: dict[int, Checkpoint] = {}
    step = 0

    def make_ckpt(epoch: int) -> Checkpoint:
        return Checkpoint(
            stage=f"stage{plan.stage}",
            model_config=cfg.to_dict(),
            params={k: p.data.copy() for k, p in params.items()},
            shadow=None if encoder is None else {k: v.copy() for k, v in encoder.shadow.items()},
            optimizer={k: v.copy() for k, v in opt.state.items()},
            plan=plan.to_dict(),
            extra={"seed": seed, "epochs_done": epoch, "poly_power": 0.9,
                   "ema_momentum": plan.ema_momentum if encoder is not None else None},
        )

    for epoch in range(1, plan.epochs + 1):
        losses = []
        for _ in range(plan.iters_per_epoch):
            lr = lr_schedule(plan.schedule, plan.lr, step, total)
            clips = next(sampler)
            queries = [augment(c, plan.aug, rng) for c in clips]
            for p in params.values():
                p.grad = None
            x = np.stack([q.frames for q in queries])
            if plan.stage == 2:
                loss = _contrast_loss(clips, queries, plan, params, encoder, cfg, dataset, rng).loss
            else:
                y = np.stack([q.labels[-1] for q in queries])
                loss = ce_ohem_loss(segnet.segment(x, params, cfg), y, plan.keep_fraction).loss
                if plan.joint:
                    loss = T.add(loss, _contrast_loss(clips, queries, plan, params, encoder, cfg, dataset, rng).loss)
            T.backward(loss)
            if plan.clip_grad_norm is not None:
                clip_grad_norm(params.values(), plan.clip_grad_norm)
            opt.step(params, lr)
            if encoder is not None:
                contrast.ema_update(encoder, params)
            losses.append(loss.item())
            step += 1
        rec = {"stage": plan.stage, "epoch": epoch, "loss": float(np.mean(losses)),
               "lr": lr_schedule(plan.schedule, plan.lr, min(step, total), total)}
        last = epoch == plan.epochs
        if val_split and plan.stage != 2 and dataset.split(val_split) and (
                last or (plan.val_every and epoch % plan.val_every == 0)):
            rec["val_mIoU"] = evaluate_split(params, cfg, dataset, val_split).overall_miou
        if log is not None:
            log(rec)
        logger.info("%s", json.dumps(rec))
        if epoch in snapshot_epochs:
            snaps[epoch] = make_ckpt(epoch)
    final = make_ckpt(plan.epochs)
    if snapshot_epochs:
        snaps[plan.epochs] = final
        return snaps
    return final


def params_from_checkpoint(ckpt: Checkpoint) -> tuple[segnet.ModelConfig, dict[str, Tensor]]:
    mc = dict(ckpt.model_config)
    cfg = segnet.ModelConfig(**mc)
    return cfg, {k: Tensor(v) for k, v in ckpt.params.items()}


def json_log_writer(path: str | Path) -> Callable[[dict], None]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def write(rec: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    return write
