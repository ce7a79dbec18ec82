"""Supervised pixel-to-pixel contrast across videos.

Query pixels come from the current frame through the online branch; key
pixels come from several key frames through the momentum (EMA) branch and are
treated as constants. Pairs are positive when the two pixels share a class.
For each query pixel the positive similarity is averaged over all positives
of all key frames, while negatives are averaged per key frame and the
per-frame means are summed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import segnet
from . import tensor as T
from .data import IGNORE, Dataset, VideoClip
from .tensor import Tensor

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """The requested key sources cannot be satisfied by the dataset."""


@dataclass
class KeySourceSpec:
    num_adjacent: int = 1
    num_cross_video: int = 3
    include_augmented_self: bool = True

    def __post_init__(self):
        if self.num_adjacent < 0 or self.num_cross_video < 0:
            raise ValueError("key counts must be non-negative")

    @property
    def num_keys(self) -> int:
        return int(self.include_augmented_self) + self.num_adjacent + self.num_cross_video


class MomentumEncoder:
    """Shadow copy of the online parameters, updated only by EMA."""

    def __init__(self, params: Mapping[str, object], momentum: float = 0.999):
        self.momentum = momentum
        self.shadow = {k: np.array(getattr(v, "data", v), dtype=np.float64) for k, v in params.items()}

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.shadow.items()}


def ema_update(enc: MomentumEncoder, online: Mapping[str, object], m: float | None = None) -> None:
    """shadow <- m * shadow + (1 - m) * online, per parameter."""
    m = enc.momentum if m is None else m
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if set(online) != set(enc.shadow):
        raise ValueError("online and shadow parameter names differ")
    for k, v in online.items():
        arr = np.asarray(getattr(v, "data", v))
        if arr.shape != enc.shadow[k].shape:
            raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {enc.shadow[k].shape}")
        enc.shadow[k] = m * enc.shadow[k] + (1.0 - m) * arr


@dataclass
class KeyFrame:
    clip: VideoClip
    source: str  # "self", "adjacent" or "cross"


def _adjacent_offsets(t: int, n: int, count: int) -> list[int]:
    out, d = [], 1
    while len(out) < count and d < n:
        for off in (-d, d):
            if 0 <= t + off < n and len(out) < count:
                out.append(t + off)
        d += 1
    return out


def assemble_key_batch(query: VideoClip, dataset: Dataset, spec: KeySourceSpec, rng: np.random.Generator,
                       split: str = "train",
                       augment: Callable[[VideoClip, np.random.Generator], VideoClip] | None = None) -> list[KeyFrame]:
    """Key clips for one query clip: augmented self, same-video neighbours, other-video frames."""
    N = len(query)
    t = query.timesteps[-1]
    keys: list[KeyFrame] = []
    if spec.include_augmented_self:
        keys.append(KeyFrame(query, "self"))
    n = dataset.num_frames(query.video_id)
    adj = _adjacent_offsets(t, n, spec.num_adjacent)
    if len(adj) < spec.num_adjacent:
        raise ConfigError(f"video {query.video_id} has too few frames for {spec.num_adjacent} adjacent keys")
    keys.extend(KeyFrame(dataset.clip(query.video_id, ta, N), "adjacent") for ta in adj)
    if spec.num_cross_video:
        others = [v for v in dataset.split(split) if v != query.video_id]
        if len(others) < spec.num_cross_video:
            raise ConfigError(f"{spec.num_cross_video} cross-video keys need that many other videos, "
                              f"have {len(others)}")
        for i in rng.choice(len(others), size=spec.num_cross_video, replace=False):
            vid = others[i]
            tc = int(rng.integers(0, dataset.num_frames(vid)))
            keys.append(KeyFrame(dataset.clip(vid, tc, N), "cross"))
    if augment is not None:
        keys = [KeyFrame(augment(k.clip, rng), k.source) for k in keys]
    return keys


def downsample_labels(y: np.ndarray, S: int) -> np.ndarray:
    """Top-left representative of every S x S cell; works on ``(..., H, W)``."""
    if y.shape[-2] % S or y.shape[-1] % S:
        raise ValueError(f"label map {y.shape[-2:]} not divisible by {S}")
    return np.ascontiguousarray(y[..., ::S, ::S])


def label_mask(y_q: np.ndarray, y_k: np.ndarray, ignore: int = IGNORE) -> np.ndarray:
    """``(P, Q)`` indicator of equal labels; rows/cols of ignore pixels are all zero."""
    y_q, y_k = np.ravel(y_q), np.ravel(y_k)
    m = y_q[:, None] == y_k[None, :]
    m &= (y_q != ignore)[:, None]
    m &= (y_k != ignore)[None, :]
    return m


@dataclass
class PairBatch:
    """One query frame and its key frames, flattened to pixels."""

    query: Tensor                  # (P, D) unit-norm
    query_labels: np.ndarray       # (P,)
    keys: list[np.ndarray]         # each (Q_f, D) unit-norm, constant
    key_labels: list[np.ndarray]   # each (Q_f,)
    sources: list[str] = field(default_factory=list)
    ignore: int = IGNORE

    def masks(self) -> list[np.ndarray]:
        return [label_mask(self.query_labels, yk, self.ignore) for yk in self.key_labels]


@dataclass
class ContrastResult:
    loss: Tensor
    contributing: int
    empty: bool


def _pixel_terms(batch: PairBatch, temperature: float) -> tuple[Tensor | None, int]:
    yq = np.ravel(batch.query_labels)
    qsel = np.flatnonzero(yq != batch.ignore)
    if qsel.size == 0:
        return None, 0
    yq = yq[qsel]
    D = batch.query.shape[-1]
    pos_acc = np.zeros((qsel.size, D))
    pos_cnt = np.zeros(qsel.size)
    neg_acc = np.zeros((qsel.size, D))
    neg_any = np.zeros(qsel.size, dtype=bool)
    for ek, yk in zip(batch.keys, batch.key_labels):
        ek = np.asarray(getattr(ek, "data", ek)).reshape(-1, D)
        yk = np.ravel(yk)
        ksel = yk != batch.ignore
        ek, yk = ek[ksel], yk[ksel]
        pos = (yq[:, None] == yk[None, :]).astype(np.float64)
        neg = 1.0 - pos
        pos_acc += pos @ ek
        pos_cnt += pos.sum(axis=1)
        ncnt = neg.sum(axis=1)
        has = ncnt > 0
        neg_acc[has] += (neg[has] @ ek) / ncnt[has, None]
        neg_any |= has
    keep = (pos_cnt > 0) & neg_any
    if not keep.any():
        return None, 0
    rows = qsel[keep]
    q = T.take(T.reshape(batch.query, (-1, D)), rows, axis=0)
    pos_mean = pos_acc[keep] / pos_cnt[keep, None]
    sp = T.tsum(T.mul(q, pos_mean), axis=1)
    sn = T.tsum(T.mul(q, neg_acc[keep]), axis=1)
    return T.softplus(T.mul(T.sub(sn, sp), 1.0 / temperature)), int(keep.sum())


def pixel_contrast_loss(batches: PairBatch | Sequence[PairBatch], temperature: float = 1.0) -> ContrastResult:
    """Mean over contributing query pixels of -log(e^Sp / (e^Sp + e^Sn)).

    Pixels with no positive or no negative key pixel are skipped. If nothing
    contributes the loss is zero and ``empty`` is set.
    """
    if isinstance(batches, PairBatch):
        batches = [batches]
    terms, count = [], 0
    for b in batches:
        t, c = _pixel_terms(b, temperature)
        if t is not None:
            terms.append(t)
            count += c
    if not terms:
        logger.warning("contrast batch has no contributing pixels")
        anchor = batches[0].query if batches else Tensor(0.0)
        return ContrastResult(T.mul(T.tsum(anchor), 0.0), 0, True)
    return ContrastResult(T.mean(T.concat(terms, axis=0)), count, False)


def contrast_step(query_clips: Sequence[VideoClip], key_sets: Sequence[Sequence[KeyFrame]],
                  params: Mapping[str, Tensor], encoder: MomentumEncoder, cfg: segnet.ModelConfig,
                  temperature: float = 1.0) -> ContrastResult:
    """Contrast loss for a batch; only ``params`` (online branch) can receive gradients."""
    S = cfg.stride
    q_emb = segnet.embed(np.stack([c.frames for c in query_clips]), params, cfg)
    flat_keys = [k for ks in key_sets for k in ks]
    with T.no_grad():
        shadow = encoder.tensors()
        k_emb = segnet.embed(np.stack([k.clip.frames for k in flat_keys]), shadow, cfg).data
    batches, pos = [], 0
    for i, (clip, ks) in enumerate(zip(query_clips, key_sets)):
        yq = downsample_labels(clip.labels[-1], S)
        n = len(ks)
        batches.append(PairBatch(
            query=T.reshape(q_emb[i], (-1, cfg.proj_dim)),
            query_labels=yq.ravel(),
            keys=[k_emb[pos + j].reshape(-1, cfg.proj_dim) for j in range(n)],
            key_labels=[downsample_labels(k.clip.labels[-1], S).ravel() for k in ks],
            sources=[k.source for k in ks],
        ))
        pos += n
    return pixel_contrast_loss(batches, temperature)
