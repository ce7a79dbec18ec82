"""Hybrid CNN + windowed-transformer segmentation network.

Pipeline per clip: conv backbone on every frame (stride S) -> space-time
blocks at stride S -> 2x2 feature merging -> space-time blocks at stride 2S
-> ASPP fusion of both scales for the current frame -> segmentation head or
projection head.

Parameters live in a flat ``{name: Tensor}`` dict so the same forward code
serves the online model and its momentum copy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import stswin
from . import tensor as T
from .stswin import BlockConfig
from .tensor import Tensor


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 48
    stride: int = 4
    channels: int = 32
    clip_length: int = 4
    window_size: int = 4
    num_heads: int = 2
    mlp_ratio: float = 2.0
    use_relative_position_bias: bool = True
    fused_dim: int = 64
    proj_dim: int = 16
    num_classes: int = 5
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    aspp_dim: int = 32
    backbone_widths: tuple[int, ...] = (16, 32)
    head_dim: int = 32
    groups: int = 4

    def __post_init__(self):
        self.aspp_rates = tuple(self.aspp_rates)
        self.backbone_widths = tuple(self.backbone_widths)
        S = self.stride
        if S < 2 or S & (S - 1):
            raise ValueError("stride must be a power of two >= 2")
        if len(self.backbone_widths) != int(np.log2(S)):
            raise ValueError(f"need {int(np.log2(S))} backbone widths for stride {S}")
        if self.height % S or self.width % S:
            raise ValueError(f"frame {self.height}x{self.width} not divisible by stride {S}")
        if (self.height // S) % 2 or (self.width // S) % 2:
            raise ValueError("token grid must have even sides for feature merging")
        if self.proj_dim >= self.fused_dim:
            raise ValueError("projection dim must be smaller than fused dim")
        if self.clip_length < 1:
            raise ValueError("clip_length must be >= 1")
        for c in (*self.backbone_widths, self.channels):
            if c % self.groups:
                raise ValueError(f"width {c} not divisible by {self.groups} groups")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    def block_config(self, stage: int) -> BlockConfig:
        scale = 1 if stage == 1 else 2
        return BlockConfig(self.window_size, self.num_heads * scale, self.channels * scale,
                           self.mlp_ratio, self.use_relative_position_bias)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        d["backbone_widths"] = list(self.backbone_widths)
        return d


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameters for both heads; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    widths = (3, *cfg.backbone_widths, cfg.channels)
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"backbone.conv{i}.w"] = _he(rng, (3, 3, cin, cout), 9 * cin)
        p[f"backbone.conv{i}.b"] = np.zeros(cout)
        p[f"backbone.gn{i}.gain"] = np.ones(cout)
        p[f"backbone.gn{i}.bias"] = np.zeros(cout)
    C = cfg.channels
    for stage in (1, 2):
        for k, v in stswin.init_block(cfg.block_config(stage), rng).items():
            p[f"stage{stage}.{k}"] = v
    p["merge.w"] = rng.normal(0.0, np.sqrt(1.0 / (4 * C)), (4 * C, 2 * C))
    p["merge.b"] = np.zeros(2 * C)
    A = cfg.aspp_dim
    for r in cfg.aspp_rates:
        p[f"aspp.rate{r}.w"] = _he(rng, (3, 3, 2 * C, A), 9 * 2 * C)
        p[f"aspp.rate{r}.b"] = np.zeros(A)
    p["aspp.pool.w"] = _he(rng, (2 * C, A), 2 * C)
    p["aspp.pool.b"] = np.zeros(A)
    nb = len(cfg.aspp_rates) + 1
    p["aspp.proj.w"] = _he(rng, (nb * A, A), nb * A)
    p["aspp.proj.b"] = np.zeros(A)
    p["fuse.w"] = _he(rng, (A + C, cfg.fused_dim), A + C)
    p["fuse.b"] = np.zeros(cfg.fused_dim)
    p["seg.conv1.w"] = _he(rng, (3, 3, cfg.fused_dim, cfg.head_dim), 9 * cfg.fused_dim)
    p["seg.conv1.b"] = np.zeros(cfg.head_dim)
    p["seg.conv2.w"] = rng.normal(0.0, np.sqrt(1.0 / cfg.head_dim), (1, 1, cfg.head_dim, cfg.num_classes))
    p["seg.conv2.b"] = np.zeros(cfg.num_classes)
    p["proj.fc1.w"] = _he(rng, (cfg.fused_dim, cfg.fused_dim), cfg.fused_dim)
    p["proj.fc1.b"] = np.zeros(cfg.fused_dim)
    p["proj.fc2.w"] = rng.normal(0.0, np.sqrt(1.0 / cfg.fused_dim), (cfg.fused_dim, cfg.proj_dim))
    p["proj.fc2.b"] = np.zeros(cfg.proj_dim)
    return p


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def backbone_forward(x: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """``(B, H, W, 3)`` frames -> ``(B, H/S, W/S, C)`` tokens."""
    if x.shape[-3:] != (cfg.height, cfg.width, 3):
        raise ValueError(f"frame shape {x.shape[-3:]} != {(cfg.height, cfg.width, 3)}")
    n_conv = len(cfg.backbone_widths) + 1
    for i in range(n_conv):
        stride = 1 if i == 0 else 2
        x = T.add(T.conv2d(x, p[f"backbone.conv{i}.w"], stride=stride, padding=1), p[f"backbone.conv{i}.b"])
        x = T.group_norm(x, cfg.groups, p[f"backbone.gn{i}.gain"], p[f"backbone.gn{i}.bias"])
        x = T.relu(x)
    return x


def feature_merging(f: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Concatenate each 2x2 token neighbourhood (row-major order) and project 4C -> 2C."""
    B, h, wd, C = f.shape
    if h % 2 or wd % 2:
        raise ValueError(f"feature merging needs even sides, got {h}x{wd}")
    y = T.reshape(f, (B, h // 2, 2, wd // 2, 2, C))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    y = T.reshape(y, (B, h // 2, wd // 2, 4 * C))
    return T.linear(y, w, b)


def aspp_fuse(low: Tensor, high: Tensor, p: Mapping[str, Tensor], rates) -> Tensor:
    """Dilated-conv pyramid + global pooling on ``high`` (stride 2S), fused with ``low`` (stride S)."""
    B, h2, w2, _ = high.shape
    if low.shape[1] != 2 * h2 or low.shape[2] != 2 * w2:
        raise ValueError(f"low map {low.shape} is not twice the size of high map {high.shape}")
    branches = []
    for r in rates:
        y = T.conv2d(high, p[f"aspp.rate{r}.w"], padding=r, dilation=r, pad_mode="edge")
        branches.append(T.relu(T.add(y, p[f"aspp.rate{r}.b"])))
    pooled = T.mean(high, axis=(1, 2), keepdims=True)
    pooled = T.relu(T.linear(pooled, p["aspp.pool.w"], p["aspp.pool.b"]))
    branches.append(T.broadcast_to(pooled, (B, h2, w2, pooled.shape[-1])))
    y = T.relu(T.linear(T.concat(branches, axis=-1), p["aspp.proj.w"], p["aspp.proj.b"]))
    y = T.bilinear_upsample(y, 2)
    y = T.concat([y, low], axis=-1)
    return T.relu(T.linear(y, p["fuse.w"], p["fuse.b"]))


def seg_head(z: Tensor, p: Mapping[str, Tensor], stride: int) -> Tensor:
    """Upsample to frame size, 3x3 conv, ReLU, 1x1 conv -> per-pixel class logits."""
    y = T.bilinear_upsample(z, stride)
    y = T.relu(T.add(T.conv2d(y, p["seg.conv1.w"], padding=1), p["seg.conv1.b"]))
    return T.add(T.conv2d(y, p["seg.conv2.w"]), p["seg.conv2.b"])


def proj_head(z: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Two 1x1 convs to the projection dim, then unit-normalize every pixel."""
    y = T.relu(T.linear(z, p["proj.fc1.w"], p["proj.fc1.b"]))
    y = T.linear(y, p["proj.fc2.w"], p["proj.fc2.b"])
    return T.l2_normalize(y, 1e-12)


def encode(clips, p: Mapping[str, Tensor], cfg: ModelConfig, use_shift: bool = True) -> Tensor:
    """Fused stride-S features ``(B, h, w, D_Tr)`` of the last (current) frame of each clip.

    ``clips`` is ``(B, N, H, W, 3)``.
    """
    clips = T.as_tensor(clips)
    B, N = clips.shape[:2]
    if N != cfg.clip_length:
        raise ValueError(f"clip length {N} != configured {cfg.clip_length}")
    f = backbone_forward(T.reshape(clips, (B * N,) + clips.shape[2:]), p, cfg)
    f = T.reshape(f, (B, N) + f.shape[1:])
    schedule = stswin.time_shift_schedule(N)
    frames = [f[:, i] for i in range(N)]
    s1 = (_sub(p, "stage1"), cfg.block_config(1))
    frames = stswin.clip_forward(frames, schedule, [s1] * len(schedule), use_shift)
    low = frames[-1]
    frames = [feature_merging(x, p["merge.w"], p["merge.b"]) for x in frames]
    s2 = (_sub(p, "stage2"), cfg.block_config(2))
    frames = stswin.clip_forward(frames, schedule, [s2] * len(schedule), use_shift)
    return aspp_fuse(low, frames[-1], p, cfg.aspp_rates)


def segment(clips, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Class logits ``(B, H, W, K)`` for the current frame of each clip."""
    return seg_head(encode(clips, p, cfg), p, cfg.stride)


def embed(clips, p: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Unit-norm embeddings ``(B, h, w, D_cl)`` for the current frame of each clip."""
    return proj_head(encode(clips, p, cfg), p)


@dataclass
class Model:
    """A config plus trainable parameter tensors."""

    cfg: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "Model":
        return cls.from_arrays(cfg, init_params(cfg, seed))

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: Mapping[str, np.ndarray]) -> "Model":
        return cls(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    def segment(self, clips) -> Tensor:
        return segment(clips, self.params, self.cfg)

    def embed(self, clips) -> Tensor:
        return embed(clips, self.params, self.cfg)
