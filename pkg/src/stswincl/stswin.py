"""Joint space-time shifted-window attention.

Feature maps inside a block are ``(B, T, h, w, C)`` tensors with ``T`` in
{1, 2}: the two timesteps share one spatial window partition, so a window
holds ``T * M * M`` tokens ordered (t, row, col).

Schedule indices count frames backwards from the current one: index 0 is the
current frame, index 1 its predecessor, and so on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class BlockConfig:
    window_size: int = 4
    num_heads: int = 2
    channels: int = 32
    mlp_ratio: float = 2.0
    use_relative_position_bias: bool = True

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.channels % self.num_heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.num_heads}")

    @property
    def shift(self) -> int:
        return self.window_size // 2

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.channels * self.mlp_ratio)))


@dataclass
class WindowSet:
    """Windows of one partition. ``windows`` is ``(B, nW, T*M*M, C)``; ``origins[k]``
    is the (window-row, window-col) of window ``k``."""

    windows: Tensor
    origins: np.ndarray
    timesteps: int
    window_size: int
    shifted: bool = False

    def __len__(self) -> int:
        return self.windows.shape[1]


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def window_partition(x: Tensor, M: int, shifted: bool = False) -> WindowSet:
    """Split ``(B, T, h, w, C)`` (or ``(B, h, w, C)`` for T=1) into M x M windows."""
    if x.ndim == 4:
        x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
    B, Tn, h, w, C = x.shape
    if Tn > 2:
        raise ValueError("a window spans at most 2 timesteps")
    if h % M or w % M:
        raise ValueError(f"map {h}x{w} is not a multiple of window {M}; pad first")
    nh, nw = h // M, w // M
    y = T.reshape(x, (B, Tn, nh, M, nw, M, C))
    y = T.transpose(y, (0, 2, 4, 1, 3, 5, 6))
    y = T.reshape(y, (B, nh * nw, Tn * M * M, C))
    origins = np.stack(np.divmod(np.arange(nh * nw), nw), axis=1)
    return WindowSet(y, origins, Tn, M, shifted)


def window_reverse(ws: WindowSet, h: int, w: int) -> Tensor:
    """Inverse of ``window_partition``; window order in ``ws`` is irrelevant."""
    M, Tn = ws.window_size, ws.timesteps
    nh, nw = h // M, w // M
    if h % M or w % M:
        raise ValueError("h, w must be multiples of the window size")
    flat = ws.origins[:, 0] * nw + ws.origins[:, 1]
    if len(flat) != nh * nw or not np.array_equal(np.sort(flat), np.arange(nh * nw)):
        raise ValueError("window set does not cover the map exactly once")
    y = ws.windows
    order = np.argsort(flat)
    if not np.array_equal(order, np.arange(len(order))):
        y = T.take(y, order, axis=1)
    B, _, _, C = y.shape
    y = T.reshape(y, (B, nh, nw, Tn, M, M, C))
    y = T.transpose(y, (0, 3, 1, 4, 2, 5, 6))
    return T.reshape(y, (B, Tn, h, w, C))


def _piece_index(n: int, M: int, shift: int) -> np.ndarray:
    """Index of the shifted sub-window each coordinate falls in (boundaries at shift + k*M)."""
    return (np.arange(n) + M - shift) // M


def region_labels(h: int, w: int, M: int, shift: int) -> np.ndarray:
    """Per-token region id in the rolled frame used by cyclic-shift attention."""
    rows, cols = _piece_index(h, M, shift), _piece_index(w, M, shift)
    labels = rows[:, None] * (cols.max() + 1) + cols[None, :]
    return np.roll(labels, (-shift, -shift), axis=(0, 1))


def make_shift_mask(h: int, w: int, M: int, shift: int | None = None,
                    valid_hw: tuple[int, int] | None = None, timesteps: int = 1) -> np.ndarray:
    """Additive attention masks ``(nW, L, L)`` for an ``h x w`` map rolled by ``shift``.

    A pair is masked when its tokens came from different pre-roll regions, or
    when the key is padding (outside ``valid_hw``).
    """
    if h % M or w % M:
        raise ValueError("h, w must be multiples of the window size")
    shift = M // 2 if shift is None else shift
    labels = region_labels(h, w, M, shift)
    vh, vw = valid_hw if valid_hw is not None else (h, w)
    pad = np.zeros((h, w), dtype=bool)
    pad[vh:, :] = True
    pad[:, vw:] = True
    pad = np.roll(pad, (-shift, -shift), axis=(0, 1))
    nh, nw = h // M, w // M

    def windows(a):
        a = a.reshape(nh, M, nw, M).transpose(0, 2, 1, 3).reshape(nh * nw, M * M)
        return np.tile(a, (1, timesteps))

    lab, pw = windows(labels), windows(pad)
    forbid = (lab[:, :, None] != lab[:, None, :]) | pw[:, None, :]
    return np.where(forbid, MASK_VALUE, 0.0)


def relative_position_index(M: int, timesteps: int) -> np.ndarray:
    """``(L, L)`` index into a ``(2M-1)^2 * 2`` bias table keyed by (dy, dx, |dt|)."""
    t, r, c = np.meshgrid(np.arange(timesteps), np.arange(M), np.arange(M), indexing="ij")
    t, r, c = t.ravel(), r.ravel(), c.ravel()
    dr = r[:, None] - r[None, :] + M - 1
    dc = c[:, None] - c[None, :] + M - 1
    dt = np.abs(t[:, None] - t[None, :])
    return (dr * (2 * M - 1) + dc) * 2 + dt


def bias_table_size(M: int) -> int:
    return (2 * M - 1) ** 2 * 2


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_attention(cfg: BlockConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, np.ndarray]:
    C = cfg.channels
    p = {
        "qkv_w": rng.normal(0.0, std, (C, 3 * C)),
        "qkv_b": np.zeros(3 * C),
        "proj_w": rng.normal(0.0, std, (C, C)),
        "proj_b": np.zeros(C),
    }
    if cfg.use_relative_position_bias:
        p["rel_bias"] = rng.normal(0.0, std, (bias_table_size(cfg.window_size), cfg.num_heads))
    return p


def init_block(cfg: BlockConfig, rng: np.random.Generator, std: float = 0.02) -> dict[str, np.ndarray]:
    """Parameters of one regular + shifted layer pair (two attentions, two MLPs, four LNs)."""
    C, Hd = cfg.channels, cfg.hidden
    p: dict[str, np.ndarray] = {}
    for i in range(1, 5):
        p[f"ln{i}.gain"] = np.ones(C)
        p[f"ln{i}.bias"] = np.zeros(C)
    for tag in ("r", "s"):
        for k, v in init_attention(cfg, rng, std).items():
            p[f"attn_{tag}.{k}"] = v
        p[f"mlp_{tag}.fc1_w"] = rng.normal(0.0, std, (C, Hd))
        p[f"mlp_{tag}.fc1_b"] = np.zeros(Hd)
        p[f"mlp_{tag}.fc2_w"] = rng.normal(0.0, std, (Hd, C))
        p[f"mlp_{tag}.fc2_b"] = np.zeros(C)
    return p


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# attention and blocks
# ---------------------------------------------------------------------------


def windowed_mhsa(ws: WindowSet, p: Mapping[str, Tensor], cfg: BlockConfig,
                  mask: np.ndarray | None = None) -> WindowSet:
    """Multi-head scaled dot-product attention inside every window."""
    x = ws.windows
    B, nW, L, C = x.shape
    if C != cfg.channels:
        raise ValueError(f"window channels {C} != config channels {cfg.channels}")
    heads = cfg.num_heads
    d = C // heads
    qkv = T.linear(x, p["qkv_w"], p["qkv_b"])
    qkv = T.transpose(T.reshape(qkv, (B * nW, L, 3, heads, d)), (2, 0, 3, 1, 4))
    q = T.mul(qkv[0], 1.0 / np.sqrt(d))
    k, v = qkv[1], qkv[2]
    attn = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    if cfg.use_relative_position_bias and "rel_bias" in p:
        idx = relative_position_index(ws.window_size, ws.timesteps)
        bias = T.take(p["rel_bias"], idx.reshape(-1), axis=0)
        bias = T.transpose(T.reshape(bias, (L, L, heads)), (2, 0, 1))
        attn = T.add(attn, bias)
    if mask is not None:
        attn = T.reshape(attn, (B, nW, heads, L, L))
        attn = T.add(attn, Tensor(mask[None, :, None]))
        attn = T.reshape(attn, (B * nW, heads, L, L))
    attn = T.softmax_lastdim(attn)
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, nW, L, C))
    out = T.linear(out, p["proj_w"], p["proj_b"])
    return WindowSet(out, ws.origins, ws.timesteps, ws.window_size, ws.shifted)


def attention_layer(x: Tensor, p: Mapping[str, Tensor], cfg: BlockConfig, shifted: bool) -> Tensor:
    """Window attention on ``(B, T, h, w, C)``: pad, (roll), partition, attend, reverse, (unroll), crop."""
    B, Tn, h, w, C = x.shape
    M = cfg.window_size
    hp, wp = _ceil_to(h, M), _ceil_to(w, M)
    y = T.pad2d(x, (0, hp - h), (0, wp - w))
    s = cfg.shift if shifted else 0
    if s:
        y = T.roll2d(y, -s, -s)
    mask = None
    if s or hp != h or wp != w:
        mask = make_shift_mask(hp, wp, M, s, (h, w), Tn)
    ws = windowed_mhsa(window_partition(y, M, shifted), p, cfg, mask)
    y = window_reverse(ws, hp, wp)
    if s:
        y = T.roll2d(y, s, s)
    return T.crop2d(y, h, w)


def mlp(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    hdn = T.gelu(T.linear(x, p["fc1_w"], p["fc1_b"]))
    return T.linear(hdn, p["fc2_w"], p["fc2_b"])


def block_forward(x: Tensor, p: Mapping[str, Tensor], cfg: BlockConfig, use_shift: bool = True) -> Tensor:
    """Regular-window layer then shifted-window layer, each attention + MLP with pre-LN residuals."""
    ln = lambda z, i: T.layer_norm(z, p[f"ln{i}.gain"], p[f"ln{i}.bias"])
    x = T.add(x, attention_layer(ln(x, 1), _sub(p, "attn_r"), cfg, shifted=False))
    x = T.add(x, mlp(ln(x, 2), _sub(p, "mlp_r")))
    if use_shift:
        x = T.add(x, attention_layer(ln(x, 3), _sub(p, "attn_s"), cfg, shifted=True))
    x = T.add(x, mlp(ln(x, 4), _sub(p, "mlp_s")))
    return x


def stswin_block(f_t: Tensor, f_prev: Tensor | None, p: Mapping[str, Tensor], cfg: BlockConfig,
                 use_shift: bool = True) -> tuple[Tensor, Tensor | None]:
    """One block on a frame and (optionally) its predecessor, both ``(B, h, w, C)``."""
    if f_prev is None:
        y = block_forward(T.reshape(f_t, (f_t.shape[0], 1) + f_t.shape[1:]), p, cfg, use_shift)
        return y[:, 0], None
    if f_prev.shape != f_t.shape:
        raise ValueError(f"frame shapes differ: {f_t.shape} vs {f_prev.shape}")
    y = block_forward(T.stack([f_prev, f_t], axis=1), p, cfg, use_shift)
    return y[:, 1], y[:, 0]


# ---------------------------------------------------------------------------
# time shift
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeConfiguration:
    pairs: tuple[tuple[int, int], ...]
    singletons: tuple[int, ...]
    kind: str


@dataclass
class TimeShiftSchedule:
    num_frames: int
    configurations: list[TimeConfiguration] = field(default_factory=list)

    @property
    def num_shifts(self) -> int:
        return len(self.configurations) - 1

    def __len__(self) -> int:
        return len(self.configurations)

    def truncated(self, k: int) -> "TimeShiftSchedule":
        return TimeShiftSchedule(self.num_frames, self.configurations[:k])


def _pairing(N: int, offset: int, kind: str) -> TimeConfiguration:
    pairs = tuple((a, a + 1) for a in range(offset, N - 1, 2))
    used = {i for pr in pairs for i in pr}
    return TimeConfiguration(pairs, tuple(i for i in range(N) if i not in used), kind)


def time_shift_schedule(N: int) -> TimeShiftSchedule:
    """Alternate pairing A {(0,1),(2,3),..} and B {(1,2),(3,4),..}, starting and ending with A.

    Even N needs N-1 configurations; odd N needs N (a path of odd length cannot
    be fully mixed by N-1 rounds of adjacent pairings).
    """
    if N <= 0:
        raise ValueError("clip length must be positive")
    if N == 1:
        return TimeShiftSchedule(1, [TimeConfiguration((), (0,), "A")])
    count = N - 1 if N % 2 == 0 else N
    confs = [_pairing(N, 0, "A") if i % 2 == 0 else _pairing(N, 1, "B") for i in range(count)]
    return TimeShiftSchedule(N, confs)


def predicted_reachability(schedule: TimeShiftSchedule) -> np.ndarray:
    """Boolean ``R[i, j]``: output frame i depends on input frame j (schedule indices)."""
    R = np.eye(schedule.num_frames, dtype=bool)
    for conf in schedule.configurations:
        R2 = R.copy()
        for a, b in conf.pairs:
            R2[a] = R2[b] = R[a] | R[b]
        R = R2
    return R


def clip_forward(features: Sequence[Tensor], schedule: TimeShiftSchedule,
                 blocks: Sequence[tuple[Mapping[str, Tensor], BlockConfig]],
                 use_shift: bool = True) -> list[Tensor]:
    """Run the time-shift schedule over a chronological list of ``(B, h, w, C)`` maps.

    ``blocks[k]`` (params, config) serves configuration ``k``.
    """
    N = len(features)
    if N != schedule.num_frames:
        raise ValueError(f"{N} frames but schedule is for {schedule.num_frames}")
    if len(blocks) != len(schedule):
        raise ValueError(f"{len(blocks)} blocks for {len(schedule)} configurations")
    frames = list(features)
    B = frames[0].shape[0]
    pos = lambda k: N - 1 - k
    for conf, (p, cfg) in zip(schedule.configurations, blocks):
        new = list(frames)
        if conf.pairs:
            x = T.concat([T.stack([frames[pos(b)], frames[pos(a)]], axis=1) for a, b in conf.pairs], axis=0)
            y = block_forward(x, p, cfg, use_shift)
            for i, (a, b) in enumerate(conf.pairs):
                new[pos(b)] = y[i * B:(i + 1) * B, 0]
                new[pos(a)] = y[i * B:(i + 1) * B, 1]
        if conf.singletons:
            x = T.concat([frames[pos(s)] for s in conf.singletons], axis=0)
            x = T.reshape(x, (x.shape[0], 1) + x.shape[1:])
            y = block_forward(x, p, cfg, use_shift)
            for i, s in enumerate(conf.singletons):
                new[pos(s)] = y[i * B:(i + 1) * B, 0]
        frames = new
    return frames
