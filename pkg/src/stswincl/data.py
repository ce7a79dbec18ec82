"""Synthetic surgical-like videos and the on-disk dataset format.

Layout under a dataset root::

    manifest.json
    video00/frame_0000.ppm   # P6, 8-bit RGB
    video00/label_0000.pgm   # P5, class index per pixel, 255 = ignore
    video00/shapes.json      # per-frame shape parameters (re-render oracle)

All paths in the manifest are relative to the manifest.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

logger = logging.getLogger(__name__)

IGNORE = 255
SHAPE_KINDS = ("ellipse", "bar", "disc", "ring")


class DatasetError(Exception):
    """A dataset file is missing or malformed."""


@dataclass
class VideoClip:
    frames: np.ndarray      # (N, H, W, 3) float64 in [0, 1]
    labels: np.ndarray      # (N, H, W) uint8
    video_id: str
    timesteps: tuple[int, ...]

    def __post_init__(self):
        if len(self.frames) != len(self.labels) or len(self.frames) != len(self.timesteps):
            raise ValueError("frames, labels and timesteps must have equal length")

    @property
    def start(self) -> int:
        return self.timesteps[0]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SynthConfig:
    num_videos: int = 8
    frames_per_video: int = 60
    height: int = 64
    width: int = 48
    num_classes: int = 5
    # target pixel share per foreground class; background takes the rest
    class_shares: tuple[float, ...] = (0.20, 0.12, 0.07, 0.025)
    palette_jitter: float = 0.12
    texture_amplitude: float = 0.25
    noise_std: float = 0.04
    smoke_prob: float = 0.35
    smoke_strength: float = 0.75
    speed_range: tuple[float, float] = (0.4, 1.5)
    splits: dict = field(default_factory=lambda: {"train": 5, "val": 1, "test": 2})
    seed: int = 0

    def __post_init__(self):
        self.class_shares = tuple(self.class_shares)
        self.speed_range = tuple(self.speed_range)
        if len(self.class_shares) != self.num_classes - 1:
            raise ValueError("need one share per foreground class")
        if min(self.class_shares) >= 0.05:
            raise ValueError("at least one rare class (share < 5%) is required")
        if sum(self.class_shares) >= 0.8:
            raise ValueError("background must stay the majority class")
        if sum(self.splits.values()) != self.num_videos:
            raise ValueError("split sizes must add up to num_videos")


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray, np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc})") from exc
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        fields.append(raw[start:pos])
    if fields[0] != magic:
        raise DatasetError(f"{path}: expected magic {magic.decode()}, found {fields[0][:8]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit maxval 255 is supported")
    pos += 1
    body = raw[pos:]
    if len(body) != w * h * channels:
        raise DatasetError(f"{path}: payload has {len(body)} bytes, expected {w * h * channels}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def shape_mask(shape: dict, H: int, W: int) -> np.ndarray:
    """Pixel-centre inclusion test for one shape record."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - shape["cy"], xx - shape["cx"]
    a = shape["angle"]
    u = dx * np.cos(a) + dy * np.sin(a)
    v = -dx * np.sin(a) + dy * np.cos(a)
    kind = shape["kind"]
    if kind in ("ellipse", "disc"):
        return (u / shape["rx"]) ** 2 + (v / shape["ry"]) ** 2 <= 1.0
    if kind == "bar":
        return (np.abs(u) <= shape["rx"]) & (np.abs(v) <= shape["ry"])
    if kind == "ring":
        r2 = (u / shape["rx"]) ** 2 + (v / shape["ry"]) ** 2
        return (r2 <= 1.0) & (r2 >= 0.3)
    raise ValueError(f"unknown shape kind {kind!r}")


def render_labels(shapes: list[dict], H: int, W: int) -> np.ndarray:
    """Labels from shape records; later shapes occlude earlier ones."""
    lab = np.zeros((H, W), dtype=np.uint8)
    for s in shapes:
        lab[shape_mask(s, H, W)] = s["cls"]
    return lab


def _texture(kind: int, H: int, W: int, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    if kind == 0:
        t = np.sin(0.35 * xx + 0.15 * yy + phase) * np.cos(0.2 * yy - phase)
    elif kind == 1:
        t = np.sin(1.3 * (xx + yy) + phase)
    elif kind == 2:
        t = np.sign(np.sin(0.9 * xx + phase) * np.sin(0.9 * yy))
    elif kind == 3:
        t = np.sin(1.6 * yy + phase)
    else:
        t = np.cos(2.2 * xx + phase) * np.cos(2.2 * yy)
    return t


_BASE_COLORS = np.array([
    [0.55, 0.25, 0.22],   # background tissue
    [0.70, 0.40, 0.35],   # organ, close to background hue
    [0.55, 0.58, 0.65],   # instrument shaft
    [0.45, 0.20, 0.30],   # second tissue, close to the background
    [0.80, 0.72, 0.35],   # rare thread-like object
])


def _video_params(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    K = cfg.num_classes
    base = np.array([_BASE_COLORS[k % len(_BASE_COLORS)] for k in range(K)])
    palette = np.clip(base + rng.uniform(-cfg.palette_jitter, cfg.palette_jitter, size=(K, 3)), 0.05, 0.95)
    H, W = cfg.height, cfg.width
    objects = []
    for c in range(1, K):
        kind = SHAPE_KINDS[(c - 1) % len(SHAPE_KINDS)]
        # shapes drawn later cover earlier ones; inflate by the expected visible fraction
        visible = 1.0 - sum(cfg.class_shares[c:])
        area = cfg.class_shares[c - 1] / visible * H * W
        if kind == "bar":
            ry = max(1.0, np.sqrt(area / 4.0) / 3.0)
            rx = area / (4.0 * ry)
        elif kind == "ring":
            r = np.sqrt(area / (np.pi * 0.7))
            rx = ry = r
        elif kind == "ellipse":
            rx = np.sqrt(area / np.pi) * 1.25
            ry = area / (np.pi * rx)
        else:
            rx = ry = np.sqrt(area / np.pi)
        speed = rng.uniform(*cfg.speed_range)
        heading = rng.uniform(0, 2 * np.pi)
        objects.append({
            "cls": c, "kind": kind, "rx": float(rx), "ry": float(ry),
            "cy": float(rng.uniform(0.25, 0.75) * H), "cx": float(rng.uniform(0.25, 0.75) * W),
            "vy": float(speed * np.sin(heading)), "vx": float(speed * np.cos(heading)),
            "angle": float(rng.uniform(0, np.pi)), "spin": float(rng.uniform(-0.04, 0.04)),
        })
    return {"palette": palette, "objects": objects, "phase": rng.uniform(0, 2 * np.pi, size=K)}


def _step(obj: dict, H: int, W: int) -> None:
    m = max(obj["rx"], obj["ry"]) * 0.5
    for pos, vel, lim in (("cy", "vy", H), ("cx", "vx", W)):
        obj[pos] += obj[vel]
        if obj[pos] < m or obj[pos] > lim - 1 - m:
            obj[vel] = -obj[vel]
            obj[pos] = float(np.clip(obj[pos], m, lim - 1 - m))
    obj["angle"] = float(obj["angle"] + obj["spin"])


def _render_frame(cfg: SynthConfig, vp: dict, shapes: list[dict], rng: np.random.Generator, t: int) -> np.ndarray:
    H, W = cfg.height, cfg.width
    labels = render_labels(shapes, H, W)
    img = np.zeros((H, W, 3))
    for c in range(cfg.num_classes):
        tex = _texture(c, H, W, vp["phase"][c] + 0.1 * t)
        col = vp["palette"][c][None, None, :] * (1.0 + cfg.texture_amplitude * tex[..., None])
        img = np.where((labels == c)[..., None], col, img)
    if rng.random() < cfg.smoke_prob:
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(0.3, 0.7) * max(H, W)
        haze = cfg.smoke_strength * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img = img * (1 - haze[..., None]) + 0.8 * haze[..., None]
    img = img + rng.normal(0.0, cfg.noise_std, img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synthesize_video(cfg: SynthConfig, rng: np.random.Generator):
    """Frames (uint8), labels and per-frame shape records of one video."""
    vp = _video_params(cfg, rng)
    frames, labels, records = [], [], []
    for t in range(cfg.frames_per_video):
        shapes = [{k: o[k] for k in ("cls", "kind", "cy", "cx", "rx", "ry", "angle")} for o in vp["objects"]]
        frames.append(_render_frame(cfg, vp, shapes, rng, t))
        labels.append(render_labels(shapes, cfg.height, cfg.width))
        records.append(shapes)
        for o in vp["objects"]:
            _step(o, cfg.height, cfg.width)
    return frames, labels, records


def generate_synthetic(cfg: SynthConfig, root) -> Path:
    """Write a full synthetic dataset under ``root``; deterministic in ``cfg.seed``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    videos = []
    for v in range(cfg.num_videos):
        vid = f"video{v:02d}"
        (root / vid).mkdir(exist_ok=True)
        frames, labels, records = synthesize_video(cfg, rng)
        fpaths, lpaths = [], []
        for t, (f, l) in enumerate(zip(frames, labels)):
            fp, lp = f"{vid}/frame_{t:04d}.ppm", f"{vid}/label_{t:04d}.pgm"
            write_ppm(root / fp, f)
            write_pgm(root / lp, l)
            fpaths.append(fp)
            lpaths.append(lp)
        (root / vid / "shapes.json").write_text(json.dumps(records))
        videos.append({"id": vid, "frames": fpaths, "labels": lpaths, "shapes": f"{vid}/shapes.json"})
    ids = [v["id"] for v in videos]
    n_tr, n_va = cfg.splits["train"], cfg.splits["val"]
    manifest = {
        "format": 1,
        "height": cfg.height,
        "width": cfg.width,
        "num_classes": cfg.num_classes,
        "ignore_index": IGNORE,
        "background": 0,
        "videos": videos,
        "splits": {"train": ids[:n_tr], "val": ids[n_tr:n_tr + n_va], "test": ids[n_tr + n_va:]},
        "config": asdict(cfg),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    logger.info("wrote %d videos to %s", cfg.num_videos, root)
    return root


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


class Dataset:
    """Lazily loaded dataset described by a manifest."""

    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self.height = int(manifest["height"])
        self.width = int(manifest["width"])
        self.num_classes = int(manifest["num_classes"])
        self.ignore_index = int(manifest.get("ignore_index", IGNORE))
        self.background = int(manifest.get("background", 0))
        self.videos = {v["id"]: v for v in manifest["videos"]}
        self.splits = {k: list(v) for k, v in manifest.get("splits", {}).items()}
        for split, ids in self.splits.items():
            for vid in ids:
                if vid not in self.videos:
                    raise DatasetError(f"{self.root / 'manifest.json'}: split {split} names unknown video {vid}")
        self._frame = lru_cache(maxsize=4096)(self._load_frame)

    def split(self, name: str) -> list[str]:
        return list(self.splits.get(name, []))

    def iter_split(self, name: str) -> Iterator[str]:
        return iter(self.split(name))

    def num_frames(self, vid: str) -> int:
        return len(self.videos[vid]["frames"])

    def _load_frame(self, vid: str, t: int) -> tuple[np.ndarray, np.ndarray]:
        rec = self.videos[vid]
        fpath, lpath = self.root / rec["frames"][t], self.root / rec["labels"][t]
        img, lab = read_ppm(fpath), read_pgm(lpath)
        if img.shape != (self.height, self.width, 3):
            raise DatasetError(f"{fpath}: shape {img.shape} != {(self.height, self.width, 3)}")
        if lab.shape != (self.height, self.width):
            raise DatasetError(f"{lpath}: shape {lab.shape} != {(self.height, self.width)}")
        bad = (lab >= self.num_classes) & (lab != self.ignore_index)
        if bad.any():
            raise DatasetError(f"{lpath}: label value {int(lab[bad][0])} out of range")
        img.setflags(write=False)
        lab.setflags(write=False)
        return img, lab

    def raw_frame(self, vid: str, t: int) -> tuple[np.ndarray, np.ndarray]:
        """uint8 image and label map of frame ``t``."""
        return self._frame(vid, t)

    def frame(self, vid: str, t: int) -> tuple[np.ndarray, np.ndarray]:
        img, lab = self._frame(vid, t)
        return img.astype(np.float64) / 255.0, lab.copy()

    def clip(self, vid: str, t_end: int, N: int) -> VideoClip:
        """N frames ending at ``t_end``; missing leading frames repeat frame 0."""
        steps = tuple(max(0, t) for t in range(t_end - N + 1, t_end + 1))
        pairs = [self.frame(vid, t) for t in steps]
        return VideoClip(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]), vid, steps)

    def shapes(self, vid: str) -> list[list[dict]]:
        rel = self.videos[vid].get("shapes")
        if rel is None:
            raise DatasetError(f"video {vid} has no shape records")
        return json.loads((self.root / rel).read_text())

    def save(self, root) -> Path:
        """Re-write every file of this dataset under ``root``."""
        root = Path(root)
        for vid, rec in self.videos.items():
            (root / vid).mkdir(parents=True, exist_ok=True)
            for t in range(self.num_frames(vid)):
                img, lab = self.raw_frame(vid, t)
                write_ppm(root / rec["frames"][t], img)
                write_pgm(root / rec["labels"][t], lab)
            if rec.get("shapes"):
                (root / rec["shapes"]).write_bytes((self.root / rec["shapes"]).read_bytes())
        (root / "manifest.json").write_text(json.dumps(self.manifest, indent=1))
        return root


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise DatasetError(f"{mpath}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: malformed JSON ({exc})") from exc
    for key in ("height", "width", "num_classes", "videos"):
        if key not in manifest:
            raise DatasetError(f"{mpath}: missing key {key!r}")
    return Dataset(root, manifest)


def clip_sampler(dataset: Dataset, N: int, batch_size: int, rng: np.random.Generator,
                 split: str = "train") -> Iterator[list[VideoClip]]:
    """Endless batches of clips, each batch drawn from distinct videos."""
    vids = dataset.split(split)
    if batch_size > len(vids):
        raise ValueError(f"batch of {batch_size} needs that many {split} videos, have {len(vids)}")
    while True:
        chosen = rng.choice(len(vids), size=batch_size, replace=False)
        batch = []
        for i in chosen:
            vid = vids[i]
            n = dataset.num_frames(vid)
            t = int(rng.integers(min(N - 1, n - 1), n))
            batch.append(dataset.clip(vid, t, N))
        yield batch
