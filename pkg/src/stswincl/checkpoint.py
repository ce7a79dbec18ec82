"""Checkpoints: a directory of TNSR tensors plus a JSON manifest.

Layout::

    manifest.json
    params/<name>.tnsr      online parameters
    momentum/<name>.tnsr    EMA shadow parameters (contrastive stage only)
    optimizer/<name>.tnsr   momentum buffers of the online parameters
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import load_tensor, save_tensor

STAGE_TAGS = ("init", "stage1", "stage2", "stage3")


class CheckpointError(Exception):
    """A checkpoint is missing, malformed, or of the wrong stage."""


@dataclass
class Checkpoint:
    stage: str
    model_config: dict
    params: dict[str, np.ndarray]
    shadow: dict[str, np.ndarray] | None = None
    optimizer: dict[str, np.ndarray] | None = None
    plan: dict | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGE_TAGS:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")


def _write_group(root: Path, sub: str, arrays: dict[str, np.ndarray] | None) -> list[dict]:
    if arrays is None:
        return []
    (root / sub).mkdir(parents=True, exist_ok=True)
    out = []
    for name in sorted(arrays):
        rel = f"{sub}/{name}.tnsr"
        save_tensor(root / rel, arrays[name])
        out.append({"name": name, "shape": list(np.shape(arrays[name])), "file": rel})
    return out


def save_checkpoint(ckpt: Checkpoint, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "stswincl-checkpoint/1",
        "stage": ckpt.stage,
        "model_config": ckpt.model_config,
        "plan": ckpt.plan,
        "extra": ckpt.extra,
        "params": _write_group(root, "params", ckpt.params),
        "momentum": _write_group(root, "momentum", ckpt.shadow),
        "optimizer": _write_group(root, "optimizer", ckpt.optimizer),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def _read_group(root: Path, entries: list[dict]) -> dict[str, np.ndarray] | None:
    if not entries:
        return None
    out = {}
    for e in entries:
        path = root / e["file"]
        try:
            arr = load_tensor(path)
        except FileNotFoundError as exc:
            raise CheckpointError(f"{path}: missing tensor file") from exc
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
        if list(arr.shape) != list(e["shape"]):
            raise CheckpointError(f"{path}: shape {arr.shape} != manifest {e['shape']}")
        out[e["name"]] = arr
    return out


def load_checkpoint(root, expect_stage: str | None = None) -> Checkpoint:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"{mpath}: checkpoint manifest not found")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath}: malformed JSON ({exc})") from exc
    if expect_stage is not None and m.get("stage") != expect_stage:
        raise CheckpointError(f"{root}: expected a {expect_stage} checkpoint, found {m.get('stage')!r}")
    return Checkpoint(
        stage=m["stage"],
        model_config=m["model_config"],
        params=_read_group(root, m["params"]) or {},
        shadow=_read_group(root, m.get("momentum", [])),
        optimizer=_read_group(root, m.get("optimizer", [])),
        plan=m.get("plan"),
        extra=m.get("extra", {}),
    )
