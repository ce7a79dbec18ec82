"""Oracle checks behind the ``verify`` subcommand and the acceptance suite.

Each ``check_*`` function returns a :class:`Check` instead of raising, so a
caller can print one line per property and keep going.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import contrast, metrics, oracles, segnet, stswin, train
from . import tensor as T
from .contrast import PairBatch
from .tensor import Tensor, grad_check

GRAD_TOL = 1e-5
GRAD_EPS = 1e-5


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _timed(fn: Callable[[], Check]) -> Check:
    t0 = time.time()
    c = fn()
    c.seconds = time.time() - t0
    return c


def _weighted(out: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(T.mul(out, w))


# ---------------------------------------------------------------------------
# gradients


def op_cases() -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One scalar-valued probe per differentiable operation, keyed by op name."""
    r = np.random.default_rng(0)
    x = r.normal(size=(2, 5, 4, 3))
    other = r.normal(size=(2, 5, 4, 3))
    pos = r.uniform(0.5, 2.0, size=(3, 4))
    k3 = r.normal(size=(3, 3, 3, 2))
    W = lambda out, s=1: _weighted(out, s)
    gain, bias = r.normal(size=3), r.normal(size=3)
    cases = {
        "add": (lambda t: W(T.add(t, other[0, 0])), x),
        "sub": (lambda t: W(T.sub(other, t)), x),
        "mul": (lambda t: W(T.mul(t, T.add(t, 1.0))), x),
        "div": (lambda t: W(T.div(other[0, :3, :, 0], t)), pos),
        "exp": (lambda t: W(T.exp(t)), x),
        "log": (lambda t: W(T.log(t)), pos),
        "sqrt": (lambda t: W(T.sqrt(t)), pos),
        "square": (lambda t: W(T.square(t)), x),
        "relu": (lambda t: W(T.relu(t)), x),
        "gelu": (lambda t: W(T.gelu(t)), x),
        "softplus": (lambda t: W(T.softplus(t)), x),
        "tsum": (lambda t: W(T.tsum(t, axis=(1, 3), keepdims=True)), x),
        "mean": (lambda t: W(T.mean(t, axis=2)), x),
        "reshape": (lambda t: W(T.reshape(t, (10, 12))), x),
        "transpose": (lambda t: W(T.transpose(t, (3, 1, 0, 2))), x),
        "broadcast_to": (lambda t: W(T.broadcast_to(t, (2, 3, 4))), pos),
        "getitem": (lambda t: W(t[:, 1:4, ::2]), x),
        "take": (lambda t: W(T.take(t, np.array([3, 0, 3, 1]), axis=1)), x),
        "concat": (lambda t: W(T.concat([t, T.mul(t, 2.0)], axis=2)), x),
        "stack": (lambda t: W(T.stack([t, T.square(t)], axis=1)), x),
        "pad2d_zeros": (lambda t: W(T.pad2d(t, (1, 2), (0, 1))), x),
        "pad2d_edge": (lambda t: W(T.pad2d(t, (2, 1), (1, 2), mode="edge")), x),
        "crop2d": (lambda t: W(T.crop2d(t, 3, 2)), x),
        "roll2d": (lambda t: W(T.roll2d(t, 2, -1)), x),
        "bilinear_upsample": (lambda t: W(T.bilinear_upsample(t, 2)), x),
        "matmul": (lambda t: W(T.matmul(t, pos[:, :2])), x),
        "linear": (lambda t: W(T.linear(Tensor(x), t, Tensor(bias[:2]))), r.normal(size=(3, 2))),
        "conv2d": (lambda t: W(T.conv2d(t, Tensor(k3), padding=1)), x),
        "conv2d_stride_dilation": (lambda t: W(T.conv2d(t, Tensor(k3), stride=2, padding=2, dilation=2)), x),
        "conv2d_edge_kernel": (lambda t: W(T.conv2d(Tensor(x), t, padding=1, pad_mode="edge")), k3),
        "layer_norm": (lambda t: W(T.layer_norm(t, Tensor(gain), Tensor(bias))), x),
        "group_norm": (lambda t: W(T.group_norm(T.concat([t, t], axis=-1), 2, Tensor(np.ones(6)),
                                                Tensor(np.zeros(6)))), x),
        "softmax_lastdim": (lambda t: W(T.softmax_lastdim(t)), x),
        "log_softmax_lastdim": (lambda t: W(T.log_softmax_lastdim(t)), x),
        "l2_normalize": (lambda t: W(T.l2_normalize(t)), x),
    }
    bc = stswin.BlockConfig(window_size=2, num_heads=2, channels=4)
    ap = {k: Tensor(v) for k, v in stswin.init_attention(bc, np.random.default_rng(1), 0.3).items()}
    bp = {k: Tensor(v) for k, v in stswin.init_block(bc, np.random.default_rng(2), 0.3).items()}
    xa = r.normal(size=(1, 2, 6, 6, 4))
    cases["shifted_window_attention"] = (lambda t: W(stswin.attention_layer(t, ap, bc, True)), xa)
    cases["stswin_block"] = (lambda t: W(stswin.stswin_block(t[:, 0], t[:, 1], bp, bc)[0]), xa)
    y = r.integers(0, 3, (4, 5))
    cases["ce_ohem"] = (lambda t: train.ce_ohem_loss(t, y, 0.6).loss, r.normal(size=(4, 5, 3)))
    eq, yq, keys, kl = _contrast_instance(5, 1, 3)
    cases["pixel_contrast"] = (lambda t: contrast.pixel_contrast_loss(PairBatch(t, yq, keys, kl)).loss, eq)
    return cases


SMALL_MODEL = dict(height=16, width=16, channels=8, num_heads=2, fused_dim=16, proj_dim=8, num_classes=4,
                   aspp_dim=8, backbone_widths=(4, 8), head_dim=8, groups=2, window_size=2, clip_length=2)


def _network_cases(probes: int = 2):
    """Full-network CE and contrast losses, probed at a few coordinates of every parameter."""
    cfg = segnet.ModelConfig(**SMALL_MODEL)
    arrays = segnet.init_params(cfg, 0)
    r = np.random.default_rng(3)
    x = r.random((2, 2, 16, 16, 3))
    y = r.integers(0, 4, (2, 16, 16))
    enc = contrast.MomentumEncoder(arrays)
    with T.no_grad():
        k_emb = segnet.embed(r.random((3, 2, 16, 16, 3)), enc.tensors(), cfg).data
    ky = r.integers(0, 4, (3, 4, 4))

    def ce(p, xin=x):
        return train.ce_ohem_loss(segnet.segment(xin, p, cfg), y, 0.7).loss

    def cl(p, xin=x):
        q = segnet.embed(xin[:1], p, cfg)
        b = PairBatch(T.reshape(q, (-1, cfg.proj_dim)), y[0, ::4, ::4].ravel(),
                      [e.reshape(-1, cfg.proj_dim) for e in k_emb], [k.ravel() for k in ky])
        return contrast.pixel_contrast_loss(b).loss

    out = []
    for loss_name, loss in (("CE", ce), ("contrast", cl)):
        for name in sorted(arrays):
            if loss_name == "CE" and name.startswith("proj."):
                continue
            if loss_name == "contrast" and name.startswith("seg."):
                continue
            idx = [tuple(int(r.integers(0, s)) for s in arrays[name].shape) for _ in range(probes)]

            def f(t, name=name, loss=loss):
                p = {k: Tensor(v) for k, v in arrays.items()}
                p[name] = t
                return loss(p)

            out.append((f"{loss_name}:{name}", f, arrays[name], idx))
        frozen = {k: Tensor(v) for k, v in arrays.items()}
        out.append((f"{loss_name}:input", lambda t, loss=loss: loss(frozen, t), x,
                    [(0,) + tuple(int(r.integers(0, s)) for s in x.shape[1:]) for _ in range(4)]))
    return out


def check_gradients(probes: int = 2) -> Check:
    def run():
        fails, worst = [], 0.0
        n = 0
        for name, (fn, x) in op_cases().items():
            err = grad_check(fn, x, eps=GRAD_EPS)
            worst = max(worst, err)
            n += 1
            if not err < GRAD_TOL:
                fails.append(f"{name}: {err:.2e}")
        for name, fn, x, idx in _network_cases(probes):
            err = grad_check(fn, x, eps=GRAD_EPS, indices=idx)
            worst = max(worst, err)
            n += 1
            if not err < GRAD_TOL:
                fails.append(f"{name}: {err:.2e}")
        return Check("gradient correctness", not fails,
                     f"{n} checks, max rel err {worst:.2e} (tol {GRAD_TOL:g}, eps {GRAD_EPS:g})", fails)
    return _timed(run)


# ---------------------------------------------------------------------------
# shifted windows


def window_cases(n: int = 24, seed: int = 0) -> list[tuple[int, int, int, int, int]]:
    """Random (h, w, M, heads, T) cases including sizes that need padding."""
    r = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        M = int(r.integers(1, 5))
        h, w = int(r.integers(M, 3 * M + 2)), int(r.integers(M, 3 * M + 2))
        heads = int(r.choice([1, 2, 3]))
        out.append((h, w, M, heads, int(r.integers(1, 3))))
    return out


def check_shifted_windows(n: int = 24) -> Check:
    def run():
        fails, worst = [], 0.0
        for i, (h, w, M, heads, Tn) in enumerate(window_cases(n)):
            cfg = stswin.BlockConfig(window_size=M, num_heads=heads, channels=2 * heads)
            p = stswin.init_attention(cfg, np.random.default_rng(i), 0.3)
            x = np.random.default_rng(100 + i).normal(size=(2, Tn, h, w, cfg.channels))
            for shifted in (False, True):
                fast = stswin.attention_layer(Tensor(x), {k: Tensor(v) for k, v in p.items()}, cfg, shifted).data
                d = float(np.max(np.abs(fast - oracles.naive_window_attention(x, p, M, heads, shifted))))
                worst = max(worst, d)
                if not d < 1e-10:
                    fails.append(f"h={h} w={w} M={M} heads={heads} T={Tn} shifted={shifted}: {d:.1e}")
        return Check("shifted-window equivalence", not fails,
                     f"{n} random cases x (plain, shifted), max |diff| {worst:.1e} (tol 1e-10)", fails)
    return _timed(run)


# ---------------------------------------------------------------------------
# contrast


def _contrast_instance(seed, num_adjacent, num_cross, P=16, D=6, C=3):
    r = np.random.default_rng(seed)
    unit = lambda n: (lambda v: v / np.linalg.norm(v, axis=1, keepdims=True))(r.normal(size=(n, D)))

    def labels(n):
        y = r.integers(0, C, n)
        y[r.random(n) < 0.1] = 255
        return y

    nk = 1 + num_adjacent + num_cross
    return unit(P), labels(P), [unit(P) for _ in range(nk)], [labels(P) for _ in range(nk)]


def check_contrast(per_config: int = 5) -> Check:
    def run():
        fails, worst, n = [], 0.0, 0
        for a in range(3):
            for c in range(4):
                for s in range(per_config):
                    eq, yq, keys, kl = _contrast_instance(10_000 + 100 * a + 10 * c + s, a, c)
                    ref, _ = oracles.brute_contrast_loss(eq, yq, keys, kl)
                    got = contrast.pixel_contrast_loss(PairBatch(Tensor(eq), yq, keys, kl)).loss.item()
                    worst = max(worst, abs(got - ref))
                    n += 1
                    if not abs(got - ref) < 1e-10:
                        fails.append(f"({a},{c}) #{s}: {abs(got - ref):.1e}")
        q = np.array([[1.0, 0.0]])
        sym = contrast.pixel_contrast_loss(PairBatch(Tensor(q), np.array([0]), [np.array([[0.6, 0.8], [0.6, -0.8]])],
                                                     [np.array([0, 1])])).loss.item()
        cf = contrast.pixel_contrast_loss(PairBatch(Tensor(q), np.array([0]), [np.array([[1.0, 0.0], [-1.0, 0.0]])],
                                                    [np.array([0, 1])])).loss.item()
        e1, e2 = abs(sym - math.log(2)), abs(cf - math.log1p(math.exp(-2)))
        if not e1 < 1e-9:
            fails.append(f"ln 2 case off by {e1:.1e}")
        if not e2 < 1e-9:
            fails.append(f"ln(1+e^-2) case off by {e2:.1e}")
        return Check("contrast-loss oracle", not fails,
                     f"{n} instances over pair configs (0,0)..(2,3), max |diff| {worst:.1e}; "
                     f"closed forms off by {e1:.1e}, {e2:.1e}", fails)
    return _timed(run)


# ---------------------------------------------------------------------------
# temporal reachability


def check_reachability(Ns=(2, 3, 4, 5), sizes=(2, 3, 4, 5, 8)) -> Check:
    def run():
        fails = []
        for N in Ns:
            sch = stswin.time_shift_schedule(N)
            full = len(sch)
            if not oracles.empirical_reachability(N, full).all():
                fails.append(f"N={N}: full schedule not dense")
            for k in range(1, full + 1):
                pred = stswin.predicted_reachability(sch.truncated(k))
                emp = oracles.empirical_reachability(N, k)
                i, j = np.nonzero(pred)
                if not np.array_equal(emp, pred) or np.any(np.abs(i - j) > k):
                    fails.append(f"N={N}, {k} configs: sparsity differs from prediction")
        counts = {N: stswin.time_shift_schedule(N).num_shifts for N in sizes}
        for N, s in counts.items():
            if s != N - 2:
                fails.append(f"N={N}: {s} shifts, expected N-2={N - 2}")
        detail = "shifts " + ", ".join(f"N={N}:{s}" for N, s in counts.items())
        return Check("temporal reachability", not fails, detail, fails)
    return _timed(run)


# ---------------------------------------------------------------------------
# metrics


def check_metrics(masks: int = 1000) -> Check:
    def run():
        fails = []
        fs = metrics.frame_scores(np.array([[1, 2], [2, 2]]), np.array([[1, 1], [2, 2]]))
        if fs.miou != 7 / 12 or fs.mdice != 11 / 15:
            fails.append(f"2x2 example gave mIoU {fs.miou!r}, Dice {fs.mdice!r}")
        r = np.random.default_rng(0)
        for i in range(masks):
            h, w = r.integers(1, 9, 2)
            s = metrics.frame_scores(r.integers(0, 4, (h, w)), r.integers(0, 4, (h, w)))
            if any(s.dice[c] < s.iou[c] for c in s.iou):
                fails.append(f"Dice < IoU on mask {i}")
        worst = 0.0
        for n in range(6, 11):
            for trial in range(4):
                a = r.normal(size=n)
                b = a + r.normal(0.3, 1.0, n)
                if trial % 2:
                    a, b = np.round(a, 1), np.round(b, 1)
                d = abs(metrics.wilcoxon_signed_rank(a, b).p_value - oracles.exact_wilcoxon_enumeration(a, b))
                worst = max(worst, d)
                if not d < 1e-6:
                    fails.append(f"Wilcoxon n={n} off by {d:.1e}")
        return Check("metric protocol", not fails,
                     f"7/12 and 11/15 exact, Dice>=IoU on {masks} masks, Wilcoxon max |dp| {worst:.1e}", fails)
    return _timed(run)


ORACLE_CHECKS = {
    "gradients": check_gradients,
    "windows": check_shifted_windows,
    "contrast": check_contrast,
    "reachability": check_reachability,
    "metrics": check_metrics,
}


def run_all(names=None, out=print) -> list[Check]:
    results = []
    for name in names or ORACLE_CHECKS:
        c = ORACLE_CHECKS[name]()
        out(c.line() + f" ({c.seconds:.1f}s)")
        for f in c.failures[:10]:
            out(f"    {f}")
        results.append(c)
    return results
