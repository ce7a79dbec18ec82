"""Slow, independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools

import numpy as np


def naive_window_attention(x: np.ndarray, p: dict[str, np.ndarray], M: int, heads: int,
                           shifted: bool, use_bias: bool = True) -> np.ndarray:
    """Attention over explicit (shifted) sub-windows of ``x`` (B, T, h, w, C).

    Sub-window boundaries sit at ``s + k*M`` with ``s = M//2`` when shifted and
    0 otherwise; every token attends to all tokens (all timesteps) of its own
    sub-window. No rolling, padding or masking is involved.
    """
    B, Tn, h, w, C = x.shape
    d = C // heads
    s = M // 2 if shifted else 0
    row_piece = (np.arange(h) + M - s) // M
    col_piece = (np.arange(w) + M - s) // M
    out = np.zeros_like(x)
    for b in range(B):
        for pr in np.unique(row_piece):
            for pc in np.unique(col_piece):
                toks = [(t, r, c) for t in range(Tn) for r in np.flatnonzero(row_piece == pr)
                        for c in np.flatnonzero(col_piece == pc)]
                X = np.array([x[b, t, r, c] for t, r, c in toks])
                qkv = X @ p["qkv_w"] + p["qkv_b"]
                q, k, v = qkv[:, :C], qkv[:, C:2 * C], qkv[:, 2 * C:]
                res = np.zeros((len(toks), C))
                for hd in range(heads):
                    sl = slice(hd * d, (hd + 1) * d)
                    scores = np.zeros((len(toks), len(toks)))
                    for i, (ti, ri, ci) in enumerate(toks):
                        for j, (tj, rj, cj) in enumerate(toks):
                            scores[i, j] = q[i, sl] @ k[j, sl] / np.sqrt(d)
                            if use_bias:
                                idx = ((ri - rj + M - 1) * (2 * M - 1) + (ci - cj + M - 1)) * 2 + abs(ti - tj)
                                scores[i, j] += p["rel_bias"][idx, hd]
                    scores -= scores.max(axis=1, keepdims=True)
                    a = np.exp(scores)
                    a /= a.sum(axis=1, keepdims=True)
                    res[:, sl] = a @ v[:, sl]
                res = res @ p["proj_w"] + p["proj_b"]
                for i, (t, r, c) in enumerate(toks):
                    out[b, t, r, c] = res[i]
    return out


def brute_contrast_loss(eq: np.ndarray, yq: np.ndarray, keys: list[np.ndarray], key_labels: list[np.ndarray],
                        ignore: int = 255, temperature: float = 1.0) -> tuple[float, int]:
    """Quadruple loop (query pixel, key frame, key pixel, channel) over the pair definition."""
    total, count = 0.0, 0
    for i in range(len(yq)):
        if yq[i] == ignore:
            continue
        pos_sum, pos_n = 0.0, 0
        neg_total, any_neg = 0.0, False
        for ek, yk in zip(keys, key_labels):
            neg_sum, neg_n = 0.0, 0
            for j in range(len(yk)):
                if yk[j] == ignore:
                    continue
                sim = 0.0
                for c in range(eq.shape[1]):
                    sim += eq[i, c] * ek[j, c]
                if yk[j] == yq[i]:
                    pos_sum += sim
                    pos_n += 1
                else:
                    neg_sum += sim
                    neg_n += 1
            if neg_n:
                neg_total += neg_sum / neg_n
                any_neg = True
        if pos_n == 0 or not any_neg:
            continue
        sp, sn = pos_sum / pos_n, neg_total
        total += -np.log(np.exp(sp / temperature) / (np.exp(sp / temperature) + np.exp(sn / temperature)))
        count += 1
    return (total / count if count else 0.0), count


def exact_wilcoxon_enumeration(a, b) -> float:
    """Two-sided p-value by enumerating all 2^n sign assignments of the non-zero differences."""
    from scipy.stats import rankdata
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    r = rankdata(np.abs(d))
    mean = r.sum() / 2
    obs = abs(r[d > 0].sum() - mean)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = float(np.dot(signs, r))
        if abs(w - mean) >= obs - 1e-9:
            hits += 1
    return hits / 2 ** n


def confusion_counts(pred: np.ndarray, gt: np.ndarray, c: int) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        tp += p == c and g == c
        fp += p == c and g != c
        fn += p != c and g == c
    return tp, fp, fn


def empirical_reachability(N: int, k: int, seed: int = 0) -> np.ndarray:
    """Which input frames receive gradient from each output frame after ``k`` configurations.

    Rows and columns use schedule order (index 0 = current frame).
    """
    from . import stswin
    from . import tensor as T

    cfg = stswin.BlockConfig(window_size=2, num_heads=1, channels=4)
    p = {k_: T.Tensor(v) for k_, v in stswin.init_block(cfg, np.random.default_rng(seed), 0.2).items()}
    sch = stswin.time_shift_schedule(N).truncated(k)
    xs = np.random.default_rng(seed).normal(size=(N, 1, 2, 2, 4))
    R = np.zeros((N, N), dtype=bool)
    for i in range(N):
        ins = [T.Tensor(xs[j], requires_grad=True) for j in range(N)]
        outs = stswin.clip_forward(ins, sch, [(p, cfg)] * len(sch))
        T.backward(T.tsum(outs[N - 1 - i]))
        for j in range(N):
            g = ins[N - 1 - j].grad
            R[i, j] = g is not None and np.abs(g).max() > 0
    return R
