import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stswincl.oracles import brute_contrast_loss
from stswincl import contrast, segnet
from stswincl import tensor as T
from stswincl.contrast import ConfigError, KeySourceSpec, MomentumEncoder, PairBatch
from stswincl.tensor import Tensor, grad_check

PAIR_CONFIGS = [(a, c) for a in range(3) for c in range(4)]


def unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_instance(seed, num_adjacent, num_cross, P=16, D=6, C=3, ignore_rate=0.1):
    rng = np.random.default_rng(seed)
    nk = 1 + num_adjacent + num_cross

    def labels(n):
        y = rng.integers(0, C, n)
        y[rng.random(n) < ignore_rate] = 255
        return y

    eq, yq = unit(rng, P, D), labels(P)
    keys = [unit(rng, P, D) for _ in range(nk)]
    key_labels = [labels(P) for _ in range(nk)]
    return eq, yq, keys, key_labels


def loss_of(eq, yq, keys, key_labels, temperature=1.0):
    b = PairBatch(Tensor(eq), yq, keys, key_labels)
    return contrast.pixel_contrast_loss(b, temperature)


@pytest.mark.parametrize("pair", PAIR_CONFIGS)
def test_matches_brute_force(pair):
    # 12 configs x 5 instances = 60 instances
    for s in range(5):
        inst = random_instance(1000 * pair[0] + 100 * pair[1] + s, *pair)
        ref, count = brute_contrast_loss(*inst)
        res = loss_of(*inst)
        assert res.contributing == count
        assert abs(res.loss.item() - ref) < 1e-10


def test_brute_force_with_temperature():
    inst = random_instance(7, 1, 2)
    ref, _ = brute_contrast_loss(*inst, temperature=0.3)
    assert abs(loss_of(*inst, temperature=0.3).loss.item() - ref) < 1e-10


def test_symmetric_logits_give_ln2():
    # one key frame, one positive and one negative pixel at the same cosine
    q = np.array([[1.0, 0.0]])
    k = np.array([[0.6, 0.8], [0.6, -0.8]])
    res = loss_of(q, np.array([0]), [k], [np.array([0, 1])])
    assert abs(res.loss.item() - math.log(2)) < 1e-9


def test_closed_form_ln_1_plus_e_minus_2():
    q = np.array([[1.0, 0.0]])
    k = np.array([[1.0, 0.0], [-1.0, 0.0]])
    res = loss_of(q, np.array([0]), [k], [np.array([0, 1])])
    assert abs(res.loss.item() - math.log1p(math.exp(-2))) < 1e-9
    assert abs(res.loss.item() - 0.126928) < 1e-6


def test_pixels_without_positive_or_negative_are_skipped():
    q = unit(np.random.default_rng(0), 3, 4)
    k = unit(np.random.default_rng(1), 2, 4)
    # pixel 0: no positive (class 2 absent); pixel 1: ignore; pixel 2 contributes
    res = loss_of(q, np.array([2, 255, 0]), [k], [np.array([0, 1])])
    assert res.contributing == 1
    # only one class in the keys: no negatives anywhere
    res = loss_of(q, np.array([0, 0, 0]), [k], [np.array([0, 0])])
    assert res.empty and res.contributing == 0 and res.loss.item() == 0.0


def test_empty_loss_still_backpropagates_zero():
    q = Tensor(unit(np.random.default_rng(0), 2, 3), requires_grad=True)
    res = contrast.pixel_contrast_loss(PairBatch(q, np.array([255, 255]), [np.eye(3)[:2]], [np.array([0, 1])]))
    T.backward(res.loss)
    np.testing.assert_array_equal(q.grad, 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(PAIR_CONFIGS))
def test_key_frame_permutation_invariance(seed, pair):
    eq, yq, keys, kl = random_instance(seed, *pair)
    perm = np.random.default_rng(seed).permutation(len(keys))
    a = loss_of(eq, yq, keys, kl).loss.item()
    b = loss_of(eq, yq, [keys[i] for i in perm], [kl[i] for i in perm]).loss.item()
    assert abs(a - b) < 1e-12


def test_duplicating_key_frame_adds_its_negative_mean():
    rng = np.random.default_rng(3)
    q = unit(rng, 1, 5)
    k1, k2 = unit(rng, 4, 5), unit(rng, 4, 5)
    y1, y2 = np.array([0, 1, 1, 2]), np.array([0, 2, 1, 0])
    yq = np.array([0])

    def logits(keys, labels):
        pos = np.concatenate([k[l == 0] for k, l in zip(keys, labels)])
        sp = float(q[0] @ pos.mean(axis=0))
        return sp, loss_of(q, yq, keys, labels).loss.item()

    neg2 = float(q[0] @ k2[y2 != 0].mean(axis=0))
    sp_a, la = logits([k1, k2], [y1, y2])
    sp_b, lb = logits([k1, k2, k2], [y1, y2, y2])
    # recover S^n from L = softplus(Sn - Sp)
    sn_a = sp_a + math.log(math.expm1(la))
    sn_b = sp_b + math.log(math.expm1(lb))
    assert abs((sn_b - sn_a) - neg2) < 1e-10


def test_monotone_in_positive_and_negative_cosines():
    q = np.array([[1.0, 0.0, 0.0]])
    yq, yk = np.array([0]), np.array([0, 1])

    def L(cp, cn):
        k = np.array([[cp, math.sqrt(1 - cp * cp), 0.0], [cn, 0.0, math.sqrt(1 - cn * cn)]])
        return loss_of(q, yq, [k], [yk]).loss.item()

    assert L(0.5, 0.1) < L(0.4, 0.1)
    assert L(0.5, 0.2) > L(0.5, 0.1)


def test_query_gradient_matches_finite_differences():
    eq, yq, keys, kl = random_instance(11, 2, 3, P=8)

    def f(t):
        return contrast.pixel_contrast_loss(PairBatch(t, yq, keys, kl), 0.5).loss

    assert grad_check(f, eq) < 1e-5


# -- masks and labels ------------------------------------------------------------------


def test_label_mask_matches_double_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        yq, yk = rng.integers(0, 4, 12), rng.integers(0, 4, 9)
        yq[rng.random(12) < 0.2] = 255
        yk[rng.random(9) < 0.2] = 255
        ref = np.array([[a == b and a != 255 for b in yk] for a in yq])
        np.testing.assert_array_equal(contrast.label_mask(yq, yk), ref)


def test_label_mask_extremes():
    y = np.array([0, 1, 2])
    assert contrast.label_mask(y, y[::-1] * 0 + y).diagonal().all()
    assert not contrast.label_mask(np.array([0, 1]), np.array([2, 3])).any()


def test_downsample_labels():
    y = np.random.default_rng(0).integers(0, 5, (8, 12))
    np.testing.assert_array_equal(contrast.downsample_labels(y, 1), y)
    np.testing.assert_array_equal(contrast.downsample_labels(np.full((8, 8), 3), 4), 3)
    checker = np.indices((8, 8)).sum(axis=0) % 2
    np.testing.assert_array_equal(contrast.downsample_labels(checker, 2), 0)
    with pytest.raises(ValueError):
        contrast.downsample_labels(y, 5)


# -- EMA -----------------------------------------------------------------------------


def test_ema_update_examples():
    online = {"w": np.ones((2, 3))}
    enc = MomentumEncoder({"w": np.zeros((2, 3))})
    contrast.ema_update(enc, online, 1.0)
    np.testing.assert_array_equal(enc.shadow["w"], 0.0)
    contrast.ema_update(enc, online, 0.9)
    np.testing.assert_allclose(enc.shadow["w"], 0.1, rtol=0, atol=1e-15)
    contrast.ema_update(enc, online, 0.0)
    np.testing.assert_array_equal(enc.shadow["w"], 1.0)


def test_ema_errors():
    enc = MomentumEncoder({"w": np.zeros(3)})
    with pytest.raises(ValueError):
        contrast.ema_update(enc, {"w": np.zeros(4)}, 0.5)
    with pytest.raises(ValueError):
        contrast.ema_update(enc, {"v": np.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        contrast.ema_update(enc, {"w": np.zeros(3)}, 1.5)


def test_shadow_copy_is_independent():
    w = np.zeros(3)
    enc = MomentumEncoder({"w": w})
    w += 1
    np.testing.assert_array_equal(enc.shadow["w"], 0.0)


# -- key assembly -------------------------------------------------------------------


def test_key_batch_sources(tiny):
    vid = tiny.split("train")[0]
    q = tiny.clip(vid, 3, 2)
    rng = np.random.default_rng(0)
    keys = contrast.assemble_key_batch(q, tiny, KeySourceSpec(1, 3, True), rng)
    assert [k.source for k in keys] == ["self", "adjacent", "cross", "cross", "cross"]
    assert keys[1].clip.video_id == vid and keys[1].clip.timesteps[-1] in (2, 4)
    cross = [k.clip.video_id for k in keys[2:]]
    assert len(set(cross)) == 3 and vid not in cross
    assert all(v in tiny.split("train") for v in cross)
    only_self = contrast.assemble_key_batch(q, tiny, KeySourceSpec(0, 0, True), rng)
    assert [k.source for k in only_self] == ["self"]
    assert KeySourceSpec(2, 3).num_keys == 6


def test_key_batch_deterministic(tiny):
    q = tiny.clip(tiny.split("train")[1], 0, 1)

    def ids(seed):
        ks = contrast.assemble_key_batch(q, tiny, KeySourceSpec(2, 2), np.random.default_rng(seed))
        return [(k.clip.video_id, k.clip.timesteps) for k in ks]

    assert ids(5) == ids(5)
    # at t=0 the two nearest neighbours are both in the future
    assert [t[-1] for _, t in ids(5)[1:3]] == [1, 2]


def test_key_batch_insufficient_videos(tiny):
    q = tiny.clip(tiny.split("train")[0], 2, 1)
    with pytest.raises(ConfigError):
        contrast.assemble_key_batch(q, tiny, KeySourceSpec(0, 4), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        contrast.assemble_key_batch(q, tiny, KeySourceSpec(6, 0), np.random.default_rng(0))


def test_key_batch_applies_augmentation(tiny):
    q = tiny.clip(tiny.split("train")[0], 2, 1)
    seen = []

    def aug(clip, rng):
        seen.append(clip.video_id)
        return clip

    contrast.assemble_key_batch(q, tiny, KeySourceSpec(1, 2), np.random.default_rng(0), augment=aug)
    assert len(seen) == 4


# -- contrast step --------------------------------------------------------------------


SMALL = dict(height=32, width=32, channels=8, num_heads=2, fused_dim=16, proj_dim=8, num_classes=4,
             aspp_dim=8, backbone_widths=(4, 8), head_dim=8, groups=2, window_size=2, clip_length=2)


def _step_inputs(tiny, seed=0):
    cfg = segnet.ModelConfig(**SMALL)
    arrays = segnet.init_params(cfg, seed)
    vids = tiny.split("train")
    queries = [tiny.clip(vids[0], 3, 2), tiny.clip(vids[1], 2, 2)]
    rng = np.random.default_rng(seed)
    keysets = [contrast.assemble_key_batch(q, tiny, KeySourceSpec(1, 2), rng) for q in queries]
    return cfg, arrays, queries, keysets


def test_contrast_step_gradients_reach_online_only(tiny):
    cfg, arrays, queries, keysets = _step_inputs(tiny)
    online = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    enc = MomentumEncoder(arrays)
    shadow_before = {k: v.copy() for k, v in enc.shadow.items()}
    res = contrast.contrast_step(queries, keysets, online, enc, cfg)
    assert not res.empty and res.contributing > 0
    T.backward(res.loss)
    assert online["proj.fc2.w"].grad is not None and np.abs(online["proj.fc2.w"].grad).max() > 0
    # segmentation head is not on the contrast path
    assert online["seg.conv2.w"].grad is None or not np.any(online["seg.conv2.w"].grad)
    for k in arrays:
        np.testing.assert_array_equal(enc.shadow[k], shadow_before[k])


def test_self_key_positives_have_unit_cosine(tiny):
    cfg, arrays, queries, _ = _step_inputs(tiny)
    enc = MomentumEncoder(arrays)
    q = queries[0]
    e_on = segnet.embed(q.frames[None], {k: Tensor(v) for k, v in arrays.items()}, cfg).data
    e_sh = segnet.embed(q.frames[None], enc.tensors(), cfg).data
    np.testing.assert_allclose(np.sum(e_on * e_sh, axis=-1), 1.0, atol=1e-12)


def test_full_network_contrast_grad_check(tiny):
    cfg, arrays, queries, keysets = _step_inputs(tiny, seed=1)
    enc = MomentumEncoder(arrays)
    for name in ("proj.fc1.w", "stage1.attn_s.qkv_w", "backbone.conv0.w"):
        def f(t):
            p = {k: Tensor(v) for k, v in arrays.items()}
            p[name] = t
            return contrast.contrast_step(queries, keysets, p, enc, cfg).loss
        r = np.random.default_rng(0)
        idx = [tuple(int(r.integers(0, s)) for s in arrays[name].shape) for _ in range(4)]
        assert grad_check(f, arrays[name], indices=idx) < 1e-5
