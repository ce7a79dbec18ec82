import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stswincl.oracles import empirical_reachability, naive_window_attention
from stswincl import stswin
from stswincl import tensor as T
from stswincl.stswin import BlockConfig
from stswincl.tensor import Tensor


def attn_params(cfg: BlockConfig, seed: int, std: float = 0.3) -> dict[str, np.ndarray]:
    return stswin.init_attention(cfg, np.random.default_rng(seed), std)


def tensors(p):
    return {k: Tensor(v) for k, v in p.items()}


# -- partition -----------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 3, 4]), st.integers(1, 2), st.integers(0, 999))
def test_partition_reverse_roundtrip(nh, nw, M, Tn, seed):
    x = np.random.default_rng(seed).normal(size=(2, Tn, nh * M, nw * M, 3))
    ws = stswin.window_partition(Tensor(x), M)
    assert ws.windows.shape == (2, nh * nw, Tn * M * M, 3)
    np.testing.assert_array_equal(stswin.window_reverse(ws, nh * M, nw * M).data, x)


def test_window_token_order_is_time_row_col():
    x = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4, 1)
    ws = stswin.window_partition(Tensor(x), 2)
    first = ws.windows.data[0, 0, :, 0]
    np.testing.assert_array_equal(first, [0, 1, 4, 5, 16, 17, 20, 21])


def test_reverse_is_window_order_independent():
    x = np.random.default_rng(0).normal(size=(1, 1, 8, 8, 2))
    ws = stswin.window_partition(Tensor(x), 4)
    perm = np.array([3, 0, 2, 1])
    shuffled = stswin.WindowSet(T.take(ws.windows, perm, axis=1), ws.origins[perm], 1, 4)
    np.testing.assert_array_equal(stswin.window_reverse(shuffled, 8, 8).data, x)


def test_partition_rejects_bad_sizes():
    with pytest.raises(ValueError):
        stswin.window_partition(Tensor(np.zeros((1, 5, 4, 1))), 4)
    with pytest.raises(ValueError):
        stswin.window_partition(Tensor(np.zeros((1, 3, 4, 4, 1))), 4)


def test_reverse_rejects_incomplete_cover():
    ws = stswin.window_partition(Tensor(np.zeros((1, 8, 8, 1))), 4)
    bad = stswin.WindowSet(ws.windows[:, :3], ws.origins[:3], 1, 4)
    with pytest.raises(ValueError):
        stswin.window_reverse(bad, 8, 8)


# -- masks and bias index ---------------------------------------------------------------


def test_shift_mask_matches_region_oracle():
    h, w, M = 8, 12, 4
    s = 2
    mask = stswin.make_shift_mask(h, w, M, s)
    # region id in original coordinates, then rolled like the features
    rp = (np.arange(h) + M - s) // M
    cp = (np.arange(w) + M - s) // M
    reg = np.roll(rp[:, None] * 100 + cp[None, :], (-s, -s), axis=(0, 1))
    for k in range(mask.shape[0]):
        r0, c0 = divmod(k, w // M)
        ids = reg[r0 * M:(r0 + 1) * M, c0 * M:(c0 + 1) * M].ravel()
        expect = np.where(ids[:, None] == ids[None, :], 0.0, stswin.MASK_VALUE)
        np.testing.assert_array_equal(mask[k], expect)


def test_interior_windows_unmasked():
    mask = stswin.make_shift_mask(12, 12, 4, 2)
    assert np.all(mask[0] == 0)
    assert np.any(mask[-1] != 0)


def test_relative_position_index_range_and_symmetry():
    for M in (1, 2, 4):
        for Tn in (1, 2):
            idx = stswin.relative_position_index(M, Tn)
            L = Tn * M * M
            assert idx.shape == (L, L)
            assert idx.min() >= 0 and idx.max() < stswin.bias_table_size(M)
            # the diagonal is the (0, 0, 0) offset
            assert len(set(np.diag(idx))) == 1


# -- equivalence of cyclic shift + mask with explicit sub-windows ------------------------


CASES = [(h, w, M, heads, Tn) for (h, w, M, heads, Tn) in [
    (4, 4, 2, 1, 1), (8, 8, 4, 2, 1), (8, 12, 4, 2, 2), (6, 6, 3, 1, 1), (9, 6, 3, 3, 2),
    (5, 7, 4, 2, 1), (7, 5, 2, 1, 2), (10, 6, 4, 2, 2), (6, 10, 3, 3, 1), (4, 8, 4, 1, 2),
]]


@pytest.mark.parametrize("h,w,M,heads,Tn", CASES)
@pytest.mark.parametrize("shifted", [False, True])
def test_shifted_window_attention_equals_naive(h, w, M, heads, Tn, shifted):
    cfg = BlockConfig(window_size=M, num_heads=heads, channels=6 if heads != 2 else 4)
    rng = np.random.default_rng(h * 100 + w * 10 + M)
    x = rng.normal(size=(2, Tn, h, w, cfg.channels))
    p = attn_params(cfg, h + w)
    fast = stswin.attention_layer(Tensor(x), tensors(p), cfg, shifted).data
    ref = naive_window_attention(x, p, M, heads, shifted)
    assert np.max(np.abs(fast - ref)) < 1e-10


def test_attention_without_bias_equals_naive():
    cfg = BlockConfig(window_size=4, num_heads=2, channels=4, use_relative_position_bias=False)
    x = np.random.default_rng(3).normal(size=(1, 2, 8, 8, 4))
    p = attn_params(cfg, 3)
    fast = stswin.attention_layer(Tensor(x), tensors(p), cfg, True).data
    np.testing.assert_allclose(fast, naive_window_attention(x, p, 4, 2, True, use_bias=False), atol=1e-10)


# -- blocks ---------------------------------------------------------------------------------


def block_params(cfg, seed=0):
    return tensors(stswin.init_block(cfg, np.random.default_rng(seed), 0.2))


def test_block_shapes_and_shift_flag():
    cfg = BlockConfig(window_size=2, num_heads=2, channels=4)
    p = block_params(cfg)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 2, 4, 4, 4)))
    y1 = stswin.block_forward(x, p, cfg, use_shift=True)
    y0 = stswin.block_forward(x, p, cfg, use_shift=False)
    assert y1.shape == x.shape
    assert not np.allclose(y1.data, y0.data)


def test_stswin_block_mixes_time():
    cfg = BlockConfig(window_size=2, num_heads=1, channels=4)
    p = block_params(cfg)
    rng = np.random.default_rng(1)
    ft, fp = rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(1, 4, 4, 4))
    a, _ = stswin.stswin_block(Tensor(ft), Tensor(fp), p, cfg)
    b, _ = stswin.stswin_block(Tensor(ft), Tensor(fp + rng.normal(size=fp.shape)), p, cfg)
    assert not np.allclose(a.data, b.data)
    single, none = stswin.stswin_block(Tensor(ft), None, p, cfg)
    assert none is None and single.shape == (1, 4, 4, 4)


# -- time shift schedule --------------------------------------------------------------------


@pytest.mark.parametrize("N", [2, 4, 6, 8])
def test_even_schedule_has_n_minus_2_shifts(N):
    sch = stswin.time_shift_schedule(N)
    assert sch.num_shifts == N - 2
    kinds = [c.kind for c in sch.configurations]
    assert kinds[0] == kinds[-1] == "A"
    assert all(kinds[i] != kinds[i + 1] for i in range(len(kinds) - 1))


def test_eight_frames_need_six_shifts():
    assert stswin.time_shift_schedule(8).num_shifts == 6


@pytest.mark.parametrize("N", range(1, 10))
def test_full_schedule_is_dense(N):
    assert stswin.predicted_reachability(stswin.time_shift_schedule(N)).all()


@pytest.mark.parametrize("N", [3, 5, 7])
def test_odd_clip_cannot_mix_in_n_minus_1_rounds(N):
    sch = stswin.time_shift_schedule(N)
    assert not stswin.predicted_reachability(sch.truncated(N - 1)).all()


def test_pairings():
    sch = stswin.time_shift_schedule(5)
    A, B = sch.configurations[:2]
    assert A.pairs == ((0, 1), (2, 3)) and A.singletons == (4,)
    assert B.pairs == ((1, 2), (3, 4)) and B.singletons == (0,)


def test_schedule_rejects_nonpositive():
    with pytest.raises(ValueError):
        stswin.time_shift_schedule(0)


@pytest.mark.parametrize("N", [2, 3, 4, 5])
def test_truncated_schedules_match_prediction(N):
    full = len(stswin.time_shift_schedule(N))
    for k in range(1, full + 1):
        pred = stswin.predicted_reachability(stswin.time_shift_schedule(N).truncated(k))
        np.testing.assert_array_equal(empirical_reachability(N, k), pred)
        i, j = np.nonzero(pred)
        assert np.all(np.abs(i - j) <= k)   # banded


def test_clip_forward_checks_lengths():
    cfg = BlockConfig(window_size=2, num_heads=1, channels=4)
    p = block_params(cfg)
    x = [Tensor(np.zeros((1, 2, 2, 4)))] * 3
    with pytest.raises(ValueError):
        stswin.clip_forward(x, stswin.time_shift_schedule(4), [(p, cfg)] * 3)
