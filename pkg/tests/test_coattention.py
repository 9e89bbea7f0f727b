import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfn.coattention import (
    CTBlock,
    CTConfig,
    FineGrainedFusion,
    ModalProjections,
    PooledFinePath,
    ct_forward,
    fine_grained_pair,
)
from mmfn.nn import gradient_check


def block(d_m=8, heads=2, seed=0, **kw):
    return CTBlock(CTConfig(d_m, heads, **kw), np.random.default_rng(seed))


# ---------------------------------------------------------------- config


def test_config_head_dim_and_errors():
    cfg = CTConfig()
    assert (cfg.d_m, cfg.heads, cfg.d_h) == (512, 8, 64)
    assert cfg.hidden == 512
    assert CTConfig(8, 2, scale_mode="inv_linear").scale == pytest.approx(1 / 4)
    assert CTConfig(8, 2).scale == pytest.approx(1 / 2)
    with pytest.raises(ValueError):
        CTConfig(10, 3)
    with pytest.raises(ValueError):
        CTConfig(8, 2, scale_mode="cosine")


def test_parameter_count_is_one_block():
    ct = block(8, 2)
    # bias-free q/k/v per head: 3 * 2 * (8*4); out: 8*8 + 8; ffn: 2 * (8*8 + 8); two norms: 2 * 16
    expected = 3 * 2 * 32 + 72 + 2 * 72 + 32
    assert ct.num_parameters() == expected
    fg = FineGrainedFusion(5, 6, CTConfig(8, 2), np.random.default_rng(0))
    assert fg.num_parameters() == expected + (5 * 8 + 8) + (6 * 8 + 8)


# ---------------------------------------------------------------- attention


def test_single_key_gives_unit_attention():
    ct = block()
    rng = np.random.default_rng(1)
    maps = ct.attention_maps(rng.normal(size=(5, 8)), rng.normal(size=(1, 8)))
    for a in maps:
        np.testing.assert_array_equal(a, np.ones((5, 1)))


def test_single_key_makes_output_independent_of_key_weights():
    ct = block()
    rng = np.random.default_rng(2)
    i1, i2 = rng.normal(size=(4, 8)), rng.normal(size=(1, 8))
    before = ct(i1, i2)
    for k in ct.key:
        k.weight.value += rng.normal(size=k.weight.shape)
    np.testing.assert_allclose(ct(i1, i2), before, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_rows_sum_to_one(r1, r2, seed):
    rng = np.random.default_rng(seed)
    ct = block(seed=seed % 7)
    for a in ct.attention_maps(rng.normal(0, 3, size=(r1, 8)), rng.normal(0, 3, size=(r2, 8))):
        assert a.shape == (r1, r2)
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_row_permutation_invariance(r1, r2, seed):
    rng = np.random.default_rng(seed)
    ct = block(seed=seed % 5)
    x, y = rng.normal(size=(r1, 8)), rng.normal(size=(r2, 8))
    base = ct_forward(ct, x, y)
    np.testing.assert_allclose(ct_forward(ct, x[rng.permutation(r1)], y), base, atol=1e-6)
    np.testing.assert_allclose(ct_forward(ct, x, y[rng.permutation(r2)]), base, atol=1e-6)


def test_first_input_permutation_against_brute_force_rows():
    # the block is row-wise before pooling, so pooling any ordering of the
    # per-row outputs gives the same vector
    ct = block()
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    rows = [ct(x[r : r + 1], y) for r in range(3)]
    np.testing.assert_allclose(np.mean(rows, axis=0), ct(x, y), atol=1e-12)


@pytest.mark.parametrize("r1,r2", [(1, 1), (2, 7), (9, 3)])
def test_output_width_independent_of_row_counts(r1, r2):
    ct = block()
    rng = np.random.default_rng(0)
    assert ct(rng.normal(size=(r1, 8)), rng.normal(size=(r2, 8))).shape == (8,)


def test_batched_input_matches_single_items():
    ct = block()
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(3, 5, 8)), rng.normal(size=(3, 2, 8))
    out = ct(x, y)
    assert out.shape == (3, 8)
    for b in range(3):
        np.testing.assert_allclose(out[b], ct(x[b], y[b]), atol=1e-12)


def test_input_errors():
    ct = block()
    with pytest.raises(ValueError, match="width"):
        ct(np.zeros((2, 7)), np.zeros((2, 8)))
    with pytest.raises(ValueError, match="width"):
        ct(np.zeros((2, 8)), np.zeros((2, 9)))
    with pytest.raises(ValueError, match="no rows"):
        ct(np.zeros((0, 8)), np.zeros((2, 8)))
    with pytest.raises(ValueError, match="no rows"):
        ct(np.zeros((2, 8)), np.zeros((0, 8)))
    with pytest.raises(ValueError, match="non-finite"):
        ct(np.full((2, 8), np.nan), np.zeros((2, 8)))


def test_scale_mode_changes_output():
    a = block(scale_mode="inv_sqrt", seed=1)
    b = block(scale_mode="inv_linear", seed=1)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(3, 8)), rng.normal(size=(4, 8))
    assert not np.allclose(a(x, y), b(x, y))


# ---------------------------------------------------------------- scalar oracle


def _ref_linear(x, w, b=None):
    b = b or [0.0] * len(w[0])
    return [sum(x[i] * w[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]


def _ref_norm(x, g, s, eps):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * g[j] + s[j] for j, v in enumerate(x)]


def _ref_ct(i1, i2, p, scale, eps):
    """Straight-line single-head co-attention, one scalar at a time."""
    q = [_ref_linear(r, p["wq"]) for r in i1]
    k = [_ref_linear(r, p["wk"]) for r in i2]
    v = [_ref_linear(r, p["wv"]) for r in i2]
    out_rows = []
    for a, qa in enumerate(q):
        scores = [sum(qa[t] * kb[t] for t in range(len(qa))) * scale for kb in k]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        att = [e / sum(ex) for e in ex]
        head = [sum(att[b] * v[b][j] for b in range(len(v))) for j in range(len(v[0]))]
        h = _ref_linear(head, p["wo"], p["bo"])
        x1 = _ref_norm([i1[a][j] + h[j] for j in range(len(h))], p["g1"], p["s1"], eps)
        hid = [max(0.0, z) for z in _ref_linear(x1, p["w1"], p["b1"])]
        f = _ref_linear(hid, p["w2"], p["b2"])
        out_rows.append(_ref_norm([i1[a][j] + f[j] for j in range(len(f))], p["g2"], p["s2"], eps))
    return [sum(r[j] for r in out_rows) / len(out_rows) for j in range(len(out_rows[0]))]


def test_tiny_case_matches_scalar_reference():
    d_m = 4
    ct = block(d_m=d_m, heads=1, seed=0)
    rng = np.random.default_rng(9)
    # hand-set every weight from a fixed grid of quarter values
    for _, param in ct.named_parameters():
        param.value[...] = rng.integers(-4, 5, size=param.shape) / 4.0
    p = {
        "wq": ct.query[0].weight.value.tolist(),
        "wk": ct.key[0].weight.value.tolist(),
        "wv": ct.value[0].weight.value.tolist(),
        "wo": ct.out.weight.value.tolist(), "bo": ct.out.bias.value.tolist(),
        "g1": ct.norm1.scale.value.tolist(), "s1": ct.norm1.shift.value.tolist(),
        "w1": ct.ffn.layers[0].weight.value.tolist(), "b1": ct.ffn.layers[0].bias.value.tolist(),
        "w2": ct.ffn.layers[2].weight.value.tolist(), "b2": ct.ffn.layers[2].bias.value.tolist(),
        "g2": ct.norm2.scale.value.tolist(), "s2": ct.norm2.shift.value.tolist(),
    }
    t = [[0.5, -1.0, 2.0, 0.0], [1.5, 0.25, -0.5, 1.0]]
    v = [[-1.0, 0.0, 1.0, 2.0], [0.75, -0.25, 0.5, -1.5]]
    scale = 1 / math.sqrt(d_m)
    f_vt, f_tv = ct(np.array(t), np.array(v)), ct(np.array(v), np.array(t))
    np.testing.assert_allclose(f_vt, _ref_ct(t, v, p, scale, 1e-5), atol=1e-12)
    np.testing.assert_allclose(f_tv, _ref_ct(v, t, p, scale, 1e-5), atol=1e-12)


# ---------------------------------------------------------------- fine-grained pair


def _pair_setup(seed=0):
    rng = np.random.default_rng(seed)
    proj = ModalProjections(5, 6, 8, rng)
    ct = CTBlock(CTConfig(8, 2), rng)
    return proj, ct, rng.normal(size=(4, 5)), rng.normal(size=(3, 6))


def test_identical_projected_inputs_give_identical_outputs():
    proj, ct, _, _ = _pair_setup()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 8))
    assert np.array_equal(ct(x, x), ct(x.copy(), x.copy()))
    # through the projections: make both maps produce the same matrix
    t_b = rng.normal(size=(3, 5))
    v_s = np.zeros((3, 6))
    v_s[:, :5] = t_b
    proj.image.weight.value[...] = 0.0
    proj.image.weight.value[:5] = proj.text.weight.value
    proj.image.bias.value[...] = proj.text.bias.value
    f_vt, f_tv = fine_grained_pair(proj, ct, t_b, v_s)
    assert np.array_equal(f_vt, f_tv)


def test_swapping_arguments_swaps_outputs():
    _, ct, _, _ = _pair_setup()
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(4, 8)), rng.normal(size=(2, 8))
    assert np.array_equal(ct(x, y), ct_forward(ct, x, y))
    a, b = ct(x, y), ct(y, x)
    assert np.array_equal(ct(y, x), b) and not np.allclose(a, b)


def test_fine_grained_fusion_matches_pair_helper():
    rng = np.random.default_rng(0)
    fg = FineGrainedFusion(5, 6, CTConfig(8, 2), rng)
    t_b, v_s = rng.normal(size=(4, 5)), rng.normal(size=(3, 6))
    f_vt, f_tv = fg(t_b, v_s)
    ref = fine_grained_pair(fg.proj, fg.ct, t_b, v_s)
    np.testing.assert_array_equal(f_vt, ref[0])
    np.testing.assert_array_equal(f_tv, ref[1])
    assert fg.out_dim == 16


def test_every_parameter_is_shared_by_both_directions():
    rng = np.random.default_rng(7)
    fg = FineGrainedFusion(5, 6, CTConfig(8, 2), rng)
    t_b, v_s = rng.normal(size=(4, 5)), rng.normal(size=(3, 6))
    base_vt, base_tv = fg(t_b, v_s)
    for name, param in fg.ct.named_parameters():
        saved = param.value.copy()
        param.value += rng.normal(0, 0.5, size=param.shape)
        vt, tv = fg(t_b, v_s)
        param.value[...] = saved
        assert not np.allclose(vt, base_vt, atol=1e-9), name
        assert not np.allclose(tv, base_tv, atol=1e-9), name


def test_pooled_fine_path_is_mean_of_projections():
    rng = np.random.default_rng(8)
    path = PooledFinePath(5, 6, 8, rng)
    t_b, v_s = rng.normal(size=(4, 5)), rng.normal(size=(3, 6))
    a, b = path(t_b, v_s)
    np.testing.assert_allclose(a, path.proj.text(t_b).mean(axis=0))
    np.testing.assert_allclose(b, path.proj.image(v_s).mean(axis=0))


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("scale_mode", ["inv_sqrt", "inv_linear"])
def test_gradcheck_ct_block(scale_mode):
    ct = block(8, 2, seed=11, scale_mode=scale_mode)
    rng = np.random.default_rng(12)
    report = gradient_check(ct, (rng.normal(size=(3, 8)), rng.normal(size=(4, 8))), check_inputs=True)
    assert report.passed, report.per_parameter_errors


def test_gradcheck_fine_grained_fusion_both_directions():
    rng = np.random.default_rng(13)
    fg = FineGrainedFusion(3, 4, CTConfig(8, 2), rng)
    report = gradient_check(fg, (rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 2, 4))), check_inputs=True)
    assert report.passed, report.per_parameter_errors
