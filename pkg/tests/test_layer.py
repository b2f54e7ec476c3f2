"""Deformable layer: offsets, grid assembly, aggregation, and gradients."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldconv.gradcheck import check_layer_gradients
from ldconv.geometry import KernelGeometry, gen_initial_coords
from ldconv.layer import STRATEGIES, LdconvLayer, OffsetField, load_layer, save_layer
from ldconv.tensor import Rng, ShapeError, Tensor4, conv2d_reference, rand_uniform


def _rel_dev(a, b):
    scale = max(float(np.max(np.abs(a))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


def _randomized(layer, rng, w_scale=0.1, b_scale=0.5):
    layer.offset_w = rng.stream("offw").uniform(
        -w_scale, w_scale, size=layer.offset_w.shape).astype(layer.dtype)
    layer.offset_b = rng.stream("offb").uniform(
        -b_scale, b_scale, size=layer.offset_b.shape).astype(layer.dtype)
    return layer


# -- offsets and grid -----------------------------------------------------------


def test_zero_weights_give_zero_offsets():
    layer = LdconvLayer.create(5, 3, 4)
    field = layer.predict_offsets(rand_uniform((2, 3, 8, 8), Rng(0)))
    assert field.data.shape == (2, 10, 8, 8)
    assert np.all(field.data == 0.0)


def test_offset_field_dims_with_stride():
    layer = LdconvLayer.create(5, 3, 4, stride=2)
    field = layer.predict_offsets(rand_uniform((1, 3, 8, 8), Rng(0)))
    assert field.data.shape == (1, 10, 4, 4)


def test_offset_field_validation():
    with pytest.raises(ShapeError):
        OffsetField(n=3, data=np.zeros((1, 5, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="finite"):
        OffsetField(n=1, data=np.full((1, 2, 1, 1), np.nan, dtype=np.float32))


def test_identity_grid_for_single_point_kernel():
    layer = LdconvLayer.create(1, 1, 1)
    field = layer.predict_offsets(rand_uniform((1, 1, 4, 4), Rng(0)))
    grid = layer.assemble_grid(field)
    for i in range(4):
        for j in range(4):
            assert grid.rows[0, 0, i, j] == i
            assert grid.cols[0, 0, i, j] == j


def test_default_five_point_footprint():
    layer = LdconvLayer.create(5, 1, 1)
    field = layer.predict_offsets(rand_uniform((1, 1, 4, 4), Rng(0)))
    grid = layer.assemble_grid(field)
    i, j = 2, 1
    got = {(float(grid.rows[0, n, i, j]), float(grid.cols[0, n, i, j]))
           for n in range(5)}
    assert got == {(i, j), (i, j + 1), (i + 1, j), (i + 1, j + 1), (i + 2, j)}


def test_constant_offset_shifts_grid():
    layer = LdconvLayer.create(3, 1, 1)
    layer.offset_b = np.full(6, 0.5, dtype=np.float32)
    field = layer.predict_offsets(Tensor4.from_values(np.zeros((1, 1, 3, 3))))
    grid = layer.assemble_grid(field)
    base = LdconvLayer.create(3, 1, 1)
    base_grid_ = base.assemble_grid(base.predict_offsets(
        Tensor4.from_values(np.zeros((1, 1, 3, 3)))))
    assert np.allclose(grid.rows, base_grid_.rows + 0.5)
    assert np.allclose(grid.cols, base_grid_.cols + 0.5)


# -- aggregation ------------------------------------------------------------------


def test_aggregate_identity_mix():
    layer = LdconvLayer.create(1, 3, 3, agg_bias=False)
    layer.agg_w = np.zeros((3, 3, 1), dtype=np.float32)
    for c in range(3):
        layer.agg_w[c, c, 0] = 1.0
    sampled = Rng(0).stream("s").random((2, 3, 1, 4, 4)).astype(np.float32)
    out = layer.aggregate(sampled)
    assert np.array_equal(out, sampled[:, :, 0])


def test_aggregate_counting_case():
    layer = LdconvLayer.create(3, 2, 4)
    layer.agg_w = np.ones((4, 2, 3), dtype=np.float32)
    layer.agg_b = np.zeros(4, dtype=np.float32)
    out = layer.aggregate(np.ones((1, 2, 3, 2, 2), dtype=np.float32))
    assert np.all(out == 6.0)


def test_aggregate_rejects_bad_sampled_shape():
    layer = LdconvLayer.create(3, 2, 4)
    with pytest.raises(ShapeError):
        layer.aggregate(np.ones((1, 2, 4, 2, 2), dtype=np.float32))


def test_unknown_strategy_rejected():
    with pytest.raises(ValueError, match="unknown strategy"):
        LdconvLayer.create(3, 2, 4, strategy="im2col")


@given(
    n=st.integers(min_value=1, max_value=12),
    c_in=st.integers(min_value=1, max_value=8),
    c_out=st.integers(min_value=1, max_value=8),
    h=st.integers(min_value=3, max_value=9),
    w=st.integers(min_value=3, max_value=9),
    seed=st.integers(min_value=0, max_value=2**31),
)
@settings(max_examples=40, deadline=None)
def test_strategies_realize_the_same_map(n, c_in, c_out, h, w, seed):
    rng = Rng(seed)
    base = _randomized(LdconvLayer.create(n, c_in, c_out, rng=rng), rng)
    x = rand_uniform((2, c_in, h, w), rng, stream="x")
    outs = [replace(base, strategy=s).forward(x)[0].data for s in STRATEGIES]
    assert _rel_dev(outs[0], outs[1]) < 1e-5
    assert _rel_dev(outs[0], outs[2]) < 1e-5


# -- forward ----------------------------------------------------------------------


def test_forward_output_dims():
    layer = LdconvLayer.create(5, 16, 32, stride=2)
    y, _ = layer.forward(rand_uniform((2, 16, 32, 32), Rng(1)))
    assert y.dims == (2, 32, 16, 16)


def test_single_point_kernel_is_1x1_conv():
    layer = LdconvLayer.create(1, 3, 4, rng=Rng(2))
    x = rand_uniform((2, 3, 5, 5), Rng(3))
    y, _ = layer.forward(x)
    w = layer.agg_w.reshape(4, 3, 1, 1)
    ref = conv2d_reference(x, w, bias=layer.agg_b)
    assert _rel_dev(y.data, ref.data) < 1e-5


@pytest.mark.parametrize("k", [1, 2, 3])
def test_zero_offsets_match_reference_conv(k):
    n = k * k
    rng = Rng(20 + k)
    layer = LdconvLayer.create(n, 2, 3, rng=rng)
    x = rand_uniform((2, 2, 6, 6), rng, stream="x")
    y, _ = layer.forward(x)
    w = layer.agg_w.reshape(3, 2, k, k)
    ref = conv2d_reference(x, w, bias=layer.agg_b, anchor="top-left")
    h_ref, w_ref = ref.dims[2], ref.dims[3]
    assert _rel_dev(y.data[:, :, :h_ref, :w_ref], ref.data) < 1e-5


def test_zero_offsets_match_padded_reference_conv():
    rng = Rng(31)
    layer = LdconvLayer.create(9, 2, 3, padding=1, rng=rng)
    x = rand_uniform((1, 2, 6, 6), rng, stream="x")
    y, _ = layer.forward(x)
    w = layer.agg_w.reshape(3, 2, 3, 3)
    ref = conv2d_reference(x, w, bias=layer.agg_b, pad=1, anchor="top-left")
    h_ref, w_ref = ref.dims[2], ref.dims[3]
    assert _rel_dev(y.data[:, :, :h_ref, :w_ref], ref.data) < 1e-5


def test_forward_linear_in_x_with_frozen_zero_offsets():
    layer = LdconvLayer.create(6, 2, 3, agg_bias=False, rng=Rng(4))
    gen = Rng(5)
    x = rand_uniform((1, 2, 5, 5), gen, stream="x")
    y = rand_uniform((1, 2, 5, 5), gen, stream="y")
    alpha, beta = 2.0, -0.75
    mixed = Tensor4(np.asarray(alpha * x.data + beta * y.data, dtype=np.float32))
    lhs = layer.forward(mixed)[0].data
    rhs = alpha * layer.forward(x)[0].data + beta * layer.forward(y)[0].data
    assert _rel_dev(lhs, rhs) < 1e-5


def test_forward_input_validation():
    layer = LdconvLayer.create(3, 2, 4)
    with pytest.raises(ShapeError, match="channels"):
        layer.forward(rand_uniform((1, 3, 4, 4), Rng(0)))
    with pytest.raises(ValueError, match="dtype"):
        layer.forward(rand_uniform((1, 2, 4, 4), Rng(0), dtype=np.float64))
    with pytest.raises(TypeError):
        layer.forward(np.zeros((1, 2, 4, 4), dtype=np.float32))


def test_geometry_layer_mismatch():
    with pytest.raises(ShapeError, match="geometry"):
        LdconvLayer.create(4, 1, 1, geometry=gen_initial_coords(5))


# -- backward ---------------------------------------------------------------------


def test_zero_upstream_gives_zero_grads():
    layer = _randomized(LdconvLayer.create(4, 2, 3, rng=Rng(6)), Rng(6))
    x = rand_uniform((1, 2, 5, 5), Rng(7))
    y, cache = layer.forward(x)
    grads = layer.backward(cache, Tensor4(np.zeros_like(y.data)))
    assert np.all(grads.x.data == 0.0)
    assert np.all(grads.offset_w == 0.0)
    assert np.all(grads.offset_b == 0.0)
    assert np.all(grads.agg_w == 0.0)
    assert np.all(grads.agg_b == 0.0)


def test_backward_rejects_wrong_upstream_shape():
    layer = LdconvLayer.create(3, 2, 4)
    x = rand_uniform((1, 2, 4, 4), Rng(0))
    _, cache = layer.forward(x)
    with pytest.raises(ShapeError, match="upstream"):
        layer.backward(cache, Tensor4(np.zeros((1, 4, 3, 3), dtype=np.float32)))


def test_gradients_match_finite_differences_small_case():
    results = check_layer_gradients(dims=(1, 2, 5, 5), n=3, seed=0, dtype=np.float64)
    for res in results:
        assert res.passed, f"{res.group}: {res.max_rel_err:.3e} > {res.tol}"


def test_gradients_with_post_stage():
    results = check_layer_gradients(dims=(2, 3, 6, 6), n=3, seed=1, dtype=np.float64,
                                    post="normalize+activation")
    groups = {res.group for res in results}
    assert "layer/post_scale" in groups and "layer/post_shift" in groups
    for res in results:
        assert res.passed, f"{res.group}: {res.max_rel_err:.3e} > {res.tol}"


def test_sabotage_is_detected():
    results = check_layer_gradients(dims=(1, 2, 5, 5), n=3, seed=0,
                                    dtype=np.float64, sabotage=True)
    bad = [res for res in results if not res.passed]
    assert any(res.group == "layer/offset_w" for res in bad)


def test_agg_weight_grads_match_reference_conv_grads():
    # With offsets frozen at zero the layer is a 3x3 top-left convolution, so
    # the mixing-weight gradient must equal the convolution weight gradient
    # computed by direct summation.  Upstream is zero outside the window
    # positions that exist in the valid-extent reference output.
    rng = Rng(8)
    layer = LdconvLayer.create(9, 2, 3, rng=rng)
    x = rand_uniform((2, 2, 6, 6), rng, stream="x")
    y, cache = layer.forward(x)
    up = np.zeros(y.dims, dtype=np.float32)
    window = rng.stream("up").uniform(-1, 1, size=(2, 3, 4, 4)).astype(np.float32)
    up[:, :, :4, :4] = window
    grads = layer.backward(cache, Tensor4(up))

    ref = np.zeros((3, 2, 3, 3), dtype=np.float64)
    for o in range(3):
        for c in range(2):
            for dh in range(3):
                for dw in range(3):
                    ref[o, c, dh, dw] = np.sum(
                        window[:, o].astype(np.float64)
                        * x.data[:, c, dh:dh + 4, dw:dw + 4])
    got = grads.agg_w.reshape(3, 2, 3, 3)
    assert _rel_dev(got, ref.astype(np.float32)) < 1e-5


# -- audits ------------------------------------------------------------------------


def test_param_count_hand_audit():
    layer = LdconvLayer.create(5, 16, 32)
    assert layer.param_count() == 2 * 5 * 16 * 9 + 2 * 5 + 32 * 16 * 5 + 32
    assert layer.param_count() == 4042


def test_param_count_growth_is_linear():
    counts = [LdconvLayer.create(n, 16, 32).param_count() for n in range(1, 17)]
    deltas = {b - a for a, b in zip(counts, counts[1:])}
    assert deltas == {2 * 16 * 9 + 2 + 32 * 16}
    assert deltas == {802}


def test_param_count_variants():
    no_bias = LdconvLayer.create(5, 16, 32, agg_bias=False)
    assert no_bias.param_count() == 4042 - 32
    post = LdconvLayer.create(5, 16, 32, post="normalize+activation")
    # the post stage drops the aggregation bias and adds scale+shift
    assert post.param_count() == 4042 - 32 + 2 * 32


def test_flops_estimate_formula():
    layer = LdconvLayer.create(5, 16, 32, stride=2)
    h_out = w_out = (32 - 1) // 2 + 1
    cells = h_out * w_out
    expected = (2 * 5 * 16 * 9 + 8 * 16 * 5 + 32 * 16 * 5) * cells
    assert layer.flops_estimate(32, 32) == expected


# -- dtype and checkpoints -----------------------------------------------------------


def test_astype_round_trip_agrees():
    layer = _randomized(LdconvLayer.create(4, 2, 3, rng=Rng(9)), Rng(9))
    x32 = rand_uniform((1, 2, 5, 5), Rng(10))
    y32 = layer.forward(x32)[0].data
    y64 = layer.astype(np.float64).forward(x32.astype(np.float64))[0].data
    assert _rel_dev(y32.astype(np.float64), y64) < 1e-5


def test_layer_checkpoint_round_trip(tmp_path):
    layer = _randomized(
        LdconvLayer.create(5, 2, 3, stride=2, padding=1,
                           post="normalize+activation", rng=Rng(11)), Rng(11))
    path = tmp_path / "layer.ldt"
    save_layer(layer, path)
    assert (tmp_path / "layer.ldt.json").exists()
    back = load_layer(path)
    assert (back.n, back.c_in, back.c_out) == (5, 2, 3)
    assert (back.stride, back.padding) == (2, 1)
    assert back.post == "normalize+activation"
    assert back.geometry.coords == layer.geometry.coords
    x = rand_uniform((2, 2, 6, 6), Rng(12))
    assert np.array_equal(layer.forward(x)[0].data, back.forward(x)[0].data)


def test_layer_checkpoint_custom_geometry(tmp_path):
    geo = KernelGeometry(((0, 1), (1, 0), (1, 1), (1, 2), (2, 1)))
    layer = LdconvLayer.create(5, 1, 2, geometry=geo, rng=Rng(13))
    path = tmp_path / "plus.ldt"
    save_layer(layer, path)
    back = load_layer(path)
    assert back.geometry.coords == geo.coords
