import numpy as np
import pytest
import scipy.sparse as sp

from naflow import (
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    LeakyReLU,
    MaxPool2d,
    ReLU,
    backprop_feature_maps,
    build_graph,
    compute_retention,
    count_neuron_times,
    forward_trace,
)
from naflow.errors import IndexOutOfRange
from naflow.forward import batchnorm_forward, layer_forward
from naflow.nabp import (
    RetentionSet,
    assemble_conv_jacobian,
    compose_frozen_affine,
    invert_affine_square,
    invert_batchnorm,
    invert_conv,
    invert_leakyrelu,
    invert_maxpool,
    invert_relu,
)
from naflow.tensor import fd_jacobian
from conftest import PEAK_CELLS, make_counting_image, make_counting_model, make_toy_classifier


class TestConvJacobian:
    def test_1x1_conv_is_scaled_identity(self):
        conv = Conv2d(1, 1, (1, 1), (1, 1), (0, 0), np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        cj = assemble_conv_jacobian(conv, (1, 2, 2), (1, 2, 2))
        assert np.array_equal(cj.matrix.toarray(), 2.0 * np.eye(4))

    def test_1d_kernel_banded_rows(self):
        # kernel [1, 2] over a length-3 row, no padding
        conv = Conv2d(1, 1, (1, 2), (1, 1), (0, 0),
                      np.array([1.0, 2.0]).reshape(1, 1, 1, 2), np.zeros(1))
        cj = assemble_conv_jacobian(conv, (1, 1, 3), (1, 1, 2))
        assert np.array_equal(cj.matrix.toarray(), [[1, 2, 0], [0, 1, 2]])

    @pytest.mark.parametrize("seed", range(6))
    def test_fd_oracle_random_configs(self, seed):
        rng = np.random.default_rng(seed)
        ci = int(rng.integers(1, 4))
        co = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        h = int(rng.integers(max(k - 2 * pad, 1), 8))
        conv = Conv2d(co, ci, (k, k), (stride, stride), (pad, pad),
                      rng.standard_normal((co, ci, k, k)), rng.standard_normal(co))
        in_shape = (ci, h, h)
        out_shape = layer_forward(conv, np.zeros(in_shape)).shape
        cj = assemble_conv_jacobian(conv, in_shape, out_shape)
        numeric = fd_jacobian(
            lambda v: layer_forward(conv, v.reshape(in_shape)).reshape(-1),
            rng.standard_normal(int(np.prod(in_shape))),
        )
        assert np.max(np.abs(numeric - cj.matrix.toarray())) < 1e-4

    def test_affine_consistency_on_trace(self, toy_classifier):
        # jacobian @ flatten(A^l) + bias reproduces flatten(A^{l+1})
        trace = forward_trace(
            toy_classifier, np.random.default_rng(0).standard_normal((3, 16, 16))
        )
        for l, layer in enumerate(toy_classifier.layers, start=1):
            if not isinstance(layer, Conv2d):
                continue
            cj = assemble_conv_jacobian(
                layer, toy_classifier.boundary_shapes[l - 1],
                toy_classifier.boundary_shapes[l],
            )
            y = cj.matrix @ trace.activations[l - 1].reshape(-1) + cj.bias_vector
            assert np.max(np.abs(y - trace.activations[l].reshape(-1))) < 1e-9


class TestInvertAffineSquare:
    def test_diagonal(self):
        jac = sp.csr_matrix(2.0 * np.eye(4))
        x, diag = invert_affine_square(jac, np.zeros(4), np.array([2.0, 4.0, 6.0, 8.0]), 4)
        assert np.allclose(x, [1, 2, 3, 4])
        assert not diag.substituted and not diag.fallback

    def test_forced_row_substitution(self):
        jac = sp.csr_matrix(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        x, diag = invert_affine_square(jac, np.zeros(3), np.array([2.0, 2.0, 5.0]), 2)
        assert diag.substituted and not diag.fallback
        assert diag.rows.tolist() == [0, 2]
        assert np.allclose(x, [2, 5])

    def test_ridge_fallback_when_rank_deficient(self):
        jac = sp.csr_matrix(np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]))
        x, diag = invert_affine_square(jac, np.zeros(3), np.array([1.0, 2.0, 3.0]), 2)
        assert diag.fallback
        assert np.all(np.isfinite(x))

    def test_forward_round_trip_oracle(self):
        rng = np.random.default_rng(9)
        full = rng.standard_normal((12, 8))
        offset = rng.standard_normal(12)
        y = rng.standard_normal(12)
        x, diag = invert_affine_square(sp.csr_matrix(full), offset, y, 8)
        sel = diag.rows
        assert np.max(np.abs(full[sel] @ x + offset[sel] - y[sel])) < 1e-8


class TestComposeFrozenAffine:
    def test_single_conv_degenerate(self, toy_classifier):
        trace = forward_trace(
            toy_classifier, np.random.default_rng(1).standard_normal((3, 16, 16))
        )
        comp = compose_frozen_affine(toy_classifier, trace, 5)
        assert comp.depth == 1
        layer = toy_classifier.layers[4]
        cj = assemble_conv_jacobian(
            layer, toy_classifier.boundary_shapes[4], toy_classifier.boundary_shapes[5]
        )
        assert np.array_equal(comp.offset, cj.bias_vector)
        assert (comp.jacobian != cj.matrix).nnz == 0

    def test_all_positive_relu_is_transparent(self):
        # shrink (4 -> 2) then widen (2 -> 4) so the composite must span the
        # ReLU in between; positive weights and inputs keep every mask true
        conv_a = Conv2d(2, 1, (2, 2), (2, 2), (0, 0),
                        np.full((2, 1, 2, 2), 0.25), np.array([1.0, 2.0]))
        conv_b = Conv2d(4, 2, (1, 1), (1, 1), (0, 0),
                        np.ones((4, 2, 1, 1)), np.zeros(4))
        model = build_graph("m", (1, 2, 2), [conv_a, ReLU(), conv_b],
                            ClassifierHead(np.eye(4), np.zeros(4)))
        trace = forward_trace(model, np.full((1, 2, 2), 3.0))
        comp = compose_frozen_affine(model, trace, 1)
        assert comp.depth == 3
        ja = assemble_conv_jacobian(conv_a, (1, 2, 2), (2, 1, 1))
        jb = assemble_conv_jacobian(conv_b, (2, 1, 1), (4, 1, 1))
        expected = (jb.matrix @ ja.matrix).toarray()
        assert np.max(np.abs(comp.jacobian.toarray() - expected)) < 1e-12
        expected_off = jb.matrix @ ja.bias_vector + jb.bias_vector
        assert np.max(np.abs(comp.offset - expected_off)) < 1e-12

    def test_frozen_composite_reproduces_trace(self, toy_classifier):
        trace = forward_trace(
            toy_classifier, np.random.default_rng(2).standard_normal((3, 16, 16))
        )
        for l in (1, 2, 3):
            comp = compose_frozen_affine(toy_classifier, trace, l)
            x = trace.activations[l - 1].reshape(-1)
            got = comp.jacobian @ x + comp.offset
            want = trace.activations[l - 1 + comp.depth].reshape(-1)
            assert np.max(np.abs(got - want)) < 1e-8


class TestKindInverses:
    def test_invert_conv_hand_example(self):
        conv = Conv2d(1, 1, (1, 1), (1, 1), (0, 0), np.full((1, 1, 1, 1), 2.0),
                      np.array([1.0]))
        model = build_graph("m", (1, 2, 2), [conv], ClassifierHead(np.eye(1), np.zeros(1)))
        trace = forward_trace(model, np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        stack = backprop_feature_maps(model, trace)
        assert np.array_equal(stack.maps[1], [[[3.0, 5.0], [7.0, 9.0]]])
        assert np.allclose(stack.maps[0], [[[1.0, 2.0], [3.0, 4.0]]])

    def test_identity_conv_passthrough(self):
        conv = Conv2d(1, 1, (1, 1), (1, 1), (0, 0), np.ones((1, 1, 1, 1)), np.zeros(1))
        model = build_graph("m", (1, 2, 2), [conv], ClassifierHead(np.eye(1), np.zeros(1)))
        trace = forward_trace(model, np.array([[[1.0, -2.0], [0.5, 4.0]]]))
        stack = backprop_feature_maps(model, trace)
        assert np.allclose(stack.maps[0], stack.maps[1])

    def test_qlt_p_composite_round_trip(self):
        # stride-2 conv shrinks the neuron count, the following 1x1 conv
        # expands channels back above it
        rng = np.random.default_rng(5)
        conv_a = Conv2d(2, 1, (2, 2), (2, 2), (0, 0),
                        rng.standard_normal((2, 1, 2, 2)), rng.standard_normal(2))
        conv_b = Conv2d(4, 2, (1, 1), (1, 1), (0, 0),
                        rng.standard_normal((4, 2, 1, 1)), rng.standard_normal(4))
        model = build_graph("m", (1, 4, 4), [conv_a, conv_b],
                            ClassifierHead(np.eye(4), np.zeros(4)))
        trace = forward_trace(model, rng.standard_normal((1, 4, 4)))
        stack = backprop_feature_maps(model, trace)
        diag = stack.diagnostics[1]
        # the stacked map routes through the 8-neuron middle boundary, so the
        # 16x16 system is rank-deficient and resolves via the regularized solve
        assert diag.fallback
        assert diag.residual < 1e-6
        comp = compose_frozen_affine(model, trace, 1)
        assert comp.depth == 2
        fwd = comp.jacobian @ stack.maps[0].reshape(-1) + comp.offset
        target = stack.maps[2].reshape(-1)
        assert np.max(np.abs(fwd - target)) < 1e-6

    def test_invert_batchnorm_identity(self):
        layer = BatchNorm2d(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), 0.0)
        y = np.array([[[1.0, -2.0]]])
        x, clamped = invert_batchnorm(layer, y)
        assert np.allclose(x, y) and clamped == ()

    def test_invert_batchnorm_hand_example(self):
        layer = BatchNorm2d(np.array([2.0]), np.array([3.0]), np.array([1.0]),
                            np.array([4.0]), 0.0)
        x, _ = invert_batchnorm(layer, np.array([[[5.0]]]))
        assert np.allclose(x, [[[3.0]]])

    def test_batchnorm_round_trip_random(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            c = int(rng.integers(1, 5))
            layer = BatchNorm2d(
                np.sign(rng.standard_normal(c)) * rng.uniform(1e-3, 2.0, c),
                rng.standard_normal(c), rng.standard_normal(c),
                rng.uniform(0.1, 3.0, c), 1e-5,
            )
            y = rng.standard_normal((c, 3, 3))
            x, _ = invert_batchnorm(layer, y)
            assert np.max(np.abs(batchnorm_forward(layer, x) - y)) < 1e-10

    def test_batchnorm_zero_scale_clamped(self):
        layer = BatchNorm2d(np.array([0.0]), np.zeros(1), np.zeros(1), np.ones(1), 0.0)
        x, clamped = invert_batchnorm(layer, np.array([[[1.0]]]))
        assert clamped == (0,)
        assert np.all(np.isfinite(x))

    def test_invert_relu_passthrough_bitwise(self):
        y = np.array([[[0.0, 2.0, 5.0], [-1.0, 0.5, -3.0]]])
        assert np.array_equal(invert_relu(y), y)

    def test_invert_leakyrelu(self):
        layer = LeakyReLU(0.1)
        assert np.allclose(invert_leakyrelu(layer, np.array([-0.5])), [-5.0])
        y = np.array([0.0, 1.0, 2.0])
        assert np.array_equal(invert_leakyrelu(layer, y), y)

    def test_leakyrelu_exact_bijection(self):
        layer = LeakyReLU(0.3)
        y = np.random.default_rng(7).standard_normal((2, 3, 3))
        x = invert_leakyrelu(layer, y)
        assert np.max(np.abs(layer_forward(layer, x) - y)) < 1e-15

    def test_invert_maxpool_scatter(self):
        layer = MaxPool2d((2, 2), (2, 2))
        out = invert_maxpool(layer, np.array([1]), np.array([[[7.0]]]), (1, 2, 2))
        assert np.array_equal(out, [[[0.0, 7.0], [0.0, 0.0]]])

    def test_invert_maxpool_bad_index(self):
        with pytest.raises(IndexOutOfRange):
            invert_maxpool(MaxPool2d((2, 2), (2, 2)), np.array([9]),
                           np.array([[[7.0]]]), (1, 2, 2))

    def test_maxpool_round_trip_nonnegative(self):
        layer = MaxPool2d((2, 2), (2, 2))
        x = np.abs(np.random.default_rng(8).standard_normal((2, 4, 4)))
        y, idx = __import__("naflow.forward", fromlist=["maxpool_forward"]).maxpool_forward(layer, x)
        scattered = invert_maxpool(layer, idx, y, (2, 4, 4))
        again, _ = __import__("naflow.forward", fromlist=["maxpool_forward"]).maxpool_forward(layer, scattered)
        assert np.array_equal(again, y)


class TestBackprop:
    def test_single_relu_model(self):
        model = build_graph("m", (1, 1, 2), [ReLU()],
                            ClassifierHead(np.eye(1), np.zeros(1)))
        trace = forward_trace(model, np.array([[[-1.0, 2.0]]]))
        stack = backprop_feature_maps(model, trace)
        assert np.array_equal(stack.maps[0], trace.activations[1])

    def test_top_map_bitwise_equals_trace(self, toy_classifier):
        trace = forward_trace(
            toy_classifier, np.random.default_rng(9).standard_normal((3, 16, 16))
        )
        stack = backprop_feature_maps(toy_classifier, trace)
        assert np.array_equal(stack.maps[-1], trace.activations[-1])

    def test_stack_shapes_match_boundaries(self, toy_classifier):
        trace = forward_trace(
            toy_classifier, np.random.default_rng(10).standard_normal((3, 16, 16))
        )
        stack = backprop_feature_maps(toy_classifier, trace)
        for b, m in enumerate(stack.maps):
            assert m.shape == toy_classifier.boundary_shapes[b]


def brute_force_conv_retained_inputs(in_shape, kernel, retained_outputs, out_w):
    """Enumeration oracle: union of the 3x3 receptive fields of the retained
    output positions of an unpadded stride-1 conv."""
    _, h, w = in_shape
    kh, kw = kernel
    hit = set()
    for oh, ow in retained_outputs:
        for a in range(kh):
            for b in range(kw):
                hit.add((oh + a) * w + (ow + b))
    return hit


class TestRetentionAndCounts:
    def test_single_maxpool_retains_one_of_four(self):
        model = build_graph("m", (1, 2, 2), [MaxPool2d((2, 2), (2, 2))],
                            ClassifierHead(np.eye(1), np.zeros(1)))
        trace = forward_trace(model, np.array([[[1.0, 3.0], [2.0, 0.0]]]))
        ret = compute_retention(model, trace)
        assert ret.masks[0].sum() == 1
        assert bool(ret.masks[0][0, 0, 1])

    def test_relu_mask_gates_retention(self):
        model = build_graph("m", (1, 1, 2), [ReLU()],
                            ClassifierHead(np.eye(1), np.zeros(1)))
        trace = forward_trace(model, np.array([[[-1.0, 2.0]]]))
        ret = compute_retention(model, trace)
        assert ret.masks[0].reshape(-1).tolist() == [False, True]

    def test_distinct_33_matches_enumeration(self):
        model = make_counting_model()
        trace = forward_trace(model, make_counting_image())
        ret = compute_retention(model, trace)
        # pool argmaxes land where the image peaks were planted
        retained_outputs = [(r - 1, c - 1) for r, c in PEAK_CELLS]
        oracle = brute_force_conv_retained_inputs((1, 6, 6), (3, 3), retained_outputs, 4)
        assert len(oracle) == 33
        assert ret.masks[0].sum() == len(oracle)
        assert set(np.nonzero(ret.masks[0].reshape(-1))[0].tolist()) == oracle

    def test_counting_neuron_times(self):
        model = make_counting_model()
        trace = forward_trace(model, make_counting_image())
        report = count_neuron_times(model, trace, 1)
        assert report.total_neuron_times == 144
        assert report.decision_neuron_times == 36
        assert report.abandoned_neuron_times == 108
        assert report.distinct_decision_neurons == 33

    def test_all_outputs_retained(self):
        # no pooling after the conv: the top boundary keeps all 16 outputs
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        model = build_graph(
            "m", (1, 6, 6),
            [Conv2d(1, 1, (3, 3), (1, 1), (0, 0), w, np.zeros(1))],
            ClassifierHead(np.eye(1), np.zeros(1)),
        )
        trace = forward_trace(model, make_counting_image())
        report = count_neuron_times(model, trace, 1)
        assert report.decision_neuron_times == 144
        assert report.abandoned_neuron_times == 0

    def test_zero_outputs_retained(self):
        model = make_counting_model()
        trace = forward_trace(model, make_counting_image())
        none = RetentionSet(masks=tuple(
            np.zeros(s, dtype=bool) for s in model.boundary_shapes
        ))
        report = count_neuron_times(model, trace, 1, none)
        assert report.decision_neuron_times == 0
        assert report.abandoned_neuron_times == 144

    def test_incidence_conservation_unpadded(self):
        model = make_counting_model()
        trace = forward_trace(model, make_counting_image())
        report = count_neuron_times(model, trace, 1)
        layer = model.layers[0]
        q = int(np.prod(model.boundary_shapes[1]))
        rf = layer.kernel[0] * layer.kernel[1] * layer.in_channels
        assert report.total_neuron_times == q * rf

    def test_elementwise_receptive_field_one(self, toy_classifier):
        trace = forward_trace(
            toy_classifier, np.random.default_rng(12).standard_normal((3, 16, 16))
        )
        report = count_neuron_times(toy_classifier, trace, 3)  # the ReLU
        assert report.total_neuron_times == int(np.prod(toy_classifier.boundary_shapes[3]))
