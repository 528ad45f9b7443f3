import numpy as np
import pytest

from gradcheck import check, projector
from oracles import conv2d_loops, conv_transpose2d_loops, cross_entropy_direct, linf_scan
from waveattack import functional as F
from waveattack.errors import ShapeError, ValidationError
from waveattack.tensor import Tensor


def test_conv_all_ones_sums_to_nine():
    out = F.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((2, 1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    assert np.array_equal(F.conv2d(x, w, padding=1).data, x)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (3, 2)]:
        got = F.conv2d(x, w, b, stride, pad).data
        assert np.abs(got - conv2d_loops(x, w, b, stride, pad)).max() <= 1e-6


def test_conv_output_size_formula():
    out = F.conv2d(np.zeros((1, 2, 9, 7)), np.zeros((3, 2, 3, 2)), stride=2, padding=1)
    assert out.shape == (1, 3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 2) // 2 + 1)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        F.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError):
        F.conv2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 5, 5)))


def test_conv_transpose_scalar_kernel_upsampling():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = np.array([[[[2.0]]]])
    # (2 - 1) * 2 + 1 = 3 rows; one extra row/column of output padding gives the 4x4 grid
    out = F.conv_transpose2d(x, w, stride=2, output_padding=1).data[0, 0]
    want = np.zeros((4, 4))
    want[0::2, 0::2] = [[2.0, 4.0], [6.0, 8.0]]
    assert np.array_equal(out, want)
    assert F.conv_transpose2d(x, w, stride=2).shape == (1, 1, 3, 3)


def test_conv_transpose_matches_scatter_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(2)
    for stride, pad, op in [(1, 0, 0), (2, 0, 0), (2, 1, 1), (3, 1, 2)]:
        got = F.conv_transpose2d(x, w, b, stride, pad, op).data
        assert np.abs(got - conv_transpose2d_loops(x, w, b, stride, pad, op)).max() <= 1e-9


def test_conv_transpose_zero_input_gives_bias():
    out = F.conv_transpose2d(np.zeros((1, 2, 3, 3)), np.ones((2, 4, 2, 2)), np.arange(4.0), stride=2)
    assert out.shape == (1, 4, 6, 6)
    assert np.array_equal(out.data, np.broadcast_to(np.arange(4.0).reshape(1, 4, 1, 1), out.shape))


def test_conv_transpose_rejects_bad_output_padding():
    with pytest.raises(ValidationError):
        F.conv_transpose2d(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 1, 1)), stride=2, output_padding=2)


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ShapeError):
        F.conv_transpose2d(np.zeros((1, 3, 2, 2)), np.zeros((2, 1, 2, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_adjointness(seed):
    rng = np.random.default_rng(seed)
    stride, pad = [(1, 0), (1, 1), (2, 1), (2, 0), (3, 1)][seed]
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    y_shape = F.conv2d(x, w, stride=stride, padding=pad).shape
    y = rng.standard_normal(y_shape)
    op = (9 + 2 * pad - 3) % stride
    lhs = np.vdot(F.conv2d(x, w, stride=stride, padding=pad).data, y)
    rhs = np.vdot(x, F.conv_transpose2d(y, w.transpose(0, 1, 2, 3), stride=stride, padding=pad, output_padding=op).data)
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


def test_relu_example():
    assert np.array_equal(F.relu(np.array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_linear_identity():
    x = np.random.default_rng(3).standard_normal((4, 5))
    assert np.array_equal(F.linear(x, np.eye(5), np.zeros(5)).data, x)


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        F.linear(np.zeros((2, 3)), np.zeros((4, 5)))


def test_concat_channels_shape():
    out = F.concat_channels(np.zeros((2, 3, 4, 4)), np.ones((2, 5, 4, 4)))
    assert out.shape == (2, 8, 4, 4)


def test_concat_channels_spatial_mismatch():
    with pytest.raises(ShapeError):
        F.concat_channels(np.zeros((2, 3, 4, 4)), np.ones((2, 5, 4, 3)))


def test_avg_pool():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert np.array_equal(F.avg_pool2d(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_cross_entropy_uniform():
    assert F.cross_entropy(np.zeros((3, 10)), [0, 4, 9]).data == pytest.approx(np.log(10), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 1000.0
    assert F.cross_entropy(logits, [1, 3]).data == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_direct_softmax():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, 4)
    assert abs(F.cross_entropy(logits, labels).data - cross_entropy_direct(logits, labels)) <= 1e-6


@pytest.mark.parametrize("labels", [[0, 5], [-1, 0]])
def test_cross_entropy_label_out_of_range(labels):
    with pytest.raises(ValidationError):
        F.cross_entropy(np.zeros((2, 5)), labels)


def test_linf_single_sample():
    x = Tensor(np.array([-3.0, 2.0, 1.0]), requires_grad=True)
    out = F.linf_norm(x)
    out.backward()
    assert out.data == 3.0
    assert np.array_equal(x.grad, [-1.0, 0.0, 0.0])


def test_linf_batch_mean():
    assert F.linf_norm(np.array([[1.0, -2.0], [4.0, 0.5]])).data == 3.0


def test_linf_tie_goes_to_lowest_index():
    x = Tensor(np.array([[2.0, -2.0, 1.0]]), requires_grad=True)
    F.linf_norm(x).backward()
    assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])


def test_linf_matches_scan():
    x = np.random.default_rng(5).standard_normal((6, 3, 4, 4))
    assert abs(F.linf_norm(x).data - linf_scan(x)) <= 1e-7


def test_linf_empty():
    with pytest.raises(ValidationError):
        F.linf_norm(np.zeros((0,)))


def test_clamp_values_and_gradient():
    x = Tensor(np.array([-0.5, 0.0, 0.3, 1.0, 1.5]), requires_grad=True)
    y = F.clamp(x, 0.0, 1.0)
    y.sum().backward()
    assert np.array_equal(y.data, [0.0, 0.0, 0.3, 1.0, 1.0])
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_op_gradients_small():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    p = projector((2, 3, 3, 3), 7)
    assert check(lambda x, w, b: (F.conv2d(x, w, b, 2, 1) * Tensor(p)).sum(), [x, w, b]) <= 1e-5
    wt = rng.standard_normal((2, 3, 2, 2))
    pt = projector((2, 3, 10, 10), 8)
    assert check(lambda x, w, b: (F.conv_transpose2d(x, w, b, 2) * Tensor(pt)).sum(), [x, wt, b]) <= 1e-5
    pa = projector((2, 2, 2, 2), 9)
    assert check(lambda x: (F.avg_pool2d(x, 2) * Tensor(pa)).sum(), [x[..., :4, :4]]) <= 1e-5
    pc = projector((2, 4, 5, 5), 10)
    assert check(lambda a, b: (F.concat_channels(a, b) * Tensor(pc)).sum(), [x, x + 1.0]) <= 1e-5
