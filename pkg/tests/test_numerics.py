import numpy as np
import pytest

from tests import oracles
from tvase import numerics as nx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_conv2d_matches_loop_oracle_strided(rng):
    x = rng.standard_normal((32, 4, 41))
    w = rng.standard_normal((64, 32, 2, 5))
    b = rng.standard_normal(64)
    y = nx.conv2d(x, w, b, stride=(1, 4), freq_pad=2)
    assert y.shape == (64, 4, 11)
    np.testing.assert_allclose(y, oracles.conv2d_loop(x, w, b, 4, 2), rtol=1e-10, atol=1e-10)


def test_conv2d_first_layer_shape(rng):
    x = rng.standard_normal((2, 6, 161))
    y = nx.conv2d(x, rng.standard_normal((16, 2, 2, 5)), None, freq_pad=2)
    assert y.shape == (16, 6, 161)


def test_conv2d_identity():
    x = np.array([[[3.5]]])
    assert nx.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))[0, 0, 0] == 3.5


def test_conv2d_history_continues_sequence(rng):
    x = rng.standard_normal((3, 9, 12))
    w = rng.standard_normal((4, 3, 2, 3))
    full = nx.conv2d(x, w, freq_pad=1)
    part = nx.conv2d(x[:, 5:], w, freq_pad=1, history=x[:, 4:5])
    np.testing.assert_allclose(part, full[:, 5:], rtol=1e-12, atol=1e-12)


def test_conv2d_shape_error_names_axis(rng):
    with pytest.raises(nx.ShapeError) as e:
        nx.conv2d(rng.standard_normal((3, 4, 10)), rng.standard_normal((2, 5, 2, 3)))
    assert e.value.axis == "channels"
    with pytest.raises(nx.ShapeError, match="time stride"):
        nx.conv2d(rng.standard_normal((3, 4, 10)), rng.standard_normal((2, 3, 2, 3)), stride=(2, 1))


def test_conv2d_block_gives_length_independent_frames(rng):
    x = rng.standard_normal((8, 70, 20)).astype(np.float32)
    w = rng.standard_normal((16, 8, 2, 5)).astype(np.float32)
    long = nx.conv2d(x, w, freq_pad=2)
    short = nx.conv2d(x[:, :37], w, freq_pad=2)
    assert np.array_equal(long[:, :37], short)


def test_conv1d_depthwise_matches_loop(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((4, 1, 3))
    np.testing.assert_allclose(nx.conv1d(x, w, groups=4), oracles.conv1d_loop(x, w, groups=4), rtol=1e-12)


def test_conv1d_grouped_and_dense_match_loop(rng):
    x = rng.standard_normal((10, 7))
    w = rng.standard_normal((6, 5, 1))
    b = rng.standard_normal(6)
    np.testing.assert_allclose(nx.conv1d(x, w, b, groups=2), oracles.conv1d_loop(x, w, b, 2), rtol=1e-12)
    w3 = rng.standard_normal((3, 10, 3))
    np.testing.assert_allclose(nx.conv1d(x, w3), oracles.conv1d_loop(x, w3), rtol=1e-12)


def test_conv1d_trivial_cases(rng):
    x = rng.standard_normal((5, 8))
    np.testing.assert_array_equal(nx.conv1d(x, np.eye(5)[:, :, None]), x)
    w = np.tile(np.array([0.0, 0.0, 1.0]), (5, 1, 1))
    np.testing.assert_array_equal(nx.conv1d(x, w, groups=5), x)


@pytest.mark.parametrize("c_in,c_out,f_in,stride,pad,f_out", [
    (64, 64, 5, 2, 1, 11), (64, 32, 11, 4, 2, 41), (32, 16, 41, 4, 2, 161), (16, 2, 161, 1, 2, 161),
])
def test_transposed_conv_ladder_matches_scatter(rng, c_in, c_out, f_in, stride, pad, f_out):
    x = rng.standard_normal((c_in, 3, f_in))
    w = rng.standard_normal((c_in, c_out, 2, 5))
    b = rng.standard_normal(c_out)
    y = nx.transposed_conv2d(x, w, b, stride=(1, stride), freq_pad=pad)
    assert y.shape == (c_out, 3, f_out)
    np.testing.assert_allclose(y, oracles.transposed_conv2d_scatter(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


def test_transposed_conv_single_impulse_places_kernel(rng):
    w = rng.standard_normal((1, 2, 2, 5))
    x = np.zeros((1, 4, 3))
    x[0, 1, 1] = 1.0
    y = nx.transposed_conv2d(x, w, stride=(1, 2), freq_pad=0)
    expected = np.zeros((2, 4, 9))
    expected[:, 1:3, 2:7] = w[0]
    np.testing.assert_allclose(y, expected, atol=1e-15)


def test_transposed_conv_rejects_bad_size(rng):
    with pytest.raises(nx.ShapeError):
        nx.transposed_conv2d(rng.standard_normal((1, 2, 1)), rng.standard_normal((1, 1, 2, 1)), freq_pad=1)


def test_batchnorm_and_activations():
    x = np.array([[1.0, -2.0], [2.0, 2.0]])
    one, zero = np.ones(2), np.zeros(2)
    np.testing.assert_array_equal(nx.batchnorm_infer(x, one, zero, zero, one, eps=0.0), x)
    y = nx.batchnorm_infer(np.full((2, 3), 2.0), np.array([5.0, -3.0]), np.array([0.7, 1.1]), np.full(2, 2.0), one)
    np.testing.assert_array_equal(y, np.array([[0.7] * 3, [1.1] * 3]))
    assert nx.prelu(np.array([-1.0]), 0.25)[0] == -0.25
    assert nx.prelu(np.array([3.0]), 7.0)[0] == 3.0
    assert nx.sigmoid(0.0) == 0.5
    assert np.isfinite(nx.sigmoid(np.array([-1e4, 1e4]))).all()


def test_masked_softmax_cases(rng):
    np.testing.assert_array_equal(nx.masked_softmax(np.zeros((1, 1)), 1), [[1.0]])
    p = nx.masked_softmax(np.zeros((3, 3)), 2)
    np.testing.assert_allclose(p[2], [0, 0.5, 0.5])
    s = rng.standard_normal((5, 5))
    p = nx.masked_softmax(s, 3)
    for i in range(5):
        allowed = [j for j in range(5) if 0 <= i - j <= 2]
        e = np.exp(s[i, allowed])
        np.testing.assert_allclose(p[i, allowed], e / e.sum(), rtol=1e-12)
        assert np.all(p[i, [j for j in range(5) if j not in allowed]] == 0.0)


def test_xavier():
    assert nx.xavier_bound(3, 3) == 1.0
    a = nx.xavier_uniform((4,), 3, 3, nx.Rng(5).stream(0))
    b = nx.xavier_uniform((4,), 3, 3, nx.Rng(5).stream(0))
    assert np.array_equal(a, b)
    big = nx.xavier_uniform((100_000,), 10, 30, nx.Rng(0).stream(1)).astype(np.float64)
    assert abs(big.var() / (2 / 40) - 1) < 0.05
    assert np.abs(big).max() <= nx.xavier_bound(10, 30)


def test_rng_streams_independent_of_order():
    r = nx.Rng(9)
    first = r.stream(3).random(4)
    r.stream(0).random(1000)
    assert np.array_equal(first, r.stream(3).random(4))
    assert not np.array_equal(first, r.stream(4).random(4))


def test_tail_frames(rng):
    h = rng.standard_normal((2, 3))
    x = rng.standard_normal((2, 1))
    np.testing.assert_array_equal(nx.tail_frames(h, x, 3), np.concatenate([h[:, 1:], x], axis=1))
    assert nx.tail_frames(None, x, 0) is None
