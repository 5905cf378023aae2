import numpy as np
import pytest

from streamaccel import oracle
from streamaccel.layout import GeometryError, Tensor


def naive_conv(x, w, b, k, s, p):
    h, wd, c = x.shape
    xp = np.zeros((h + 2 * p, wd + 2 * p, c))
    xp[p:p + h, p:p + wd] = x
    oh = (h + 2 * p - k) // s + 1
    ow = (wd + 2 * p - k) // s + 1
    out = np.zeros((oh, ow, w.shape[0]))
    for n in range(w.shape[0]):
        for y in range(oh):
            for xx in range(ow):
                acc = b[n]
                for i in range(k):
                    for j in range(k):
                        for ch in range(c):
                            acc += xp[y * s + i, xx * s + j, ch] * w[n, i, j, ch]
                out[y, xx, n] = acc
    return out


def test_conv_trivial_cases():
    x = np.arange(9.0).reshape(3, 3, 1)
    assert np.array_equal(oracle.conv_ref(x, np.ones((1, 1, 1, 1)), [0.0], 1, 1)[..., 0], x[..., 0])
    assert oracle.conv_ref(np.ones((3, 3, 1)), np.ones((1, 3, 3, 1)), [0.0], 3, 1).item() == 9.0


@pytest.mark.parametrize("k,s,p", [(3, 1, 0), (3, 2, 1), (1, 1, 0)])
def test_conv_matches_six_loops(rng, k, s, p):
    x = rng.standard_normal((5, 5, 4))
    w = rng.standard_normal((3, k, k, 4))
    b = rng.standard_normal(3)
    assert np.allclose(oracle.conv_ref(x, w, b, k, s, p), naive_conv(x, w, b, k, s, p), rtol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(GeometryError):
        oracle.conv_ref(np.ones((3, 3, 2)), np.ones((1, 3, 3, 1)), [0.0], 3, 1)
    with pytest.raises(GeometryError):
        oracle.conv_ref(np.ones((3, 3, 1)), np.ones((2, 3, 3, 1)), [0.0], 3, 1)


def test_pools(rng):
    const = np.full((6, 6, 2), 3.0)
    assert np.all(oracle.maxpool_ref(const, 3, 1) == 3.0)
    win = np.arange(1.0, 10.0).reshape(3, 3, 1)
    assert oracle.maxpool_ref(win, 3, 1).item() == 9.0
    assert oracle.avgpool_ref(np.ones((13, 13, 1)), 13, 1).item() == 1.0
    two = np.array([[[0.0], [2.0]]]).reshape(1, 2, 1)
    assert oracle.avgpool_ref(np.pad(two, ((0, 1), (0, 0), (0, 0))), 2, 1).item() == 0.5

    x = rng.standard_normal((6, 6, 4))
    got = oracle.maxpool_ref(x, 3, 1)
    for y in range(4):
        for xx in range(4):
            assert np.array_equal(got[y, xx], x[y:y + 3, xx:xx + 3].max(axis=(0, 1)))
    g = rng.standard_normal((14, 14, 5))
    assert np.allclose(oracle.avgpool_ref(g, 14, 1)[0, 0], g.sum(axis=(0, 1)) / 196)


def test_relu_and_softmax(rng):
    assert np.all(oracle.relu_ref(-np.ones((2, 2, 2))) == 0)
    pos = np.abs(rng.standard_normal((2, 2, 2)))
    assert np.array_equal(oracle.relu_ref(pos), pos)
    mixed = rng.standard_normal((3, 3, 3))
    assert np.array_equal(oracle.relu_ref(mixed), np.maximum(mixed, 0))
    t = Tensor(np.array([[[-0.0, 1.0, -2.0]]]))
    assert oracle.relu_ref(t).tolist() == [[[0.0, 1.0, 0.0]]]

    assert np.allclose(oracle.softmax_ref(np.zeros(7)), 1 / 7)
    assert oracle.softmax_ref([4.2]).tolist() == [1.0]
    z = rng.standard_normal(10)
    direct = np.exp(z) / np.exp(z).sum()
    assert np.allclose(oracle.softmax_ref(z), direct, rtol=1e-14)
    assert np.isclose(oracle.softmax_ref([1000.0, 1000.0]).sum(), 1.0)
