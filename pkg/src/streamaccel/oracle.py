"""Binary64 golden references for every layer type."""

from __future__ import annotations

import numpy as np

from .layout import GeometryError, Tensor, output_side, pads4


def as_f64(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.array.astype(np.float64)
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise GeometryError(f"expected (h, w, c) array, got {a.shape}")
    return a


def _pad(a: np.ndarray, p) -> np.ndarray:
    t, l, b, r = pads4(p)
    return np.pad(a, ((t, b), (l, r), (0, 0)))


def _windows(a: np.ndarray, k: int, s: int) -> np.ndarray:
    h, w, c = a.shape
    oh = output_side(h, k, 0, s)
    ow = output_side(w, k, 0, s)
    st = a.strides
    return np.lib.stride_tricks.as_strided(
        a,
        shape=(oh, ow, k, k, c),
        strides=(st[0] * s, st[1] * s, st[0], st[1], st[2]),
        writeable=False,
    )


def conv_ref(x, weights, biases, k: int, s: int, p=0) -> np.ndarray:
    """Convolution plus bias, no activation.

    ``weights`` is (n, k, k, ci) with ci the input channel count, ``biases``
    is (n,). Returns a float64 (oh, ow, n) array.
    """
    a = _pad(as_f64(x), p)
    w = np.asarray(weights, np.float64)
    b = np.asarray(biases, np.float64)
    if w.ndim != 4 or w.shape[1:3] != (k, k) or w.shape[3] != a.shape[2]:
        raise GeometryError(
            f"weights {w.shape} do not match k={k}, channels={a.shape[2]}"
        )
    if b.shape != (w.shape[0],):
        raise GeometryError("one bias per filter required")
    win = _windows(a, k, s)
    return np.einsum("yxijc,nijc->yxn", win, w, optimize=True) + b


def maxpool_ref(x, k: int, s: int, p=0) -> np.ndarray:
    a = _pad(as_f64(x), p)
    return _windows(a, k, s).max(axis=(2, 3))


def avgpool_ref(x, k: int, s: int, p=0) -> np.ndarray:
    a = _pad(as_f64(x), p)
    return _windows(a, k, s).sum(axis=(2, 3)) / (k * k)


def relu_ref(x) -> np.ndarray:
    if isinstance(x, Tensor):
        bits = x.bits()
        out = np.where(bits & 0x8000, np.uint16(0), bits).astype(np.uint16)
        return out.view(np.float16).astype(np.float64)
    a = np.asarray(x, np.float64)
    return np.where(a > 0.0, a, 0.0)


def softmax_ref(logits) -> np.ndarray:
    z = np.asarray(logits, np.float64).reshape(-1)
    e = np.exp(z - z.max())
    return e / e.sum()
