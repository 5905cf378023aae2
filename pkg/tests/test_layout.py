import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamaccel.layout import (
    GeometryError, Tensor, concat_channels, crop_surface, im2col_lines, im2col_tiles,
    line_to_int, output_side, pad_channels, pad_surface, pool_lines, read_tensor,
    serdes_pack, serdes_unpack, write_tensor,
)


def test_tensor_is_channel_lowest():
    t = Tensor.from_flat(np.arange(2 * 3 * 4), width=3, height=2, channels=4)
    assert t.dims == (4, 2, 3)
    # element (y=1, x=2, c=3) is the last one in the flat payload
    assert t.array[1, 2, 3] == t.data[-1] == 23
    assert t.data[1] == t.array[0, 0, 1]
    with pytest.raises(GeometryError):
        Tensor.from_flat(np.zeros(5), 2, 2, 1)


def test_tensor_equality_is_bitwise():
    a = Tensor(np.array([[[0.0]]]))
    b = Tensor(np.array([[[-0.0]]]))
    assert a != b
    assert a == Tensor(np.zeros((1, 1, 1)))


@pytest.mark.parametrize("args,out", [((227, 3, 0, 2), 113), ((57, 3, 0, 2), 28),
                                      ((56, 3, 1, 1), 56), ((14, 14, 0, 1), 1)])
def test_output_side(args, out):
    assert output_side(*args) == out


def test_output_side_rejects_ragged_geometry():
    with pytest.raises(GeometryError):
        output_side(56, 3, 0, 2)
    with pytest.raises(GeometryError):
        output_side(2, 3, 0, 1)


def test_pad_surface():
    t = Tensor(np.array([[[5.0]]]))
    assert pad_surface(t, 0) is t
    p = pad_surface(t, 1)
    assert p.array[:, :, 0].tolist() == [[0, 0, 0], [0, 5, 0], [0, 0, 0]]
    big = Tensor(np.ones((56, 56, 128)))
    q = pad_surface(big, (0, 0, 1, 1))
    assert q.dims == (128, 57, 57)
    assert q.array[56].sum() == 0 and q.array[:, 56].sum() == 0
    assert crop_surface(q, (0, 0, 1, 1)) == big


def test_pad_channels():
    t = Tensor(np.ones((2, 2, 3)))
    p = pad_channels(t, 8)
    assert p.channels == 8
    assert p.array[..., 3:].sum() == 0 and p.array[..., :3].sum() == 12
    t64 = Tensor(np.ones((1, 1, 64)))
    assert pad_channels(t64, 8) is t64
    t1 = Tensor(np.ones((1, 1, 1)))
    assert pad_channels(t1, 1) is t1


def brute_tile(a, y, x, k, s, p):
    """Lines for one window: channel group, then kernel row, then column."""
    c = a.shape[2]
    out = []
    for g in range(c // p):
        for i in range(k):
            for j in range(k):
                out.append(a[y * s + i, x * s + j, g * p:(g + 1) * p])
    return np.array(out)


def test_im2col_single_window():
    t = Tensor(np.arange(72).reshape(3, 3, 8))
    tiles = im2col_tiles(t, 3, 1, 8)
    assert len(tiles) == 1 and tiles[0].lines.shape == (9, 8)


def test_im2col_matches_brute_force(rng):
    a = rng.standard_normal((5, 5, 16)).astype(np.float16)
    tiles = im2col_tiles(Tensor(a), 3, 2, 8)
    assert len(tiles) == 4
    for n, tile in enumerate(tiles):
        y, x = divmod(n, 2)  # output column fastest
        assert np.array_equal(tile.lines, brute_tile(a, y, x, 3, 2, 8))


def test_im2col_conv1_geometry():
    t = pad_channels(Tensor(np.zeros((227, 227, 3))), 8)
    lines = im2col_lines(t, 3, 2, 8)
    assert lines.shape == (113, 113, 9, 8)


def test_im2col_rejects_unaligned():
    with pytest.raises(GeometryError):
        im2col_lines(Tensor(np.zeros((3, 3, 3))), 3, 1, 8)


def test_pool_lines_group_major(rng):
    a = rng.standard_normal((5, 5, 16)).astype(np.float16)
    pl = pool_lines(Tensor(a), 3, 2, 8)
    assert pl.shape == (2, 2, 2, 9, 8)
    assert np.array_equal(pl[1, 0, 1, 4], a[3, 1, 8:16])


def test_serdes():
    w = np.arange(8, dtype=np.uint16)
    lines = serdes_pack(w)
    assert lines.shape == (1, 8) and lines[0, 0] == 0
    assert line_to_int(lines[0]) & 0xFFFF == 0
    assert (line_to_int(lines[0]) >> 112) == 7
    assert serdes_pack([]).shape == (0, 8)
    with pytest.raises(GeometryError):
        serdes_pack(np.arange(9))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 0xFFFF), max_size=40).map(lambda v: v[: len(v) // 8 * 8]))
def test_serdes_round_trip(words):
    assert serdes_unpack(serdes_pack(words)).tolist() == words


def test_concat(rng):
    a = Tensor(rng.standard_normal((56, 56, 64)))
    b = Tensor(rng.standard_normal((56, 56, 64)))
    assert concat_channels([a]) is a
    c = concat_channels([a, b])
    assert c.dims == (128, 56, 56)
    assert np.array_equal(c.array[..., :64], a.array)
    assert np.array_equal(c.array[..., 64:], b.array)
    with pytest.raises(GeometryError):
        concat_channels([a, Tensor(np.zeros((28, 28, 1)))])


def test_tensor_file_round_trip(tmp_path, rng):
    t = Tensor(rng.standard_normal((4, 4, 3)))
    write_tensor(tmp_path / "t.bin", t)
    assert read_tensor(tmp_path / "t.bin") == t
    (tmp_path / "bad.bin").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        read_tensor(tmp_path / "bad.bin")
