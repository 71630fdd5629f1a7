import math

import numpy as np
import pytest

from cvgeoloc.encoding import add_posenc, build_posenc, encode_click
from cvgeoloc.errors import ConfigError, InputError, ShapeError
from cvgeoloc.numerics import Tensor

from oracles import posenc_loops


def test_origin_pattern_is_exact():
    t = build_posenc(64, 5, 7).table
    origin = t[:, 0, 0].reshape(-1, 4)
    assert np.array_equal(origin, np.tile([0.0, 1.0, 0.0, 1.0], (16, 1)))


def test_first_channel_at_x1():
    t = build_posenc(4, 1, 2).table
    assert abs(t[0, 0, 1] - math.sin(1.0)) < 1e-15
    assert round(t[0, 0, 1], 6) == 0.841471


def test_x_is_column_y_is_row():
    t = build_posenc(4, 3, 3).table
    assert t[0, 0, 2] == math.sin(2.0) and t[2, 0, 2] == 0.0
    assert t[2, 2, 0] == math.sin(2.0) and t[0, 2, 0] == 0.0


def test_matches_loop_oracle():
    assert np.max(np.abs(build_posenc(16, 4, 6).table - posenc_loops(16, 4, 6))) < 1e-15


def test_values_bounded():
    t = build_posenc(64, 16, 16).table
    assert t.min() >= -1.0 and t.max() <= 1.0


def test_positions_are_distinct():
    # positions of any H, W <= 16 grid are a subset of the 16 x 16 grid
    vecs = build_posenc(64, 16, 16).table.reshape(64, -1).T
    assert len({v.tobytes() for v in vecs}) == 256
    gaps = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1) + np.eye(256)
    assert gaps.min() > 1e-3


@pytest.mark.parametrize("d", [0, 6, 30, -4])
def test_bad_d_model(d):
    with pytest.raises(ConfigError):
        build_posenc(d, 4, 4)


def test_pure_and_byte_identical():
    a = build_posenc(32, 5, 6).table.tobytes()
    b = build_posenc(32, 5, 6).table.tobytes()
    assert a == b
    assert not build_posenc(32, 5, 6).table.flags.writeable


def test_add_posenc_examples():
    pe = build_posenc(8, 3, 4)
    zero = add_posenc(Tensor(np.zeros((8, 3, 4))), pe).data
    assert np.array_equal(zero, pe.table)
    f = np.random.default_rng(0).standard_normal((8, 3, 4))
    twice = add_posenc(add_posenc(Tensor(f), pe), pe).data
    assert np.allclose(twice, f + 2 * pe.table, atol=1e-15)
    once = add_posenc(Tensor(f), pe).data
    assert once[5, 2, 1] == f[5, 2, 1] + pe.table[5, 2, 1]


def test_add_posenc_shape_mismatch():
    with pytest.raises(ShapeError):
        add_posenc(Tensor(np.zeros((4, 3, 4))), build_posenc(8, 3, 4))
    with pytest.raises(ShapeError):
        add_posenc(Tensor(np.zeros((8, 4, 4))), build_posenc(8, 3, 4))


def test_click_peak_and_sigma_distance():
    c = encode_click((10, 7), 20, 30, sigma=3.0).channel
    assert c.shape == (1, 20, 30)
    assert c[0, 7, 10] == 1.0 and c.max() == 1.0
    assert abs(c[0, 7, 13] - math.exp(-0.5)) < 1e-15
    assert round(float(c[0, 10, 10]), 4) == 0.6065


def test_click_peak_at_nearest_pixel_for_off_grid_click():
    c = encode_click((4.3, 2.8), 8, 8).channel[0]
    assert np.unravel_index(np.argmax(c), c.shape) == (3, 4)


def test_click_monotone_in_distance():
    x0, y0 = 12.0, 9.0
    c = encode_click((x0, y0), 24, 24, sigma=2.5).channel[0]
    ys, xs = np.mgrid[0:24, 0:24]
    dist = np.hypot(xs - x0, ys - y0).ravel()
    vals = c.ravel()[np.argsort(dist, kind="stable")]
    assert np.all(np.diff(vals) <= 0)


def test_click_mass_shrinks_with_sigma():
    sums = [encode_click((8, 8), 16, 16, sigma=s).channel.sum() for s in (4.0, 2.0, 1.0, 0.5, 0.1)]
    assert all(a > b for a, b in zip(sums, sums[1:]))
    assert abs(sums[-1] - 1.0) < 1e-12


@pytest.mark.parametrize("click", [(-1, 3), (3, -0.5), (16, 3), (3, 12)])
def test_click_outside_image(click):
    with pytest.raises(InputError):
        encode_click(click, 12, 16)


def test_click_bad_sigma():
    with pytest.raises(ConfigError):
        encode_click((1, 1), 4, 4, sigma=0)
