import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import cvgeoloc.numerics as nx
from cvgeoloc.config import MHSAM_ORACLE_ATOL, OP_GRAD_RTOL
from cvgeoloc.errors import ShapeError
from cvgeoloc.mhsam import MHSAMParams, head_kernel, mhsam_forward, mhsam_head
from cvgeoloc.numerics import Tensor, grad_check

from oracles import mhsam_straight


def params(c=4, seed=0, random_bias=False):
    rng = np.random.default_rng(seed)
    p = MHSAMParams.init(rng, c)
    if random_bias:
        for h in p.heads:
            h.conv_b.data = rng.uniform(-0.2, 0.2, h.conv_b.shape)
            h.deconv_b.data = rng.uniform(-0.2, 0.2, h.deconv_b.shape)
    return p


def as_tuples(p):
    return [(h.conv_w.data, h.conv_b.data, h.deconv_w.data, h.deconv_b.data) for h in p.heads]


def test_kernel_sizes():
    assert [head_kernel(i) for i in (1, 2, 3)] == [1, 3, 5]
    assert [h.kernel for h in params().heads] == [1, 3, 5]


def test_head_channel_expansion():
    h = params(c=4).heads[2]
    assert h.conv_w.shape == (8, 4, 5, 5) and h.deconv_w.shape == (8, 4, 5, 5)
    assert h.deconv_b.shape == (4,)


def test_zero_input_gives_zero_heads():
    p = params()
    for i in (1, 2, 3):
        assert np.array_equal(mhsam_head(Tensor(np.zeros((4, 8, 8))), p, i).data, np.zeros((4, 8, 8)))


def test_head_geometry():
    p = params()
    x = Tensor(np.random.default_rng(1).standard_normal((4, 8, 8)))
    assert mhsam_head(x, p, 1).shape == (4, 8, 8)
    hidden = nx.conv2d(x, p.heads[2].conv_w, p.heads[2].conv_b)
    assert hidden.shape == (8, 4, 4)
    assert mhsam_head(x, p, 3).shape == (4, 8, 8)


def test_zero_input_gate_is_half():
    out, gate = mhsam_forward(Tensor(np.zeros((4, 6, 6))), params(), return_gate=True)
    assert np.all(gate.data == 0.5)
    assert np.array_equal(out.data, np.zeros((4, 6, 6)))


def test_matches_straight_line_computation():
    p = params(c=4, seed=3, random_bias=True)
    f = np.random.default_rng(4).standard_normal((4, 8, 8))
    out, gate = mhsam_forward(Tensor(f), p, return_gate=True)
    want_out, want_gate = mhsam_straight(f, as_tuples(p))
    assert np.max(np.abs(out.data - want_out)) < MHSAM_ORACLE_ATOL
    assert np.max(np.abs(gate.data - want_gate)) < MHSAM_ORACLE_ATOL


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(5, 9), st.integers(5, 9), st.integers(0, 10_000))
def test_shape_preserved_and_magnitude_attenuated(c, h, w, seed):
    p = params(c=c, seed=seed)
    f = np.random.default_rng(seed).standard_normal((c, h, w)) * 3
    out, gate = mhsam_forward(Tensor(f), p, return_gate=True)
    assert out.shape == f.shape == gate.shape
    assert np.all((gate.data > 0) & (gate.data < 1))
    assert np.all(np.abs(out.data) <= np.abs(f))


def test_batched_matches_single():
    p = params(c=2)
    f = np.random.default_rng(5).standard_normal((3, 2, 6, 7))
    both = mhsam_forward(Tensor(f), p).data
    for i in range(3):
        assert np.allclose(both[i], mhsam_forward(Tensor(f[i]), p).data, atol=1e-14)


@pytest.mark.parametrize("hw", [(4, 8), (8, 4), (2, 2)])
def test_too_small_input(hw):
    with pytest.raises(ShapeError):
        mhsam_forward(Tensor(np.zeros((4,) + hw)), params())


def test_gradient():
    p = params(c=2, seed=7, random_bias=True)
    w = Tensor(np.random.default_rng(8).standard_normal((2, 6, 6)))

    def loss(x):
        return nx.sum_(nx.mul(mhsam_forward(x, p), w))

    x = Tensor(np.random.default_rng(9).standard_normal((2, 6, 6)))
    assert grad_check(loss, x) < OP_GRAD_RTOL

    def via_conv(t):
        p.heads[1].conv_w = t
        return nx.sum_(nx.mul(mhsam_forward(x, p), w))

    assert grad_check(via_conv, Tensor(p.heads[1].conv_w.data.copy())) < OP_GRAD_RTOL
