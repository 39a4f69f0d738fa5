import numpy as np
import pytest

from segforge import tensor as T
from segforge.blocks import ASPPBlock, PlainBlock, ResidualUnit, SEBlock, param_count
from segforge.errors import ConfigError
from helpers import numeric_grad, rel_err


def t(data, rg=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


def zero_params(block):
    for _, p in block.params("b"):
        p.data[...] = 0.0


# --- residual unit ------------------------------------------------------------

def test_residual_pure_shortcut_path():
    rng = np.random.default_rng(0)
    unit = ResidualUnit(rng, 3, 3)
    zero_params(unit)  # conv weights 0, BN gamma 0 / beta 0
    x = t(rng.standard_normal((2, 3, 5, 5)))
    out = unit.forward(x, training=True)
    assert np.max(np.abs(out.data - np.maximum(x.data, 0.0))) == 0.0


def test_residual_shortcut_parameter_rule():
    rng = np.random.default_rng(1)
    same = ResidualUnit(rng, 64, 64)
    assert same.shortcut is None
    proj = ResidualUnit(rng, 64, 128)
    assert proj.shortcut is not None
    assert proj.shortcut.weight.shape == (128, 64, 1, 1)
    extra = param_count(proj.shortcut.params("s"))
    assert extra == 64 * 128 + 128


def test_residual_identity_limit_with_projection():
    rng = np.random.default_rng(2)
    unit = ResidualUnit(rng, 2, 4)
    for name, p in unit.params("u"):
        if "shortcut" not in name:
            p.data[...] = 0.0
    x = t(rng.standard_normal((1, 2, 4, 4)))
    out = unit.forward(x, training=True)
    skip = T.conv2d(x, unit.shortcut.weight, unit.shortcut.bias)
    assert np.max(np.abs(out.data - np.maximum(skip.data, 0.0))) < 1e-12


def test_residual_spatial_preservation():
    rng = np.random.default_rng(3)
    for _ in range(10):
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        h = int(rng.integers(2, 9))
        w = int(rng.integers(2, 9))
        unit = ResidualUnit(rng, cin, cout)
        out = unit.forward(t(rng.standard_normal((2, cin, h, w))), training=True)
        assert out.shape == (2, cout, h, w)


def test_residual_channel_mismatch():
    rng = np.random.default_rng(4)
    unit = ResidualUnit(rng, 3, 3)
    with pytest.raises(ConfigError):
        unit.forward(t(np.zeros((1, 2, 4, 4))), training=True)


def test_residual_gradient_check():
    rng = np.random.default_rng(5)
    unit = ResidualUnit(rng, 4, 4)
    x = t(rng.standard_normal((1, 4, 6, 6)), rg=True)
    w = rng.standard_normal((1, 4, 6, 6))

    def forward():
        return T.tsum(T.mul(unit.forward(x, training=True), T.Tensor(w)))

    forward().backward()
    tensors = [x] + [p for _, p in unit.params("u")]
    numeric = numeric_grad(lambda: forward().item(), [v.data for v in tensors])
    for v, n in zip(tensors, numeric):
        assert rel_err(v.grad, n) < 1e-4
        v.zero_grad()


# --- SE block ------------------------------------------------------------------

def test_se_zero_weights_halves_input():
    rng = np.random.default_rng(6)
    se = SEBlock(rng, 4)
    zero_params(se)
    x = t(rng.standard_normal((2, 4, 3, 3)))
    out = se.forward(x)
    assert np.array_equal(out.data, 0.5 * x.data)


def test_se_zero_input_stays_zero():
    rng = np.random.default_rng(7)
    se = SEBlock(rng, 4)
    out = se.forward(t(np.zeros((1, 4, 5, 5))))
    assert np.all(out.data == 0.0)


def test_se_reduction_shapes_and_count():
    se = SEBlock(np.random.default_rng(8), 64, reduction=16)
    assert se.w1.shape == (4, 64)
    assert se.w2.shape == (64, 4)
    assert param_count(se.params("se")) == 64 * 4 + 4 + 4 * 64 + 64 == 580


def test_se_gate_bounds_and_channel_symmetry():
    rng = np.random.default_rng(9)
    se = SEBlock(rng, 4)
    # channels 0 and 1 carry identical data AND identical excitation weights
    # (fc1 column / fc2 row); the gate must then scale them identically
    se.w1.data[:, 1] = se.w1.data[:, 0]
    se.w2.data[1] = se.w2.data[0]
    se.b2.data[1] = se.b2.data[0]
    x = rng.standard_normal((2, 4, 6, 6)) + 0.5
    x[:, 1] = x[:, 0]
    xt = t(x)
    out = se.forward(xt)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = out.data / xt.data
    finite = np.isfinite(scale)
    assert np.all(scale[finite] > 0.0) and np.all(scale[finite] < 1.0)
    s0 = out.data[:, 0] / x[:, 0]
    s1 = out.data[:, 1] / x[:, 1]
    assert np.max(np.abs(s0 - s1)) < 1e-12


def test_se_channel_mismatch():
    se = SEBlock(np.random.default_rng(10), 8)
    with pytest.raises(ConfigError):
        se.forward(t(np.zeros((1, 4, 2, 2))))


def test_se_gradient_check():
    rng = np.random.default_rng(11)
    se = SEBlock(rng, 4, reduction=2)
    x = t(rng.standard_normal((1, 4, 3, 3)), rg=True)
    w = rng.standard_normal((1, 4, 3, 3))

    def forward():
        return T.tsum(T.mul(se.forward(x), T.Tensor(w)))

    forward().backward()
    tensors = [x] + [p for _, p in se.params("se")]
    numeric = numeric_grad(lambda: forward().item(), [v.data for v in tensors])
    for v, n in zip(tensors, numeric):
        assert rel_err(v.grad, n) < 1e-4
        v.zero_grad()


# --- ASPP block ------------------------------------------------------------------

def test_aspp_degenerate_single_rate():
    rng = np.random.default_rng(12)
    block = ASPPBlock(rng, 3, 5, rates=(1,))
    out = block.forward(t(rng.standard_normal((2, 3, 7, 7))), training=True)
    assert out.shape == (2, 5, 7, 7)


def test_aspp_fullscale_bottleneck_shapes():
    rng = np.random.default_rng(13)
    block = ASPPBlock(rng, 512, 1024)
    assert block.fuse.conv.weight.shape == (1024, 4096, 1, 1)  # pre-fuse concat: 4 * 1024
    with T.no_grad():
        out = block.forward(t(rng.standard_normal((1, 512, 32, 32)) * 0.1), training=True)
    assert out.shape == (1, 1024, 32, 32)


def test_aspp_border_tap_counts():
    # all-ones 3x3 kernels on constant input: dilation decides how many taps
    # survive near the border under same-padding
    c = 2.0
    x = t(np.full((1, 1, 32, 32), c))
    k = t(np.ones((1, 1, 3, 3)))
    b = t([0.0])
    rate1 = T.conv2d(x, k, b, dilation=1, padding=1).data[0, 0]
    rate6 = T.conv2d(x, k, b, dilation=6, padding=6).data[0, 0]

    def taps(i, j, rate):
        n = 0
        for di in (-rate, 0, rate):
            for dj in (-rate, 0, rate):
                if 0 <= i + di < 32 and 0 <= j + dj < 32:
                    n += 1
        return n

    for (i, j) in [(0, 0), (3, 3), (16, 16), (31, 5)]:
        assert rate1[i, j] == taps(i, j, 1) * c
        assert rate6[i, j] == taps(i, j, 6) * c
    assert rate1[16, 16] == rate6[16, 16]  # center sees all 9 taps either way
    assert rate1[3, 3] != rate6[3, 3]


def test_aspp_spatial_preservation():
    rng = np.random.default_rng(14)
    for rates in [(1, 2), (1, 6, 12, 18), (2, 3)]:
        block = ASPPBlock(rng, 2, 3, rates=rates)
        for h, w in [(1, 1), (4, 6), (9, 5)]:
            out = block.forward(t(rng.standard_normal((2, 2, h, w))), training=True)
            assert out.shape == (2, 3, h, w)


def test_aspp_gradient_check():
    rng = np.random.default_rng(15)
    block = ASPPBlock(rng, 2, 2, rates=(1, 2))
    x = t(rng.standard_normal((1, 2, 4, 4)), rg=True)
    w = rng.standard_normal((1, 2, 4, 4))

    def forward():
        return T.tsum(T.mul(block.forward(x, training=True), T.Tensor(w)))

    forward().backward()
    tensors = [x] + [p for _, p in block.params("a")]
    numeric = numeric_grad(lambda: forward().item(), [v.data for v in tensors])
    for v, n in zip(tensors, numeric):
        assert rel_err(v.grad, n) < 1e-4
        v.zero_grad()


# --- plain block -------------------------------------------------------------------

def test_plain_block_shapes_and_gradient():
    rng = np.random.default_rng(16)
    block = PlainBlock(rng, 2, 3)
    x = t(rng.standard_normal((2, 2, 5, 5)), rg=True)
    out = block.forward(x, training=True)
    assert out.shape == (2, 3, 5, 5)
    w = rng.standard_normal(out.shape)

    def forward():
        return T.tsum(T.mul(block.forward(x, training=True), T.Tensor(w)))

    forward().backward()
    tensors = [x] + [p for _, p in block.params("p")]
    numeric = numeric_grad(lambda: forward().item(), [v.data for v in tensors])
    for v, n in zip(tensors, numeric):
        assert rel_err(v.grad, n) < 1e-4
        v.zero_grad()
