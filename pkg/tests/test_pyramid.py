import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from gradcheck import numeric_grad, rel_err
from hdrjoint import numerics as nx
from hdrjoint.numerics import Tensor
from hdrjoint.pyramid import KERNEL, blur_matrix, decompose, downsample, reconstruct, upsample


def blur_oracle(img):
    # scipy "mirror" is the reflect-without-edge-repeat border
    out = ndimage.correlate1d(img, KERNEL, axis=0, mode="mirror")
    return ndimage.correlate1d(out, KERNEL, axis=1, mode="mirror")


def test_downsample_matches_scipy(rng):
    x = rng.normal(size=(32, 24, 3))
    with nx.precision(np.float64):
        got = downsample(x).data
    np.testing.assert_allclose(got, blur_oracle(x)[::2, ::2], atol=1e-12)


def test_upsample_matches_scipy(rng):
    x = rng.normal(size=(8, 12, 2))
    z = np.zeros((16, 24, 2))
    z[::2, ::2] = x
    with nx.precision(np.float64):
        got = upsample(x).data
    np.testing.assert_allclose(got, 4 * blur_oracle(z), atol=1e-12)


def test_blur_rows_sum_to_one():
    np.testing.assert_allclose(blur_matrix(28).sum(axis=1), 1.0)


def test_constant_patch():
    pyr = decompose(np.full((64, 64, 3), 0.37))
    for lap in pyr.laplacian:
        assert np.abs(lap.data).max() < 1e-6
    np.testing.assert_allclose(pyr.base.data, 0.37, atol=1e-6)


def test_224_level_shapes():
    pyr = decompose(np.zeros((224, 224, 3)))
    assert [lvl.shape[:2] for lvl in pyr.levels] == [(224, 224), (112, 112), (56, 56), (28, 28)]


def test_indivisible_rejected():
    with pytest.raises(ValueError, match="divisible by 8"):
        decompose(np.zeros((100, 96, 3)))


def test_round_trip_seed5():
    x = np.random.default_rng(5).random((224, 224, 3)).astype(np.float32)
    assert np.abs(decompose(x).reconstruct().data - x).max() <= 1e-6


def test_impulse_round_trip():
    x = np.zeros((64, 64, 3), np.float32)
    x[31, 17, 1] = 1.0
    out = decompose(x).reconstruct().data
    assert abs(out.sum() - 1.0) < 1e-6
    assert np.abs(out - x).max() < 1e-6


def test_zero_laplacians_give_upsampled_base(rng):
    b = rng.random((8, 8, 3)).astype(np.float32)
    z = [np.zeros((64 >> i, 64 >> i, 3), np.float32) for i in range(3)]
    out = reconstruct(*z, b).data
    np.testing.assert_allclose(out, upsample(upsample(upsample(b))).data, atol=1e-7)


def test_broken_shape_chain_rejected():
    with pytest.raises(ValueError):
        reconstruct(np.zeros((64, 64, 3)), np.zeros((30, 32, 3)), np.zeros((16, 16, 3)), np.zeros((8, 8, 3)))


def test_reconstruct_linear():
    r = np.random.default_rng(11)
    shapes = [(32, 32, 3), (16, 16, 3), (8, 8, 3), (4, 4, 3)]
    a = [r.normal(size=s) for s in shapes]
    b = [r.normal(size=s) for s in shapes]
    lhs = reconstruct(*[2.0 * u - 0.5 * v for u, v in zip(a, b)]).data
    rhs = 2.0 * reconstruct(*a).data - 0.5 * reconstruct(*b).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_white_noise_energy_mostly_in_fine_levels():
    x = np.random.default_rng(2).normal(size=(224, 224, 3))
    e = [float(np.sum(lvl.data.astype(np.float64) ** 2)) for lvl in decompose(x).levels]
    assert e[0] + e[1] > e[2] + e[3]


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_perfect_reconstruction_any_shape(hm, wm, seed):
    x = np.random.default_rng(seed).random((8 * hm, 8 * wm, 3)).astype(np.float32)
    assert np.abs(decompose(x).reconstruct().data - x).max() <= 1e-6


@settings(max_examples=10, deadline=None)
@given(st.floats(-4, 4), st.integers(0, 2**31 - 1))
def test_decompose_linear(a, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 32, 32, 3))
    lhs = decompose(a * x + y).levels
    rhs = [a * u.data + v.data for u, v in zip(decompose(x).levels, decompose(y).levels)]
    for p, q in zip(lhs, rhs):
        np.testing.assert_allclose(p.data, q, atol=1e-5 * (1 + abs(a)))


def test_gradient_through_decompose_and_reconstruct():
    r = np.random.default_rng(7)
    x = r.normal(size=(16, 16, 2))
    w = [Tensor(r.normal(size=s)) for s in [(16, 16, 2), (8, 8, 2), (4, 4, 2), (2, 2, 2)]]

    def f(v):
        levels = decompose(v).levels
        scaled = [nx.mul(lvl, wt) for lvl, wt in zip(levels, w)]
        return nx.total(nx.mul(reconstruct(*scaled), reconstruct(*scaled)))

    with nx.precision(np.float64):
        xt = Tensor(x, requires_grad=True)
        f(xt).backward()
        num = numeric_grad(lambda v: float(f(Tensor(v)).data), x)
    assert rel_err(xt.grad, num) < 1e-3
