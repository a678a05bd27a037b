import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aircouple.errors import ShapeError
from aircouple.fusion import (
    BilinearFusion, FusionParams, bilinear_oracle, fuse_field, fuse_pointwise, neighbourhoods, sphere_pad,
)


def ones(n_p, n_q, hidden, out):
    return FusionParams(np.ones((n_p, hidden)), np.ones((n_q, hidden)), np.ones((hidden, out)))


def test_scalar_product():
    assert fuse_pointwise([2.0], [3.0], ones(1, 1, 1, 1))[0] == 6.0


def test_identity_like_two_by_two():
    # W_p = W_q = I, W_x = [1, 1]^T: x = p0 q0 + p1 q1; enumerated: 1*3 + 2*4
    params = FusionParams(np.eye(2), np.eye(2), np.ones((2, 1)))
    assert fuse_pointwise([1.0, 2.0], [3.0, 4.0], params)[0] == 11.0
    assert bilinear_oracle([1.0, 2.0], [3.0, 4.0], params)[0] == 11.0


def test_zero_p_gives_zero(rng):
    params = FusionParams.random(3, 2, 4, 2, rng=rng)
    assert np.all(fuse_pointwise(np.zeros(3), rng.standard_normal(2), params) == 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31))
def test_pointwise_matches_oracle(c, d, h, g, seed):
    rng = np.random.default_rng(seed)
    params = FusionParams.random(2 * c, 2 * d, h, g, rng=rng)
    p, q = rng.standard_normal(2 * c), rng.standard_normal(2 * d)
    want = bilinear_oracle(p, q, params)
    got = fuse_pointwise(p, q, params)
    assert np.allclose(got, want, rtol=1e-6, atol=1e-12 * np.abs(want).max())


def test_rank_one_hidden(rng):
    params = FusionParams.random(4, 3, 1, 2, rng=rng)
    p, q = rng.standard_normal(4), rng.standard_normal(3)
    assert np.allclose(fuse_pointwise(p, q, params), bilinear_oracle(p, q, params), rtol=1e-14)


def test_pointwise_shape_error(rng):
    with pytest.raises(ShapeError):
        fuse_pointwise(np.zeros(3), np.zeros(2), FusionParams.random(4, 2, 3, 1, rng=rng))


def test_centre_block_reduces_to_pointwise(rng):
    params = FusionParams.random(4, 2, 6, 3, r=3, rng=rng)
    centre = params.centre_only()
    rr = np.zeros(9, dtype=bool)
    rr[4] = True
    masked = FusionParams(
        params.W_p * np.repeat(rr, 4)[:, None], params.W_q * np.repeat(rr, 2)[:, None], params.W_x, 3
    )
    P, Q = rng.standard_normal((5, 8, 4)), rng.standard_normal((5, 8, 2))
    assert np.allclose(fuse_field(P, Q, masked), fuse_pointwise(P, Q, centre), rtol=1e-12, atol=1e-14)


def test_constant_inputs_give_constant_output(rng):
    params = FusionParams.random(2, 3, 5, 2, r=3, rng=rng)
    p, q = rng.standard_normal(2), rng.standard_normal(3)
    out = fuse_field(np.broadcast_to(p, (6, 10, 2)), np.broadcast_to(q, (6, 10, 3)), params)
    expected = fuse_pointwise(np.tile(p, 9), np.tile(q, 9), FusionParams(params.W_p, params.W_q, params.W_x, 1))
    assert np.allclose(out, expected)


def test_single_pixel_locality(rng):
    params = FusionParams.random(1, 1, 4, 2, r=3, rng=rng)
    P = np.zeros((8, 12, 1))
    P[4, 6, 0] = 1.0
    out = fuse_field(P, np.ones((8, 12, 1)), params)
    nonzero = np.argwhere(np.abs(out).sum(-1) > 0)
    assert nonzero[:, 0].min() >= 3 and nonzero[:, 0].max() <= 5
    assert nonzero[:, 1].min() >= 5 and nonzero[:, 1].max() <= 7


def test_neighbourhood_wraps_longitude():
    f = np.arange(12, dtype=float).reshape(3, 4, 1)
    nb = neighbourhoods(f, 3).reshape(3, 4, 3, 3)
    assert nb[1, 0, 1, 0] == f[1, 3, 0]  # west neighbour of column 0 is column N-1
    assert nb[0, 0, 0, 1] == f[0, 0, 0]  # row above the top row replicates it


def test_sphere_pad_matches_numpy():
    x = torch.arange(24.0).reshape(1, 1, 4, 6)
    padded = sphere_pad(x, 2, 3)[0, 0].numpy()
    ref = np.pad(np.pad(x[0, 0].numpy(), ((2, 2), (0, 0)), mode="edge"), ((0, 0), (3, 3)), mode="wrap")
    assert np.array_equal(padded, ref)


@pytest.mark.parametrize("augment", [False, True])
def test_torch_layer_matches_numpy(augment):
    layer = BilinearFusion(3, 2, 5, 4, r=3, augment=augment).double()
    p, q = torch.randn(2, 3, 6, 10, dtype=torch.float64), torch.randn(2, 2, 6, 10, dtype=torch.float64)
    out = layer(p, q).detach().numpy()
    P, Q = p.numpy().transpose(0, 2, 3, 1), q.numpy().transpose(0, 2, 3, 1)
    if augment:
        P = np.concatenate([P, np.ones(P.shape[:3] + (1,))], -1)
        Q = np.concatenate([Q, np.ones(Q.shape[:3] + (1,))], -1)
    for b in range(2):
        ref = fuse_field(P[b], Q[b], layer.params())
        assert np.allclose(out[b].transpose(1, 2, 0), ref, rtol=1e-10, atol=1e-12)


def test_augmented_layer_survives_zero_meteorology():
    layer = BilinearFusion(3, 2, 5, 4)
    out = layer(torch.randn(1, 3, 6, 10), torch.zeros(1, 2, 6, 10))
    assert out.abs().sum() > 0
    plain = BilinearFusion(3, 2, 5, 4, augment=False)
    assert plain(torch.randn(1, 3, 6, 10), torch.zeros(1, 2, 6, 10)).abs().sum() == 0


def test_torch_layer_shape_errors():
    layer = BilinearFusion(3, 2, 5, 4)
    with pytest.raises(ShapeError):
        layer(torch.randn(1, 2, 6, 10), torch.randn(1, 2, 6, 10))
    with pytest.raises(ShapeError):
        layer(torch.randn(1, 3, 6, 10), torch.randn(1, 2, 6, 12))
