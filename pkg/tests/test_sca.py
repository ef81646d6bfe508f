import numpy as np
import pytest

from spformer import ops
from spformer.geometry import build_grid
from spformer.gradcheck import grad_check
from spformer.sca import (
    AssociationMap,
    IterationParams,
    Projection,
    ScaParams,
    compute_association,
    p2s_attend,
    pixelify,
    s2p_attend,
    sca_forward,
)
from spformer.tensor import Tensor

import oracles

N_CASES = 50


def random_case(seed):
    rng = np.random.default_rng(seed)
    r = int(rng.choice([2, 4]))
    h = int(rng.integers(r, 17))
    w = int(rng.integers(r, 17))
    heads = int(rng.choice([1, 2, 4]))
    c = heads * int(rng.integers(1, 32 // heads + 1))
    return rng, build_grid(h, w, r), heads, c


def proj(rng, c, requires_grad=False):
    return Projection(
        Tensor(rng.standard_normal((c, c)) / np.sqrt(c), requires_grad=requires_grad),
        Tensor(rng.standard_normal(c) * 0.1, requires_grad=requires_grad),
    )


def iteration(rng, c, gamma=None, requires_grad=False):
    g = lambda: Tensor(rng.standard_normal(c) if gamma is None else np.full(c, gamma),
                       requires_grad=requires_grad)
    return IterationParams(proj(rng, c, requires_grad), proj(rng, c, requires_grad),
                           proj(rng, c, requires_grad), g(), g())


def f64(t):
    return np.asarray(t.data, dtype=np.float64)


def features(rng, grid, c, batch=1):
    S = Tensor(rng.standard_normal((batch, grid.sh, grid.sw, c)))
    I = Tensor(rng.standard_normal((batch, grid.h, grid.w, c)))
    return S, I


@pytest.mark.parametrize("seed", range(N_CASES))
def test_sliding_window_matches_dense(seed):
    rng, grid, heads, c = random_case(seed)
    it = iteration(rng, c)
    params = ScaParams(heads, [it])
    S, I = features(rng, grid, c)
    mask = oracles.neighbor_mask(grid.h, grid.w, grid.r)
    s, i = f64(S)[0].reshape(-1, c), f64(I)[0].reshape(-1, c)

    got = f64(p2s_attend(S, I, grid, params, it))[0].reshape(-1, c)
    want = oracles.p2s(s, i, f64(it.p2s_q.weight), f64(it.p2s_q.bias), f64(it.gamma_s), heads, mask)
    np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)

    A = compute_association(I, S, grid, params, it)
    A_want = oracles.association(i, s, f64(it.s2p_k.weight), f64(it.s2p_k.bias), heads, mask)
    np.testing.assert_allclose(A.dense()[0], A_want, atol=1e-5, rtol=0)

    got = f64(s2p_attend(I, S, A, params, it))[0].reshape(-1, c)
    want = oracles.s2p(i, s, A_want, f64(it.s2p_v.weight), f64(it.s2p_v.bias), f64(it.gamma_i))
    np.testing.assert_allclose(got, want, atol=1e-5, rtol=0)

    got = f64(pixelify(S, A))[0].reshape(-1, c)
    np.testing.assert_allclose(got, oracles.pixelify(s, A_want), atol=1e-5, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_association_rows_normalised(seed):
    rng, grid, heads, c = random_case(seed)
    it = iteration(rng, c)
    S, I = features(rng, grid, c, batch=2)
    A = compute_association(I, S, grid, ScaParams(heads, [it]), it)
    A.check(1e-5)
    w = A.numpy()
    assert np.all(w[..., ~grid.neighbors.valid] == 0.0)
    assert np.all(w[..., grid.neighbors.valid] > 0.0)


def test_zero_gamma_is_identity():
    rng = np.random.default_rng(0)
    grid = build_grid(12, 8, 4)
    it = iteration(rng, 8, gamma=0.0)
    S, I = features(rng, grid, 8)
    S1, I1, _ = sca_forward(S, I, grid, ScaParams(2, [it, it]))
    np.testing.assert_array_equal(S1.data, S.data)
    np.testing.assert_array_equal(I1.data, I.data)


def test_uniform_association_pixelify_is_neighbor_mean():
    grid = build_grid(8, 12, 4)
    valid = grid.neighbors.valid.astype(float)
    A = AssociationMap(Tensor((valid / valid.sum(1, keepdims=True))[None, None]), grid)
    S = np.random.default_rng(1).standard_normal((1, grid.sh, grid.sw, 3))
    out = f64(pixelify(Tensor(S), A))[0].reshape(-1, 3)
    flat = S[0].reshape(-1, 3)
    mask = oracles.neighbor_mask(8, 12, 4)
    for i in range(grid.n_pixels):
        np.testing.assert_allclose(out[i], flat[mask[i]].mean(0), atol=1e-6)


def test_one_hot_association_copies_superpixel():
    grid = build_grid(8, 8, 4)
    A = AssociationMap.one_hot(grid.containing[None, None], grid)
    A.check()
    S = np.random.default_rng(2).standard_normal((1, 2, 2, 4))
    out = f64(pixelify(Tensor(S), A))[0].reshape(-1, 4)
    np.testing.assert_allclose(out, S[0].reshape(-1, 4)[grid.containing], atol=1e-6)
    with pytest.raises(ValueError):
        AssociationMap.one_hot(np.full((1, 1, 64), 99), grid)


def test_pixelify_is_convex_combination():
    rng, grid, heads, c = random_case(7)
    it = iteration(rng, c)
    S, I = features(rng, grid, c)
    A = compute_association(I, S, grid, ScaParams(heads, [it]), it).averaged()
    out = f64(pixelify(S, A))
    lo, hi = f64(S).min(axis=(1, 2)), f64(S).max(axis=(1, 2))
    assert np.all(out >= lo[:, None, None] - 1e-6) and np.all(out <= hi[:, None, None] + 1e-6)


def test_two_iterations_equal_chained_single_steps():
    rng = np.random.default_rng(3)
    grid = build_grid(12, 12, 4)
    its = [iteration(rng, 8), iteration(rng, 8)]
    S, I = features(rng, grid, 8)
    record = []
    S2, I2, A2 = sca_forward(S, I, grid, ScaParams(2, its), record=record)
    Sa, Ia, _ = sca_forward(S, I, grid, ScaParams(2, its[:1]))
    Sb, Ib, Ab = sca_forward(Sa, Ia, grid, ScaParams(2, its[1:]))
    np.testing.assert_array_equal(S2.data, Sb.data)
    np.testing.assert_array_equal(I2.data, Ib.data)
    np.testing.assert_array_equal(A2.weights.data, Ab.weights.data)
    assert len(record) == 2


def test_head_permutation_equivariance():
    # permuting head channel groups in every projection permutes the association heads
    rng = np.random.default_rng(4)
    grid = build_grid(8, 8, 4)
    heads, d = 4, 3
    c = heads * d
    it = iteration(rng, c)
    S, I = features(rng, grid, c)
    perm = np.array([2, 0, 3, 1])
    ch = (perm[:, None] * d + np.arange(d)).ravel()
    it_p = IterationParams(
        *[Projection(Tensor(p.weight.data[np.ix_(ch, ch)]), Tensor(p.bias.data[ch]))
          for p in (it.p2s_q, it.s2p_k, it.s2p_v)],
        Tensor(it.gamma_s.data[ch]), Tensor(it.gamma_i.data[ch]),
    )
    A = compute_association(I, S, grid, ScaParams(heads, [it]), it).numpy()
    Sp, Ip = Tensor(S.data[..., ch]), Tensor(I.data[..., ch])
    Ap = compute_association(Ip, Sp, grid, ScaParams(heads, [it_p]), it_p).numpy()
    np.testing.assert_allclose(Ap, A[:, perm], atol=1e-6)


def test_feature_shape_mismatch():
    rng = np.random.default_rng(5)
    grid = build_grid(8, 8, 4)
    S, I = features(rng, build_grid(12, 12, 4), 4)
    with pytest.raises(ValueError):
        sca_forward(S, I, grid, ScaParams(1, [iteration(rng, 4)]))


@pytest.mark.parametrize("updated", [False, True])
def test_sca_forward_gradients(updated):
    rng = np.random.default_rng(6)
    grid = build_grid(8, 12, 4)
    c, heads = 4, 2
    its = [iteration(rng, c, requires_grad=True) for _ in range(2)]
    cpe = lambda: (Tensor(rng.standard_normal((c, 3, 3)) * 0.3, requires_grad=True),
                   Tensor(rng.standard_normal(c) * 0.1, requires_grad=True))
    params = ScaParams(heads, its, cpe_pix=cpe(), cpe_sp=cpe(), s2p_uses_updated_superpixels=updated)
    S = Tensor(rng.standard_normal((2, grid.sh, grid.sw, c)), requires_grad=True)
    I = Tensor(rng.standard_normal((2, grid.h, grid.w, c)), requires_grad=True)
    probe_s = Tensor(rng.standard_normal(S.shape))
    probe_i = Tensor(rng.standard_normal(I.shape))
    probe_a = Tensor(rng.standard_normal((2, heads, grid.n_pixels, 9)))

    def f():
        S1, I1, A = sca_forward(S, I, grid, params)
        return (ops.sum(ops.mul(S1, probe_s)) + ops.sum(ops.mul(I1, probe_i))
                + ops.sum(ops.mul(A.weights, probe_a)))

    leaves = [S, I, *params.cpe_pix, *params.cpe_sp]
    for it in its:
        leaves += [it.p2s_q.weight, it.p2s_q.bias, it.s2p_k.weight, it.s2p_k.bias,
                   it.s2p_v.weight, it.s2p_v.bias, it.gamma_s, it.gamma_i]
    assert grad_check(f, leaves, eps=1e-3) < 1e-2
