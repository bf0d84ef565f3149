import numpy as np
import pytest

from maxstyle import ndtensor as nd
from maxstyle import styleops as so
from maxstyle.errors import ValidationError
from maxstyle.ndtensor import Tensor

from test_ndtensor import assert_grads_close


def style_oracle(f, lam, donor, eps_g=None, eps_b=None):
    """Float64 scalar-arithmetic oracle composing the style transform directly."""
    f = np.asarray(f, dtype=np.float64)
    mu = f.mean(axis=(2, 3))
    var = ((f - mu[:, :, None, None]) ** 2).mean(axis=(2, 3))
    sigma = np.sqrt(var + so.EPS_STD**2)
    lam = np.asarray(lam, dtype=np.float64)
    gamma = lam[:, None] * sigma + (1 - lam)[:, None] * sigma[donor]
    beta = lam[:, None] * mu + (1 - lam)[:, None] * mu[donor]
    if eps_g is not None:
        sg = sigma.var(axis=0)
        sb = mu.var(axis=0)
        gamma = gamma + sg * np.asarray(eps_g, dtype=np.float64)
        beta = beta + sb * np.asarray(eps_b, dtype=np.float64)
    fbar = (f - mu[:, :, None, None]) / sigma[:, :, None, None]
    return gamma[:, :, None, None] * fbar + beta[:, :, None, None]


def make_params(lam, donor, gate, eps_g=None, eps_b=None, channels=None, batch=None):
    lam = np.asarray(lam, dtype=np.float32)
    n = batch or lam.shape[0]
    if eps_g is None:
        eps_g = [np.zeros((n, c), np.float32) for c in channels]
        eps_b = [np.zeros((n, c), np.float32) for c in channels]
    return so.StyleParams(
        lambda_mix=Tensor(lam),
        eps_gamma=[Tensor(e) for e in eps_g],
        eps_beta=[Tensor(e) for e in eps_b],
        donor=np.asarray(donor),
        gate=np.asarray(gate, dtype=bool),
    )


# ---------------------------------------------------------------------------
# instance statistics and normalization


def test_stats_constant_channel():
    f = Tensor(np.full((1, 1, 4, 4), 5.0))
    s = so.instance_stats(f)
    assert s.mu.data[0, 0] == pytest.approx(5.0)
    assert s.sigma.data[0, 0] == pytest.approx(so.EPS_STD, rel=1e-3)


def test_stats_small_map_oracle():
    f = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    s = so.instance_stats(f)
    assert s.mu.data[0, 0] == pytest.approx(2.5)
    assert s.sigma.data[0, 0] == pytest.approx(np.sqrt(1.25), rel=1e-6)


def test_stats_are_per_instance():
    rng = np.random.default_rng(0)
    f = rng.uniform(0, 1, (3, 2, 4, 4)).astype(np.float32)
    s = so.instance_stats(Tensor(f))
    perm = np.array([2, 0, 1])
    s_perm = so.instance_stats(Tensor(f[perm]))
    np.testing.assert_allclose(s_perm.mu.data, s.mu.data[perm], rtol=1e-6)
    np.testing.assert_allclose(s_perm.sigma.data, s.sigma.data[perm], rtol=1e-6)


def test_normalize_fixed_point():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=(1, 1, 8, 8)).astype(np.float32)
    raw = (raw - raw.mean()) / raw.std()
    f = Tensor(raw)
    out = so.normalize(f, so.instance_stats(f))
    np.testing.assert_allclose(out.data, raw, atol=1e-5)


def test_normalize_small_map_oracle():
    f = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = so.normalize(f, so.instance_stats(f))
    want = (f.data - 2.5) / np.sqrt(1.25 + so.EPS_STD**2)
    np.testing.assert_allclose(out.data, want, rtol=1e-5)


def test_stats_of_normalized_are_standard():
    rng = np.random.default_rng(2)
    f = Tensor(rng.uniform(-2, 2, (4, 3, 8, 8)).astype(np.float32))
    out = so.normalize(f, so.instance_stats(f))
    s = so.instance_stats(out)
    np.testing.assert_allclose(s.mu.data, 0.0, atol=1e-4)
    np.testing.assert_allclose(s.sigma.data, 1.0, atol=1e-4)


def test_stats_differentiable_wrt_features():
    rng = np.random.default_rng(3)
    f0 = rng.uniform(-2, 2, (2, 2, 4, 4)).astype(np.float32)

    def run(t):
        s = so.instance_stats(t)
        return nd.sum_all(nd.add(s.mu, s.sigma))

    f = Tensor(f0, requires_grad=True)
    with nd.record():
        nd.backward(run(f))
    # smooth path, larger step keeps float32 round-off below the floor
    fd = nd.finite_diff_grad(run, Tensor(f0), h=5e-3)
    assert_grads_close(f.grad, fd.data)


# ---------------------------------------------------------------------------
# mixstyle transform


def test_mixstyle_lambda_one_is_self_style():
    rng = np.random.default_rng(4)
    f = rng.uniform(0, 1, (3, 2, 4, 4)).astype(np.float32)
    params = make_params([1.0, 1.0, 1.0], [1, 2, 0], [True], channels=[2])
    out = so.mixstyle_transform(Tensor(f), params, layer=0)
    np.testing.assert_allclose(out.data, f, atol=1e-4)


def test_mixstyle_lambda_zero_transfers_donor_stats():
    rng = np.random.default_rng(5)
    f = rng.uniform(0, 1, (3, 2, 6, 6)).astype(np.float32)
    donor = np.array([1, 2, 0])
    params = make_params([0.0, 0.0, 0.0], donor, [True], channels=[2])
    out = so.mixstyle_transform(Tensor(f), params, layer=0)
    s_in = so.instance_stats(Tensor(f))
    s_out = so.instance_stats(out)
    np.testing.assert_allclose(s_out.mu.data, s_in.mu.data[donor], atol=1e-4)
    np.testing.assert_allclose(s_out.sigma.data, s_in.sigma.data[donor], atol=1e-4)


def test_mixstyle_half_matches_scalar_oracle():
    rng = np.random.default_rng(6)
    f = rng.uniform(0, 1, (2, 1, 2, 2)).astype(np.float32)
    donor = np.array([1, 0])
    lam = np.array([0.5, 0.5], dtype=np.float32)
    params = make_params(lam, donor, [True], channels=[1])
    out = so.mixstyle_transform(Tensor(f), params, layer=0)
    np.testing.assert_allclose(out.data, style_oracle(f, lam, donor), rtol=1e-4, atol=1e-5)


def test_mixstyle_gate_off_is_bitwise_identity():
    rng = np.random.default_rng(7)
    f = rng.uniform(0, 1, (2, 2, 4, 4)).astype(np.float32)
    params = make_params([0.3, 0.7], [1, 0], [False], channels=[2])
    out = so.mixstyle_transform(Tensor(f), params, layer=0)
    assert out.data.tobytes() == f.tobytes()
    assert not np.shares_memory(out.data, f)


# ---------------------------------------------------------------------------
# noise scale estimation


def test_noise_scale_zero_for_identical_instances():
    one = np.random.default_rng(8).uniform(0, 1, (1, 3, 4, 4)).astype(np.float32)
    f = Tensor(np.repeat(one, 4, axis=0))
    ns = so.estimate_style_noise_scale(f)
    np.testing.assert_allclose(ns.sigma_gamma, 0.0, atol=1e-10)
    np.testing.assert_allclose(ns.sigma_beta, 0.0, atol=1e-10)


def test_noise_scale_two_instance_means_oracle():
    f = np.zeros((2, 1, 4, 4), dtype=np.float32)
    f[1] = 2.0
    ns = so.estimate_style_noise_scale(Tensor(f))
    # population variance of {0, 2} is 1
    assert ns.sigma_beta[0] == pytest.approx(1.0)
    assert ns.sigma_gamma[0] == pytest.approx(0.0, abs=1e-10)


def test_noise_scale_variance_homogeneity():
    rng = np.random.default_rng(9)
    f = rng.uniform(0, 1, (4, 2, 4, 4)).astype(np.float32)
    base = so.estimate_style_noise_scale(Tensor(f))
    scaled = so.estimate_style_noise_scale(Tensor(3.0 * f))
    np.testing.assert_allclose(scaled.sigma_beta, 9.0 * base.sigma_beta, rtol=1e-4)


def test_noise_scale_requires_two_instances():
    with pytest.raises(ValidationError, match="2 instances"):
        so.estimate_style_noise_scale(nd.zeros((1, 2, 4, 4)))


# ---------------------------------------------------------------------------
# parameter sampling


def test_sample_gate_extremes():
    rng = np.random.default_rng(10)
    p0 = so.sample_style_params(rng, 4, [8, 4], p_gate=0.0)
    assert not p0.gate.any()
    p1 = so.sample_style_params(np.random.default_rng(10), 4, [8, 4], p_gate=1.0)
    assert p1.gate.all()


def test_sample_is_deterministic_bitwise():
    a = so.sample_style_params(np.random.default_rng(11), 5, [4, 8, 16], 0.5)
    b = so.sample_style_params(np.random.default_rng(11), 5, [4, 8, 16], 0.5)
    assert a.lambda_mix.data.tobytes() == b.lambda_mix.data.tobytes()
    for x, y in zip(a.eps_gamma + a.eps_beta, b.eps_gamma + b.eps_beta):
        assert x.data.tobytes() == y.data.tobytes()
    assert a.donor.tolist() == b.donor.tolist()
    assert a.gate.tolist() == b.gate.tolist()


def test_sample_properties():
    p = so.sample_style_params(np.random.default_rng(12), 64, [4], 0.5)
    lam = p.lambda_mix.data
    assert lam.min() >= 0.0 and lam.max() <= 1.0
    assert sorted(p.donor.tolist()) == list(range(64))
    with pytest.raises(ValidationError):
        so.sample_style_params(np.random.default_rng(0), 4, [4], 1.5)


# ---------------------------------------------------------------------------
# maxstyle transform


def test_maxstyle_zero_noise_reduces_to_mixstyle():
    rng = np.random.default_rng(13)
    f = rng.uniform(0, 1, (3, 2, 4, 4)).astype(np.float32)
    params = make_params([0.2, 0.6, 0.9], [2, 0, 1], [True], channels=[2])
    scale = so.estimate_style_noise_scale(Tensor(f))
    got = so.maxstyle_transform(Tensor(f), params, scale, layer=0)
    want = so.mixstyle_transform(Tensor(f), params, layer=0)
    np.testing.assert_allclose(got.data, want.data, atol=1e-5)


def test_maxstyle_zero_scale_equals_mixstyle_for_nonzero_noise():
    rng = np.random.default_rng(14)
    f = rng.uniform(0, 1, (3, 2, 4, 4)).astype(np.float32)
    eps_g = [rng.standard_normal((3, 2)).astype(np.float32)]
    eps_b = [rng.standard_normal((3, 2)).astype(np.float32)]
    params = make_params([0.5, 0.1, 0.8], [1, 2, 0], [True], eps_g=eps_g, eps_b=eps_b)
    scale = so.NoiseScale(np.zeros(2, np.float32), np.zeros(2, np.float32))
    got = so.maxstyle_transform(Tensor(f), params, scale, layer=0)
    want = so.mixstyle_transform(Tensor(f), params, layer=0)
    np.testing.assert_allclose(got.data, want.data, atol=1e-6)


def test_maxstyle_self_style_reduction_is_identity():
    rng = np.random.default_rng(15)
    f = rng.uniform(0, 1, (2, 3, 4, 4)).astype(np.float32)
    params = make_params([1.0, 1.0], [0, 1], [True], channels=[3])
    scale = so.estimate_style_noise_scale(Tensor(f))
    out = so.maxstyle_transform(Tensor(f), params, scale, layer=0)
    np.testing.assert_allclose(out.data, f, atol=1e-4)


def test_maxstyle_noise_only_matches_dsu_form():
    rng = np.random.default_rng(16)
    f = rng.uniform(0, 1, (2, 1, 3, 3)).astype(np.float32)
    eps_g = [rng.standard_normal((2, 1)).astype(np.float32)]
    eps_b = [rng.standard_normal((2, 1)).astype(np.float32)]
    lam = np.array([1.0, 1.0], dtype=np.float32)
    donor = np.array([0, 1])
    params = make_params(lam, donor, [True], eps_g=eps_g, eps_b=eps_b)
    scale = so.estimate_style_noise_scale(Tensor(f))
    out = so.maxstyle_transform(Tensor(f), params, scale, layer=0)
    want = style_oracle(f, lam, donor, eps_g[0], eps_b[0])
    np.testing.assert_allclose(out.data, want, rtol=1e-4, atol=1e-5)


def test_maxstyle_hand_case_matches_scalar_oracle():
    rng = np.random.default_rng(17)
    f = rng.uniform(0, 1, (2, 1, 2, 2)).astype(np.float32)
    lam = np.array([0.3, 0.8], dtype=np.float32)
    donor = np.array([1, 0])
    eps_g = [rng.standard_normal((2, 1)).astype(np.float32)]
    eps_b = [rng.standard_normal((2, 1)).astype(np.float32)]
    params = make_params(lam, donor, [True], eps_g=eps_g, eps_b=eps_b)
    scale = so.estimate_style_noise_scale(Tensor(f))
    out = so.maxstyle_transform(Tensor(f), params, scale, layer=0)
    want = style_oracle(f, lam, donor, eps_g[0], eps_b[0])
    np.testing.assert_allclose(out.data, want, rtol=1e-4, atol=1e-5)


def test_maxstyle_gate_off_is_bitwise_identity():
    rng = np.random.default_rng(18)
    f = rng.uniform(0, 1, (2, 2, 4, 4)).astype(np.float32)
    params = make_params([0.5, 0.5], [1, 0], [False], channels=[2])
    scale = so.estimate_style_noise_scale(Tensor(f))
    out = so.maxstyle_transform(Tensor(f), params, scale, layer=0)
    assert out.data.tobytes() == f.tobytes()


def test_content_preservation_orders_match():
    # per-channel affine map with positive gamma keeps the spatial ordering
    rng = np.random.default_rng(19)
    f = rng.uniform(0, 1, (4, 3, 6, 6)).astype(np.float32)
    eps_g = [np.abs(rng.standard_normal((4, 3))).astype(np.float32)]  # gamma term positive
    eps_b = [rng.standard_normal((4, 3)).astype(np.float32)]
    params = make_params(rng.uniform(0, 1, 4), rng.permutation(4), [True], eps_g=eps_g, eps_b=eps_b)
    scale = so.estimate_style_noise_scale(Tensor(f))
    out = so.maxstyle_transform(Tensor(f), params, scale, layer=0)
    fbar = so.normalize(Tensor(f), so.instance_stats(Tensor(f)))
    for n in range(4):
        for c in range(3):
            got = np.argsort(out.data[n, c].ravel())
            want = np.argsort(fbar.data[n, c].ravel())
            np.testing.assert_array_equal(got, want)


def test_maxstyle_gradients_wrt_lambda_eps_and_features():
    rng = np.random.default_rng(20)
    f0 = rng.uniform(-1, 1, (2, 2, 3, 3)).astype(np.float32)
    lam0 = np.array([0.4, 0.7], dtype=np.float32)
    eg0 = rng.standard_normal((2, 2)).astype(np.float32)
    eb0 = rng.standard_normal((2, 2)).astype(np.float32)
    donor = np.array([1, 0])
    target = rng.uniform(-1, 1, (2, 2, 3, 3)).astype(np.float32)
    scale = so.NoiseScale(
        np.array([0.5, 1.5], np.float32), np.array([2.0, 0.25], np.float32)
    )

    def run(lam_t, eg_t, eb_t, f_t):
        params = so.StyleParams(
            lambda_mix=lam_t,
            eps_gamma=[eg_t],
            eps_beta=[eb_t],
            donor=donor,
            gate=np.array([True]),
        )
        out = so.maxstyle_transform(f_t, params, scale, layer=0)
        return nd.mse(out, Tensor(target))

    lam = Tensor(lam0, requires_grad=True)
    eg = Tensor(eg0, requires_grad=True)
    eb = Tensor(eb0, requires_grad=True)
    f = Tensor(f0, requires_grad=True)
    with nd.record():
        nd.backward(run(lam, eg, eb, f))

    h = 5e-3  # smooth path, larger step keeps float32 round-off below the floor
    fd_lam = nd.finite_diff_grad(lambda t: run(t, Tensor(eg0), Tensor(eb0), Tensor(f0)), Tensor(lam0), h=h)
    fd_eg = nd.finite_diff_grad(lambda t: run(Tensor(lam0), t, Tensor(eb0), Tensor(f0)), Tensor(eg0), h=h)
    fd_eb = nd.finite_diff_grad(lambda t: run(Tensor(lam0), Tensor(eg0), t, Tensor(f0)), Tensor(eb0), h=h)
    fd_f = nd.finite_diff_grad(lambda t: run(Tensor(lam0), Tensor(eg0), Tensor(eb0), t), Tensor(f0), h=h)
    assert_grads_close(lam.grad, fd_lam.data)
    assert_grads_close(eg.grad, fd_eg.data)
    assert_grads_close(eb.grad, fd_eb.data)
    assert_grads_close(f.grad, fd_f.data)


def test_params_copy_is_deep():
    p = so.sample_style_params(np.random.default_rng(21), 3, [4], 0.5)
    q = p.copy()
    q.lambda_mix.data[0] = -1
    assert p.lambda_mix.data[0] != -1
    q.gate[0] = not q.gate[0]
    assert p.gate[0] != q.gate[0]


def test_layer_validation():
    p = so.sample_style_params(np.random.default_rng(22), 2, [4], 0.5)
    f = nd.zeros((2, 4, 4, 4))
    with pytest.raises(ValidationError, match="layer"):
        so.mixstyle_transform(f, p, layer=3)
    bad = nd.zeros((2, 8, 4, 4))
    with pytest.raises(ValidationError, match="shaped"):
        so.mixstyle_transform(bad, p, layer=0)
