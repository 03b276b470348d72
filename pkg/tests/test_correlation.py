import math

import numpy as np
import pytest
import torch

from mmbts.correlation import (
    CorrelationParams,
    Cpem,
    ccl_loss,
    feature_to_distribution,
    joint_intensity_histogram,
    lcem_forward,
    save_histogram,
    source_indices,
)
from mmbts.errors import StatisticsError
from mmbts.volumes import Modality, PhantomSpec, generate_phantom


def random_params(rng, channels, scale=1.0):
    t = lambda: torch.tensor(rng.normal(0, scale, channels), dtype=torch.float64)
    return CorrelationParams(t(), t(), t(), t(), t())


def random_maps(rng, n, shape):
    return [torch.tensor(rng.normal(0, 1, shape), dtype=torch.float64) for _ in range(n)]


def lcem_scalar_loop(params, sources):
    """Independent element-by-element evaluation of the linear expression."""
    weights = [params.alpha, params.beta, params.gamma, params.delta]
    c, d, h, w = sources[0].shape
    out = np.zeros((c, d, h, w))
    for ci in range(c):
        for di in range(d):
            for hi in range(h):
                for wi in range(w):
                    acc = float(params.sigma[ci])
                    for wgt, src in zip(weights, sources):
                        acc += float(wgt[ci]) * float(src[ci, di, hi, wi])
                    out[ci, di, hi, wi] = acc
    return out


# -- canonical ordering --------------------------------------------------------


def test_source_indices_fixed_and_ascending():
    assert source_indices(0) == (1, 2, 3, 4)
    assert source_indices(2) == (0, 1, 3, 4)
    assert source_indices(4) == (0, 1, 2, 3)
    for i in range(5):
        first = source_indices(i)
        assert all(source_indices(i) == first for _ in range(3))
        assert list(first) == sorted(first)
        assert i not in first


def test_source_indices_out_of_range():
    with pytest.raises(ValueError):
        source_indices(5)


# -- LCEM ------------------------------------------------------------------------


def test_lcem_matches_scalar_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        params = random_params(rng, 3)
        sources = random_maps(rng, 4, (3, 2, 2, 2))
        got = lcem_forward(params, sources).numpy()
        want = lcem_scalar_loop(params, sources)
        np.testing.assert_allclose(got, want, atol=1e-6)


def test_lcem_zero_weights_gives_constant_sigma():
    zeros = torch.zeros(4, dtype=torch.float64)
    sigma = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)
    params = CorrelationParams(zeros, zeros, zeros, zeros, sigma)
    sources = random_maps(np.random.default_rng(1), 4, (4, 2, 2, 2))
    out = lcem_forward(params, sources)
    for c in range(4):
        assert torch.allclose(out[c], torch.full((2, 2, 2), sigma[c], dtype=torch.float64))


def test_lcem_selector_case():
    ones = torch.ones(3, dtype=torch.float64)
    zeros = torch.zeros(3, dtype=torch.float64)
    params = CorrelationParams(ones, zeros, zeros, zeros, zeros)
    sources = random_maps(np.random.default_rng(2), 4, (3, 2, 2, 2))
    out = lcem_forward(params, sources)
    assert torch.equal(out, sources[0])


def test_lcem_affine_identity():
    # lcem(a*f + b*g) = a*lcem(f) + b*lcem(g) - (a+b-1)*sigma term
    rng = np.random.default_rng(3)
    params = random_params(rng, 2)
    f = random_maps(rng, 4, (2, 2, 2, 2))
    g = random_maps(rng, 4, (2, 2, 2, 2))
    a, b = 0.7, -1.3
    mixed = [a * fi + b * gi for fi, gi in zip(f, g)]
    lhs = lcem_forward(params, mixed)
    sigma_map = params.sigma.reshape(2, 1, 1, 1)
    rhs = a * lcem_forward(params, f) + b * lcem_forward(params, g) - (a + b - 1) * sigma_map
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_lcem_shape_mismatch():
    rng = np.random.default_rng(4)
    params = random_params(rng, 2)
    sources = random_maps(rng, 3, (2, 2, 2, 2)) + [torch.zeros(2, 3, 2, 2, dtype=torch.float64)]
    with pytest.raises(ValueError):
        lcem_forward(params, sources)


# -- distributions & CCL ---------------------------------------------------------


def test_distribution_of_constant_map_is_uniform():
    d = feature_to_distribution(torch.full((2, 3, 1, 1), 4.2))
    assert torch.allclose(d, torch.full((6,), 1 / 6))


def test_distribution_two_elements():
    d = feature_to_distribution(torch.tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(d.numpy(), [0.25, 0.75], atol=1e-6)


def test_distribution_shift_invariant():
    rng = np.random.default_rng(5)
    f = torch.tensor(rng.normal(0, 1, (3, 2, 2, 2)))
    assert torch.allclose(feature_to_distribution(f), feature_to_distribution(f + 7.5))


def test_distribution_positive_and_normalized():
    rng = np.random.default_rng(6)
    for _ in range(10):
        d = feature_to_distribution(torch.tensor(rng.normal(0, 3, (4, 2, 2, 2))))
        assert (d > 0).all()
        assert abs(float(d.sum()) - 1.0) <= 1e-6


def test_ccl_zero_at_identity():
    rng = np.random.default_rng(7)
    maps = random_maps(rng, 5, (4, 2, 2, 2))
    assert float(ccl_loss(maps, maps)) <= 1e-6


def test_ccl_hand_value():
    f = torch.tensor([0.0, 0.0], dtype=torch.float64)
    g = torch.tensor([math.log(9.0), 0.0], dtype=torch.float64)
    assert abs(float(ccl_loss([f], [g])) - 0.5108) <= 1e-4


def test_ccl_nonnegative_on_random_maps():
    rng = np.random.default_rng(8)
    for _ in range(50):
        f = random_maps(rng, 5, (4, 2, 2, 2))
        g = random_maps(rng, 5, (4, 2, 2, 2))
        assert float(ccl_loss(f, g)) >= -1e-9


def test_ccl_batched_matches_mean_of_singles():
    rng = np.random.default_rng(9)
    f = torch.tensor(rng.normal(0, 1, (3, 2, 2, 2, 2)))
    g = torch.tensor(rng.normal(0, 1, (3, 2, 2, 2, 2)))
    batched = float(ccl_loss([f], [g], batched=True))
    singles = np.mean([float(ccl_loss([f[i]], [g[i]])) for i in range(3)])
    assert abs(batched - singles) <= 1e-6


def central_diff(fn, x, step=1e-3):
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a, b):
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-8)
    return float((a - b).abs().max()) / denom


def test_ccl_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    f = torch.tensor(rng.normal(0, 1, (2, 2, 2, 2)), requires_grad=True)
    g = torch.tensor(rng.normal(0, 1, (2, 2, 2, 2)), requires_grad=True)
    ccl_loss([f], [g]).backward()
    fd_f = central_diff(lambda: float(ccl_loss([f], [g]).detach()), f.data)
    fd_g = central_diff(lambda: float(ccl_loss([f], [g]).detach()), g.data)
    assert relative_error(f.grad, fd_f) <= 1e-3
    assert relative_error(g.grad, fd_g) <= 1e-3


def test_lcem_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    params = random_params(rng, 2)
    for t in (params.alpha, params.beta, params.gamma, params.delta, params.sigma):
        t.requires_grad_(True)
    sources = random_maps(rng, 4, (2, 2, 2, 2))
    for s in sources:
        s.requires_grad_(True)
    weights = torch.tensor(rng.normal(0, 1, (2, 2, 2, 2)))

    def value():
        return (lcem_forward(params, sources) * weights).sum()

    value().backward()
    for tensor in [params.alpha, params.sigma, sources[0], sources[3]]:
        fd = central_diff(lambda: float(value().detach()), tensor.data)
        assert relative_error(tensor.grad, fd) <= 1e-3


# -- CPEM -------------------------------------------------------------------------


def test_cpem_output_structure():
    torch.manual_seed(0)
    cpem = Cpem(8)
    f = torch.randn(8, 2, 2, 2)
    params = cpem(f)
    for vec in (params.alpha, params.beta, params.gamma, params.delta, params.sigma):
        assert vec.shape == (8,)


def test_cpem_zero_map_finite():
    torch.manual_seed(1)
    cpem = Cpem(4)
    params = cpem(torch.zeros(4, 2, 2, 2))
    for vec in (params.alpha, params.beta, params.gamma, params.delta, params.sigma):
        assert torch.isfinite(vec).all()


def test_cpem_deterministic():
    torch.manual_seed(2)
    cpem = Cpem(4)
    f = torch.randn(4, 2, 2, 2)
    a = cpem(f)
    b = cpem(f)
    assert torch.equal(a.alpha, b.alpha) and torch.equal(a.sigma, b.sigma)


def test_cpem_channel_mismatch():
    cpem = Cpem(4)
    with pytest.raises(ValueError):
        cpem(torch.zeros(5, 2, 2, 2))


def test_cpem_batched_matches_unbatched():
    torch.manual_seed(3)
    cpem = Cpem(4)
    f = torch.randn(2, 4, 2, 2, 2)
    batched = cpem(f)
    single = cpem(f[0])
    assert torch.allclose(batched.alpha[0], single.alpha)


# -- joint intensity histogram ----------------------------------------------------


def test_histogram_identity_has_r_one_and_diagonal_mass():
    rng = np.random.default_rng(12)
    vol = rng.normal(1.0, 0.5, (10, 10, 10))
    vol[rng.random((10, 10, 10)) < 0.3] = 0.0
    counts, _, _, r = joint_intensity_histogram(vol, vol, bins=16)
    assert abs(r - 1.0) <= 1e-6
    off_diag = counts.sum() - np.trace(counts)
    assert off_diag == 0


def test_histogram_negation_has_r_minus_one():
    rng = np.random.default_rng(13)
    vol = rng.normal(1.0, 0.5, (8, 8, 8))
    _, _, _, r = joint_intensity_histogram(vol, -vol, bins=8)
    assert abs(r + 1.0) <= 1e-6


def test_histogram_phantom_pair_strongly_correlated():
    spec = PhantomSpec(shape=(20, 20, 20), tumor_radius=(4.0, 6.0), latent_count=1,
                       noise_sigma=0.0, seed=21)
    volume, _ = generate_phantom(spec)
    a = volume.volumes[Modality.T1]
    b = volume.volumes[Modality.T1C]
    _, _, _, r = joint_intensity_histogram(a, b, bins=32)
    assert abs(r) >= 0.999


def test_histogram_too_few_voxels():
    vol = np.zeros((4, 4, 4))
    vol[0, 0, 0] = 1.0
    with pytest.raises(StatisticsError):
        joint_intensity_histogram(vol, vol, bins=4)


def test_histogram_export_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    vol = rng.normal(1, 0.3, (6, 6, 6))
    counts, ea, eb, r = joint_intensity_histogram(vol, vol * 2, bins=8)
    csv_path, json_path = save_histogram(counts, ea, eb, r, tmp_path / "hist")
    assert csv_path.exists() and json_path.exists()
    import json as _json

    record = _json.loads(json_path.read_text())
    assert record["bins"] == 8
    assert abs(record["pearson_r"] - r) <= 1e-12
