import math

import numpy as np
import pytest

from bacoun.datasets import GmmSpec, generate_gmm
from bacoun.errors import StateError
from bacoun.flow import (
    CouplingLayer,
    RealNvpFlow,
    ShellSpec,
    generate_boundary,
    outlier_filter,
    rank_lowest,
    sample_shell,
    train_flow,
)

LOG_2PI = math.log(2 * math.pi)


def identity_flow(dim=2, trained=True):
    f = RealNvpFlow.init(dim, n_layers=4, hidden_dims=(16,), rng=0)
    return RealNvpFlow(f.dim, f.layers, f.base_sigma, trained=trained)


def perturbed_flow(seed, dim=2, scale=0.3):
    rng = np.random.default_rng(seed)
    f = RealNvpFlow.init(dim, n_layers=5, hidden_dims=(16, 16), rng=rng,
                         data=rng.normal(1.0, 2.0, (50, dim)))
    return f.with_params([p + scale * rng.standard_normal(p.shape) for p in f.params()],
                         trained=True)


@pytest.fixture(scope="module")
def gmm_flow():
    x = generate_gmm(GmmSpec(sigma=math.sqrt(3.0), points_per_cluster=667), 0).x[:2000]
    f = RealNvpFlow.init(2, rng=1, data=x)
    trained, hist = train_flow(f, x, epochs=30, l2=1e-4, seed=2)
    return x, f, trained, hist


def test_identity_flow_forward():
    f = identity_flow()
    x = np.random.default_rng(0).standard_normal((10, 2))
    z, ld = f.forward(x)
    np.testing.assert_array_equal(z, x)
    np.testing.assert_array_equal(ld, 0.0)


def test_identity_flow_log_prob_values():
    f = identity_flow()
    lp = f.log_prob(np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert lp[0] == pytest.approx(-LOG_2PI, abs=1e-12)
    assert lp[1] == pytest.approx(-LOG_2PI - 0.5, abs=1e-12)
    assert -LOG_2PI == pytest.approx(-1.8378770664093453)


@pytest.mark.parametrize("seed", range(3))
def test_round_trip_and_log_det_antisymmetry(seed):
    f = perturbed_flow(seed)
    x = np.random.default_rng(seed + 10).normal(0, 3, (200, 2))
    z, ld_f = f.forward(x)
    xb, ld_i = f.inverse(z)
    assert np.max(np.abs(xb - x)) < 1e-6
    assert np.max(np.abs(ld_f + ld_i)) < 1e-10


def test_single_layer_keeps_masked_coordinates():
    f = perturbed_flow(4)
    layer = f.layers[0]
    bare = CouplingLayer(layer.mask, layer.scale_net, layer.translate_net, np.zeros(2), np.ones(2))
    x = np.random.default_rng(1).standard_normal((30, 2))
    y, _ = bare.forward(x)
    keep = layer.mask == 1
    assert np.array_equal(y[:, keep], x[:, keep])
    assert not np.allclose(y[:, ~keep], x[:, ~keep])


def test_log_prob_matches_change_of_variables():
    f = perturbed_flow(5)
    x = np.random.default_rng(2).standard_normal((20, 2))
    z, ld = f.forward(x)
    expected = -0.5 * (z**2).sum(1) - LOG_2PI + ld
    np.testing.assert_allclose(f.log_prob(x), expected, atol=1e-12)


def test_forward_rejects_nonfinite():
    with pytest.raises(ValueError):
        identity_flow().forward(np.array([[np.nan, 0.0]]))


def test_training_reduces_nll_and_stays_invertible(gmm_flow):
    x, f0, f, hist = gmm_flow
    assert hist[-1] < hist[0] - 1e-3
    pts = np.random.default_rng(3).normal(0, 4, (1000, 2))
    z, _ = f.forward(pts)
    assert np.max(np.abs(f.inverse(z)[0] - pts)) < 1e-6


def test_zero_epochs_leaves_parameters():
    x = np.random.default_rng(0).standard_normal((40, 2))
    f = RealNvpFlow.init(2, rng=0, data=x)
    g, hist = train_flow(f, x, epochs=0)
    assert len(hist) == 1
    for p, q in zip(f.params(), g.params()):
        assert np.array_equal(p, q)


def test_training_is_deterministic():
    x = np.random.default_rng(0).standard_normal((100, 2))
    f = RealNvpFlow.init(2, n_layers=2, hidden_dims=(8,), rng=0, data=x)
    a, _ = train_flow(f, x, epochs=2, batch_size=32, seed=9)
    b, _ = train_flow(f, x, epochs=2, batch_size=32, seed=9)
    assert a.to_json() == b.to_json()


def test_train_rejects_empty():
    f = RealNvpFlow.init(2, rng=0)
    with pytest.raises(ValueError):
        train_flow(f, np.zeros((0, 2)), epochs=1)


# 1-D flows -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def normal_1d_flow():
    x = np.random.default_rng(0).standard_normal((5000, 1))
    f = RealNvpFlow.init(1, rng=1, data=x)
    trained, _ = train_flow(f, x, epochs=5, seed=2)
    return trained


def test_1d_standard_normal_density_at_zero(normal_1d_flow):
    lp0 = normal_1d_flow.log_prob(np.array([[0.0]]))[0]
    assert abs(lp0 - (-0.5 * LOG_2PI)) < 0.15


def test_1d_density_integrates_to_one(normal_1d_flow):
    grid = np.linspace(-8, 8, 4001)
    dens = np.exp(normal_1d_flow.log_prob(grid[:, None]))
    mass = np.trapezoid(dens, grid)
    assert abs(mass - 1.0) < 0.02


def test_1d_bimodal_mixture_learned():
    rng = np.random.default_rng(0)
    x = (rng.choice([-4.0, 4.0], 4000) + 0.5 * rng.standard_normal(4000))[:, None]
    f = RealNvpFlow.init(1, rng=1, data=x)
    trained, hist = train_flow(f, x, epochs=40, seed=2)
    lp = trained.log_prob(np.array([[-4.0], [4.0], [0.0]]))
    assert lp[:2].mean() >= lp[2] + 2.0
    assert hist[-1] < hist[0]


# shell and boundary -------------------------------------------------------------------

def test_shell_norms():
    z = sample_shell(ShellSpec(3.0, 3.1), 2, 10000, np.random.default_rng(0))
    r = np.linalg.norm(z, axis=1)
    assert np.all((r > 3.0) & (r < 3.1))


def test_shell_1d_two_intervals():
    z = sample_shell(ShellSpec(1.0, 2.0), 1, 2000, np.random.default_rng(1))[:, 0]
    assert np.all(((z > 1) & (z < 2)) | ((z > -2) & (z < -1)))
    assert 0.4 < np.mean(z > 0) < 0.6


def test_shell_directions_centered():
    z = sample_shell(ShellSpec(1.0, 1.5), 3, 10000, np.random.default_rng(2))
    u = z / np.linalg.norm(z, axis=1, keepdims=True)
    assert np.linalg.norm(u.mean(axis=0)) < 0.1


def test_shell_validation():
    with pytest.raises(ValueError):
        ShellSpec(3.0, 3.0)
    with pytest.raises(ValueError):
        ShellSpec(0.0, 1.0)


def test_boundary_identity_flow_is_shell_sample():
    spec = ShellSpec(3.0, 3.1)
    x = generate_boundary(identity_flow(), spec, 50, np.random.default_rng(7))
    z = sample_shell(spec, 2, 50, np.random.default_rng(7))
    np.testing.assert_array_equal(x, z)


def test_boundary_requires_trained_flow():
    with pytest.raises(StateError):
        generate_boundary(identity_flow(trained=False), ShellSpec(), 5, 0)


def test_boundary_round_trip_norms(gmm_flow):
    _, _, f, _ = gmm_flow
    spec = ShellSpec(3.0, 3.1)
    x = generate_boundary(f, spec, 500, np.random.default_rng(1))
    r = np.linalg.norm(f.forward(x)[0], axis=1)
    assert np.all((r > 3.0 - 1e-4) & (r < 3.1 + 1e-4))


def test_boundary_points_are_low_density(gmm_flow):
    x, _, f, _ = gmm_flow
    b = generate_boundary(f, ShellSpec(3.0, 3.1), 2000, np.random.default_rng(2))
    cutoff = np.percentile(f.log_prob(x), 5)
    assert np.mean(f.log_prob(b) < cutoff) >= 0.95


def test_flow_json_round_trip(gmm_flow):
    _, _, f, _ = gmm_flow
    back = RealNvpFlow.from_json(f.to_json())
    x = np.random.default_rng(0).standard_normal((20, 2))
    np.testing.assert_array_equal(back.log_prob(x), f.log_prob(x))
    assert back.to_json() == f.to_json()


# outlier filtering ---------------------------------------------------------------------

def test_outlier_filter_extremes():
    f = identity_flow()
    x = np.random.default_rng(0).standard_normal((12, 2))
    r0 = outlier_filter(f, x, 0)
    assert len(r0.removed) == 0 and len(r0.kept) == 12
    r_all = outlier_filter(f, x, 12)
    assert len(r_all.removed) == 12 and len(r_all.kept) == 0
    with pytest.raises(ValueError):
        outlier_filter(f, x, 13)


def test_outlier_filter_removes_lowest_and_partitions():
    f = identity_flow()
    x = np.random.default_rng(1).standard_normal((30, 2))
    x[[4, 17]] *= 20
    r = outlier_filter(f, x, 2)
    assert list(r.removed) == [4, 17]
    assert sorted(np.concatenate([r.kept, r.removed])) == list(range(30))


def test_rank_ties_prefer_lower_index():
    removed, kept = rank_lowest([1.0, 0.0, 0.0, 0.0, 2.0], 2)
    assert list(removed) == [1, 2]
    assert list(kept) == [0, 3, 4]


def test_rank_invariant_under_monotone_transform():
    s = np.random.default_rng(3).standard_normal(100)
    for k in (0, 5, 50, 100):
        a, _ = rank_lowest(s, k)
        b, _ = rank_lowest(np.exp(3 * s) + 1, k)
        assert np.array_equal(a, b)
