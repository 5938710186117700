import numpy as np
import pytest

from conftest import central_diff, random_context, rel_err
from modsiren.errors import ConfigError, UsageError
from modsiren.field_model import Latent, ModelConfig, SharedParams, forward, init_shared
from modsiren.gradient_engine import (
    ContextSet, grad_latent, gradients, inner_adapt, lr_for_omega, meta_gradient,
    meta_loss_and_gradient, mse_loss, omega_lr_equivalence, reduced_size, sample_indices,
)


def loop_mse(shared, phi, ctx):
    """Scalar-loop oracle for the per-signal loss."""
    total = 0.0
    for j in range(ctx.M):
        f = forward(shared, None if phi is None else Latent(phi), ctx.coords[j:j + 1])[0]
        total += sum((f[d] - ctx.values[j, d]) ** 2 for d in range(len(f)))
    return total / ctx.M


def unrolled_objective(config, flat, contexts, G, alpha):
    """Meta-objective recomputed from scratch, used for finite differences."""
    shared = SharedParams.from_flat(config, flat)
    total = 0.0
    for c in contexts:
        phi = np.zeros(config.P)
        for _ in range(G):
            phi = phi - alpha * grad_latent(shared, Latent(phi), c)
        total += mse_loss(shared, Latent(phi), c)
    return total / len(contexts)


def test_context_validation():
    with pytest.raises(UsageError):
        ContextSet(np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(UsageError):
        ContextSet(np.array([[1.5]]), np.array([[0.0]]))
    with pytest.raises(UsageError):
        ContextSet(np.zeros((2, 1)), np.zeros((3, 1)))
    with pytest.raises(UsageError):
        ContextSet(np.zeros((1, 1)), np.array([[np.inf]]))


def test_mse_hand_example(tiny_config):
    shared = SharedParams.from_flat(tiny_config, np.zeros(init_shared(tiny_config, 0).flat().size))
    ctx = ContextSet(np.array([[0.1], [0.2]]), np.array([[1.0], [1.0]]))
    assert mse_loss(shared, None, ctx) == 1.0


def test_mse_perfect_fit_is_zero(tiny_shared):
    x = np.linspace(-1, 1, 6)[:, None]
    phi = Latent(np.array([0.3, -0.2]))
    ctx = ContextSet(x, forward(tiny_shared, phi, x))
    assert mse_loss(tiny_shared, phi, ctx) == 0.0
    np.testing.assert_array_equal(grad_latent(tiny_shared, phi, ctx), 0.0)


def test_mse_matches_loop_oracle():
    shared = init_shared(ModelConfig(K=4, L=5, P=3, C=2, D=2), 0)
    rng = np.random.default_rng(0)
    ctx = random_context(rng, 9, C=2, D=2)
    phi = rng.normal(size=3)
    assert mse_loss(shared, Latent(phi), ctx) == pytest.approx(loop_mse(shared, phi, ctx), abs=1e-12)


def test_grad_latent_matches_finite_differences(tiny_shared):
    rng = np.random.default_rng(2)
    for _ in range(5):
        ctx = random_context(rng, 5)
        phi = rng.normal(size=2)
        g = grad_latent(tiny_shared, Latent(phi), ctx)
        fd = central_diff(lambda p: mse_loss(tiny_shared, Latent(p), ctx), phi)
        assert rel_err(g, fd).max() < 1e-6


def test_grad_latent_linear_in_residual(tiny_shared):
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(5, 1))
    phi = Latent(rng.normal(size=2))
    f = forward(tiny_shared, phi, x)
    r = rng.normal(size=f.shape)
    g1 = grad_latent(tiny_shared, phi, ContextSet(x, f + r))
    g2 = grad_latent(tiny_shared, phi, ContextSet(x, f + 2 * r))
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=1e-15)


def test_theta_gradient_matches_finite_differences(tiny_config, tiny_shared):
    rng = np.random.default_rng(4)
    ctx = random_context(rng, 5)
    phi = Latent(rng.normal(size=2))
    rep = gradients(tiny_shared, phi, ctx)
    fd = central_diff(lambda v: mse_loss(SharedParams.from_flat(tiny_config, v), phi, ctx),
                      tiny_shared.flat())
    assert rel_err(rep.grad_theta, fd).max() < 1e-6
    assert rep.loss == pytest.approx(mse_loss(tiny_shared, phi, ctx))


def test_inner_adapt_single_step(tiny_shared):
    ctx = random_context(np.random.default_rng(5), 5)
    phi, traj = inner_adapt(tiny_shared, ctx, G=1, alpha=0.1)
    expected = -0.1 * grad_latent(tiny_shared, Latent.zeros(2), ctx)
    np.testing.assert_allclose(phi.phi, expected, rtol=1e-14, atol=1e-16)
    assert len(traj) == 1


def test_inner_adapt_full_context_ignores_rng(tiny_shared):
    ctx = random_context(np.random.default_rng(6), 8)
    a, _ = inner_adapt(tiny_shared, ctx, 3, 0.1, 1.0, np.random.default_rng(1))
    b, _ = inner_adapt(tiny_shared, ctx, 3, 0.1, 1.0, np.random.default_rng(2))
    assert a.phi.tobytes() == b.phi.tobytes()


def test_inner_adapt_errors(tiny_shared):
    ctx = random_context(np.random.default_rng(0), 4)
    with pytest.raises(ConfigError):
        inner_adapt(tiny_shared, ctx, 0, 0.1)
    with pytest.raises(ConfigError):
        inner_adapt(tiny_shared, ctx, 1, 0.1, gamma=0.0)
    with pytest.raises(ConfigError):
        inner_adapt(tiny_shared, ctx, 1, 0.1, gamma=1.5)


@pytest.mark.parametrize("M,gamma,m", [(4096, 0.25, 1024), (10, 0.1, 1), (10, 0.15, 2),
                                       (7, 1.0, 7), (1000, 0.1, 100), (3, 0.01, 1)])
def test_reduced_size(M, gamma, m):
    assert reduced_size(M, gamma) == m


def test_sample_indices_distinct_and_uniform():
    rng = np.random.default_rng(0)
    counts = np.zeros(8)
    n = 100_000
    for _ in range(n):
        idx = sample_indices(8, 0.5, rng)
        assert len(set(idx.tolist())) == 4
        counts[idx] += 1
    assert np.all(np.abs(counts / n - 0.5) < 0.01)
    assert sample_indices(8, 1.0, rng) is None


def test_meta_gradient_matches_finite_differences(tiny_config, tiny_shared):
    rng = np.random.default_rng(7)
    contexts = [random_context(rng, 5) for _ in range(2)]
    g = meta_gradient(tiny_shared, contexts, G=2, alpha=0.5)
    fd = central_diff(lambda v: unrolled_objective(tiny_config, v, contexts, 2, 0.5),
                      tiny_shared.flat())
    assert rel_err(g, fd).max() < 1e-4
    g_fo = meta_gradient(tiny_shared, contexts, G=2, alpha=0.5, first_order=True)
    assert np.linalg.norm(g - g_fo) > 1e-6


def test_meta_gradient_g0_is_direct_gradient(tiny_shared):
    rng = np.random.default_rng(8)
    contexts = [random_context(rng, 5) for _ in range(3)]
    g = meta_gradient(tiny_shared, contexts, G=0, alpha=0.5)
    direct = np.mean([gradients(tiny_shared, None, c).grad_theta for c in contexts], axis=0)
    np.testing.assert_allclose(g, direct, rtol=1e-12, atol=1e-15)


def test_meta_gradient_batch_linearity_with_shared_streams(tiny_shared):
    rng = np.random.default_rng(9)
    contexts = [random_context(rng, 8) for _ in range(3)]
    seeds = [11, 12, 13]
    batch = meta_gradient(tiny_shared, contexts, 2, 0.3, 0.5,
                          [np.random.default_rng(s) for s in seeds])
    singles = [meta_gradient(tiny_shared, [c], 2, 0.3, 0.5, [np.random.default_rng(s)])
               for c, s in zip(contexts, seeds)]
    np.testing.assert_allclose(batch, np.mean(singles, axis=0), rtol=1e-12, atol=1e-15)


def test_meta_gradient_mixed_point_counts(tiny_shared):
    rng = np.random.default_rng(10)
    contexts = [random_context(rng, 5), random_context(rng, 7)]
    both = meta_gradient(tiny_shared, contexts, 2, 0.3)
    singles = [meta_gradient(tiny_shared, [c], 2, 0.3) for c in contexts]
    np.testing.assert_allclose(both, np.mean(singles, axis=0), rtol=1e-12, atol=1e-15)


def test_outer_loss_uses_full_context(tiny_shared):
    rng = np.random.default_rng(11)
    contexts = [random_context(rng, 20) for _ in range(2)]
    record = []
    meta_loss_and_gradient(tiny_shared, contexts, 3, 0.1, 0.25, np.random.default_rng(0),
                           record=record)
    assert record == [("inner", 5)] * 3 + [("outer", 20)]


def test_reduced_context_meta_gradient_matches_fd(tiny_config, tiny_shared):
    rng = np.random.default_rng(12)
    contexts = [random_context(rng, 8) for _ in range(2)]

    def objective(v):
        shared = SharedParams.from_flat(tiny_config, v)
        return meta_loss_and_gradient(shared, contexts, 2, 0.4, 0.5,
                                      [np.random.default_rng(s) for s in (1, 2)])[0]

    g = meta_gradient(tiny_shared, contexts, 2, 0.4, 0.5, [np.random.default_rng(s) for s in (1, 2)])
    fd = central_diff(objective, tiny_shared.flat())
    assert rel_err(g, fd).max() < 1e-4


def test_lr_for_omega_examples():
    assert lr_for_omega(1e-2, 30, 60) == pytest.approx(2.5e-3)
    assert lr_for_omega(1.0, 20, 200) == pytest.approx(0.01)


@pytest.mark.parametrize("pair", [(20, 200), (30, 60), (10, 400)])
def test_omega_lr_equivalence(pair):
    scaled = omega_lr_equivalence(*pair, 1e-2, 100)
    unscaled = omega_lr_equivalence(*pair, 1e-2, 100, scaled=False)
    assert scaled["max_rel_deviation"] <= 1e-9
    assert unscaled["max_rel_deviation"] > scaled["max_rel_deviation"]
    assert scaled["tau_n"] == pytest.approx(1e-2 * (pair[0] / pair[1]) ** 2)
    assert len(scaled["deviation_trace"]) == 101
