import numpy as np
import pytest
import torch

from lookahead_bo.acquisition import TreeLayout, TreeVariables, ei_analytic, stage_values
from lookahead_bo.gp import Dataset, GpModel, KernelHyperparams
from lookahead_bo.optimize import (
    OptimizationError,
    OptimizerConfig,
    WarmStartState,
    default_etas,
    default_gammas,
    gradient,
    optimize_box,
    parse_policy,
    promote_subtree,
    propose_next,
    run_restarts,
    warm_start_init,
)
from lookahead_bo.sampling import draw_base_samples


def toy_model(seed=0, n=6, d=1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    y = np.sin(6 * X).sum(1)
    return GpModel.from_data(Dataset(X, y), KernelHyperparams(np.full(d, 0.2), 1.0, 1e-4))


def central_difference(f, v, h=1e-5):
    g = np.empty_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (f(v + e) - f(v - e)) / (2 * h)
    return g


def quadratic(c):
    return lambda X: -((X - c) ** 2).sum(-1), lambda X: -2 * (X - c)


# gradients ----------------------------------------------------------------------


def test_gradient_of_quadratic():
    c = torch.tensor([0.2, 0.7], dtype=torch.float64)
    v = np.array([0.5, 0.1])
    assert np.allclose(gradient(lambda t: -((t - c) ** 2).sum(), v), -2 * (v - c.numpy()), atol=1e-14)


def test_gradient_rejects_non_finite():
    with pytest.raises(ValueError):
        gradient(lambda t: t.sum() / 0.0, np.array([1.0]))


def test_ei_gradient_through_the_posterior():
    model = toy_model()
    b = model.dataset.incumbent()

    def f(t):
        post = model.posterior(t.reshape(1, 1))
        return ei_analytic(post.mean[0], post.variance.sqrt()[0], torch.tensor(b, dtype=torch.float64))

    v = np.array([0.37])
    fd = central_difference(lambda u: float(f(torch.as_tensor(u))), v)
    assert np.allclose(gradient(f, v), fd, rtol=1e-4)


def test_three_step_tree_gradient():
    model = toy_model(1, d=2)
    layout = TreeLayout.tree(3, (3, 2), 2)
    samples = draw_base_samples(layout)
    b = model.dataset.incumbent()

    def f(t):
        return stage_values(model, layout, t, samples, b).sum()

    v = np.random.default_rng(0).uniform(0.05, 0.95, size=layout.n_variables)
    g = gradient(f, v)
    fd = central_difference(lambda u: float(f(torch.as_tensor(u))), v)
    big = np.abs(fd) > 1e-6
    assert np.all(np.abs(g[big] - fd[big]) <= 1e-4 * np.abs(fd[big]))


# box optimization ---------------------------------------------------------------


def test_interior_maximum():
    c = np.array([0.3, 0.6, 0.45])
    x, v = optimize_box(*quadratic(c), np.random.default_rng(0).uniform(size=(4, 3)))
    assert np.abs(x - c).max() < 1e-6


def test_boundary_maximum_is_the_projection():
    c = np.array([1.4, -0.3])
    x, _ = optimize_box(*quadratic(c), np.array([[0.5, 0.5]]))
    assert np.allclose(x, [1.0, 0.0], atol=1e-9)


def test_multimodal_restarts_are_monotone():
    def f(X):
        return np.sin(9 * X[:, 0]) * np.cos(7 * X[:, 1]) + X[:, 0]

    def g(X):
        return np.stack([9 * np.cos(9 * X[:, 0]) * np.cos(7 * X[:, 1]) + 1, -7 * np.sin(9 * X[:, 0]) * np.sin(7 * X[:, 1])], 1)

    inits = np.random.default_rng(1).uniform(size=(10, 2))
    res = run_restarts(f, g, inits)
    assert np.all(res.restart_values >= res.initial_values)
    assert res.value >= f(inits).max()
    assert np.all((res.x >= 0) & (res.x <= 1))


def test_non_finite_restarts():
    def f(X):
        out = -((X - 0.5) ** 2).sum(-1)
        return np.where(X[:, 0] < 0.2, np.nan, out)

    x, v = optimize_box(f, lambda X: -2 * (X - 0.5), np.array([[0.1], [0.9]]))
    assert abs(x[0] - 0.5) < 1e-6
    with pytest.raises(OptimizationError) as err:
        optimize_box(lambda X: np.full(len(X), np.inf), lambda X: X, np.array([[0.1], [0.9]]))
    assert "initial_values" in err.value.diagnostics


def test_inits_outside_bounds_rejected():
    with pytest.raises(ValueError):
        optimize_box(*quadratic(np.zeros(1)), np.array([[1.5]]))


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(restarts=0)
    with pytest.raises(ValueError):
        OptimizerConfig(gtol=0)


# warm start ---------------------------------------------------------------------


def warm_state(layout, fantasy_values, observed, seed=0):
    flat = np.random.default_rng(seed).uniform(size=layout.n_variables)
    return WarmStartState(layout, flat, np.asarray(fantasy_values, float), observed)


def test_nearest_branch_breaks_ties_low():
    layout = TreeLayout.tree(3, (3, 2), 1)
    assert warm_state(layout, [0.0, 1.0, 2.0], 0.9).nearest_branch() == 1
    assert warm_state(layout, [0.0, 1.0, 2.0], 1.5).nearest_branch() == 1
    assert warm_state(layout, [2.0, 0.0, 2.0], 2.0).nearest_branch() == 0


def test_promotion_moves_the_chosen_subtree_up():
    layout = TreeLayout.tree(3, (3, 2), 1)
    state = warm_state(layout, [0.0, 1.0, 2.0], 2.2)
    old = TreeVariables(layout, state.solution).levels()
    new = promote_subtree(state, layout, np.random.default_rng(0))
    assert np.array_equal(new[0], old[1][2])  # level-1 node of branch 2 becomes the root
    # new level 1 has 3 slots filled cyclically from the 2 old children
    assert np.array_equal(new[1][:, 0], old[2][2][[0, 1, 0], 0])
    assert new[2].shape == (3, 2, 1, 1)


def test_zero_perturbation_reuses_promoted_tree():
    layout = TreeLayout.tree(3, (3, 2), 2)
    state = warm_state(layout, [0.0, 1.0, 2.0], 0.1)
    n, D = 4, layout.n_variables
    promoted = TreeVariables.from_levels(layout, promote_subtree(state, layout, np.random.default_rng(5))).flat
    rng = np.random.default_rng(1)
    inits, fell_back = warm_start_init(
        state, n, layout, seed=5, gammas=np.zeros(n), etas=np.zeros(D),
        betas=rng.uniform(size=(n, D)), uniforms=rng.uniform(size=(n, D)),
    )
    assert not fell_back
    assert all(np.array_equal(v.flat, promoted) for v in inits)


def test_full_replacement_is_pure_noise():
    layout = TreeLayout.tree(2, (4,), 2)
    state = warm_state(layout, [0.0, 1.0, 2.0, 3.0], 3.0)
    n, D = 3, layout.n_variables
    u = np.random.default_rng(2).uniform(size=(n, D))
    inits, _ = warm_start_init(state, n, layout, gammas=np.ones(n), etas=default_etas(layout), uniforms=u)
    assert np.array_equal(np.stack([v.flat for v in inits]), u)


def test_warm_start_bounds_and_determinism():
    layout = TreeLayout.tree(3, (3, 2), 2)
    state = warm_state(layout, [0.0, 1.0, 2.0], 0.4)
    a, _ = warm_start_init(state, 5, layout, seed=9)
    b, _ = warm_start_init(state, 5, layout, seed=9)
    assert all(np.array_equal(x.flat, y.flat) for x, y in zip(a, b))
    assert all(np.all((v.flat >= 0) & (v.flat <= 1)) for v in a)


def test_default_spacings():
    assert np.allclose(default_gammas(5), [0, 0.225, 0.45, 0.675, 0.9])
    assert np.allclose(default_gammas(1), [0])
    etas = default_etas(TreeLayout.tree(3, (2, 2), 1))
    assert np.allclose(etas, [0, 0.5 / 3, 0.5 / 3, 1 / 3, 1 / 3, 1 / 3, 1 / 3])


def test_incompatible_layout_falls_back():
    state = warm_state(TreeLayout.tree(2, (3,), 2), [0.0, 1.0, 2.0], 0.4)
    inits, fell_back = warm_start_init(state, 3, TreeLayout.tree(2, (3,), 3), seed=0)
    assert fell_back and len(inits) == 3


def test_eno_promotion():
    layout = TreeLayout.eno(3, 2, 1)
    state = warm_state(layout, [5.0, 1.0], 1.2)
    old = TreeVariables(layout, state.solution).levels()
    new = promote_subtree(state, layout, np.random.default_rng(0))
    assert np.array_equal(new[0], old[1][1][:1])
    assert np.array_equal(new[1][:, 0], np.broadcast_to(old[1][1][1], (2, 1)))


# policies -----------------------------------------------------------------------


def test_parse_policy_layouts():
    assert parse_policy("3-step").layout(2) == TreeLayout.tree(3, (10, 5), 2)
    p = parse_policy("4-path")
    assert p.layout(1) == TreeLayout.tree(4, (1, 1, 1), 1) and p.mode == "gh"
    assert parse_policy("3-eno").layout(2) == TreeLayout.eno(3, 10, 2)
    assert parse_policy("binoculars-12").q == 12
    assert parse_policy("2-step", [7]).fantasy_counts == (7,)
    for bad in ("5-step", "3-step?", "binoculars-0", "1-path", "foo"):
        with pytest.raises(ValueError):
            parse_policy(bad)
    with pytest.raises(ValueError):
        parse_policy("3-step", [4])


def test_ei_proposal_near_grid_argmax():
    model = toy_model(2, n=5)
    b = model.dataset.incumbent()
    grid = np.linspace(0, 1, 10_001)
    post = model.posterior(torch.as_tensor(grid[:, None, None]))
    ei = ei_analytic(post.mean[:, 0], post.variance.sqrt()[:, 0], torch.tensor(b)).numpy()
    x, info = propose_next(model, b, parse_policy("ei"), seed=0)
    assert abs(x[0] - grid[np.argmax(ei)]) < 1e-2
    assert info["value"] == pytest.approx(ei.max(), rel=1e-4)


def test_proposals_are_deterministic():
    model = toy_model(3, d=2)
    pol = parse_policy("2-step", optimizer=OptimizerConfig(restarts=3, max_iter=20, raw_samples=16))
    a, _ = propose_next(model, model.dataset.incumbent(), pol, seed=4)
    b, _ = propose_next(model, model.dataset.incumbent(), pol, seed=4)
    assert np.array_equal(a, b)
