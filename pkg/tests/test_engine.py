import numpy as np
import pytest

from easelct.engine import (
    EaselParams,
    ReconstructionError,
    easel_reconstruct,
    langevin_prior_step,
    langevin_sample,
    momentum_update,
    sqs_data_step,
    step_size,
)
from easelct.geometry import FanBeamGeometry, ImageGrid, Projector, build_dense_matrix
from easelct.score import GmmDensity, gmm_score_function, make_schedule


def zero_score(x, sigma):
    return np.zeros_like(x)


@pytest.fixture(scope="module")
def small():
    grid = ImageGrid(16, 16, 1.0)
    geo = FanBeamGeometry(24, 32, 2.0, 60.0, 120.0)
    P = Projector(geo, grid)
    x_true = np.zeros(grid.shape)
    x_true[4:12, 5:11] = 1.0
    return grid, geo, P, x_true


def test_step_size_examples():
    assert step_size(0.01, 0.01, 1.8e-5) == 1.8e-5
    assert step_size(2.0, 1.0, 1.0) == 4.0
    with pytest.raises(ValueError):
        step_size(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        step_size(1.0, 1.0, 0.0)


def test_default_parameters():
    p = EaselParams()
    assert (p.T, p.tau, p.beta, p.gamma, p.lam, p.channels) == (150, 1.8e-5, 150.0, 0.5, 150.0, 10)


@pytest.mark.parametrize(
    "kw", [dict(T=-1), dict(tau=0.0), dict(beta=-1.0), dict(gamma=1.5), dict(channels=0), dict(gradient_at="u")]
)
def test_params_validation(kw):
    with pytest.raises(ValueError):
        EaselParams(**kw)


def test_langevin_zero_step_and_identity():
    x = np.random.default_rng(0).random((3, 3))
    np.testing.assert_array_equal(langevin_prior_step(x, zero_score, 1.0, 0.0), x)
    np.testing.assert_array_equal(langevin_prior_step(x, zero_score, 1.0, 0.3, z=np.zeros((3, 3))), x)


def test_langevin_hand_computed_2x2():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    scripted = np.array([[0.5, -1.0], [2.0, 0.0]])
    rng = np.random.default_rng(42)
    z = np.random.default_rng(42).standard_normal((2, 2))
    eps = 0.04
    u = langevin_prior_step(x, lambda a, s: scripted, 0.1, eps, rng)
    expected = np.array(
        [
            [1.0 + 0.02 * 0.5 + 0.2 * z[0, 0], 2.0 - 0.02 + 0.2 * z[0, 1]],
            [3.0 + 0.04 + 0.2 * z[1, 0], 4.0 + 0.2 * z[1, 1]],
        ]
    )
    np.testing.assert_allclose(u, expected, rtol=1e-15)


def test_langevin_non_finite_score_aborts():
    with pytest.raises(ReconstructionError):
        langevin_prior_step(np.zeros(2), lambda x, s: np.array([np.nan, 0.0]), 1.0, 0.1, z=np.zeros(2))


def test_sqs_fixed_point(small):
    grid, geo, P, x_true = small
    y = P.forward(x_true)
    out = sqs_data_step(x_true, x_true, x_true, y, P.forward, P.back, 150.0, P.sqs_denominator())
    np.testing.assert_array_equal(out, x_true)


def test_sqs_descent_on_dense_oracle():
    grid = ImageGrid(16, 16, 1.0)
    geo = FanBeamGeometry(8, 16, 4.0, 60.0, 120.0)
    A = build_dense_matrix(geo, grid)
    rng = np.random.default_rng(0)
    y = A @ rng.random(grid.n_pixels)
    denom = (A.T @ (A @ np.ones(grid.n_pixels))).reshape(grid.shape)
    fwd = lambda x: (A @ x.ravel()).reshape(geo.shape)  # noqa: E731
    back = lambda s: (A.T @ s.ravel()).reshape(grid.shape)  # noqa: E731
    x = np.zeros(grid.shape)
    y = y.reshape(geo.shape)
    for _ in range(20):
        new = sqs_data_step(x, x, x, y, fwd, back, 0.0, denom)
        assert np.linalg.norm(y - fwd(new)) <= np.linalg.norm(y - fwd(x))
        x = new


def test_sqs_surrogate_objective_non_increasing(small):
    grid, geo, P, x_true = small
    rng = np.random.default_rng(1)
    y = P.forward(x_true) + 0.1 * rng.standard_normal(geo.shape)
    u = rng.random(grid.shape)
    beta = 5.0

    def F(x):
        return np.sum((y - P.forward(x)) ** 2) + beta * np.sum((x - u) ** 2)

    x = np.zeros(grid.shape)
    vals = [F(x)]
    for _ in range(30):
        x = sqs_data_step(x, x, u, y, P.forward, P.back, beta, P.sqs_denominator())
        vals.append(F(x))
    assert np.all(np.diff(vals) <= 1e-12 * vals[0])


def test_sqs_leaves_uncovered_pixels_and_rejects_shapes():
    denom = np.array([[0.0, 1.0]])
    w = np.array([[7.0, 1.0]])
    out = sqs_data_step(np.zeros((1, 2)), w, np.zeros((1, 2)), np.zeros(1), lambda x: x.sum(keepdims=True)[0], lambda s: np.full((1, 2), s[0]), 0.0, denom)
    assert out[0, 0] == 7.0
    with pytest.raises(ValueError):
        sqs_data_step(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), None, None, None, 1.0, np.ones((2, 2)))


def test_momentum_examples():
    assert momentum_update(2.0, 1.0, 0.5) == 2.5
    x = np.random.default_rng(0).random(4)
    np.testing.assert_array_equal(momentum_update(x, x * 3, 0.0), x)
    np.testing.assert_array_equal(momentum_update(x, x, 0.7), x)
    with pytest.raises(ValueError):
        momentum_update(x, x, -0.1)


def _scalar_problem(a):
    grid = ImageGrid(1, 1, a)
    geo = FanBeamGeometry(1, 1, 10.0 * a, 50.0, 100.0, angles=np.array([0.0]))
    return grid, geo


def test_scalar_recursion_oracle():
    a, y0, x0 = 1.0, 3.0, 0.5
    grid, geo = _scalar_problem(a)
    P = Projector(geo, grid)
    assert P.matrix.toarray()[0, 0] == pytest.approx(a)
    params = EaselParams(T=2, beta=1.0, gamma=0.0, tau=1e-3)
    x, trace = easel_reconstruct(
        np.array([[y0]]), geo, grid, zero_score, make_schedule(0.5, 0.5, 1), params, np.random.default_rng(0),
        np.array([[x0]]), noise=False, projector=P,
    )
    ref = x0
    for _ in range(2):
        ref = ref - a * (a * ref - y0) / (a * a + 1)
    assert x[0, 0] == pytest.approx(ref, rel=1e-14)
    assert len(trace) == 2


def test_t_zero_returns_x0(small):
    grid, geo, P, x_true = small
    x0 = np.random.default_rng(0).random(grid.shape)
    x, trace = easel_reconstruct(
        P.forward(x_true), geo, grid, zero_score, make_schedule(1, 0.1, 3), EaselParams(T=0), np.random.default_rng(0), x0, projector=P
    )
    np.testing.assert_array_equal(x, x0)
    assert x is not x0 and len(trace) == 0


def test_trace_layout_and_step_schedule(small):
    grid, geo, P, x_true = small
    sched = make_schedule(1.0, 0.01, 4)
    params = EaselParams(T=3, tau=2e-5, beta=10.0)
    _, trace = easel_reconstruct(
        P.forward(x_true), geo, grid, zero_score, sched, params, np.random.default_rng(0), np.zeros(grid.shape),
        reference=x_true, projector=P,
    )
    assert len(trace) == 12
    np.testing.assert_array_equal(trace.column("iteration"), np.arange(12))
    np.testing.assert_array_equal(trace.column("sigma"), np.repeat(sched.sigmas, 3))
    assert list(trace.column("epsilon")) == [2e-5 * s**2 / 0.01**2 for s in np.repeat(sched.sigmas, 3)]
    assert trace.records[-1].epsilon == 2e-5
    assert np.all(np.diff(trace.column("sigma")) <= 0)
    assert np.isfinite(trace.column("psnr")).all()


def test_trace_csv(small, tmp_path):
    grid, geo, P, x_true = small
    _, trace = easel_reconstruct(
        P.forward(x_true), geo, grid, zero_score, make_schedule(1, 0.1, 2), EaselParams(T=2), np.random.default_rng(0),
        np.zeros(grid.shape), projector=P,
    )
    trace.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,level,t,sigma,epsilon,residual,psnr,ssim"
    assert len(lines) == 5


def test_pure_sqs_residual_monotone_64():
    grid = ImageGrid(64, 64, 1.0)
    geo = FanBeamGeometry(90, 96, 2.5, 150.0, 300.0)
    P = Projector(geo, grid)
    x_true = np.zeros(grid.shape)
    x_true[16:48, 20:44] = 1.0
    y = P.forward(x_true) + 0.05 * np.random.default_rng(0).standard_normal(geo.shape)
    params = EaselParams(T=100, gamma=0.0, beta=1.0)
    _, trace = easel_reconstruct(
        y, geo, grid, zero_score, make_schedule(1.0, 0.01, 5), params, np.random.default_rng(0), np.zeros(grid.shape),
        noise=False, projector=P,
    )
    r = trace.column("residual")
    assert len(r) == 500
    assert np.all(np.diff(r) <= 1e-12 * r[0])


def test_fixed_point_never_moves(small):
    grid, geo, P, x_true = small
    y = P.forward(x_true)
    x, _ = easel_reconstruct(
        y, geo, grid, zero_score, make_schedule(1, 0.1, 3), EaselParams(T=5), np.random.default_rng(0), x_true,
        noise=False, projector=P,
    )
    np.testing.assert_array_equal(x, x_true)


def test_determinism(small):
    grid, geo, P, x_true = small
    g = GmmDensity([1.0], [np.full(grid.n_pixels, 0.5)], [0.1])
    score = lambda x, s: gmm_score_function(g)(x.ravel(), s).reshape(x.shape)  # noqa: E731
    run = lambda: easel_reconstruct(  # noqa: E731
        P.forward(x_true), geo, grid, score, make_schedule(1, 0.1, 3), EaselParams(T=4), np.random.default_rng(9),
        np.zeros(grid.shape), projector=P,
    )[0]
    np.testing.assert_array_equal(run(), run())


def test_non_finite_iterate_aborts_with_trace(small):
    grid, geo, P, x_true = small
    calls = {"n": 0}

    def bad(x, s):
        calls["n"] += 1
        return np.full_like(x, np.inf) if calls["n"] > 3 else np.zeros_like(x)

    with pytest.raises(ReconstructionError) as info:
        easel_reconstruct(
            P.forward(x_true), geo, grid, bad, make_schedule(1, 0.1, 2), EaselParams(T=5), np.random.default_rng(0),
            np.zeros(grid.shape), projector=P,
        )
    assert "iteration 3" in str(info.value)
    assert len(info.value.trace) == 3


def test_gradient_at_w_variant_runs(small):
    grid, geo, P, x_true = small
    y = P.forward(x_true)
    for where in ("x", "w"):
        x, _ = easel_reconstruct(
            y, geo, grid, zero_score, make_schedule(1, 0.1, 2), EaselParams(T=30, gradient_at=where, beta=0.1),
            np.random.default_rng(0), np.zeros(grid.shape), noise=False, projector=P,
        )
        assert np.linalg.norm(P.forward(x) - y) < 0.5 * np.linalg.norm(y)


def test_normalized_units_leave_pure_data_steps_unchanged(small):
    grid, geo, P, x_true = small
    y = P.forward(0.02 * x_true)
    sched = make_schedule(1, 0.1, 2)
    runs = [
        easel_reconstruct(
            y, geo, grid, zero_score, sched, EaselParams(T=20, beta=0.0, gamma=0.5, scale=k), np.random.default_rng(0),
            np.zeros(grid.shape), noise=False, projector=P,
        )[0]
        for k in (1.0, 0.02)
    ]
    np.testing.assert_allclose(runs[1], runs[0], rtol=1e-10, atol=1e-14)


def test_langevin_sample_gaussian_mean():
    mu = np.array([1.0, -2.0])
    s = 0.5
    g = GmmDensity([1.0], [mu], [s**2])
    x = langevin_sample(gmm_score_function(g), make_schedule(1.0, 0.01, 10), 100, 1e-5, np.random.default_rng(0), np.zeros((2000, 2)))
    assert np.all(np.abs(x.mean(axis=0) - mu) < 0.05 * s)


def _mode_weights(samples):
    return np.mean(samples < 0)


def test_annealed_sampler_recovers_mode_weights():
    g = GmmDensity([0.8, 0.2], [[-5.0], [5.0]], [1.0, 1.0])
    sched = make_schedule(10.0, 0.1, 10)
    x0 = np.random.default_rng(1).uniform(-8, 8, size=(5000, 1))
    x = langevin_sample(gmm_score_function(g), sched, 300, 2e-3, np.random.default_rng(2), x0)
    assert abs(_mode_weights(x) - 0.8) < 0.05
