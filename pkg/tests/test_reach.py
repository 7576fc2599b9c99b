import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import HALO_X0
from lowthrust_reach.control import build_thrust_set
from lowthrust_reach.dynamics import DynamicsModel, ModelKind, rk4_jacobians, rk4_map
from lowthrust_reach.reach_sdc import (
    SDCReachConfig,
    matrix_taylor_expand,
    sdc_propagate_step,
    sdc_propagate_tube,
    sdc_step,
)
from lowthrust_reach.reach_taylor import (
    TaylorReachConfig,
    lagrange_remainder,
    linearize_step,
    propagate_step,
    propagate_tube,
    split_scores,
)
from lowthrust_reach.setops import Zonotope, contains_points, interval_hull, minkowski_sum, volume_pos
from lowthrust_reach.tube import ReachTube, step_schedule, tube_volume_series

HALO_G0 = np.diag([1e-4] * 3 + [5e-4] * 3)
W_HALO = Zonotope(np.zeros(3), 1e-7 * np.eye(3))


def halo_input_set(model):
    ts = build_thrust_set(model.t_max, model.mass)
    return ts.scaled(model.thrust_accel / ts.radius)


def sample_one_step(z, u_set, w_set, model, dt, rng, n):
    X = z.sample(n, rng)
    A = u_set.sample(n, rng) if u_set is not None else np.zeros((n, 3))
    Y = rk4_map(X, A, dt, model)
    if w_set is not None:
        Y[:, 3:] += w_set.sample(n, rng)
    return Y


# --- configuration ------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(dt=0.1, remainder_tol=0.0), dict(dt=0.1, max_splits=-1),
                                dict(dt=0.1, max_order=0.5)])
def test_taylor_config_validation(kw):
    with pytest.raises(ValueError):
        TaylorReachConfig(**kw)


def test_sdc_config_needs_centred_input():
    with pytest.raises(ValueError):
        SDCReachConfig(0.1, input_set=Zonotope([1.0, 0.0, 0.0], np.eye(3)))


def test_step_schedule():
    assert step_schedule(0.25, 1.0) == [0.25] * 4
    s = step_schedule(0.3, 1.0)
    assert len(s) == 4 and sum(s) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        step_schedule(0.1, 0.0)


# --- Method 1 -------------------------------------------------------------------


def test_linearize_singleton_is_rk4_step(cr3bp):
    z = Zonotope(HALO_X0)
    lin, zstar = linearize_step(z, Zonotope(np.zeros(3)), cr3bp, 0.005)
    assert lin.n_generators == 0
    assert np.array_equal(lin.center, rk4_map(HALO_X0, np.zeros(3), 0.005, cr3bp))
    assert np.array_equal(zstar.state, HALO_X0)


def test_linear_model_exact_with_zero_remainder(free_model, rng):
    z = Zonotope(rng.normal(size=6), 0.1 * rng.normal(size=(6, 6)))
    u_set = halo_input_set(free_model)
    lin, zstar = linearize_step(z, u_set, free_model, 0.05)
    rem = lagrange_remainder(z, u_set, zstar, free_model, 0.05)
    assert np.all(rem.upper == 0) and np.all(rem.lower == 0)
    Y = sample_one_step(z, u_set, None, free_model, 0.05, rng, 1000)
    assert contains_points(lin, Y).all()


def test_remainder_zero_for_singleton(cr3bp):
    z = Zonotope(HALO_X0)
    u0 = Zonotope(np.zeros(3))
    _, zstar = linearize_step(z, u0, cr3bp, 0.005)
    rem = lagrange_remainder(z, u0, zstar, cr3bp, 0.005)
    assert np.all(rem.upper == 0)


def test_one_step_contains_samples_near_halo(cr3bp, rng):
    z = Zonotope(HALO_X0, 0.3 * HALO_G0 @ rng.uniform(-1, 1, (6, 6)))
    u_set = halo_input_set(cr3bp)
    lin, zstar = linearize_step(z, u_set, cr3bp, 0.005)
    rem = lagrange_remainder(z, u_set, zstar, cr3bp, 0.005)
    out = minkowski_sum(lin, Zonotope(np.zeros(6), np.diag(rem.upper)))
    Y = sample_one_step(z, u_set, None, cr3bp, 0.005, rng, 1000)
    assert contains_points(out, Y).all()


def test_remainder_bounds_gravity_toy_residual(rng):
    # x'' = -mu / x^2 on x in [1, 1.2], at rest, as a two-body model with mu = 1
    m = DynamicsModel(ModelKind.TWO_BODY, 1.0)
    dt = 0.1
    z = Zonotope([1.1, 0, 0, 0, 0, 0], [[0.1], [0], [0], [0], [0], [0]])
    u0 = Zonotope(np.zeros(3))
    lin, zstar = linearize_step(z, u0, m, dt)
    rem = lagrange_remainder(z, u0, zstar, m, dt)
    _, Dg = rk4_jacobians(z.center, np.zeros(3), dt, m)
    xs = np.linspace(1.0, 1.2, 20_001)
    X = np.zeros((xs.size, 6))
    X[:, 0] = xs
    resid = rk4_map(X, np.zeros(3), dt, m) - (lin.center + (X - z.center) @ Dg[:, :6].T)
    assert np.all(np.abs(resid).max(axis=0) <= rem.upper)
    assert rem.upper[3] > 0


def test_propagate_step_singleton_exact(cr3bp):
    cfg = TaylorReachConfig(0.005)
    out = propagate_step(Zonotope(HALO_X0), None, cr3bp, cfg)
    assert out.n_generators == 0
    assert np.array_equal(out.center, rk4_map(HALO_X0, np.zeros(3), 0.005, cr3bp))


def test_propagate_step_halo_initial_set(cr3bp, rng):
    cfg = TaylorReachConfig(0.005, max_order=5)
    u_set = halo_input_set(cr3bp)
    z = Zonotope(HALO_X0, HALO_G0)
    out = propagate_step(z, u_set, cr3bp, cfg)
    assert out.order <= 5
    Y = sample_one_step(z, u_set, None, cr3bp, 0.005, rng, 1000)
    assert contains_points(out, Y).all()


def test_split_scores_favour_large_generators(cr3bp):
    z = Zonotope(HALO_X0, np.diag([1e-3, 1e-6, 1e-6, 1e-6, 1e-6, 1e-6]))
    u0 = Zonotope(np.zeros(3))
    _, zstar = linearize_step(z, u0, cr3bp, 0.005)
    from lowthrust_reach.reach_taylor import _remainder_terms

    _, M, gamma = _remainder_terms(z, u0, zstar, cr3bp, 0.005)
    assert np.argmax(split_scores(z, M, gamma)) == 0


def test_linear_tube_no_splits_zero_error(free_model, rng):
    z0 = Zonotope(rng.normal(size=6), 0.01 * rng.normal(size=(6, 6)))
    cfg = TaylorReachConfig(0.05, remainder_tol=1e-12, max_order=50)
    tube = propagate_tube(z0, free_model, cfg, 1.0)
    assert not tube.split_events and not tube.diverged
    assert all(np.all(e == 0) for e in tube.err_log)
    # exact linear image sequence
    _, Dg = rk4_jacobians(np.zeros(6), np.zeros(3), 0.05, free_model)
    A = Dg[:, :6]
    c, G = z0.center, z0.generators
    for sets in tube.sets[1:]:
        c, G = A @ c, A @ G
        assert np.allclose(sets[0].center, c, rtol=1e-12, atol=1e-14)
        assert np.allclose(sets[0].generators, G, rtol=1e-12, atol=1e-14)


def test_singleton_tube_reproduces_rk4_bitwise(cr3bp):
    tube = propagate_tube(Zonotope(HALO_X0), cr3bp, TaylorReachConfig(0.005), 0.1)
    x = HALO_X0.copy()
    for sets in tube.sets[1:]:
        x = rk4_map(x, np.zeros(3), 0.005, cr3bp)
        assert np.array_equal(sets[0].center, x)
        assert sets[0].n_generators == 0


def test_tube_monotone_in_initial_set(cr3bp):
    cfg = TaylorReachConfig(0.005, max_splits=0)
    small = propagate_tube(Zonotope(HALO_X0, HALO_G0), cr3bp, cfg, 0.1)
    big = propagate_tube(Zonotope(HALO_X0, 1.5 * HALO_G0), cr3bp, cfg, 0.1)
    for k in range(len(small)):
        lo_s, hi_s = small.hull(k)
        lo_b, hi_b = big.hull(k)
        assert np.all(lo_b <= lo_s) and np.all(hi_b >= hi_s)


def test_budget_exhaustion_flags_divergence(cr3bp):
    cfg = TaylorReachConfig(0.005, remainder_tol=1e-15, max_splits=2)
    tube = propagate_tube(Zonotope(HALO_X0, HALO_G0), cr3bp, cfg, 0.02)
    assert len(tube.split_events) == 2
    assert tube.diverged and tube.divergence_step == 1
    assert tube.completed and len(tube) == 5


def test_split_children_cover_samples(cr3bp, rng):
    cfg = TaylorReachConfig(0.005, remainder_tol=1e-9, max_splits=4)
    z0 = Zonotope(HALO_X0, HALO_G0)
    tube = propagate_tube(z0, cr3bp, cfg, 0.02)
    assert tube.split_events
    X = z0.sample(500, rng)
    for k in range(1, len(tube)):
        X = rk4_map(X, np.zeros(3), 0.005, cr3bp)
        inside = np.zeros(len(X), bool)
        for z in tube.sets[k]:
            inside |= contains_points(z, X)
        assert inside.all()


def test_singularity_stops_propagation():
    m = DynamicsModel.two_body()
    z0 = Zonotope([1e6, 0, 0, -1e3, 0, 0], np.diag([1e5, 1e5, 1e5, 1, 1, 1]))
    tube = propagate_tube(z0, m, TaylorReachConfig(600.0), 6000.0)
    assert tube.diverged and not tube.completed and "stopped" in tube.message


@settings(max_examples=8)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["taylor", "sdc"]))
def test_soundness_property(seed, method):
    """Sampled trajectories with random inputs and disturbances stay in the tube."""
    r = np.random.default_rng(seed)
    m = DynamicsModel.cr3bp(t_max=0.1)
    z0 = Zonotope(HALO_X0 + r.normal(scale=1e-3, size=6), HALO_G0 * r.uniform(0.1, 1.0))
    u_set = halo_input_set(m)
    dt, t_final = 0.005, 0.05
    if method == "taylor":
        tube = propagate_tube(z0, m, TaylorReachConfig(dt, input_set=u_set, disturbance_set=W_HALO), t_final)
    else:
        tube = sdc_propagate_tube(z0, m, SDCReachConfig(dt, input_set=u_set, disturbance_set=W_HALO), t_final)
    X = z0.sample(500, r)
    for k in range(1, len(tube)):
        A = u_set.sample(500, r)
        for _ in range(10):
            X = rk4_map(X, A, dt / 10, m)
        X[:, 3:] += W_HALO.sample(500, r)
        inside = np.zeros(500, bool)
        for z in tube.sets[k]:
            inside |= contains_points(z, X)
        assert inside.all()


def test_truncation_estimate_matches_flow_error(free_model, rng):
    from scipy.linalg import expm

    from lowthrust_reach.dynamics import rk4_truncation_estimate, jacobian

    x = rng.normal(size=6)
    dt = 0.3
    exact = expm(dt * jacobian(x, free_model)) @ x
    err = np.abs(rk4_map(x, np.zeros(3), dt, free_model) - exact)
    est = rk4_truncation_estimate(x, np.zeros((6, 0)), np.zeros(3), np.zeros((3, 0)), dt, free_model)
    assert np.all(est <= 1.2 * err + 1e-15) and np.all(err <= 1.2 * est + 1e-15)


@pytest.mark.parametrize("method", ["taylor", "sdc"])
def test_truncation_box_covers_fine_integration(method, rng):
    # a point set with a thrust box gives flat sets; only the box covers the RK4 step error
    m = DynamicsModel.cr3bp(t_max=0.1)
    u_set = halo_input_set(m)
    z0 = Zonotope(HALO_X0)
    dt = 0.02
    if method == "taylor":
        tube = propagate_tube(z0, m, TaylorReachConfig(dt, input_set=u_set, truncation_safety=2.0), 4 * dt)
    else:
        tube = sdc_propagate_tube(z0, m, SDCReachConfig(dt, input_set=u_set, truncation_safety=2.0), 4 * dt)
    X = np.tile(HALO_X0, (300, 1))
    for k in range(1, len(tube)):
        A = u_set.sample(300, rng)
        for _ in range(10):
            X = rk4_map(X, A, dt / 10, m)
        assert contains_points(tube.sets[k][0], X).all()


# --- Method 2 -------------------------------------------------------------------


def test_matrix_expansion_singleton(cr3bp):
    mz = matrix_taylor_expand(Zonotope(HALO_X0), cr3bp, 0.005)
    assert mz.n_generators == 0
    assert mz.nominal.shape == (7, 7)


def test_matrix_expansion_linear_model(free_model, rng):
    mz = matrix_taylor_expand(Zonotope(rng.normal(size=6), rng.normal(size=(6, 4))), free_model, 0.05)
    assert mz.n_generators == 4 and not np.any(mz.generators)


def test_matrix_expansion_second_order(cr3bp, rng):
    from lowthrust_reach.dynamics import discrete_sdc

    G = HALO_G0 @ rng.uniform(-1, 1, (6, 6))
    xi = rng.uniform(-1, 1, 6)
    errs = []
    for s in (1.0, 0.5, 0.25):
        z = Zonotope(HALO_X0, s * G)
        mz = matrix_taylor_expand(z, cr3bp, 0.005)
        exact, _ = discrete_sdc(HALO_X0 + s * G @ xi, 0.005, cr3bp)
        errs.append(np.abs(exact - mz.evaluate(xi)).max())
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


def test_sdc_singleton_step_matches_rk4(cr3bp):
    res = sdc_step(Zonotope(HALO_X0), cr3bp, SDCReachConfig(0.005))
    assert np.abs(res.set.center - rk4_map(HALO_X0, np.zeros(3), 0.005, cr3bp)).max() <= 1e-8
    assert res.info["consistency"] <= 1e-12


def test_sdc_linear_model_exact(free_model, rng):
    z = Zonotope(rng.normal(size=6), 0.1 * rng.normal(size=(6, 5)))
    res = sdc_step(z, free_model, SDCReachConfig(0.05))
    # only the outward-rounding pad remains
    assert np.all(res.error <= 1e-300) and np.all(res.info["dev_radius"] == 0)
    _, Dg = rk4_jacobians(z.center, np.zeros(3), 0.05, free_model)
    assert np.allclose(res.set.center, Dg[:, :6] @ z.center, atol=1e-14)


def test_sdc_step_halo_disturbance(cr3bp, rng):
    z = Zonotope(HALO_X0, HALO_G0)
    u_set = halo_input_set(cr3bp)
    cfg = SDCReachConfig(0.005, input_set=u_set, disturbance_set=W_HALO)
    mz = matrix_taylor_expand(z, cr3bp, 0.005)
    out = sdc_propagate_step(z, mz, cfg, cr3bp)
    Y = sample_one_step(z, u_set, W_HALO, cr3bp, 0.005, rng, 1000)
    assert contains_points(out, Y).all()


def test_sdc_step_rejects_foreign_expansion(cr3bp):
    z = Zonotope(HALO_X0, HALO_G0)
    mz = matrix_taylor_expand(Zonotope(HALO_X0, HALO_G0[:, :3]), cr3bp, 0.005)
    with pytest.raises(ValueError):
        sdc_propagate_step(z, mz, SDCReachConfig(0.005), cr3bp)


def test_deviation_terms_scale_quadratically(cr3bp):
    cfg = SDCReachConfig(0.005)
    a = sdc_step(Zonotope(HALO_X0, HALO_G0), cr3bp, cfg).info["dev_radius"]
    b = sdc_step(Zonotope(HALO_X0, 0.5 * HALO_G0), cr3bp, cfg).info["dev_radius"]
    mask = a > 0
    assert np.all(a[mask] / b[mask] >= 4.0 * (1 - 1e-9))


def test_linear_tubes_agree(free_model, rng):
    z0 = Zonotope(rng.normal(size=6), 0.01 * rng.normal(size=(6, 6)))
    t1 = propagate_tube(z0, free_model, TaylorReachConfig(0.05, max_order=50), 0.5)
    t2 = sdc_propagate_tube(z0, free_model, SDCReachConfig(0.05, max_order=50), 0.5)
    for a, b in zip(t1.sets, t2.sets):
        assert np.allclose(a[0].center, b[0].center, atol=1e-13)
        key = lambda G: np.array(sorted(map(tuple, np.round(G.T, 13))))
        assert np.allclose(key(a[0].generators), key(b[0].generators), atol=1e-13)


def test_sdc_consistency_along_tube(cr3bp):
    tube = sdc_propagate_tube(Zonotope(HALO_X0, HALO_G0), cr3bp, SDCReachConfig(0.005), 0.1)
    assert tube.diagnostics["max_consistency"] <= 1e-8


# --- volume series and serialisation ------------------------------------------------


def test_volume_series_singleton_sentinel():
    tube = ReachTube([0.0, 1.0], [[Zonotope(np.zeros(6))], [Zonotope(np.ones(6))]], [np.zeros(6)] * 2)
    assert np.all(np.isneginf(tube_volume_series(tube)[:, 1]))


def test_volume_series_box_scaling():
    s = 1.3
    sets = [[Zonotope(np.zeros(6), np.diag([s**k] * 3 + [1.0] * 3))] for k in range(4)]
    tube = ReachTube([0.0, 1.0, 2.0, 3.0], sets, [np.zeros(6)] * 4)
    inc = np.diff(tube_volume_series(tube)[:, 1])
    assert np.allclose(inc, 3 * np.log(s), rtol=1e-13)


def test_volume_series_vs_hit_or_miss(cr3bp):
    from test_setops import facet_hrep_3d

    tube = sdc_propagate_tube(Zonotope(HALO_X0, HALO_G0), cr3bp, SDCReachConfig(0.005), 0.05)
    r = np.random.default_rng(3)
    for k in (2, 6, 10):
        z = tube.sets[k][0]
        from lowthrust_reach.setops import reduce_order

        G = reduce_order(z, 5).generators[:3]
        H, h = facet_hrep_3d(G)
        half = np.abs(G).sum(1)
        X = r.uniform(-1, 1, (400_000, 3)) * half
        mc = np.all(X @ H.T <= h, axis=1).mean() * np.prod(2 * half)
        assert abs(np.exp(tube_volume_series(tube)[k, 1]) - mc) / mc <= 0.05


def test_tube_validation():
    with pytest.raises(ValueError):
        ReachTube([0.0, 0.0], [[Zonotope([0.0])], [Zonotope([0.0])]], [])
    with pytest.raises(ValueError):
        ReachTube([0.0], [], [])


def test_tube_dict_round_trip(cr3bp):
    cfg = TaylorReachConfig(0.005, remainder_tol=1e-9, max_splits=2)
    tube = propagate_tube(Zonotope(HALO_X0, HALO_G0), cr3bp, cfg, 0.02)
    back = ReachTube.from_dict(tube.to_dict(), method="taylor")
    assert back.times == tube.times and back.split_events == tube.split_events
    for a, b in zip(tube.sets, back.sets):
        for za, zb in zip(a, b):
            assert np.array_equal(za.center, zb.center) and np.array_equal(za.generators, zb.generators)


def test_hull_helper_covers_children(cr3bp):
    cfg = TaylorReachConfig(0.005, remainder_tol=1e-9, max_splits=2)
    tube = propagate_tube(Zonotope(HALO_X0, HALO_G0), cr3bp, cfg, 0.02)
    lo, hi = tube.hull(len(tube) - 1)
    for z in tube.sets[-1]:
        iv = interval_hull(z)
        assert np.all(iv.lower >= lo) and np.all(iv.upper <= hi)
    assert volume_pos(tube.sets[-1][0]) > 0
