import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parkflow.diffcore import Mlp3, NumericError, fd_gradient, rel_error
from parkflow.odeint import (
    DivergenceError,
    LinearField,
    MlpField,
    SolverConfig,
    SolveStats,
    adjoint_from_end,
    adjoint_gradients,
    backprop_gradients,
    integrate_forward,
    integrate_reverse,
)

RK4_64 = SolverConfig("rk4", fixed_steps=64)
DOPRI = SolverConfig("dopri5", rtol=1e-5, atol=1e-5)

# z @ ROT.T is the row form of dz/dt = [[0, 1], [-1, 0]] z
ROT = np.array([[0.0, 1.0], [-1.0, 0.0]])


def zero_field(dim):
    return MlpField(Mlp3.zeros(dim, 3, dim))


def test_zero_field_is_identity_both_ways():
    z = np.array([[0.3, -1.2]])
    for cfg in (RK4_64, DOPRI, SolverConfig("euler", fixed_steps=5)):
        assert np.array_equal(integrate_forward(zero_field(2), z, cfg), z)
        assert np.array_equal(integrate_reverse(zero_field(2), z, cfg), z)


def test_exponential_and_its_inverse():
    f = LinearField([[1.0]])
    assert integrate_forward(f, np.array([[1.0]]), RK4_64)[0, 0] == pytest.approx(math.e, abs=1e-6)
    assert integrate_reverse(f, np.array([[math.e]]), RK4_64)[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_rotation_endpoint():
    z1 = integrate_forward(LinearField(ROT.T), np.array([[1.0, 0.0]]), RK4_64)
    assert z1[0] == pytest.approx([math.cos(1.0), -math.sin(1.0)], abs=1e-6)
    assert z1[0] == pytest.approx([0.540302, -0.841471], abs=1e-6)


def test_rk4_is_fourth_order():
    f = LinearField([[1.0]])
    errs = [abs(integrate_forward(f, np.array([[1.0]]), SolverConfig("rk4", fixed_steps=n))[0, 0] - math.e) for n in (8, 16, 32)]
    assert errs[0] / errs[1] >= 8.0
    assert errs[1] / errs[2] >= 8.0
    # the 4th-order asymptotic ratio is 16
    assert errs[1] / errs[2] == pytest.approx(16.0, rel=0.1)


def test_euler_is_first_order():
    f = LinearField([[1.0]])
    e1 = abs(integrate_forward(f, np.array([[1.0]]), SolverConfig("euler", fixed_steps=100))[0, 0] - math.e)
    e2 = abs(integrate_forward(f, np.array([[1.0]]), SolverConfig("euler", fixed_steps=200))[0, 0] - math.e)
    assert e1 / e2 == pytest.approx(2.0, rel=0.05)


def test_dopri_accepts_only_within_tolerance():
    stats = SolveStats()
    z1 = integrate_forward(LinearField(ROT.T), np.array([[1.0, 0.0]]), DOPRI, stats)
    assert stats.max_err_ratio <= 1.0
    assert stats.accepted + stats.rejected <= DOPRI.max_steps
    assert np.max(np.abs(z1[0] - [math.cos(1.0), -math.sin(1.0)])) < 1e-4


def test_dopri_step_budget_raises():
    with pytest.raises(DivergenceError):
        integrate_forward(LinearField([[50.0]]), np.array([[1.0]]), SolverConfig("dopri5", rtol=1e-10, atol=1e-10, max_steps=3))


def test_non_finite_states_raise():
    with pytest.raises(NumericError):
        integrate_forward(LinearField([[1.0]]), np.array([[np.nan]]), RK4_64)
    with pytest.raises(NumericError), np.errstate(over="ignore", invalid="ignore"):
        integrate_forward(LinearField([[1e4]]), np.array([[1.0]]), SolverConfig("euler", fixed_steps=200))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("rk4", fixed_steps=0)
    with pytest.raises(ValueError):
        SolverConfig("dopri5", rtol=0.0)
    with pytest.raises(ValueError):
        SolverConfig("midpoint")
    with pytest.raises(ValueError):
        SolverConfig("dopri5", max_step=0.0)


def random_field(rng, dim, hid=None):
    return MlpField(Mlp3.init(dim, hid or dim, dim, rng))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_rk4_roundtrip(dim, batch, seed):
    rng = np.random.default_rng(seed)
    f = random_field(rng, dim)
    z = rng.uniform(-2, 2, size=(batch, dim))
    back = integrate_reverse(f, integrate_forward(f, z, RK4_64), RK4_64)
    assert np.max(np.abs(back - z)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_dopri_roundtrip(dim, seed):
    rng = np.random.default_rng(seed)
    f = random_field(rng, dim)
    z = rng.uniform(-2, 2, size=(2, dim))
    back = integrate_reverse(f, integrate_forward(f, z, DOPRI), DOPRI)
    assert np.max(np.abs(back - z)) <= 10 * (DOPRI.atol + DOPRI.rtol)


def test_adjoint_for_zero_field():
    g = np.array([[0.4, -0.7]])
    f = zero_field(2)
    dz0, dth = adjoint_gradients(f, np.array([[1.0, 2.0]]), g, RK4_64)
    assert np.allclose(dz0, g)
    # with all weights zero only the output bias moves z, and a_z stays at g over [0, 1]
    grads = Mlp3.from_flat(dth, 2, 3, 2)
    assert np.allclose(grads.b3, g[0])
    assert not np.concatenate([grads.W1.ravel(), grads.b1, grads.W2.ravel(), grads.b2, grads.W3.ravel()]).any()


def test_adjoint_for_parameter_free_field():
    g = np.array([[0.4, -0.7]])
    f = LinearField(np.zeros((2, 2)))
    dz0, _ = adjoint_gradients(f, np.array([[1.0, 2.0]]), g, RK4_64)
    assert np.array_equal(dz0, g)


def test_adjoint_of_scalar_growth_rate():
    # z1 = exp(theta) z0, so dz1/dtheta = e at theta = 1, z0 = 1
    f = LinearField([[1.0]])
    dz0, dth = adjoint_gradients(f, np.array([[1.0]]), np.array([[1.0]]), RK4_64)
    assert dth[0] == pytest.approx(math.e, abs=1e-3)
    assert dz0[0, 0] == pytest.approx(math.e, abs=1e-3)


def test_adjoint_reconstructs_initial_state():
    rng = np.random.default_rng(5)
    f = random_field(rng, 3)
    z0 = rng.normal(size=(2, 3))
    z1 = integrate_forward(f, z0, RK4_64)
    res = adjoint_from_end(f, z1, np.ones_like(z1), RK4_64)
    assert np.max(np.abs(res.z0 - z0)) <= 1e-6


def _fd_pair(f, z0, w, cfg):
    def by_z(z):
        return float(np.sum(w * integrate_forward(f, z, cfg)))

    def by_theta(flat):
        g = MlpField(Mlp3.from_flat(flat, f.mlp.in_dim, f.mlp.hid_dim, f.mlp.out_dim), f.aux)
        return float(np.sum(w * integrate_forward(g, z0, cfg)))

    return by_z, by_theta


def test_adjoint_and_backprop_match_fd_on_random_small_fields():
    rng = np.random.default_rng(11)
    cfg = SolverConfig("rk4", fixed_steps=16)
    checked = 0
    worst = worst_bp = 0.0
    while checked < 40:
        dim = int(rng.integers(1, 5))
        f = random_field(rng, dim, int(rng.integers(1, 5)))
        z0 = rng.normal(size=(int(rng.integers(1, 3)), dim))
        w = rng.normal(size=z0.shape)
        by_z, by_theta = _fd_pair(f, z0, w, cfg)
        fd_z, fd_t = fd_gradient(by_z, z0), fd_gradient(by_theta, f.mlp.flat())
        if rel_error(fd_t, fd_gradient(by_theta, f.mlp.flat(), 5e-6)) > 1e-4:
            continue  # relu kink inside the stencil
        dz0, dth = adjoint_gradients(f, z0, w, cfg)
        bz, bth, _ = backprop_gradients(f, z0, w, cfg)
        worst = max(worst, rel_error(dz0, fd_z), rel_error(dth, fd_t))
        worst_bp = max(worst_bp, rel_error(bz, fd_z), rel_error(bth, fd_t))
        checked += 1
    assert worst <= 1e-3
    assert worst_bp <= 1e-5


def test_adjoint_aux_gradient_matches_backprop():
    rng = np.random.default_rng(3)
    f = MlpField(Mlp3.init(5, 3, 2, rng), aux=rng.normal(size=(2, 3)))
    z0 = rng.normal(size=(2, 2))
    w = rng.normal(size=(2, 2))
    z1 = integrate_forward(f, z0, RK4_64)
    res = adjoint_from_end(f, z1, w, RK4_64)
    _, _, daux = backprop_gradients(f, z0, w, RK4_64)
    assert rel_error(res.dL_daux, daux) <= 1e-5

    def by_aux(a):
        return float(np.sum(w * integrate_forward(MlpField(f.mlp, a), z0, RK4_64)))

    assert rel_error(daux, fd_gradient(by_aux, f.aux)) <= 1e-4


def test_backprop_rejects_adaptive_solver():
    with pytest.raises(ValueError):
        backprop_gradients(LinearField([[1.0]]), np.ones((1, 1)), np.ones((1, 1)), DOPRI)


def test_integration_is_deterministic():
    rng = np.random.default_rng(9)
    f = random_field(rng, 4)
    z = rng.normal(size=(3, 4))
    a = integrate_forward(f, z, DOPRI)
    b = integrate_forward(f, z, DOPRI)
    assert a.tobytes() == b.tobytes()
