import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rlmpc_lab import plant
from rlmpc_lab.plant import (InvalidPerturbation, NonPositiveJt, PerturbationSpec,
                             conservative_derivative, derive_inertias, discretize,
                             linearize, load_params, mechanical_energy,
                             nonlinear_derivative, perturb, plant_step,
                             qube_servo2_params, rk4, rk4_step, validate_state)


@pytest.fixture(scope="module")
def p():
    return qube_servo2_params()


# ---------------------------------------------------------------- inertias

def test_derived_inertias_catalog_values(p):
    # hand evaluation: mr*r^2/3 and mp*(2l)^2/3 with the catalog numbers
    assert_allclose(p.Jr, 2.2879166666666667e-4, rtol=1e-12)
    assert_allclose(p.Jp, 1.331280e-4, rtol=1e-12)
    assert_allclose(p.Jt, 1.31452806e-8, rtol=1e-12)


def test_derive_inertias_trivial_rod():
    q = derive_inertias(Rm=1, kt=0, km=0, mr=3.0, r=1.0, br=0, mp=0.001, l=0.01, bp=0)
    assert q.Jr == pytest.approx(1.0)


def test_derive_inertias_rejects_nonpositive_jt():
    # heavy pendulum on a long arm drives Jt = Jp*Jr - mp^2 l^2 r^2 negative:
    # Jp*Jr = (mp 4l^2/3)(mr r^2/3) < mp^2 l^2 r^2 iff 4 mr mp/9 < mp^2
    with pytest.raises(NonPositiveJt):
        derive_inertias(Rm=1, kt=0, km=0, mr=0.01, r=1.0, br=0, mp=1.0, l=1.0, bp=0)


def test_params_positivity_enforced():
    with pytest.raises(ValueError):
        derive_inertias(Rm=-1, kt=0, km=0, mr=1, r=1, br=0, mp=0.01, l=0.1, bp=0)
    with pytest.raises(ValueError):
        derive_inertias(Rm=1, kt=0, km=0, mr=1, r=1, br=-0.1, mp=0.01, l=0.1, bp=0)


# ---------------------------------------------------------------- dynamics

def test_upright_equilibrium_is_fixed_point(p):
    assert_allclose(nonlinear_derivative(p, [0, 0, 0, 0], 0.0), np.zeros(4))


def test_pendulum_falls_away_from_upright(p):
    d = nonlinear_derivative(p, [0.0, 0.001, 0.0, 0.0], 0.0)
    assert d[3] > 0


def test_derivative_matches_symbolic_substitution(p):
    # frozen from an exact-rational solve of the two coupled equations,
    # done with a separate symbolic script before this module was written
    d = nonlinear_derivative(p, [0.3, 0.1, 0.5, -0.2], 2.0)
    assert_allclose(d, [0.5, -0.2, 107.497112925464462, 117.204277276846477], rtol=1e-12)


def test_theta_invariance(p):
    # dynamics depend on theta only through its derivatives
    d1 = nonlinear_derivative(p, [0.0, 0.2, 0.3, -0.1], 1.0)
    d2 = nonlinear_derivative(p, [1.3, 0.2, 0.3, -0.1], 1.0)
    assert_allclose(d1, d2)


# ---------------------------------------------------------------- integrator

def test_rk4_fixed_point(p):
    assert_allclose(rk4_step(p, np.zeros(4), 0.0, 0.037), np.zeros(4))


def test_rk4_small_fall_direction(p):
    x1 = rk4_step(p, np.array([0.0, 0.001, 0.0, 0.0]), 0.0, 0.01)
    assert x1[1] > 0.001
    assert abs(x1[0]) < 1e-5


def test_rk4_fourth_order_convergence(p):
    # global error over a fixed interval decays ~16x per dt halving
    x0 = np.array([0.0, 0.05, 0.0, 0.0])
    T = 0.08

    def integrate(n):
        x = x0.copy()
        for _ in range(n):
            x = rk4_step(p, x, 0.5, T / n)
        return x

    ref = integrate(4096)
    errs = [np.linalg.norm(integrate(n) - ref) for n in (8, 16, 32)]
    assert errs[0] / errs[1] == pytest.approx(16.0, rel=0.25)
    assert errs[1] / errs[2] == pytest.approx(16.0, rel=0.25)


def test_rk4_rejects_nonpositive_dt(p):
    with pytest.raises(ValueError):
        rk4_step(p, np.zeros(4), 0.0, 0.0)


def test_plant_step_matches_manual_substeps(p):
    x = np.array([0.1, 0.02, -0.3, 0.4])
    out = plant_step(p, x, 1.5, 0.01, substeps=10)
    manual = x.copy()
    for _ in range(10):
        manual = rk4_step(p, manual, 1.5, 0.001)
    assert_allclose(out, manual, rtol=1e-12)


def test_rk4_energy_conservation_undamped():
    # integrator check on the energy-consistent vector field: no damping, no
    # back-emf, zero input => mechanical energy must be preserved by RK4
    p = derive_inertias(Rm=8.4, kt=0.042, km=0.0, mr=0.095, r=0.085,
                        br=0.0, mp=0.024, l=0.0645, bp=0.0)
    x = np.array([0.0, 2.6, 0.0, 0.0])  # released near the hanging position
    e0 = mechanical_energy(p, x)
    scale = abs(e0) + p.mp * p.g * p.l
    dt = 1e-4
    for _ in range(10000):
        x = rk4(lambda s: conservative_derivative(p, s, 0.0), x, dt)
    drift = abs(mechanical_energy(p, x) - e0) / scale
    assert drift <= 1e-6


def test_printed_model_alpha_dd_matches_conservative_variant(p):
    # the two vector fields differ only in the arm equation's alpha_d^2 term
    x = [0.2, 0.7, 0.4, 1.5]
    d_main = nonlinear_derivative(p, x, 1.0)
    d_cons = conservative_derivative(p, x, 1.0)
    assert not np.allclose(d_main[2], d_cons[2])
    # at alpha = pi/2 the sin factor is 1 and the fields coincide
    x90 = [0.2, math.pi / 2, 0.4, 1.5]
    assert_allclose(nonlinear_derivative(p, x90, 1.0),
                    conservative_derivative(p, x90, 1.0), rtol=1e-12)


# ---------------------------------------------------------------- linearization

def test_linearize_structure(p):
    c = linearize(p)
    assert_allclose(c.As[0], [0, 0, 1, 0])
    assert_allclose(c.As[1], [0, 0, 0, 1])
    assert_allclose(c.Bs[:2].ravel(), [0, 0])
    assert c.As[:, 0] == pytest.approx(0)


def test_linearize_closed_form_entries(p):
    c = linearize(p)
    assert_allclose(c.As[2, 1], p.mp**2 * p.l**2 * p.r * p.g / p.Jt, rtol=1e-12)
    assert c.As[2, 1] == pytest.approx(152.00573888091822, rel=1e-12)
    assert_allclose(c.Bs[2, 0], 50.637184572537767, rtol=1e-12)
    assert_allclose(c.Bs[3, 0], 50.048380100764072, rtol=1e-12)


def test_zero_damping_and_emf_zero_velocity_columns():
    p0 = derive_inertias(Rm=8.4, kt=0.042, km=0.0, mr=0.095, r=0.085,
                         br=0.0, mp=0.024, l=0.0645, bp=0.0)
    c = linearize(p0)
    assert c.As[2, 2] == 0 and c.As[2, 3] == 0
    assert c.As[3, 2] == 0 and c.As[3, 3] == 0


def finite_difference_jacobian(p, h=1e-6):
    As = np.zeros((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        As[:, j] = (nonlinear_derivative(p, e, 0.0)
                    - nonlinear_derivative(p, -e, 0.0)) / (2 * h)
    Bs = ((nonlinear_derivative(p, np.zeros(4), h)
           - nonlinear_derivative(p, np.zeros(4), -h)) / (2 * h)).reshape(4, 1)
    return As, Bs


def test_linearization_matches_finite_difference_jacobian(p):
    c = linearize(p)
    As_fd, Bs_fd = finite_difference_jacobian(p)
    scale_A = np.abs(c.As) + 1e-9
    scale_B = np.abs(c.Bs) + 1e-9
    assert np.max(np.abs(As_fd - c.As) / scale_A) <= 1e-5
    assert np.max(np.abs(Bs_fd - c.Bs) / scale_B) <= 1e-5


# ---------------------------------------------------------------- discretization

def expm_oracle(M, terms=40, max_norm=0.25):
    """Independent scaling-and-squaring Taylor matrix exponential."""
    s = 0
    norm = np.max(np.sum(np.abs(M), axis=1))
    while norm > max_norm:
        M = M / 2.0
        norm /= 2.0
        s += 1
    E = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms + 1):
        term = term @ M / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


def test_discretize_against_independent_expm(p):
    c = linearize(p)
    m = discretize(c, 0.01)
    aug = np.zeros((5, 5))
    aug[:4, :4] = c.As * 0.01
    aug[:4, 4:] = c.Bs * 0.01
    E = expm_oracle(aug)
    assert np.max(np.abs(m.A - E[:4, :4]) / (np.abs(E[:4, :4]) + 1e-14)) <= 1e-10
    assert np.max(np.abs(m.B - E[:4, 4:]) / (np.abs(E[:4, 4:]) + 1e-14)) <= 1e-10


def test_discretize_frozen_entries(p):
    # frozen from a 50-digit precision expm of the augmented matrix
    m = plant.nominal_model(p, 0.01)
    assert_allclose(m.A[1, 1], 1.0129090162821366, rtol=1e-12)
    assert_allclose(m.A[2, 1], 1.4307886208256691, rtol=1e-12)
    assert_allclose(m.B.ravel(),
                    [0.0024306235205421313, 0.0024016434814692002,
                     0.47661351640731972, 0.47109177104839137], rtol=1e-12)


def test_discretize_zero_dynamics_limit():
    c = plant.ContinuousModel(As=np.zeros((4, 4)), Bs=np.array([[1.0], [2.0], [0.0], [-1.0]]))
    m = discretize(c, 0.3)
    assert_allclose(m.A, np.eye(4))
    assert_allclose(m.B, c.Bs * 0.3)


def test_discretize_small_ts_expansion(p):
    c = linearize(p)
    for Ts in (1e-3, 5e-4, 2.5e-4):
        m = discretize(c, Ts)
        resid = np.linalg.norm(m.A - (np.eye(4) + c.As * Ts))
        assert resid < 2.0 * np.linalg.norm(c.As @ c.As) * Ts**2


def test_discretization_consistency_with_fine_rk4(p):
    # one Ts of the continuous linear model under fine RK4 equals A x0 + B u
    c = linearize(p)
    m = discretize(c, 0.01)
    rng = np.random.default_rng(7)
    for _ in range(5):
        x0 = rng.normal(size=4) * 0.3
        u = rng.normal() * 3.0
        x = x0.copy()
        dt = 0.01 / 100
        f = lambda s: c.As @ s + c.Bs.ravel() * u
        for _ in range(100):
            x = rk4(f, x, dt)
        pred = m.A @ x0 + m.B.ravel() * u
        assert np.linalg.norm(x - pred) / max(np.linalg.norm(pred), 1e-12) <= 1e-6


# ---------------------------------------------------------------- perturbation

def test_perturb_identity(p):
    q = perturb(p, PerturbationSpec(scale={k: 1.0 for k in ("br", "bp", "mp")}))
    assert q == p


def test_perturb_br_only_leaves_inertias(p):
    q = perturb(p, PerturbationSpec(scale={"br": 5.0}))
    assert q.br == pytest.approx(0.005)
    assert (q.Jr, q.Jp, q.Jt) == (p.Jr, p.Jp, p.Jt)


def test_perturb_mass_rederives_inertias(p):
    q = perturb(p, PerturbationSpec(scale={"mp": 1.1}))
    # recompute chain by hand: Jp scales with mp, Jr untouched, Jt re-derived
    assert q.Jp == pytest.approx(1.1 * p.Jp, rel=1e-12)
    assert q.Jr == p.Jr
    jt = q.Jp * q.Jr - q.mp**2 * q.l**2 * q.r**2
    assert q.Jt == pytest.approx(jt, rel=1e-12)


def test_perturb_rejects_unknown_key():
    with pytest.raises(InvalidPerturbation):
        PerturbationSpec(scale={"Jr": 2.0})


def test_perturb_rejects_invariant_break(p):
    with pytest.raises(InvalidPerturbation):
        perturb(p, PerturbationSpec(scale={"mp": 80.0}))


# ---------------------------------------------------------------- state and io

def test_validate_state_rejects_nonfinite():
    with pytest.raises(ValueError):
        validate_state([0, np.nan, 0, 0])
    with pytest.raises(ValueError):
        validate_state([0, 0, np.inf, 0])
    with pytest.raises(ValueError):
        validate_state([0, 0, 0])


def test_load_params_round_trip(tmp_path, p):
    path = tmp_path / "pendulum.params"
    path.write_text(
        "# catalog values\n"
        "Rm = 8.4\nkt = 0.042\nkm = 0.042\nmr = 0.095\nr = 0.085\n"
        "br = 0.001\nmp = 0.024\npendulum_length = 0.129\nbp = 0.00005\n")
    q = load_params(path)
    assert q == p


def test_load_params_rejects_missing_and_unknown(tmp_path):
    path = tmp_path / "bad.params"
    path.write_text("Rm = 8.4\n")
    with pytest.raises(ValueError, match="missing"):
        load_params(path)
    path.write_text("Rm = 8.4\nJr = 1.0\n")
    with pytest.raises(ValueError, match="unknown"):
        load_params(path)
