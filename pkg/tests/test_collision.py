import numpy as np
import pytest

from kineticlab.collision import (
    BgkOperator,
    FokkerPlanckOperator,
    ScatteringOperator,
    cheeger_constant,
    detailed_balance_check,
    dissipation_v,
    gamma2_check,
    kernel_from_csv,
    kernel_to_csv,
    random_reversible_kernel,
    spectral_gap,
)
from kineticlab.errors import CapacityError
from kineticlab.phase import DiscreteSet, TruncatedLine


def minv_inner(op, f, g):
    return float((f * g / op.vel.maxwellian) @ op.vel.weights)


def two_point(q):
    vel = DiscreteSet([-1.0, 1.0])
    kernel = np.array([[0.0, q], [q, 0.0]])
    return ScatteringOperator(vel, kernel)


# -- basic operator identities ----------------------------------------------

def test_bgk_kills_equilibrium_and_acts_as_minus_identity():
    vel = TruncatedLine(6.0, 64)
    op = BgkOperator(vel)
    assert np.max(np.abs(op.apply(vel.maxwellian))) < 1e-14
    rng = np.random.default_rng(0)
    g = rng.standard_normal(vel.n) * vel.maxwellian
    lg = op.apply(g)
    mass = g @ vel.weights
    assert np.allclose(lg, mass * vel.maxwellian - g)


def test_apply_preserves_mass():
    rng = np.random.default_rng(1)
    vel = TruncatedLine(6.0, 48)
    for op in (BgkOperator(vel), FokkerPlanckOperator(vel), random_reversible_kernel(9, 5)):
        w = op.vel.weights
        for _ in range(5):
            g = rng.standard_normal(op.vel.n) * op.vel.maxwellian
            assert abs(op.apply(g) @ w) < 1e-10


def test_matrix_matches_apply_and_columns_sum_to_zero():
    vel = TruncatedLine(5.0, 32)
    for op in (BgkOperator(vel), FokkerPlanckOperator(vel), random_reversible_kernel(7, 3)):
        L = op.matrix()
        rng = np.random.default_rng(2)
        g = rng.standard_normal(op.vel.n)
        assert np.allclose(L @ g, op.apply(g), atol=1e-12)
        colsums = op.vel.weights @ L
        assert np.max(np.abs(colsums)) < 1e-10


def test_scattering_equilibrium_zero():
    op = random_reversible_kernel(10, 11)
    assert np.max(np.abs(op.apply(op.vel.maxwellian))) < 1e-12


def test_symmetry_in_weighted_space():
    rng = np.random.default_rng(4)
    vel = TruncatedLine(6.0, 40)
    for op in (BgkOperator(vel), FokkerPlanckOperator(vel), random_reversible_kernel(8, 21)):
        for _ in range(4):
            f = rng.standard_normal(op.vel.n) * op.vel.maxwellian
            g = rng.standard_normal(op.vel.n) * op.vel.maxwellian
            lhs = minv_inner(op, f, op.apply(g))
            rhs = minv_inner(op, op.apply(f), g)
            assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


# -- dissipation -------------------------------------------------------------

def test_dissipation_zero_on_kernel_and_positive_off():
    vel = TruncatedLine(6.0, 64)
    op = BgkOperator(vel)
    assert abs(dissipation_v(op, vel.maxwellian)) < 1e-14
    assert abs(dissipation_v(op, 3.0 * vel.maxwellian)) < 1e-13
    g = vel.maxwellian * vel.nodes          # odd profile, zero mass
    d = dissipation_v(op, g)
    normsq = minv_inner(op, g, g)
    assert abs(d - normsq) < 1e-12 * normsq


def test_dissipation_nonnegative_random():
    rng = np.random.default_rng(9)
    vel = TruncatedLine(6.0, 48)
    ops = [BgkOperator(vel), FokkerPlanckOperator(vel), random_reversible_kernel(11, 2)]
    for op in ops:
        for _ in range(10):
            g = rng.standard_normal(op.vel.n) * op.vel.maxwellian
            assert dissipation_v(op, g) >= -1e-12


def test_fokker_planck_factored_identity_exact():
    vel = TruncatedLine(6.0, 96)
    op = FokkerPlanckOperator(vel)
    rng = np.random.default_rng(12)
    for _ in range(6):
        g = rng.standard_normal(vel.n) * vel.maxwellian
        via_apply = -minv_inner(op, g, op.apply(g))
        via_factor = op.factor_norm_sq(g)
        assert abs(via_apply - via_factor) < 1e-12 * max(via_factor, 1e-30)


# -- spectral gaps -----------------------------------------------------------

def test_bgk_gap_is_one():
    rep = spectral_gap(BgkOperator(TruncatedLine(6.0, 64)))
    assert abs(rep.lambda1 - 1.0) < 1e-10
    # witness carries zero mass
    assert abs(rep.witness @ TruncatedLine(6.0, 64).weights) < 1e-8


def test_fokker_planck_gap_near_one():
    rep = spectral_gap(FokkerPlanckOperator(TruncatedLine(6.0, 128)))
    assert abs(rep.lambda1 - 1.0) < 0.02


def test_two_point_gap_hand_formula():
    # L g = q (g_swap - g) on nodes +-1 with M = (1/2, 1/2): the mass-zero
    # mode decays at rate 2q
    for q in (0.3, 1.0, 2.5):
        rep = spectral_gap(two_point(q))
        assert abs(rep.lambda1 - 2.0 * q) < 1e-12


def test_gap_homogeneity_under_scaling():
    base = random_reversible_kernel(9, 33)
    lam = spectral_gap(base).lambda1
    for c in (0.5, 2.0, 7.0):
        lam_c = spectral_gap(base.scaled(c)).lambda1
        assert abs(lam_c - c * lam) < 1e-9 * max(1.0, c * lam)


def test_gap_with_coercivity_weight():
    vel = TruncatedLine(6.0, 64)
    op = FokkerPlanckOperator(vel)
    w = 1.0 + np.abs(vel.nodes)
    rep = spectral_gap(op, coercivity_weight=w, weight_label="1+|v|")
    assert 0.0 < rep.lambda1 < 1.0     # heavier denominator shrinks the quotient


# -- Cheeger ----------------------------------------------------------------

def test_cheeger_two_point_hand_value():
    # single ordered cut pair: Phi = sqrt(q_12 M_1 M_2) / min(M_1, M_2)
    q = 0.8
    op = two_point(q)
    m = op.vel.maxwellian
    rep = cheeger_constant(op)
    qmat = op.kernel[0, 1] * m[1]
    expect = np.sqrt(qmat * m[0] * m[1]) / min(m[0], m[1])
    assert abs(rep.phi - expect) < 1e-12
    assert rep.witness.sum() == 1


def test_cheeger_disconnected_kernel_zero():
    vel = DiscreteSet([-2.0, -1.0, 1.0, 2.0])
    k = np.zeros((4, 4))
    k[0, 1] = k[1, 0] = 1.0
    k[2, 3] = k[3, 2] = 1.0
    op = ScatteringOperator(vel, k)
    rep = cheeger_constant(op)
    assert rep.phi < 1e-14


def test_cheeger_capacity_cap():
    with pytest.raises(CapacityError):
        cheeger_constant(random_reversible_kernel(21, 0))


def test_cheeger_bound_battery():
    # the main soundness property: 2 lambda_1 >= Phi^2 on random reversible kernels
    for seed in range(40):
        m = 2 + (seed % 9)
        op = random_reversible_kernel(m, seed)
        lam = spectral_gap(op).lambda1
        phi = cheeger_constant(op).phi
        assert 2.0 * lam >= phi ** 2 - 1e-9, f"seed {seed}: 2*{lam} < {phi}^2"


# -- detailed balance and gamma2 --------------------------------------------

def test_detailed_balance_pass_and_fail():
    ok, viol = detailed_balance_check(random_reversible_kernel(8, 17))
    assert ok and viol < 1e-12
    vel = DiscreteSet([-2.0, -1.0, 1.0, 2.0], weights=[0.1, 0.4, 0.3, 0.2])
    uniform = ScatteringOperator(vel, np.ones((4, 4)))
    ok, viol = detailed_balance_check(uniform)
    assert not ok
    expected = max(abs(vel.maxwellian[j] - vel.maxwellian[i])
                   for i in range(4) for j in range(4))
    assert abs(viol - expected) < 1e-14


def test_detailed_balance_bgk_kernel():
    vel = TruncatedLine(4.0, 16)
    bgk_kernel = np.tile(vel.maxwellian[:, None], (1, vel.n))
    op = ScatteringOperator(vel, bgk_kernel)
    ok, viol = detailed_balance_check(op)
    assert ok and viol < 1e-14


def test_gamma2_equality_case():
    op = random_reversible_kernel(8, 40)
    val, applicable = gamma2_check(op, 2.7 * op.vel.maxwellian)
    assert applicable
    assert abs(val) < 1e-13


def test_gamma2_battery_reversible():
    rng = np.random.default_rng(100)
    worst = 0.0
    for seed in range(60):
        op = random_reversible_kernel(2 + seed % 10, seed + 1000)
        f = op.vel.maxwellian * np.exp(rng.standard_normal(op.vel.n))
        val, applicable = gamma2_check(op, f)
        assert applicable
        worst = min(worst, val)
        assert val >= -1e-10
    # the bound is tight at equilibrium only
    assert worst <= 0.0 or worst >= 0.0


def test_gamma2_fokker_planck_nonnegative():
    vel = TruncatedLine(6.0, 64)
    op = FokkerPlanckOperator(vel)
    rng = np.random.default_rng(5)
    for _ in range(10):
        f = vel.maxwellian * np.exp(0.5 * rng.standard_normal(vel.n))
        val, applicable = gamma2_check(op, f)
        assert applicable
        assert val >= -1e-10


def test_gamma2_non_reversible_flagged():
    vel = DiscreteSet([-1.5, -0.5, 0.5, 1.5], weights=[0.1, 0.2, 0.3, 0.4])
    k = np.array([
        [0.0, 3.0, 0.0, 0.1],
        [0.1, 0.0, 2.0, 0.0],
        [0.0, 0.1, 0.0, 1.5],
        [2.0, 0.0, 0.1, 0.0],
    ])
    op = ScatteringOperator(vel, k)
    assert not op.is_reversible
    rng = np.random.default_rng(77)
    vals = []
    for _ in range(50):
        f = vel.maxwellian * np.exp(rng.standard_normal(4))
        val, applicable = gamma2_check(op, f)
        assert not applicable
        vals.append(val)
    assert min(vals) < -1e-10      # counterexample exists for this kernel


def test_gamma2_requires_positive_profile():
    op = random_reversible_kernel(5, 8)
    with pytest.raises(ValueError):
        gamma2_check(op, np.zeros(5))


# -- generator and io --------------------------------------------------------

def test_random_kernel_deterministic_and_irreducible():
    a = random_reversible_kernel(12, 99)
    b = random_reversible_kernel(12, 99)
    assert np.array_equal(a.kernel, b.kernel)
    # connectivity: power of (I + adjacency) has no zeros
    adj = (a.kernel > 0).astype(float) + np.eye(12)
    reach = np.linalg.matrix_power(adj, 12)
    assert np.all(reach > 0)


def test_kernel_csv_roundtrip(tmp_path):
    op = random_reversible_kernel(6, 123)
    path = tmp_path / "kernel.csv"
    kernel_to_csv(op, path)
    back = kernel_from_csv(path)
    assert np.allclose(back.kernel, op.kernel)
    assert np.allclose(back.vel.maxwellian, op.vel.maxwellian)
