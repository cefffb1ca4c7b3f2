import math

import numpy as np
import pytest

from kineticlab.phase import (
    CircleVelocities,
    ConstantWeight,
    DiscreteSet,
    Disc2D,
    Field,
    HarmonicPotential,
    IndicatorWeight,
    Interval1D,
    PhaseGrid,
    PowerLawWeight,
    TabulatedPotential,
    Torus1D,
    Torus2D,
    TruncatedLine,
    ZeroPotential,
    build_equilibrium,
    connected_components,
    poincare_constant,
    project_local_equilibrium,
    regularity_check,
    weighted_norm,
)


def test_velocity_weights_normalized():
    for vel in (CircleVelocities(8), TruncatedLine(6.0, 128), DiscreteSet([-1.0, 1.0])):
        assert abs(vel.weights @ vel.maxwellian - 1.0) < 1e-12


def test_discrete_set_must_be_even():
    with pytest.raises(ValueError):
        DiscreteSet([0.5, 1.0])


def test_discrete_set_must_span():
    with pytest.raises(ValueError):
        DiscreteSet(np.array([[1.0, 0.0], [-1.0, 0.0]]))


def test_truncated_line_reflection_exact():
    vel = TruncatedLine(6.0, 64)
    assert np.allclose(vel.nodes[vel.reflect_index], -vel.nodes)
    assert vel.truncation_error < 1e-8


def test_circle_contains_horizontal_direction():
    vel = CircleVelocities(16)
    assert vel.angles[0] == 0.0
    assert np.allclose(vel.nodes[vel.reflect_index], -vel.nodes)


def test_equilibrium_uniform_torus():
    grid = PhaseGrid(Torus1D(1.0), CircleVelocities(8), ZeroPotential(), n_x=16)
    eq = build_equilibrium(grid)
    assert abs(grid.mass(eq.values) - 1.0) < 1e-12
    assert np.allclose(eq.values, eq.values.flat[0])


def test_equilibrium_harmonic_mass_and_norm():
    grid = PhaseGrid(Interval1D(-6.0, 6.0), TruncatedLine(6.0, 64),
                     HarmonicPotential(1.0), n_x=96)
    eq = build_equilibrium(grid)
    assert abs(grid.mass(eq.values) - 1.0) < 1e-10
    # reference mu-norm of the equilibrium is exactly its mass
    assert abs(weighted_norm(eq, "dmu") - 1.0) < 1e-10
    chk = grid.quadrature_selfcheck()
    assert abs(chk["equilibrium_mu_normsq"] - 1.0) < 1e-10


def test_weighted_norm_homogeneity():
    grid = PhaseGrid(Torus1D(1.0), CircleVelocities(8), n_x=16)
    eq = build_equilibrium(grid)
    double = Field(grid, 2.0 * eq.values)
    assert abs(weighted_norm(double, "dmu") - 2.0) < 1e-12
    zero = Field(grid, np.zeros_like(eq.values))
    assert weighted_norm(zero, "dmu") == 0.0


def test_quadrature_consistency_custom_vs_dmu():
    rng = np.random.default_rng(7)
    grid = PhaseGrid(Interval1D(-6.0, 6.0), TruncatedLine(6.0, 32),
                     HarmonicPotential(), n_x=48)
    f = Field(grid, rng.standard_normal(grid.space_shape + (grid.vel.n,)))
    direct = weighted_norm(f, "dmu")
    via_custom = weighted_norm(f, "custom", w_array=1.0 / grid.f_inf)
    assert abs(direct - via_custom) <= 1e-12 * max(direct, 1.0)


def test_projection_is_mu_orthogonal():
    rng = np.random.default_rng(3)
    grid = PhaseGrid(Interval1D(-6.0, 6.0), TruncatedLine(6.0, 48),
                     HarmonicPotential(), n_x=32)
    shape = grid.space_shape + (grid.vel.n,)
    for _ in range(5):
        # random elements of L2(dmu) have bounded ratio to the equilibrium
        f = rng.standard_normal(shape) * grid.f_inf
        g = rng.standard_normal(shape) * grid.f_inf
        pf = project_local_equilibrium(Field(grid, f)).values
        pg = project_local_equilibrium(Field(grid, g)).values
        assert abs(grid.inner_mu(f - pf, pg)) < 1e-10
        # idempotent
        ppf = project_local_equilibrium(Field(grid, pf)).values
        assert np.allclose(ppf, pf, atol=1e-13)


def test_projection_kills_odd_part():
    grid = PhaseGrid(Torus1D(1.0), TruncatedLine(6.0, 64), n_x=8)
    v = grid.vel.nodes
    f = np.tile(v, grid.space_shape + (1,))
    p = project_local_equilibrium(Field(grid, f)).values
    assert np.max(np.abs(p)) < 1e-14


def test_field_validates_shape_and_finiteness():
    grid = PhaseGrid(Torus1D(1.0), CircleVelocities(8), n_x=4)
    with pytest.raises(ValueError):
        Field(grid, np.zeros((4, 7)))
    bad = np.zeros((4, 8))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        Field(grid, bad)


def test_phase_grid_refuses_disc():
    with pytest.raises(ValueError):
        PhaseGrid(Disc2D(1.0), CircleVelocities(8), n_x=8)


def test_poincare_gaussian_is_one():
    lam = poincare_constant(Interval1D(-6.0, 6.0), HarmonicPotential(1.0),
                            n_x=400, bracket_weight=False)
    assert abs(lam - 1.0) < 0.03


def test_poincare_flat_torus_matches_fourier():
    lam = poincare_constant(Torus1D(1.0), ZeroPotential(), n_x=256)
    assert abs(lam - (2.0 * math.pi) ** 2) / (2.0 * math.pi) ** 2 < 0.03


def test_poincare_degenerate_region_rejected():
    mask = np.zeros(64, dtype=bool)
    mask[5] = True
    with pytest.raises(ValueError):
        poincare_constant(Torus1D(1.0), ZeroPotential(), region=mask, n_x=64)


def test_poincare_disconnected_region_flagged():
    mask = np.zeros(128, dtype=bool)
    mask[10:30] = True
    mask[70:90] = True
    with pytest.warns(RuntimeWarning):
        lam = poincare_constant(Interval1D(0.0, 1.0), ZeroPotential(),
                                region=mask, n_x=128)
    assert lam < 1e-8


def test_poincare_2d_cross_region_positive():
    n = 24
    xs = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    cross = ((X >= 1 / 3) & (X <= 2 / 3)) | ((Y >= 1 / 3) & (Y <= 2 / 3))
    lam = poincare_constant(Torus2D((1.0, 1.0)), ZeroPotential(), region=cross, n_x=n)
    assert lam > 1.0


def test_regularity_harmonic_passes():
    rep = regularity_check(Interval1D(-10.0, 10.0), HarmonicPotential(1.0))
    assert abs(rep.sup_ratio - 1.0) < 0.05
    assert rep.passed and rep.boundary_lipschitz


def test_regularity_gaussian_growth_fails():
    x = np.linspace(-3.0, 3.0, 601)
    phi = np.exp(x ** 2)
    dphi = 2.0 * x * phi
    d2phi = (2.0 + 4.0 * x ** 2) * phi
    pot = TabulatedPotential(x, phi, dphi, d2phi)
    rep = regularity_check(Interval1D(-3.0, 3.0), pot)
    assert not rep.passed
    assert rep.sup_ratio > 4.0


def test_tabulated_potential_csv_roundtrip(tmp_path):
    x = np.linspace(-2.0, 2.0, 41)
    rows = np.column_stack([x, 0.5 * x ** 2, x, np.ones_like(x)])
    path = tmp_path / "pot.csv"
    np.savetxt(path, rows, delimiter=",", header="x,phi,dphi,d2phi", comments="")
    pot = TabulatedPotential.from_csv(path)
    assert abs(pot.value(0.5) - 0.125) < 1e-12
    assert abs(pot.grad(-1.0) + 1.0) < 1e-12


def test_degeneracy_weights():
    w = PowerLawWeight(2)
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    assert np.allclose(w(x), [1.0, 0.5 ** 4, 0.0, 0.5 ** 4, 1.0])
    ind = IndicatorWeight(lambda x: np.abs(x) <= 1.0)
    assert np.allclose(ind(x), [0.0, 1.0, 1.0, 1.0, 0.0])
    assert np.all(ConstantWeight(0.7)(x) == 0.7)
    with pytest.raises(ValueError):
        ConstantWeight(-1.0)


def test_connected_components_2d():
    m = np.zeros((8, 8), dtype=bool)
    m[1:3, 1:3] = True
    m[5:7, 5:7] = True
    assert connected_components(m, 4) == 2
    m[3, 3] = True
    m[4, 4] = True
    assert connected_components(m, 4) == 4
    assert connected_components(m, 8) == 1


def test_trace_weights_positive_outgoing_only():
    grid = PhaseGrid(Interval1D(0.0, 1.0), TruncatedLine(4.0, 32), n_x=8)
    for wall in ("left", "right"):
        w = grid.trace_weights(wall)
        assert np.all(w > 0)
        v = grid.vel.nodes[grid.outgoing[wall]]
        assert np.all(grid.wall_normal[wall] * v > 0)
