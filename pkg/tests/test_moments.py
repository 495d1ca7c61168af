import math

import numpy as np
import pytest

from brwlab import (LatticeBox, PerturbationField, RangeViolation,
                    SourceOutsideBox, TorusGrid, TruncationWarning, UnstableStep,
                    bound_constant_B, bound_sequence, build_generator,
                    kpp_generating_function, kpp_moment_estimates,
                    majorization_check, moment_bound_check,
                    solve_factorial_moments, solve_first_moment,
                    steady_mean_constant, transition_probability_field)

from conftest import bessel_heat_kernel


# ---------------------------------------------------------------------------
# LatticeBox and generator assembly
# ---------------------------------------------------------------------------

def test_box_basics():
    box = LatticeBox(2, 3)
    assert box.n_sites == 7 ** 2
    coords = box.coordinates()
    assert coords.shape == (49, 2)
    for i, xy in enumerate(coords):
        assert box.index(tuple(xy)) == i
    assert tuple(coords[box.origin_index]) == (0, 0)
    assert box.boundary_mask().sum() == 49 - 25
    with pytest.raises(SourceOutsideBox):
        box.index((4, 0))
    with pytest.raises(ValueError):
        LatticeBox(2, 3, "reflecting")


def test_generator_hand_assembled_3x3(srw1):
    box = LatticeBox(1, 1, "absorbing")
    f = PerturbationField.single(1.0, 0.5, 1)
    h = build_generator(srw1, box, f).toarray()
    expect = np.array([[-1.0, 0.5, 0.0],
                       [0.5, -0.5, 0.5],
                       [0.0, 0.5, -1.0]])
    assert np.allclose(h, expect, atol=1e-15)


def test_generator_row_sums_and_symmetry(srw3):
    boxa = LatticeBox(3, 3, "absorbing")
    ha = build_generator(srw3, boxa)
    rs = np.asarray(ha.sum(axis=1)).ravel()
    assert rs.max() <= 1e-15            # mass leaks at the boundary
    assert rs.min() < -0.1              # boundary rows really lose mass
    boxp = LatticeBox(3, 3, "periodic")
    hp = build_generator(srw3, boxp)
    assert np.abs(np.asarray(hp.sum(axis=1)).ravel()).max() <= 1e-15
    assert abs(ha - ha.T).max() == 0.0
    assert abs(hp - hp.T).max() == 0.0


def test_generator_source_diagonal(srw3):
    box = LatticeBox(3, 2, "absorbing")
    sigma = 0.37
    h = build_generator(srw3, box, PerturbationField.single(1.0, sigma, 3))
    h0 = build_generator(srw3, box)
    diff = (h - h0).toarray()
    assert diff[box.origin_index, box.origin_index] == pytest.approx(sigma, abs=1e-15)
    diff[box.origin_index, box.origin_index] = 0.0
    assert np.abs(diff).max() == 0.0


def test_periodic_constant_in_kernel(srw2):
    box = LatticeBox(2, 4, "periodic")
    h = build_generator(srw2, box)
    ones = np.ones(box.n_sites)
    assert np.abs(h @ ones).max() <= 1e-15


# ---------------------------------------------------------------------------
# First moment
# ---------------------------------------------------------------------------

def test_conservation_on_periodic_box(srw1):
    box = LatticeBox(1, 60, "periodic")
    h = build_generator(srw1, box)
    table = solve_first_moment(h, box, "ones", 100.0, dt=0.05,
                               checkpoints=[10.0, 100.0])
    assert np.abs(table.values[0] - 1.0).max() <= 1e-12


def test_first_moment_matches_heat_kernel(srw1):
    box = LatticeBox(1, 25, "absorbing")
    h = build_generator(srw1, box)
    table = solve_first_moment(h, box, "delta", 1.0, dt=0.01, y0=(0,))
    got = table.series_at(1, (0,))[-1]
    assert got == pytest.approx(bessel_heat_kernel(1.0, (0,), 1), abs=1e-7)
    assert got == pytest.approx(0.465759607593640, abs=1e-7)
    # the whole profile matches the translation-invariant kernel
    for x in (1, 3, 5):
        assert table.series_at(1, (x,))[-1] == pytest.approx(
            bessel_heat_kernel(1.0, (x,), 1), abs=1e-7)


def test_first_moment_approaches_steady_constant(srw3, grid3):
    f = PerturbationField.single(1.0, 0.3, 3)
    box = LatticeBox(3, 12, "absorbing")
    h = build_generator(srw3, box, f)
    table = solve_first_moment(h, box, "ones", 30.0, dt=0.05,
                               checkpoints=[5.0, 15.0, 30.0], field=f)
    series = table.series_at(1, (0, 0, 0))
    a_const = steady_mean_constant(srw3, grid3, f)
    assert np.all(np.diff(series) > 0)      # monotone climb toward A
    assert series[-1] < a_const
    assert series[-1] > 0.85 * a_const


def test_unstable_step_detected(srw1):
    box = LatticeBox(1, 10, "absorbing")
    h = build_generator(srw1, box)
    with pytest.raises(UnstableStep):
        solve_first_moment(h, box, "delta", 40.0, dt=4.0, y0=(0,))


def test_truncation_warning(srw1):
    box = LatticeBox(1, 3, "absorbing")
    h = build_generator(srw1, box)
    with pytest.warns(TruncationWarning):
        solve_first_moment(h, box, "delta", 10.0, dt=0.02, y0=(0,))


# ---------------------------------------------------------------------------
# Factorial moments
# ---------------------------------------------------------------------------

def test_pure_walk_higher_moments_vanish(srw1):
    f = PerturbationField(mu=0.0)
    box = LatticeBox(1, 15, "absorbing")
    h = build_generator(srw1, box, f)
    table = solve_factorial_moments(h, box, f, 3, (0,), 2.0, dt=0.02,
                                    error_estimate=False)
    assert table.order(2).max() == 0.0
    assert table.order(3).max() == 0.0


def test_moments_nonnegative_and_initial_data(srw1):
    f = PerturbationField.single(1.0, 0.2, 1)
    box = LatticeBox(1, 12, "absorbing")
    h = build_generator(srw1, box, f)
    table = solve_factorial_moments(h, box, f, 3, (0,), 4.0, dt=0.01,
                                    checkpoints=[1.0, 4.0], error_estimate=True)
    assert table.values.min() >= 0.0
    assert table.error_estimates is not None
    assert all(e < 1e-6 for e in table.error_estimates)


def test_source_outside_box_rejected(srw1):
    f = PerturbationField(1.0, (((30,), 0.2),))
    box = LatticeBox(1, 5, "absorbing")
    h = build_generator(srw1, box)
    with pytest.raises(SourceOutsideBox):
        build_generator(srw1, box, f)
    with pytest.raises(SourceOutsideBox):
        solve_factorial_moments(h, box, f, 2, (0,), 1.0, dt=0.05)


def test_second_moment_bound_critical_case(srw3, grid3):
    # no source: m_2 <= 2 mu G_0(0,0) p pointwise
    f = PerturbationField(mu=1.0)
    box = LatticeBox(3, 8, "absorbing")
    h = build_generator(srw3, box, f)
    table = solve_factorial_moments(h, box, f, 2, (0, 0, 0), 5.0, dt=0.02,
                                    checkpoints=[1.0, 3.0, 5.0],
                                    error_estimate=False)
    b_prime = bound_constant_B(srw3, grid3, f)
    p_vals = np.zeros((3, box.n_sites))
    coords = box.coordinates()
    for j, t in enumerate(table.times):
        field = transition_probability_field(srw3, grid3, float(t), box.radius)
        idx = tuple(coords[:, ax] + box.radius for ax in range(3))
        p_vals[j] = field[idx]
    mask = p_vals > 1e-12
    ratio = np.where(mask, table.order(2) / np.maximum(p_vals, 1e-12), 0.0)
    assert ratio.max() <= b_prime * (1.0 + 1e-3)


def test_moment_bound_check_report(srw3, grid3):
    f = PerturbationField.single(1.0, 0.3, 3)
    box = LatticeBox(3, 8, "absorbing")
    h = build_generator(srw3, box, f)
    table = solve_factorial_moments(h, box, f, 3, (0, 0, 0), 5.0, dt=0.02,
                                    checkpoints=[2.5, 5.0], error_estimate=False)
    a_const = steady_mean_constant(srw3, grid3, f)
    b_const = bound_constant_B(srw3, grid3, f)
    p_vals = np.zeros((2, box.n_sites))
    coords = box.coordinates()
    for j, t in enumerate(table.times):
        field = transition_probability_field(srw3, grid3, float(t), box.radius)
        idx = tuple(coords[:, ax] + box.radius for ax in range(3))
        p_vals[j] = field[idx]
    rep = moment_bound_check(table, a_const, b_const, p_vals)
    assert rep.passed
    assert len(rep.max_ratios) == 3
    assert all(r <= 1.0 + 1e-3 for r in rep.max_ratios)
    with pytest.raises(ValueError):
        moment_bound_check(table, a_const, b_const, p_vals[:1])


def test_majorization(srw3):
    f = PerturbationField.single(1.0, 0.3, 3)
    box = LatticeBox(3, 8, "absorbing")
    h = build_generator(srw3, box, f)
    table = solve_factorial_moments(h, box, f, 2, (0, 0, 0), 6.0, dt=0.02,
                                    checkpoints=[2.0, 6.0], error_estimate=False)
    rep = majorization_check(table)
    assert rep.ok
    assert rep.worst_margin <= 0.0


def test_majorization_reduces_to_heat_kernel_peak(srw1):
    # V = 0: m_1 = p, so the peak at the origin is the maximum principle
    f = PerturbationField(mu=1.0)
    box = LatticeBox(1, 20, "absorbing")
    h = build_generator(srw1, box, f)
    table = solve_factorial_moments(h, box, f, 2, (0,), 3.0, dt=0.02,
                                    checkpoints=[1.0, 3.0], error_estimate=False)
    assert majorization_check(table).ok


def test_first_moment_pair_symmetry(srw1):
    # source at the origin: the pair moment is symmetric, m1(t, x, 0) = m1(t, 0, x)
    f = PerturbationField.single(1.0, 0.2, 1)
    box = LatticeBox(1, 15, "absorbing")
    h = build_generator(srw1, box, f)
    probe = (3,)
    from_origin = solve_first_moment(h, box, "delta", 4.0, dt=0.01, y0=(0,),
                                     field=f, checkpoints=[2.0, 4.0])
    from_probe = solve_first_moment(h, box, "delta", 4.0, dt=0.01, y0=probe,
                                    field=f, checkpoints=[2.0, 4.0])
    lhs = from_origin.series_at(1, probe)   # m1(t, 3, 0)
    rhs = from_probe.series_at(1, (0,))     # m1(t, 0, 3)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_carleman_moment_growth(srw3, grid3):
    # (M_l / l!)^(1/l) stays below A * B for every computed order
    f = PerturbationField.single(1.0, 0.3, 3)
    box = LatticeBox(3, 8, "absorbing")
    h = build_generator(srw3, box, f)
    table = solve_factorial_moments(h, box, f, 3, (0, 0, 0), 5.0, dt=0.02,
                                    checkpoints=[2.5, 5.0], error_estimate=False)
    a_const = steady_mean_constant(srw3, grid3, f)
    b_const = bound_constant_B(srw3, grid3, f)
    for l in range(1, 4):
        m_max = float(table.order(l).max())
        root = (m_max / math.factorial(l)) ** (1.0 / l)
        assert root <= a_const * b_const * 1.001


def test_majorization_requires_origin_target(srw1):
    f = PerturbationField.single(1.0, 0.2, 1)
    box = LatticeBox(1, 10, "absorbing")
    h = build_generator(srw1, box, f)
    table = solve_factorial_moments(h, box, f, 2, (3,), 2.0, dt=0.05,
                                    error_estimate=False)
    with pytest.raises(ValueError):
        majorization_check(table)


def test_step_halving_convergence(srw1):
    f = PerturbationField.single(1.0, 0.2, 1)
    box = LatticeBox(1, 12, "absorbing")
    h = build_generator(srw1, box, f)
    coarse = solve_factorial_moments(h, box, f, 2, (0,), 3.0, dt=0.04,
                                     error_estimate=False)
    fine = solve_factorial_moments(h, box, f, 2, (0,), 3.0, dt=0.02,
                                   error_estimate=False)
    for l in (1, 2):
        scale = np.abs(fine.order(l)[-1]).max()
        diff = np.abs(coarse.order(l)[-1] - fine.order(l)[-1]).max()
        assert diff / scale < 1e-4


def test_box_growth_convergence(srw1):
    f = PerturbationField.single(1.0, 0.2, 1)
    t_end = 6.0
    vals = []
    for radius in (12, 18):
        box = LatticeBox(1, radius, "absorbing")
        h = build_generator(srw1, box, f)
        table = solve_first_moment(h, box, "delta", t_end, dt=0.02, y0=(0,),
                                   field=f)
        vals.append(table.series_at(1, (0,))[-1])
    assert abs(vals[1] - vals[0]) / abs(vals[1]) < 1e-3


# ---------------------------------------------------------------------------
# Bound sequence
# ---------------------------------------------------------------------------

def test_bound_sequence_values():
    seq = bound_sequence(4)
    assert seq.values == (1, 1, 3, 15)
    assert bound_sequence(6).values == (1, 1, 3, 15, 105, 945)
    with pytest.raises(ValueError):
        bound_sequence(0)


def test_bound_sequence_growth_bound_exact():
    seq = bound_sequence(30)
    margins = seq.bound_margins()
    assert len(margins) == 30
    assert all(m >= 0 for m in margins)        # D_l <= 4^l l! exactly
    # values are the odd double factorials
    dfact = 1
    for l, v in enumerate(seq.values[1:], start=2):
        dfact *= 2 * l - 3
        assert v == dfact


# ---------------------------------------------------------------------------
# Generating function
# ---------------------------------------------------------------------------

def test_kpp_fixed_point_at_one(srw1):
    f = PerturbationField.single(1.0, 0.3, 1)
    box = LatticeBox(1, 10, "absorbing")
    res = kpp_generating_function(srw1, box, f, 1.0, (0,), 4.0,
                                  checkpoints=[1.0, 4.0])
    assert np.abs(res.phi - 1.0).max() == 0.0


def test_kpp_range_and_monotone_extinction(srw1):
    # critical unperturbed: phi_0(t, x) = P(no particle at y0) grows in t
    f = PerturbationField(mu=1.0)
    box = LatticeBox(1, 12, "absorbing")
    res = kpp_generating_function(srw1, box, f, 0.0, (0,), 6.0,
                                  checkpoints=[1.0, 2.0, 4.0, 6.0])
    assert res.phi.min() >= 0.0 and res.phi.max() <= 1.0
    at_origin = res.phi[:, box.origin_index]
    assert np.all(np.diff(at_origin) > 0)
    assert at_origin[0] > 0.2


def test_kpp_validation(srw1):
    f = PerturbationField(mu=1.0)
    box = LatticeBox(1, 8, "absorbing")
    with pytest.raises(ValueError):
        kpp_generating_function(srw1, box, f, 1.2, (0,), 1.0)
    with pytest.raises(ValueError):
        kpp_generating_function(srw1, LatticeBox(1, 8, "periodic"), f, 0.5, (0,), 1.0)
    with pytest.raises(RangeViolation):
        kpp_generating_function(srw1, box, f, 0.0, (0,), 40.0, dt=8.0)


def test_kpp_moments_match_hierarchy(srw1):
    f = PerturbationField.single(1.0, 0.3, 1)
    box = LatticeBox(1, 10, "absorbing")
    times, m1k, m2k = kpp_moment_estimates(srw1, box, f, (0,), 5.0, dt=0.01,
                                           checkpoints=[2.5, 5.0])
    h = build_generator(srw1, box, f)
    table = solve_factorial_moments(h, box, f, 2, (0,), 5.0, dt=0.01,
                                    checkpoints=[2.5, 5.0], error_estimate=False)
    m1h, m2h = table.order(1), table.order(2)
    sel1 = m1h > 1e-6
    assert np.abs((m1k - m1h)[sel1] / m1h[sel1]).max() < 1e-2
    sel2 = m2h > 1e-6
    assert np.abs((m2k - m2h)[sel2] / m2h[sel2]).max() < 1e-2
    # first derivative in z at z = 1 reproduces the heat-kernel-sized m_1
    assert np.abs((m1k - m1h)[sel1]).max() < 1e-3
