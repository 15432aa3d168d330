"""Order estimation, stability scans, timing and merge-time utilities."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pnp2d.analysis import (
    GROWTH_FACTOR,
    SweepConfig,
    convergence_study,
    l2_norm,
    merge_time,
    richardson_orders,
    stability_scan,
    timing_report,
)
from pnp2d.geometry import GridSpec
from pnp2d.pnp_model import FemOperators, Formulation, InitialData


@pytest.fixture(scope="module")
def ops24():
    return FemOperators.build(GridSpec(24))


@pytest.fixture(scope="module")
def ops_square16():
    return FemOperators.build(GridSpec(16), obstacle=None)


# ---------------------------------------------------------------------------
# l2_norm
# ---------------------------------------------------------------------------

def test_l2_norm_of_zero_is_zero(ops24):
    assert l2_norm(np.zeros(ops24.n_dofs), ops24.mass) == 0.0


def test_l2_norm_of_ones_is_sqrt_area(ops24, ops_square16):
    for ops in (ops24, ops_square16):
        value = l2_norm(np.ones(ops.n_dofs), ops.mass)
        assert abs(value - math.sqrt(ops.area)) < 1e-12 * math.sqrt(ops.area)
    assert abs(ops_square16.area - 1.0) < 1e-12


def test_l2_norm_of_coordinate_field(ops_square16):
    # integral of x^2 over the unit square is 1/3, and the 2x2 Gauss rule
    # integrates the bilinear interpolant of x times itself exactly
    value = l2_norm(ops_square16.x, ops_square16.mass)
    assert abs(value - math.sqrt(1.0 / 3.0)) < 1e-12


def test_l2_norm_rejects_bad_input(ops24):
    with pytest.raises(ValueError):
        l2_norm(np.full(ops24.n_dofs, np.nan), ops24.mass)
    with pytest.raises(ValueError):
        l2_norm(np.ones(ops24.n_dofs + 1), ops24.mass)


# ---------------------------------------------------------------------------
# richardson_orders on synthetic runs
# ---------------------------------------------------------------------------

def _abs_metric(a, b):
    return abs(a - b)


def test_known_error_sequence_gives_second_order():
    # partial sums chosen so successive differences are exactly
    # 4e-4, 1e-4, 2.5e-5, a ratio-4 sequence
    finals = {1.0: 0.0, 0.5: 4e-4, 0.25: 5e-4, 0.125: 5.25e-4}
    report = richardson_orders(lambda dt: finals[dt], 1.0, levels=4,
                               metric=_abs_metric)
    assert report.errors == pytest.approx([4e-4, 1e-4, 2.5e-5], rel=1e-12)
    assert report.orders == pytest.approx([2.0, 2.0], abs=1e-12)
    assert report.stable
    assert report.finest_order() == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    p=st.sampled_from([1, 2, 3]),
    c=st.floats(min_value=1e-6, max_value=1e6),
    dt0=st.floats(min_value=1e-3, max_value=1.0),
)
def test_order_estimator_is_exact_on_power_laws(p, c, dt0):
    report = richardson_orders(lambda dt: c * dt**p, dt0, levels=4,
                               metric=_abs_metric)
    assert all(abs(order - p) < 1e-12 for order in report.orders)


def test_blow_up_masks_orders_and_flags_instability():
    def run(dt):
        return None if dt < 0.3 else dt**2

    report = richardson_orders(run, 1.0, levels=4, metric=_abs_metric)
    assert not report.stable
    assert "blow-up" in report.note
    assert report.errors[0] is not None
    assert report.errors[1] is None and report.errors[2] is None
    assert report.orders == [None, None]
    assert report.finest_order() is None


def test_zero_error_reports_undefined_order():
    report = richardson_orders(lambda dt: 7.0, 1.0, levels=3,
                               metric=_abs_metric)
    assert report.errors == [0.0, 0.0]
    assert report.orders == [None]
    assert report.stable


def test_richardson_input_validation():
    with pytest.raises(ValueError):
        richardson_orders(lambda dt: dt, 1.0, levels=2, metric=_abs_metric)
    with pytest.raises(ValueError):
        richardson_orders(lambda dt: dt, 0.0, levels=3, metric=_abs_metric)


# ---------------------------------------------------------------------------
# convergence_study on real trajectories
# ---------------------------------------------------------------------------

def test_convergence_study_small_grid(ops24):
    config = SweepConfig(ops=ops24, t_final=4.0 * ops24.h)
    report = convergence_study("I2", Formulation.QUASI_NEUTRAL, 1e-6, config,
                               levels=3)
    assert report.stable
    assert report.scheme == "I2" and report.formulation == "quasi_neutral"
    assert len(report.errors) == 2 and len(report.orders) == 1
    assert all(e > 0.0 for e in report.errors)
    # the combined metric is the root of summed squared per-species errors
    for k in range(2):
        expected = math.hypot(report.per_species["plus"]["errors"][k],
                              report.per_species["minus"]["errors"][k])
        assert report.errors[k] == pytest.approx(expected, rel=1e-12)
    # coarse grid, so accept a wide band around the design order 2
    assert 1.0 < report.orders[0] < 3.0
    json.dumps(report.as_dict())


def test_convergence_study_rejects_non_divisible_horizon(ops24):
    config = SweepConfig(ops=ops24, t_final=0.35 * ops24.h)
    with pytest.raises(ValueError):
        convergence_study("I2", Formulation.QUASI_NEUTRAL, 1e-6, config,
                          levels=3)


# ---------------------------------------------------------------------------
# stability_scan
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scan24(ops24):
    config = SweepConfig(ops=ops24, t_final=40.0 * ops24.h)
    return stability_scan(
        ["I2", "split"],
        [Formulation.PRIMITIVE, Formulation.QUASI_NEUTRAL],
        [1e-4, 1e-11],
        config,
    )


def test_scan_omits_inapplicable_cells(scan24):
    assert ("split", "quasi_neutral", 1e-4) not in scan24.cells
    assert ("split", "quasi_neutral", 1e-11) not in scan24.cells
    assert len(scan24.cells) == 6


def test_scan_finds_split_instability_at_tiny_epsilon(scan24):
    cell = scan24.verdict("split", Formulation.PRIMITIVE, 1e-11)
    assert not cell.stable
    assert cell.reason in {"growth", "overflow guard", "non-finite diagnostics"}
    assert cell.first_bad_step is not None and cell.first_bad_step >= 1


def test_scan_confirms_moderate_epsilon_stability(scan24):
    for scheme, formulation in [
        ("I2", Formulation.PRIMITIVE),
        ("I2", Formulation.QUASI_NEUTRAL),
        ("split", Formulation.PRIMITIVE),
    ]:
        cell = scan24.verdict(scheme, formulation, 1e-4)
        assert cell.stable, (scheme, formulation)
        assert cell.growth < GROWTH_FACTOR
        assert cell.mass_drift < 1e-9


def test_scan_quasi_neutral_stable_everywhere(scan24):
    for eps in (1e-4, 1e-11):
        assert scan24.verdict("I2", Formulation.QUASI_NEUTRAL, eps).stable


def test_scan_is_deterministic(ops24):
    config = SweepConfig(ops=ops24, t_final=10.0 * ops24.h)
    args = (["I2"], [Formulation.QUASI_NEUTRAL], [1e-4, 1e-9], config)
    first = stability_scan(*args).as_dict()
    second = stability_scan(*args).as_dict()
    assert first == second


def test_scan_serializes(scan24):
    payload = scan24.as_dict()
    assert {"cells", "warnings"} <= set(payload)
    json.dumps(payload)


# ---------------------------------------------------------------------------
# timing_report
# ---------------------------------------------------------------------------

def test_timing_report_schema(ops24):
    config = SweepConfig(ops=ops24, t_final=0.1)
    rows = timing_report(
        [Formulation.PRIMITIVE, Formulation.QUASI_NEUTRAL],
        [1e-4],
        config,
        n_iterations=20,
    )
    assert len(rows) == 1
    row = rows[0]
    assert set(row) == {"epsilon", "primitive", "quasi_neutral"}
    assert row["epsilon"] == 1e-4
    assert row["primitive"] > 0.0 and row["quasi_neutral"] > 0.0


def test_timing_report_empty_without_iterations(ops24):
    config = SweepConfig(ops=ops24)
    assert timing_report([Formulation.PRIMITIVE], [1e-4], config,
                         n_iterations=0) == []


# ---------------------------------------------------------------------------
# merge_time
# ---------------------------------------------------------------------------

def test_merge_time_boundaries(ops24):
    data = InitialData.symmetric_offset(0.1)
    config = SweepConfig(ops=ops24, data=data, t_final=3.0 * ops24.h,
                         neutralize=True)
    huge = merge_time("I2", Formulation.QUASI_NEUTRAL, 1e-6, config,
                      threshold=1e9)
    assert huge == 0.0
    never = merge_time("I2", Formulation.QUASI_NEUTRAL, 1e-6, config,
                       threshold=0.0)
    assert never is None


def test_merge_time_decreases_with_looser_threshold(ops24):
    from pnp2d.pnp_model import diagnostics, initial_state

    data = InitialData.symmetric_offset(0.1)
    config = SweepConfig(ops=ops24, data=data, t_final=20.0 * ops24.h,
                         neutralize=True)
    params = config.params(1e-6)
    state = initial_state(data, params, Formulation.QUASI_NEUTRAL, ops24,
                          neutralize=True)
    d0 = diagnostics(state, ops24, params)["qn_deficit"]
    loose = merge_time("I2", Formulation.QUASI_NEUTRAL, 1e-6, config,
                       threshold=0.5 * d0)
    tight = merge_time("I2", Formulation.QUASI_NEUTRAL, 1e-6, config,
                       threshold=0.1 * d0)
    assert loose is not None and loose > 0.0
    assert tight is not None
    assert loose <= tight


def test_merge_time_rejects_non_divisible_horizon(ops24):
    config = SweepConfig(ops=ops24)
    with pytest.raises(ValueError):
        merge_time("I2", Formulation.QUASI_NEUTRAL, 1e-6, config,
                   threshold=0.1, t_max=0.55 * ops24.h)
