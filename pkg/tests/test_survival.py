import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from churnsurv.survival import (
    ExponentialSurvival,
    StepSurvivalCurve,
    censored_exponential_mle,
    censoring_distribution,
    deferred_probability,
    kaplan_meier,
    per_customer_km,
    survival_at,
    write_curve_csv,
)
from churnsurv.transactions import CustomerSequence

from oracles import exp_nll, km_bruteforce


def test_exponential_basics():
    m = ExponentialSurvival(0.1)
    assert survival_at(m, 0.0) == 1.0
    assert survival_at(m, 10.0) == pytest.approx(math.exp(-1))
    assert deferred_probability(m, 5, 5) == 0.0
    assert deferred_probability(m, 0, 10) == pytest.approx(1 - math.exp(-1))
    assert m.quantile(0.5) == pytest.approx(math.log(2) / 0.1)
    assert m.mean == pytest.approx(10.0)
    with pytest.raises(ValueError):
        deferred_probability(m, 10, 5)
    with pytest.raises(ValueError):
        ExponentialSurvival(0.0)


@given(st.floats(1e-3, 5), st.floats(0, 50), st.floats(0, 50))
def test_deferred_probability_is_an_interval_mass(rate, a, b):
    t1, t2 = sorted((a, b))
    m = ExponentialSurvival(rate)
    p = deferred_probability(m, t1, t2)
    assert 0.0 <= p <= 1.0
    assert p == pytest.approx(survival_at(m, t1) - survival_at(m, t2))


def test_mle_hand_example():
    # two events in 10 days of total exposure
    assert censored_exponential_mle([2, 3, 5], [1, 1, 0]).rate == pytest.approx(0.2)


def test_mle_errors():
    with pytest.raises(ValueError, match="unidentifiable"):
        censored_exponential_mle([1, 2], [0, 0])
    with pytest.raises(ValueError, match="unidentifiable"):
        censored_exponential_mle([0, 0], [1, 1])


def test_mle_minimises_nll(rng):
    times = rng.exponential(7.0, 50)
    observed = rng.random(50) < 0.7
    lam = censored_exponential_mle(times, observed).rate
    for f in (0.9, 0.99, 1.01, 1.1):
        assert exp_nll(lam, times, observed) < exp_nll(lam * f, times, observed)


def test_mle_recovers_rate_under_censoring(rng):
    t = rng.exponential(1 / 0.3, 20000)
    c = rng.exponential(1 / 0.1, 20000)
    est = censored_exponential_mle(np.minimum(t, c), t <= c).rate
    assert est == pytest.approx(0.3, rel=0.03)


# ------------------------------------------------------------------ KM


def test_km_hand_example():
    # times 1,2,2+,3,4+ : S(1)=4/5, S(2)=4/5*3/4, S(3)=3/5*1/2
    km = kaplan_meier([1, 2, 2, 3, 4], [1, 1, 0, 1, 0])
    np.testing.assert_allclose(km.knots, [1, 2, 3])
    np.testing.assert_allclose(km.values, [0.8, 0.6, 0.3], rtol=1e-15)
    assert km(0.999) == 1.0
    assert km(1.0) == 0.8  # right-continuous
    assert km(100.0) == km.values[-1]  # carried forward


def test_km_no_events_is_flat_one():
    km = kaplan_meier([1.0, 3.0], [0, 0])
    assert km(10.0) == 1.0
    assert km.support_end() == math.inf


instances = st.integers(1, 20).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 6).map(float), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )
)


@given(instances)
def test_km_matches_bruteforce_exactly(inst):
    times, observed = inst
    km = kaplan_meier(times, observed)
    for t in np.arange(-0.5, 7.5, 0.5):
        assert km(t) == km_bruteforce(times, observed, t)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=30))
def test_km_without_censoring_is_one_minus_ecdf(times):
    km = kaplan_meier(times, [1] * len(times))
    arr = np.array(times)
    for t in np.linspace(-1, 101, 41):
        assert km(t) == pytest.approx(np.mean(arr > t), abs=1e-12)


def test_censoring_distribution_swaps_roles():
    g = censoring_distribution([1, 2, 3], [1, 0, 1])
    np.testing.assert_allclose(g.knots, [2.0])
    np.testing.assert_allclose(g.values, [0.5])


def test_per_customer_km():
    seq = CustomerSequence("A", [3.0, 5.0, 4.0], [1, 1, 0])
    km = per_customer_km(seq)
    assert km(3) == pytest.approx(2 / 3)
    assert km(4) == pytest.approx(2 / 3)
    assert km(5) == 0.0
    single = per_customer_km(CustomerSequence("B", [12.0], [0]))
    assert single(1000.0) == 1.0


def test_step_curve_validation_and_export(tmp_path):
    with pytest.raises(ValueError):
        StepSurvivalCurve([1.0, 1.0], [0.5, 0.4])
    with pytest.raises(ValueError):
        StepSurvivalCurve([1.0, 2.0], [0.4, 0.5])
    curve = StepSurvivalCurve([1.0, 2.0], [0.5, 0.0])
    assert curve.support_end() == 2.0
    np.testing.assert_array_equal(curve([0, 1, 1.5, 2, 3]), [1, 0.5, 0.5, 0, 0])
    write_curve_csv(tmp_path / "c.csv", curve)
    assert (tmp_path / "c.csv").read_text().splitlines() == ["t,survival", "0.0,1.0", "1.0,0.5", "2.0,0.0"]
