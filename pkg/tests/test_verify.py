import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maa_planner.maa_verify import Check, CheckOutcome, check_lossless, check_sandwich, run_check
from tests.conftest import random_model


def test_outcome_text():
    outcome = CheckOutcome(Check.SANDWICH, "dectiger", 2, True, "fine", seed=3)
    assert str(outcome) == "PASS sandwich dectiger h=2 seed=3: fine"
    skipped = CheckOutcome(Check.LOSSLESS, "grid", 4, True, "too big", skipped=True)
    assert str(skipped).startswith("SKIP lossless grid h=4")


def test_sandwich(dectiger):
    ok, detail = check_sandwich(dectiger, 2, 2)
    assert ok, detail
    assert detail.startswith("random")


def test_montecarlo(identity_pair):
    outcome = run_check(Check.MONTECARLO, "identity_pair", identity_pair, 3, 1, seed=2)
    assert outcome.passed, outcome.detail


def test_admissible_skips_large_problems(dectiger):
    outcome = run_check(Check.ADMISSIBLE, "dectiger", dectiger, 4)
    assert outcome.skipped
    assert "guard" in outcome.detail


@pytest.mark.parametrize("window", [1, 2])
def test_lossless_identity_pair(identity_pair, window):
    ok, detail = check_lossless(identity_pair, 3, window)
    assert ok, detail


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lossless_on_random_models(seed):
    ok, detail = check_lossless(random_model(seed), 2, 1)
    assert ok, detail


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sandwich_on_random_models(seed):
    ok, detail = check_sandwich(random_model(seed), 2, 2)
    assert ok, detail


def test_montecarlo_dectiger(dectiger):
    outcome = run_check(Check.MONTECARLO, "dectiger", dectiger, 3, 2, seed=11)
    assert outcome.passed, outcome.detail
    assert outcome.detail.startswith("exact 5.19")


@settings(max_examples=3, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2]))
def test_lossless_three_stages(seed, window):
    ok, detail = check_lossless(random_model(seed), 3, window)
    assert ok, detail


@pytest.mark.slow
@pytest.mark.parametrize("window", [1, 2])
def test_lossless_dectiger(dectiger, window):
    ok, detail = check_lossless(dectiger, 3, window)
    assert ok, detail
