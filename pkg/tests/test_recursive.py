import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from saddel.audio import Waveform
from saddel.model import Separator, SeparatorConfig
from saddel.recursive import (
    COUNT_REACHED,
    MAX_ITERATIONS,
    RESIDUAL_BELOW_THRESHOLD,
    NonFiniteOutput,
    StopRule,
    separate_recursive,
)

SR = 8000


def oracle_separator(sources):
    """Peels the true sources off one by one, cheating with ground truth."""
    remaining = [np.asarray(s, dtype=np.float64) for s in sources]

    def step(x):
        if remaining:
            s = remaining.pop(0)
        else:
            s = np.zeros_like(x)
        return s, x - s

    return step


@pytest.mark.parametrize("k", [1, 2, 3])
def test_oracle_recovers_all_sources(k, rng):
    sources = rng.standard_normal((k, 500))
    mix = Waveform(sources.sum(0), SR)
    res = separate_recursive(oracle_separator(sources), mix, StopRule.known_count(k))
    assert len(res.extracted_sources) == k
    assert res.stop_reason == COUNT_REACHED
    for got, want in zip(res.extracted_sources, sources):
        np.testing.assert_array_equal(got.samples, want)
    assert np.max(np.abs(res.final_residual.samples)) < 1e-12


def test_silence_stops_immediately_without_model():
    def boom(x):
        raise AssertionError("model must not be called on silence")

    res = separate_recursive(boom, Waveform(np.zeros(400), SR), StopRule.residual_energy(-25))
    assert len(res.extracted_sources) == 1
    assert res.stop_reason == RESIDUAL_BELOW_THRESHOLD
    assert res.residual_energy_db == [-np.inf]


def test_minus_infinity_threshold_runs_to_cap(rng):
    halve = lambda x: (x / 2, x / 2)
    res = separate_recursive(halve, Waveform(rng.standard_normal(300), SR), StopRule.residual_energy(-np.inf, 4))
    assert len(res.extracted_sources) == 4
    assert res.stop_reason == MAX_ITERATIONS


def test_residual_rule_stops_when_energy_drops(rng):
    s = rng.standard_normal((2, 300))
    res = separate_recursive(oracle_separator(s), Waveform(s.sum(0), SR), StopRule.residual_energy(-25))
    # after two oracle steps only rounding error is left
    assert len(res.extracted_sources) == 2
    assert res.stop_reason == RESIDUAL_BELOW_THRESHOLD
    assert res.residual_energy_db[0] > -25 > res.residual_energy_db[1]


def test_stop_rule_validation_and_parse():
    with pytest.raises(ValueError):
        StopRule.known_count(0)
    with pytest.raises(ValueError):
        StopRule.max_only(0)
    assert StopRule.parse("known:3") == StopRule(3, None, 5)
    assert StopRule.parse("residual:-30", 7) == StopRule(None, -30.0, 7)
    assert StopRule.parse("max", 2).max_iterations == 2
    assert StopRule.known_count(7).max_iterations == 7
    with pytest.raises(ValueError):
        StopRule.parse("learned")


def test_non_finite_output_aborts(rng):
    bad = lambda x: (x * np.nan, x)
    with pytest.raises(NonFiniteOutput):
        separate_recursive(bad, Waveform(rng.standard_normal(100), SR), StopRule.max_only(3))


def test_trained_shape_model_runs_and_keeps_length():
    torch.manual_seed(0)
    model = Separator(SeparatorConfig(encoder_basis_count=16, block_channels=8, hidden_channels=16, repeats=1))
    mix = Waveform(np.random.default_rng(2).standard_normal(900), SR)
    res = separate_recursive(model, mix, StopRule.known_count(2))
    assert len(res.extracted_sources) == 2
    assert all(len(w) == 900 for w in res.extracted_sources + [res.final_residual])
    assert res.report()["num_sources"] == 2


def fuzz_step(seed):
    gen = np.random.default_rng(seed)
    keep = gen.uniform(0, 1.2)

    def step(x):
        return x * (1 - keep), x * keep

    return step


def fuzzed_rule(gen):
    kind = gen.integers(3)
    cap = int(gen.integers(1, 8))
    if kind == 0:
        return StopRule.known_count(int(gen.integers(1, 8)), cap)
    if kind == 1:
        return StopRule.residual_energy(float(gen.uniform(-80, 10)), cap)
    return StopRule.max_only(cap)


def test_iteration_count_never_exceeds_cap_fuzzed():
    gen = np.random.default_rng(99)
    for i in range(1000):
        rule = fuzzed_rule(gen)
        n = int(gen.integers(16, 64))
        x = gen.standard_normal(n) * (0 if gen.random() < 0.05 else 1)
        res = separate_recursive(fuzz_step(i), Waveform(x, SR), rule)
        assert 1 <= len(res.extracted_sources) <= rule.max_iterations
        if rule.count is not None:
            assert len(res.extracted_sources) == rule.count


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_known_count_is_exact(k, seed):
    x = np.random.default_rng(seed).standard_normal(64)
    res = separate_recursive(fuzz_step(seed), Waveform(x, SR), StopRule.known_count(k))
    assert len(res.extracted_sources) == k
