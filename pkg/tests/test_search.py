#!/usr/bin/env python3

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest

from errors import DomainError, SearchCapReached, SearchError
from model import ModelConfig, generate_random_model, random_input
from strategies import OptimizerConfig
from verifier import Strategy, VerificationTask, binary_search_eps, search_max_eps, verify


def threshold_oracle(threshold):
    return lambda eps: eps <= threshold


@pytest.mark.parametrize("threshold", [0.003, 0.05, 0.7])
def test_search_brackets_the_threshold(threshold):
    result = binary_search_eps(threshold_oracle(threshold), num_iters=20)
    assert result.eps <= threshold < result.upper
    assert result.bracket_width <= threshold + 0.01
    assert result.bracket_width == pytest.approx((result.upper - result.eps))
    assert len(result.probes) == result.growth_probes + 20


def test_search_probe_sequence():
    result = binary_search_eps(threshold_oracle(0.047), num_iters=3)
    assert [p.eps for p in result.probes] == pytest.approx([0.01, 0.02, 0.04, 0.08, 0.06, 0.05, 0.045])
    assert [p.verified for p in result.probes] == [True, True, True, False, False, False, True]
    assert result.growth_probes == 4
    assert result.eps == pytest.approx(0.045) and result.upper == pytest.approx(0.05)


def test_search_below_initial_probes_zero():
    result = binary_search_eps(threshold_oracle(0.003), num_iters=2)
    assert [p.eps for p in result.probes] == pytest.approx([0.01, 0.0, 0.005, 0.0025])
    assert result.growth_probes == 2
    assert result.eps == pytest.approx(0.0025) and result.upper == pytest.approx(0.005)


def test_search_width_halves_per_iteration():
    coarse = binary_search_eps(threshold_oracle(0.3), num_iters=5)
    fine = binary_search_eps(threshold_oracle(0.3), num_iters=6)
    assert fine.bracket_width == pytest.approx(coarse.bracket_width / 2)


def test_search_errors():
    with pytest.raises(SearchCapReached) as info:
        binary_search_eps(lambda eps: True, num_iters=5, max_doublings=5)
    assert info.value.cap == 5
    assert info.value.eps == pytest.approx(0.32)
    with pytest.raises(SearchError):
        binary_search_eps(lambda eps: False, num_iters=5)
    with pytest.raises(DomainError):
        binary_search_eps(lambda eps: True, num_iters=0)


def test_search_on_a_model():
    """The optimized search never certifies less than the baseline search"""
    config = ModelConfig(num_layers=1, num_heads=1, seq_len=2, hidden_size=4, head_dim=4, ffn_hidden=8,
                         num_classes=2)
    for seed in range(2):
        model = generate_random_model(config, seed)
        task = VerificationTask.create(model, random_input(config, seed + 7), [0], 0.0)
        baseline = search_max_eps(model, task, Strategy.BASELINE, num_iters=8)
        optimized = search_max_eps(model, task, Strategy.OPTIMIZED, num_iters=8,
                                   opt_config=OptimizerConfig(max_steps=10))
        assert optimized.eps >= baseline.eps
        assert search_max_eps(model, task, Strategy.BASELINE, num_iters=8).eps == baseline.eps
        if baseline.eps > 0:
            assert verify(model, task.with_epsilon(baseline.eps), Strategy.BASELINE).verified
        assert not verify(model, task.with_epsilon(baseline.upper), Strategy.BASELINE).verified
