#!/usr/bin/env python3

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import pytest
import torch

from bounds import DTYPE, Interval, Norm
from errors import DomainError, GradientError, UnverifiableError
from model import ModelConfig, generate_random_model, random_input
from relaxations import MatMul, Side
from strategies import (AlphaAssignment, InitMode, OptimizerConfig, RulePolicy, alpha_baseline, alpha_rule,
                        enumerate_sites, logistic_loss, margin_gradient, optimize_alpha, rule_alpha)
from propagator import margin_bounds
from verifier import Strategy, VerificationTask, margin_lower_bound, verify


def tiny_task(seed, eps=0.05, layers=1, heads=1, seq_len=2, hidden=4, classes=2, positions=(0,), norm=Norm.L1):
    config = ModelConfig(num_layers=layers, num_heads=heads, seq_len=seq_len, hidden_size=hidden,
                         head_dim=hidden // heads, ffn_hidden=2 * hidden, num_classes=classes)
    model = generate_random_model(config, seed)
    task = VerificationTask.create(model, random_input(config, seed + 1000), positions, eps, norm)
    return model, task


def test_enumerate_sites():
    config = ModelConfig(num_layers=2, num_heads=2, seq_len=3, hidden_size=4, head_dim=2, ffn_hidden=4,
                         num_classes=2)
    shapes = enumerate_sites(config)
    assert len(shapes) == 2 * 2 * 2 * 2, "layers x heads x matmuls x sides"
    assert shapes[(1, 0, MatMul.QK, Side.U)] == (3, 3, 2)
    assert shapes[(0, 1, MatMul.AV, Side.L)] == (3, 2, 3)


def test_assignment_basics():
    shapes = {(0, 0, MatMul.QK, Side.U): (2, 2, 1), (0, 0, MatMul.QK, Side.L): (2, 2, 1)}
    zero = alpha_baseline(shapes)
    assert len(zero) == 8
    assert len(list(zero.sites())) == 8
    assert zero[(0, 0, MatMul.QK, 1, 0, 0, Side.L)] == 0.0
    stats = AlphaAssignment.filled(shapes, 1.0).stats()
    assert stats.count == 8 and stats.frac_one == 1.0 and stats.frac_zero == 0.0
    with pytest.raises(DomainError):
        AlphaAssignment({(0, 0, MatMul.QK, Side.U): torch.full((1, 1, 1), 1.5, dtype=DTYPE)})
    assert alpha_baseline({}).stats().count == 0


def test_rule_alpha_examples():
    cases = {(-3.0, 2.0): 0.0, (-1.0, 4.0): 1.0, (-4.0, 4.0): 0.0, (1.0, 3.0): 1.0, (-3.0, -1.0): 0.0,
             (0.0, 2.0): 1.0, (-2.0, 0.0): 0.0}
    for (l, u), expected in cases.items():
        value = float(rule_alpha(Interval(l, u)))
        assert value == expected, f"ReLU input ({l}, {u}) should pick alpha {expected}, got {value}"
    key = (0, 0, MatMul.AV, Side.U)
    assignment = alpha_rule({key: Interval(torch.tensor([-1.0, -3.0], dtype=DTYPE),
                                           torch.tensor([4.0, 2.0], dtype=DTYPE))})
    assert assignment[key].tolist() == [1.0, 0.0]


def test_rule_policy_records_binary_choices():
    model, task = tiny_task(3, seq_len=3)
    policy = RulePolicy()
    with torch.no_grad():
        margin_bounds(model, task, policy)
    assignment = policy.assignment()
    assert set(assignment.keys()) == set(enumerate_sites(model.config))
    values = assignment.flat()
    assert ((values == 0) | (values == 1)).all()
    for key, interval in policy.relu_inputs.items():
        assert interval.is_valid()
        assert torch.equal(assignment[key], policy.chosen[key])


def test_rule_policy_refinement_is_tighter_than_box():
    model, task = tiny_task(5, seq_len=3)
    refined, box = RulePolicy(refine=True), RulePolicy(refine=False)
    with torch.no_grad():
        margin_bounds(model, task, refined)
        margin_bounds(model, task, box)
    key = (0, 0, MatMul.QK, Side.U)
    assert (refined.relu_inputs[key].lo >= box.relu_inputs[key].lo).all()
    assert (refined.relu_inputs[key].hi <= box.relu_inputs[key].hi).all()
    assert torch.allclose(box.relu_inputs[key].lo, -box.relu_inputs[key].hi), "Box range is symmetric"


def test_logistic_loss():
    assert math.isclose(logistic_loss(0.0), math.log(2.0))
    assert math.isclose(logistic_loss(50.0), math.exp(-50.0), rel_tol=1e-12)
    assert math.isclose(logistic_loss(-50.0), 50.0, rel_tol=1e-12)
    tensor = logistic_loss(torch.tensor([0.0, 800.0, -800.0], dtype=DTYPE))
    assert torch.isfinite(tensor).all()
    assert math.isclose(float(tensor[2]), 800.0)


def test_optimizer_config_validation():
    assert OptimizerConfig().init == InitMode.BASELINE_ZERO
    shapes = {(0, 0, MatMul.AV, Side.L): (2, 1, 2)}
    assert OptimizerConfig().initial_alpha(shapes).flat().tolist() == [0.0] * 4
    assert OptimizerConfig(init="one").initial_alpha(shapes).flat().tolist() == [1.0] * 4
    assert OptimizerConfig(init="random").init == InitMode.RANDOM
    with pytest.raises(DomainError):
        OptimizerConfig(learning_rate=0.0)
    with pytest.raises(DomainError):
        OptimizerConfig(max_steps=-1)


def test_zero_steps_reproduce_endpoints():
    """0 steps from all-zero / all-one alphas equal the baseline / dual margins bit-exactly"""
    for seed in range(3):
        model, task = tiny_task(seed, eps=0.02)
        baseline = verify(model, task, Strategy.BASELINE)
        dual = verify(model, task, Strategy.DUAL)
        from_zero = verify(model, task, Strategy.OPTIMIZED, OptimizerConfig(max_steps=0))
        from_one = verify(model, task, Strategy.OPTIMIZED, OptimizerConfig(max_steps=0, init=InitMode.DUAL_ONE))
        assert from_zero.margin_lb == baseline.margin_lb
        assert from_one.margin_lb == dual.margin_lb
        assert from_zero.trace == [baseline.margin_lb]


def test_assigned_zero_alphas_match_baseline_policy():
    model, task = tiny_task(4, eps=0.03, heads=2)
    zero = alpha_baseline(enumerate_sites(model.config))
    assert margin_lower_bound(model, task, zero) == verify(model, task, Strategy.BASELINE).margin_lb


def test_optimization_never_ends_below_baseline():
    for seed in range(4):
        model, task = tiny_task(seed, eps=0.1)
        baseline = verify(model, task, Strategy.BASELINE)
        config = OptimizerConfig(max_steps=15, early_stop_on_verified=False)
        result = optimize_alpha(model, task, config)
        assert result.best_margin >= baseline.margin_lb
        assert result.best_margin == max(result.trace), "Best-so-far is the best iterate of the trace"
        assert len(result.trace) == 16


def test_projection_keeps_alphas_in_unit_interval():
    key = (0, 0, MatMul.QK, Side.U)
    seen = []

    def margin_fn(alpha):
        values = alpha[key]
        seen.append((float(values.detach().min()), float(values.detach().max())))
        # increasing in alpha[0], decreasing in alpha[1]
        return 3 * values[0, 0, 0] - 3 * values[0, 0, 1] - 100.0

    config = OptimizerConfig(max_steps=50, learning_rate=0.5, init=InitMode.RANDOM, seed=1)
    result = optimize_alpha(None, None, config, margin_fn, shapes={key: (1, 1, 2)})
    assert all(0.0 <= lo and hi <= 1.0 for lo, hi in seen)
    assert result.best[key][0, 0, 0] == 1.0 and result.best[key][0, 0, 1] == 0.0


def test_early_stop_on_first_positive_margin():
    key = (0, 0, MatMul.QK, Side.U)

    def margin_fn(alpha):
        return alpha[key].sum() - 0.5

    config = OptimizerConfig(max_steps=100, learning_rate=0.1)
    result = optimize_alpha(None, None, config, margin_fn, shapes={key: (1, 1, 1)})
    assert result.best_margin > 0
    assert result.trace[-1] > 0 and all(m <= 0 for m in result.trace[:-1])
    assert result.steps < 100


def test_unverifiable_iterate_ends_the_run():
    key = (0, 0, MatMul.QK, Side.U)

    def margin_fn(alpha):
        raise UnverifiableError(0, 0, -1.0)

    result = optimize_alpha(None, None, OptimizerConfig(max_steps=5), margin_fn, shapes={key: (1, 1, 1)})
    assert result.trace == [-math.inf]
    assert result.best_margin == -math.inf


def test_non_finite_gradient_names_the_site():
    key = (0, 1, MatMul.AV, Side.L)

    def margin_fn(alpha):
        values = alpha[key]
        return torch.sqrt(values - values.detach()).sum() - 1.0

    with pytest.raises(GradientError) as info:
        optimize_alpha(None, None, OptimizerConfig(max_steps=3), margin_fn, shapes={key: (1, 2, 1)})
    assert info.value.site == (0, 1, MatMul.AV, 0, 0, 0, Side.L)


def test_margin_gradient_matches_finite_differences():
    """Central differences, h = 1e-5, skipping sites where the one-sided slopes disagree"""
    h = 1e-5
    checked = 0
    for seed in range(3):
        model, task = tiny_task(seed, eps=0.05)
        shapes = enumerate_sites(model.config)
        generator = torch.Generator().manual_seed(seed)
        alpha = AlphaAssignment({key: 0.2 + 0.6 * torch.rand(*shape, dtype=DTYPE, generator=generator)
                                 for key, shape in shapes.items()})
        margin, grads = margin_gradient(model, task, alpha)
        assert margin == margin_lower_bound(model, task, alpha)
        for site in list(alpha.sites())[::3]:
            layer, head, matmul, i, j, hh, side = site
            key = (layer, head, matmul, side)

            def shifted(delta):
                moved = alpha.detach()
                moved.groups[key][i, j, hh] += delta
                return margin_lower_bound(model, task, moved)

            plus, minus = shifted(h), shifted(-h)
            forward_slope, backward_slope = (plus - margin) / h, (margin - minus) / h
            if abs(forward_slope - backward_slope) > 1e-3 * max(1.0, abs(forward_slope)):
                continue
            numeric = (plus - minus) / (2 * h)
            analytic = float(grads[key][i, j, hh])
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7, \
                f"site {site}: analytic {analytic}, numeric {numeric}"
            checked += 1
    assert checked > 0


def test_margin_gradient_is_zero_without_downstream_weight():
    model, task = tiny_task(2, eps=0.05)
    model.classifier_W.zero_()
    model.classifier_b.copy_(torch.tensor([1.0, 0.0], dtype=DTYPE))
    task = VerificationTask.create(model, task.spec.X0, task.spec.positions, 0.05)
    alpha = AlphaAssignment.filled(enumerate_sites(model.config), 0.5)
    margin, grads = margin_gradient(model, task, alpha)
    assert margin == 1.0
    for grad in grads.values():
        assert torch.equal(grad, torch.zeros_like(grad))
