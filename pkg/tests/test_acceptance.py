#!/usr/bin/env python3
"""Larger randomized sweeps. Run with `pytest -m slow`."""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import itertools

import pytest
import torch

from bounds import DTYPE, Interval, Norm
from model import ModelConfig, generate_random_model, random_input
from relaxations import dot_plane_A, dot_plane_B, fused_dot_value
from strategies import AlphaAssignment, OptimizerConfig, enumerate_sites, margin_gradient, optimize_alpha
from symbols import PoolingMode
from verifier import (Strategy, Verdict, VerificationTask, brute_force_margin, margin_lower_bound,
                      search_max_eps, soundness_sample_check, verify)

pytestmark = pytest.mark.slow

CONFIGS = [
    dict(num_layers=1, num_heads=1, seq_len=2, hidden_size=4, head_dim=4, ffn_hidden=8, num_classes=2),
    dict(num_layers=2, num_heads=2, seq_len=3, hidden_size=4, head_dim=2, ffn_hidden=8, num_classes=3),
    dict(num_layers=2, num_heads=1, seq_len=4, hidden_size=6, head_dim=6, ffn_hidden=6, num_classes=2,
         pooling=PoolingMode.FIRST_TOKEN),
]

# layers x sequence length x hidden size x heads
GRID = list(itertools.product((1, 2), (2, 4), (4, 8), (1, 2)))
MODELS_PER_SHAPE = 4
CASES = 10000


def task_for(config, seed, positions, eps, norm=Norm.L1):
    model = generate_random_model(config, seed)
    X = random_input(config, seed + 100)
    return model, VerificationTask.create(model, X, positions, eps, norm)


def grid_config(layers, seq_len, hidden, heads):
    return ModelConfig(num_layers=layers, num_heads=heads, seq_len=seq_len, hidden_size=hidden,
                       head_dim=hidden // heads, ffn_hidden=2 * hidden, num_classes=2 + heads % 2)


def random_boxes(generator, count):
    q = torch.sort(torch.randn(count, 2, dtype=DTYPE, generator=generator) * 3, dim=1).values
    k = torch.sort(torch.randn(count, 2, dtype=DTYPE, generator=generator) * 3, dim=1).values
    return Interval(q[:, 0], q[:, 1]), Interval(k[:, 0], k[:, 1])


@pytest.mark.parametrize("shape,eps", list(itertools.product(GRID, [0.01, 0.05, 0.1])))
def test_soundness_grid(shape, eps):
    config = grid_config(*shape)
    base = GRID.index(shape) * MODELS_PER_SHAPE
    for seed in range(base, base + MODELS_PER_SHAPE):
        norm = list(Norm)[seed % len(Norm)]
        model, task = task_for(config, seed, [0, config.seq_len - 1], eps, norm)
        for strategy in Strategy:
            report = verify(model, task, strategy, OptimizerConfig(max_steps=20))
            if report.verdict == Verdict.UNVERIFIABLE:
                continue
            result = soundness_sample_check(model, task, report.alpha, CASES, seed)
            assert result.violations == 0, f"{shape} {strategy.value} seed {seed}: {result.first_violation}"


def test_soundness_grid_covers_enough_models():
    assert len(GRID) * MODELS_PER_SHAPE >= 50


def test_plane_B_holds_on_many_boxes():
    generator = torch.Generator().manual_seed(7)
    q, k = random_boxes(generator, CASES)
    upper, lower = dot_plane_B(q, k)
    scale = 1e-12 * (1 + torch.maximum(q.lo.abs(), q.hi.abs()) * torch.maximum(k.lo.abs(), k.hi.abs()))
    for x in (q.lo, q.hi):
        for y in (k.lo, k.hi):
            assert ((upper(x, y) - x * y) >= -scale).all()
            assert ((lower(x, y) - x * y) <= scale).all()
    a, b = torch.rand(2, CASES, dtype=DTYPE, generator=generator)
    x, y = q.lo + (q.hi - q.lo) * a, k.lo + (k.hi - k.lo) * b
    assert ((upper(x, y) - x * y) >= -scale).all()
    assert ((lower(x, y) - x * y) <= scale).all()


def test_fused_forms_agree_on_many_cases():
    generator = torch.Generator().manual_seed(11)
    q, k = random_boxes(generator, CASES)
    a, b = torch.rand(2, CASES, dtype=DTYPE, generator=generator)
    for n in range(CASES):
        qi, ki = Interval(q.lo[n], q.hi[n]), Interval(k.lo[n], k.hi[n])
        x = float(qi.lo + (qi.hi - qi.lo) * a[n])
        y = float(ki.lo + (ki.hi - ki.lo) * b[n])
        planes = dot_plane_A(qi, ki), dot_plane_B(qi, ki)
        assert fused_dot_value(x, y, *planes, form="relu") == fused_dot_value(x, y, *planes, form="minmax"), n


def test_optimized_dominates_fixed_strategies():
    config = ModelConfig(**CONFIGS[1])
    for seed in range(25):
        model, task = task_for(config, seed, [seed % config.seq_len], 0.05)
        baseline = verify(model, task, Strategy.BASELINE)
        dual = verify(model, task, Strategy.DUAL)
        optimized = verify(model, task, Strategy.OPTIMIZED,
                           OptimizerConfig(max_steps=30, early_stop_on_verified=False))
        assert optimized.margin_lb >= baseline.margin_lb
        from_one = verify(model, task, Strategy.OPTIMIZED,
                          OptimizerConfig(max_steps=30, early_stop_on_verified=False, init="one"))
        assert from_one.margin_lb >= dual.margin_lb


def test_bounds_never_exceed_grid_search():
    """20 tasks with |positions| x hidden <= 6"""
    small = ModelConfig(**CONFIGS[0])
    wide = ModelConfig(num_layers=1, num_heads=2, seq_len=2, hidden_size=6, head_dim=3, ffn_hidden=6, num_classes=2)
    for seed in range(20):
        config, grid_size = (small, 10) if seed % 2 == 0 else (wide, 7)
        model, task = task_for(config, seed, [seed % 4 // 2], 0.05, Norm.LINF)
        assert len(task.spec.positions) * config.hidden_size <= 6
        grid = brute_force_margin(model, task, grid_size)
        margins = {}
        for strategy in Strategy:
            report = verify(model, task, strategy, OptimizerConfig(max_steps=50))
            assert report.margin_lb <= grid + 1e-9, f"{strategy.value} seed {seed}"
            margins[strategy] = report.margin_lb
        assert grid - margins[Strategy.OPTIMIZED] <= grid - margins[Strategy.BASELINE]


def test_search_domination():
    """Optimized search never certifies less than the baseline, up to the final bracket"""
    for seed in range(50):
        config = ModelConfig(**CONFIGS[seed % 2])
        model, task = task_for(config, seed, [seed % config.seq_len], 0.0)
        baseline = search_max_eps(model, task, Strategy.BASELINE, num_iters=20)
        optimized = search_max_eps(model, task, Strategy.OPTIMIZED, num_iters=20,
                                   opt_config=OptimizerConfig(max_steps=20))
        assert optimized.eps >= baseline.eps - baseline.bracket_width, f"seed {seed}"


def test_optimization_can_cross_zero():
    """Some task fails under the baseline and is certified by optimization within 1000 steps"""
    config = ModelConfig(**CONFIGS[0])
    crossed = None
    for seed in range(100):
        model, task = task_for(config, seed, [0], 0.0)
        # just above the largest baseline-certified epsilon
        baseline_eps = search_max_eps(model, task, Strategy.BASELINE, num_iters=10).upper
        task = task.with_epsilon(baseline_eps)
        if verify(model, task, Strategy.BASELINE).verified:
            continue
        result = optimize_alpha(model, task, OptimizerConfig(max_steps=1000, learning_rate=0.1))
        if result.best_margin > 0:
            crossed = seed
            assert result.trace[0] <= 0 < result.trace[-1]
            assert len(result.best) == sum(a * b * c for a, b, c in enumerate_sites(config).values())
            break
    assert crossed is not None, "no generated task where optimization crosses zero"


def test_gradients_on_many_tasks():
    config = ModelConfig(**CONFIGS[0])
    h = 1e-5
    for seed in range(20):
        model, task = task_for(config, seed, [seed % 2], 0.05)
        generator = torch.Generator().manual_seed(seed)
        alpha = AlphaAssignment({key: 0.2 + 0.6 * torch.rand(*shape, dtype=DTYPE, generator=generator)
                                 for key, shape in enumerate_sites(config).items()})
        margin, grads = margin_gradient(model, task, alpha)
        for site in list(alpha.sites())[::5]:
            layer, head, matmul, i, j, hh, side = site
            key = (layer, head, matmul, side)
            shifted = []
            for delta in (h, -h):
                moved = alpha.detach()
                moved.groups[key][i, j, hh] += delta
                shifted.append(margin_lower_bound(model, task, moved))
            plus, minus = shifted
            if abs((plus - margin) - (margin - minus)) > 1e-3 * h * max(1.0, abs(plus - minus) / (2 * h)):
                continue
            numeric = (plus - minus) / (2 * h)
            analytic = float(grads[key][i, j, hh])
            assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7, f"seed {seed} {site}"


def test_depth_trend():
    """Mean certified eps ratio optimized / baseline does not shrink from 1 to 3 layers"""
    ratios = {}
    for layers in (1, 3):
        config = ModelConfig(num_layers=layers, num_heads=1, seq_len=2, hidden_size=4, head_dim=4, ffn_hidden=8,
                             num_classes=2)
        values = []
        for seed in range(30):
            model, task = task_for(config, seed, [0], 0.0)
            baseline = search_max_eps(model, task, Strategy.BASELINE, num_iters=8)
            optimized = search_max_eps(model, task, Strategy.OPTIMIZED, num_iters=8,
                                       opt_config=OptimizerConfig(max_steps=30))
            assert optimized.eps >= baseline.eps - baseline.bracket_width
            if baseline.eps > 0:
                values.append(optimized.eps / baseline.eps)
        assert values, f"no {layers}-layer task with a positive baseline epsilon"
        ratios[layers] = sum(values) / len(values)
    print(f"mean certified eps ratio by depth: {ratios}")
    assert ratios[3] >= ratios[1]
