"""
End-to-end verification: per-task verdicts under a chosen alpha strategy, the maximal
certified epsilon search, and the two empirical oracles (ball sampling and grid search)
that tests and the `check` command use to cross-examine the bounds.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import torch

from bounds import DTYPE, Norm, PerturbationSpec
from errors import (BudgetError, DomainError, LabelMismatchError, SearchCapReached, SearchError, ShapeError,
                    UnverifiableError)
from model import Model, forward, predict
from propagator import margin_bounds, propagate_task
from relaxations import PlaneHook
from strategies import (AlphaAssignment, AlphaPolicy, AlphaStats, AssignedPolicy, ConstantPolicy, OptimizerConfig,
                        RulePolicy, optimize_alpha)

logger = logging.getLogger(__name__)

GRID_CAP = 10 ** 7
SAMPLE_TOLERANCE = 1e-9


class Strategy(Enum):
    BASELINE = "baseline"
    DUAL = "dual"
    RULE = "rule"
    OPTIMIZED = "opt"

    @classmethod
    def _missing_(cls, value):
        if value == "optimized":
            return cls.OPTIMIZED
        return None


class Verdict(Enum):
    VERIFIED = "Verified"
    UNKNOWN = "Unknown"
    UNVERIFIABLE = "Unverifiable"


@dataclass(frozen=True)
class VerificationTask:
    spec: PerturbationSpec
    label: int

    @classmethod
    def create(cls, model: Model, X0, positions: Sequence[int], epsilon: float,
               p_norm: Norm = Norm.L1, label: Optional[int] = None) -> "VerificationTask":
        """Builds a task around X0; the label must be the class the model predicts for X0."""
        spec = PerturbationSpec(torch.as_tensor(X0, dtype=DTYPE), tuple(positions), epsilon, p_norm)
        expected = (model.config.seq_len, model.config.hidden_size)
        if tuple(spec.X0.shape) != expected:
            raise ShapeError("X", expected, spec.X0.shape)
        predicted = predict(model, spec.X0)
        if label is None:
            label = predicted
        if not 0 <= label < model.config.num_classes:
            raise DomainError(f"label {label} outside 0..{model.config.num_classes - 1}")
        if label != predicted:
            raise LabelMismatchError(label, predicted)
        return cls(spec, label)

    def with_epsilon(self, epsilon: float) -> "VerificationTask":
        return VerificationTask(self.spec.with_epsilon(epsilon), self.label)


@dataclass
class Report:
    verdict: Verdict
    margin_lb: float
    strategy: Strategy
    alpha_stats: AlphaStats
    wall_time: float
    epsilon: float
    trace: Optional[List[float]] = None
    alpha: Optional[AlphaAssignment] = field(default=None, repr=False)

    @property
    def verified(self) -> bool:
        return self.verdict == Verdict.VERIFIED


def policy_for(strategy: Strategy) -> AlphaPolicy:
    if strategy == Strategy.BASELINE:
        return ConstantPolicy(0.0)
    if strategy == Strategy.DUAL:
        return ConstantPolicy(1.0)
    if strategy == Strategy.RULE:
        return RulePolicy()
    raise DomainError(f"strategy {strategy.value} has no fixed policy")


def margin_lower_bound(model: Model, task: VerificationTask, alpha: AlphaAssignment,
                       plane_hook: Optional[PlaneHook] = None) -> float:
    with torch.no_grad():
        return float(margin_bounds(model, task, AssignedPolicy(alpha), plane_hook).min())


def _verdict(margin: float) -> Verdict:
    return Verdict.VERIFIED if margin > 0 else Verdict.UNKNOWN


def verify(model: Model, task: VerificationTask, strategy: Strategy,
           opt_config: Optional[OptimizerConfig] = None, plane_hook: Optional[PlaneHook] = None) -> Report:
    strategy = Strategy(strategy)
    started = time.perf_counter()
    trace = None
    if strategy == Strategy.OPTIMIZED:
        config = opt_config or OptimizerConfig()

        def margin_fn(alpha):
            return margin_bounds(model, task, AssignedPolicy(alpha), plane_hook).min()

        result = optimize_alpha(model, task, config, margin_fn)
        alpha, margin, trace = result.best, result.best_margin, result.trace
        verdict = Verdict.UNVERIFIABLE if margin == -math.inf else _verdict(margin)
    else:
        policy = policy_for(strategy)
        try:
            with torch.no_grad():
                margin = float(margin_bounds(model, task, policy, plane_hook).min())
            verdict = _verdict(margin)
        except UnverifiableError as exc:
            logger.info("%s: %s", strategy.value, exc)
            margin, verdict = -math.inf, Verdict.UNVERIFIABLE
        alpha = policy.assignment()
    wall_time = time.perf_counter() - started
    logger.info("%s eps=%.6g: %s (margin %.6g, %.3fs)", strategy.value, task.spec.epsilon,
                verdict.value, margin, wall_time)
    return Report(verdict, margin, strategy, alpha.stats(), wall_time, task.spec.epsilon, trace, alpha)


# epsilon search

@dataclass(frozen=True)
class Probe:
    eps: float
    verified: bool
    wall_time: float


@dataclass
class SearchResult:
    eps: float
    upper: float
    probes: List[Probe]
    growth_probes: int

    @property
    def bracket_width(self) -> float:
        return self.upper - self.eps

    @property
    def wall_time(self) -> float:
        return sum(probe.wall_time for probe in self.probes)


def binary_search_eps(oracle: Callable[[float], bool], num_iters: int, initial: float = 0.01,
                      max_doublings: int = 40) -> SearchResult:
    """
    Doubles the upper end of the bracket from `initial` while the oracle verifies, then
    bisects `num_iters` times. If `initial` already fails, epsilon = 0 must verify.
    """
    if num_iters < 1:
        raise DomainError(f"num_iters must be >= 1, got {num_iters}")
    probes: List[Probe] = []

    def probe(eps: float) -> bool:
        started = time.perf_counter()
        verified = bool(oracle(eps))
        probes.append(Probe(eps, verified, time.perf_counter() - started))
        return verified

    min_eps, max_eps = 0.0, initial
    doublings = 0
    while probe(max_eps):
        min_eps = max_eps
        if doublings == max_doublings:
            raise SearchCapReached(max_doublings, max_eps)
        max_eps *= 2
        doublings += 1
    if min_eps == 0.0 and not probe(0.0):
        raise SearchError("verification fails at eps = 0; the label does not match the clean prediction")
    growth = len(probes)
    for _ in range(num_iters):
        mid = (min_eps + max_eps) / 2
        if probe(mid):
            min_eps = mid
        else:
            max_eps = mid
    logger.info("search: eps in [%.6g, %.6g] after %d probes", min_eps, max_eps, len(probes))
    return SearchResult(min_eps, max_eps, probes, growth)


def search_max_eps(model: Model, task: VerificationTask, strategy: Strategy, num_iters: int = 20,
                   opt_config: Optional[OptimizerConfig] = None, initial: float = 0.01,
                   max_doublings: int = 40) -> SearchResult:
    """Largest certified epsilon; alphas are re-selected at every probed epsilon."""
    def oracle(eps: float) -> bool:
        return verify(model, task.with_epsilon(eps), strategy, opt_config).verified

    return binary_search_eps(oracle, num_iters, initial, max_doublings)


# oracles

def sample_ball(spec: PerturbationSpec, n_samples: int, generator: torch.Generator) -> torch.Tensor:
    """
    (n_samples, K) perturbed entries drawn uniformly from the ball of every perturbed row.
    L1 directions come from signed exponentials normalized to unit L1 norm, L2 directions
    from normalized Gaussians; both are scaled by eps * U^(1/m).
    """
    rows, m = len(spec.positions), spec.X0.shape[1]
    shape = (n_samples, rows, m)
    eps = spec.epsilon
    if spec.p_norm == Norm.LINF:
        offsets = (torch.rand(*shape, dtype=DTYPE, generator=generator) * 2 - 1) * eps
    else:
        if spec.p_norm == Norm.L1:
            magnitude = torch.empty(*shape, dtype=DTYPE).exponential_(generator=generator)
            signs = torch.randint(0, 2, shape, generator=generator).to(DTYPE) * 2 - 1
            direction = magnitude * signs
            direction = direction / direction.abs().sum(dim=-1, keepdim=True)
        else:
            direction = torch.randn(*shape, dtype=DTYPE, generator=generator)
            direction = direction / torch.linalg.vector_norm(direction, dim=-1, keepdim=True)
        radius = torch.rand(n_samples, rows, 1, dtype=DTYPE, generator=generator) ** (1.0 / m)
        offsets = direction * radius * eps
    return spec.center + offsets.reshape(n_samples, rows * m)


def _margins(logits: torch.Tensor, label: int) -> torch.Tensor:
    others = [i for i in range(logits.shape[-1]) if i != label]
    return logits[..., label:label + 1] - logits[..., others]


@dataclass
class SoundnessReport:
    samples: int
    logit_violations: int
    margin_violations: int
    affine_violations: int
    worst_gap: float
    first_violation: Optional[dict] = None

    @property
    def violations(self) -> int:
        return self.logit_violations + self.margin_violations + self.affine_violations


def soundness_sample_check(model: Model, task: VerificationTask, alpha: AlphaAssignment, n_samples: int,
                           seed: int, plane_hook: Optional[PlaneHook] = None, tol: float = SAMPLE_TOLERANCE,
                           batch_size: int = 2048) -> SoundnessReport:
    """
    Samples the ball and checks every exact logit and margin against the concretized
    intervals, and every logit against its affine bounds evaluated at the sample.
    """
    if n_samples < 1:
        raise DomainError(f"n_samples must be >= 1, got {n_samples}")
    generator = torch.Generator().manual_seed(seed)
    spec = task.spec
    with torch.no_grad():
        bounds = propagate_task(model, task, AssignedPolicy(alpha), plane_hook)
        report = SoundnessReport(n_samples, 0, 0, 0, 0.0)
        done = 0
        while done < n_samples:
            count = min(batch_size, n_samples - done)
            x = sample_ball(spec, count, generator)
            logits = forward(model, spec.embed(x))
            margins = _margins(logits, task.label)
            affine_lo, affine_hi = bounds.logits.evaluate(x)

            logit_gap = torch.maximum(bounds.logit_interval.lo - logits, logits - bounds.logit_interval.hi)
            margin_gap = torch.maximum(bounds.margin_interval.lo - margins, margins - bounds.margin_interval.hi)
            affine_gap = torch.maximum(affine_lo - logits, logits - affine_hi)
            gaps = [logit_gap.max(dim=-1).values, margin_gap.max(dim=-1).values, affine_gap.max(dim=-1).values]

            report.logit_violations += int((gaps[0] > tol).sum())
            report.margin_violations += int((gaps[1] > tol).sum())
            report.affine_violations += int((gaps[2] > tol).sum())
            worst = torch.stack(gaps).max(dim=0).values
            report.worst_gap = max(report.worst_gap, float(worst.max()))
            if report.first_violation is None and (worst > tol).any():
                index = int((worst > tol).nonzero()[0])
                report.first_violation = {
                    "sample": done + index,
                    "x": x[index].tolist(),
                    "logits": logits[index].tolist(),
                    "logit_lo": bounds.logit_interval.lo.tolist(),
                    "logit_hi": bounds.logit_interval.hi.tolist(),
                    "gap": float(worst[index]),
                }
            done += count
    logger.info("soundness check: %d samples, %d violations, worst gap %.3g",
                n_samples, report.violations, report.worst_gap)
    return report


def brute_force_margin(model: Model, task: VerificationTask, grid_per_dim: int, cap: int = GRID_CAP,
                       chunk: int = 65536) -> float:
    """
    Minimum exact margin over a regular grid on the ball's bounding box, keeping only points
    inside the ball (and always the clean input). An upper bound on the true minimum margin.
    """
    if grid_per_dim < 1:
        raise DomainError(f"grid_per_dim must be >= 1, got {grid_per_dim}")
    spec = task.spec
    K = spec.num_inputs
    points = grid_per_dim ** K
    if points > cap:
        raise BudgetError(points, cap)
    rows, m = len(spec.positions), spec.X0.shape[1]
    center = spec.center
    with torch.no_grad():
        best = float(_margins(forward(model, spec.X0), task.label).min())
        if grid_per_dim == 1 or spec.epsilon == 0:
            return best
        axis = torch.linspace(-spec.epsilon, spec.epsilon, grid_per_dim, dtype=DTYPE)
        powers = grid_per_dim ** torch.arange(K, dtype=torch.int64)
        limit = spec.epsilon * (1 + 1e-12)
        for start in range(0, points, chunk):
            index = torch.arange(start, min(start + chunk, points), dtype=torch.int64)
            digits = (index[:, None] // powers) % grid_per_dim
            offsets = axis[digits]
            norms = torch.linalg.vector_norm(offsets.reshape(-1, rows, m), ord=spec.p_norm.order, dim=-1)
            keep = (norms <= limit).all(dim=-1)
            if not keep.any():
                continue
            logits = forward(model, spec.embed(center + offsets[keep]))
            best = min(best, float(_margins(logits, task.label).min()))
    return best
