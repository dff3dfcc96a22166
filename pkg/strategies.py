"""
Alpha selection. Every attention matmul (QK and AV of every head and layer) has one alpha
per scalar product and bound side. Alphas are stored per group
(layer, head, matmul, side) as a tensor indexed by (i, j, h).

Policies hand alphas to the bound engine while it runs, since the rule strategy needs
intervals that only exist once the preceding layers have been bounded. Every policy
records what it handed out, so the final assignment can be inspected afterwards.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Tuple

import torch

from bounds import DTYPE, AffineBoundPair, Interval, PerturbationSpec, concretize
from errors import DomainError, GradientError, UnverifiableError
from relaxations import DotSite, MatMul, Side, relu_input_interval, relu_input_plane, substitute_plane

logger = logging.getLogger(__name__)

GroupKey = Tuple[int, int, MatMul, Side]
SiteKey = Tuple[int, int, MatMul, int, int, int, Side]


def enumerate_sites(config) -> Dict[GroupKey, Tuple[int, int, int]]:
    """Alpha tensor shape for every group of a model with the given `ModelConfig`."""
    n, d = config.seq_len, config.head_dim
    shapes = {}
    for layer in range(config.num_layers):
        for head in range(config.num_heads):
            for matmul, shape in ((MatMul.QK, (n, n, d)), (MatMul.AV, (n, d, n))):
                for side in (Side.U, Side.L):
                    shapes[(layer, head, matmul, side)] = shape
    return shapes


@dataclass(frozen=True)
class AlphaStats:
    count: int
    min: float
    mean: float
    max: float
    frac_zero: float
    frac_one: float

    def to_dict(self) -> dict:
        return {"count": self.count, "min": self.min, "mean": self.mean, "max": self.max,
                "frac_zero": self.frac_zero, "frac_one": self.frac_one}


class AlphaAssignment:
    def __init__(self, groups: Mapping[GroupKey, torch.Tensor]):
        self.groups: Dict[GroupKey, torch.Tensor] = {}
        for key, values in groups.items():
            values = torch.as_tensor(values, dtype=DTYPE)
            if values.numel() and (values.detach().min() < 0 or values.detach().max() > 1):
                raise DomainError(f"alpha outside [0, 1] in group {key}")
            self.groups[key] = values

    @classmethod
    def filled(cls, shapes: Mapping[GroupKey, tuple], value: float) -> "AlphaAssignment":
        return cls({key: torch.full(shape, float(value), dtype=DTYPE) for key, shape in shapes.items()})

    @classmethod
    def random(cls, shapes: Mapping[GroupKey, tuple], seed: int) -> "AlphaAssignment":
        generator = torch.Generator().manual_seed(seed)
        return cls({key: torch.rand(*shape, dtype=DTYPE, generator=generator) for key, shape in shapes.items()})

    def __getitem__(self, key):
        if len(key) == 4:
            return self.groups[key]
        layer, head, matmul, i, j, h, side = key
        return float(self.groups[(layer, head, matmul, side)][i, j, h])

    def __contains__(self, key) -> bool:
        return key in self.groups

    def __len__(self) -> int:
        return sum(values.numel() for values in self.groups.values())

    def keys(self):
        return self.groups.keys()

    def sites(self) -> Iterator[SiteKey]:
        for (layer, head, matmul, side), values in self.groups.items():
            for i, j, h in itertools.product(*(range(s) for s in values.shape)):
                yield (layer, head, matmul, i, j, h, side)

    def shapes(self) -> Dict[GroupKey, tuple]:
        return {key: tuple(values.shape) for key, values in self.groups.items()}

    def requires_grad_(self) -> List[torch.Tensor]:
        for key in self.groups:
            self.groups[key] = self.groups[key].detach().clone().requires_grad_(True)
        return self.leaves()

    def leaves(self) -> List[torch.Tensor]:
        return list(self.groups.values())

    @torch.no_grad()
    def project_(self):
        for values in self.groups.values():
            values.clamp_(0.0, 1.0)

    def detach(self) -> "AlphaAssignment":
        return AlphaAssignment({key: values.detach().clone() for key, values in self.groups.items()})

    def flat(self) -> torch.Tensor:
        if not self.groups:
            return torch.zeros(0, dtype=DTYPE)
        return torch.cat([values.detach().reshape(-1) for values in self.groups.values()])

    def stats(self) -> AlphaStats:
        values = self.flat()
        if values.numel() == 0:
            return AlphaStats(0, math.nan, math.nan, math.nan, math.nan, math.nan)
        return AlphaStats(
            count=values.numel(),
            min=float(values.min()),
            mean=float(values.mean()),
            max=float(values.max()),
            frac_zero=float((values == 0).to(DTYPE).mean()),
            frac_one=float((values == 1).to(DTYPE).mean()),
        )


def alpha_baseline(shapes: Mapping[GroupKey, tuple]) -> AlphaAssignment:
    return AlphaAssignment.filled(shapes, 0.0)


def alpha_dual(shapes: Mapping[GroupKey, tuple]) -> AlphaAssignment:
    return AlphaAssignment.filled(shapes, 1.0)


def rule_alpha(relu_input: Interval) -> torch.Tensor:
    """
    1 where the ReLU input is always >= 0 or |u| > |l|, 0 where it is always <= 0,
    |l| > |u| or |l| == |u|.
    """
    l, u = relu_input.lo.detach(), relu_input.hi.detach()
    pick_B = (l >= 0) | ((u > 0) & (u.abs() > l.abs()))
    return pick_B.to(DTYPE)


def alpha_rule(relu_inputs: Mapping[GroupKey, Interval]) -> AlphaAssignment:
    return AlphaAssignment({key: rule_alpha(interval) for key, interval in relu_inputs.items()})


@dataclass
class SiteContext:
    """Everything the engine knows about one group of products when it asks for alphas."""
    layer: int
    head: int
    matmul: MatMul
    X_bounds: AffineBoundPair
    Y_bounds: AffineBoundPair
    X_int: Interval
    Y_int: Interval
    spec: PerturbationSpec

    def group_key(self, side: Side) -> GroupKey:
        return (self.layer, self.head, self.matmul, side)

    def site(self) -> DotSite:
        return DotSite(self.layer, self.head, self.matmul, self.X_int, self.Y_int)


class AlphaPolicy:
    name = "policy"

    def __init__(self):
        self.chosen: Dict[GroupKey, torch.Tensor] = {}

    def select(self, context: SiteContext, side: Side) -> torch.Tensor:
        alpha = self.choose(context, side)
        self.chosen[context.group_key(side)] = alpha
        return alpha

    def choose(self, context: SiteContext, side: Side) -> torch.Tensor:
        raise NotImplementedError

    def assignment(self) -> AlphaAssignment:
        return AlphaAssignment({key: values.detach() for key, values in self.chosen.items()})


class ConstantPolicy(AlphaPolicy):
    def __init__(self, value: float):
        super().__init__()
        self.value = float(value)
        self.name = "baseline" if self.value == 0 else "dual" if self.value == 1 else f"constant({value})"

    def choose(self, context: SiteContext, side: Side) -> torch.Tensor:
        return torch.full(context.X_int.shape, self.value, dtype=DTYPE)


class AssignedPolicy(AlphaPolicy):
    """Hands out the tensors of a fixed assignment unchanged, so gradients reach them."""
    name = "assigned"

    def __init__(self, alpha: AlphaAssignment):
        super().__init__()
        self.alpha = alpha

    def choose(self, context: SiteContext, side: Side) -> torch.Tensor:
        key = context.group_key(side)
        if key not in self.alpha:
            raise DomainError(f"no alphas for group {key}")
        values = self.alpha[key]
        if tuple(values.shape) != tuple(context.X_int.shape):
            raise DomainError(f"alpha group {key} has shape {tuple(values.shape)}, "
                              f"expected {tuple(context.X_int.shape)}")
        return values


class RulePolicy(AlphaPolicy):
    """
    Picks the plane family by the sign balance of the ReLU input. The box range of that
    input is symmetric, so with `refine` it is intersected with the range obtained by
    substituting the affine bounds of both factors and concretizing over the ball.
    """
    name = "rule"

    def __init__(self, refine: bool = True):
        super().__init__()
        self.refine = refine
        self.relu_inputs: Dict[GroupKey, Interval] = {}

    def relu_input(self, context: SiteContext, side: Side) -> Interval:
        site = context.site()
        box = relu_input_interval(site, side)
        if not self.refine:
            return box.detach()
        plane = relu_input_plane(site.q_bounds, site.k_bounds, side)
        omega_U, theta_U = substitute_plane(plane, context.X_bounds, context.Y_bounds, upper=True)
        omega_L, theta_L = substitute_plane(plane, context.X_bounds, context.Y_bounds, upper=False)
        affine = concretize(AffineBoundPair(omega_L, omega_U, theta_L, theta_U), context.spec)
        return box.intersect(affine).detach()

    def choose(self, context: SiteContext, side: Side) -> torch.Tensor:
        interval = self.relu_input(context, side)
        self.relu_inputs[context.group_key(side)] = interval
        return rule_alpha(interval)

    def assignment(self) -> AlphaAssignment:
        return alpha_rule(self.relu_inputs)


def logistic_loss(margin):
    """log(1 + exp(-margin)) without overflow at either tail."""
    if isinstance(margin, torch.Tensor):
        return torch.clamp(-margin, min=0) + torch.log1p(torch.exp(-margin.abs()))
    return max(-margin, 0.0) + math.log1p(math.exp(-abs(margin)))


class InitMode(Enum):
    BASELINE_ZERO = "zero"
    RANDOM = "random"
    DUAL_ONE = "one"


@dataclass(frozen=True)
class OptimizerConfig:
    # 0 steps evaluates the initial point only
    max_steps: int = 1000
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    init: InitMode = InitMode.BASELINE_ZERO
    early_stop_on_verified: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.init, str):
            object.__setattr__(self, "init", InitMode(self.init))
        if self.max_steps < 0:
            raise DomainError(f"max_steps must be >= 0, got {self.max_steps}")
        if not self.learning_rate > 0:
            raise DomainError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps_adam > 0:
            raise DomainError(f"eps_adam must be > 0, got {self.eps_adam}")

    def initial_alpha(self, shapes: Mapping[GroupKey, tuple]) -> AlphaAssignment:
        if self.init == InitMode.RANDOM:
            return AlphaAssignment.random(shapes, self.seed)
        if self.init == InitMode.BASELINE_ZERO:
            return alpha_baseline(shapes)
        return alpha_dual(shapes)


@dataclass
class OptimizationResult:
    best: AlphaAssignment
    best_margin: float
    trace: List[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return max(len(self.trace) - 1, 0)


MarginFn = Callable[[AlphaAssignment], torch.Tensor]


def _first_bad_site(alpha: AlphaAssignment) -> Optional[SiteKey]:
    for (layer, head, matmul, side), values in alpha.groups.items():
        if values.grad is None:
            continue
        bad = (~torch.isfinite(values.grad)).nonzero()
        if len(bad):
            i, j, h = bad[0].tolist()
            return (layer, head, matmul, i, j, h, side)
    return None


def optimize_alpha(model, task, config: OptimizerConfig, margin_fn: Optional[MarginFn] = None,
                   shapes: Optional[Mapping[GroupKey, tuple]] = None) -> OptimizationResult:
    """
    Adam on the logistic loss of the margin lower bound, projecting alphas onto [0, 1]
    after every step. The best iterate seen, the initial point included, is returned.
    """
    if margin_fn is None:
        def margin_fn(alpha):
            from propagator import margin_bounds
            return margin_bounds(model, task, AssignedPolicy(alpha)).min()
    if shapes is None:
        shapes = enumerate_sites(model.config)

    alpha = config.initial_alpha(shapes)
    optimizer = torch.optim.Adam(alpha.requires_grad_(), lr=config.learning_rate,
                                 betas=(config.beta1, config.beta2), eps=config.eps_adam)
    best, best_margin = alpha.detach(), -math.inf
    trace: List[float] = []
    for step in range(config.max_steps + 1):
        optimizer.zero_grad()
        try:
            margin = margin_fn(alpha)
        except UnverifiableError as exc:
            logger.info("step %d: %s", step, exc)
            trace.append(-math.inf)
            break
        value = float(margin.detach())
        trace.append(value)
        if value > best_margin:
            best, best_margin = alpha.detach(), value
        logger.debug("step %d margin %.6g best %.6g", step, value, best_margin)
        if config.early_stop_on_verified and value > 0:
            break
        if step == config.max_steps or not margin.requires_grad:
            break
        logistic_loss(margin).backward()
        bad = _first_bad_site(alpha)
        if bad is not None:
            raise GradientError(bad)
        optimizer.step()
        alpha.project_()
    return OptimizationResult(best, best_margin, trace)


def margin_gradient(model, task, alpha: AlphaAssignment) -> Tuple[float, Dict[GroupKey, torch.Tensor]]:
    """Margin lower bound and its gradient with respect to every alpha, per group."""
    from propagator import margin_bounds
    alpha = alpha.detach()
    leaves = alpha.requires_grad_()
    margin = margin_bounds(model, task, AssignedPolicy(alpha)).min()
    if margin.requires_grad:
        grads = torch.autograd.grad(margin, leaves, allow_unused=True)
    else:
        grads = [None] * len(leaves)
    result = {}
    for key, values, grad in zip(alpha.keys(), leaves, grads):
        grad = torch.zeros_like(values) if grad is None else grad
        if not torch.isfinite(grad).all():
            i, j, h = (~torch.isfinite(grad)).nonzero()[0].tolist()
            layer, head, matmul, side = key
            raise GradientError((layer, head, matmul, i, j, h, side))
        result[key] = grad.detach()
    return float(margin.detach()), result
