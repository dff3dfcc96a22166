"""
Affine bounds over the perturbed input entries.

Every tensor value v reachable from the perturbation ball is sandwiched as

    omega_L . x + theta_L  <=  v  <=  omega_U . x + theta_U

where x is the flattened vector of perturbed rows (K = |D| * m entries). Coefficient
tensors have shape value_shape + (K,), offsets have shape value_shape. Bounds are
accumulated forward through the network, so every intermediate tensor has its own
pair and can be concretized whenever a relaxation needs an interval.
"""
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence, Tuple

import torch

from errors import DomainError, ShapeError

DTYPE = torch.float64


class Norm(Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"

    @property
    def dual_order(self) -> float:
        # 1/p + 1/q = 1
        return {Norm.L1: math.inf, Norm.L2: 2.0, Norm.LINF: 1.0}[self]

    @property
    def order(self) -> float:
        return {Norm.L1: 1.0, Norm.L2: 2.0, Norm.LINF: math.inf}[self]


@dataclass(frozen=True)
class PerturbationSpec:
    """Each row of X0 listed in `positions` moves independently inside an epsilon ball."""
    X0: torch.Tensor
    positions: Tuple[int, ...]
    epsilon: float
    p_norm: Norm = Norm.L1

    def __post_init__(self):
        X0 = torch.as_tensor(self.X0, dtype=DTYPE)
        if X0.dim() != 2:
            raise ShapeError("X0", ("n", "m"), X0.shape)
        object.__setattr__(self, "X0", X0)
        if isinstance(self.p_norm, str):
            object.__setattr__(self, "p_norm", Norm(self.p_norm))
        positions = tuple(sorted(set(int(p) for p in self.positions)))
        if not positions:
            raise DomainError("at least one perturbed position is required")
        n = X0.shape[0]
        for p in positions:
            if not 0 <= p < n:
                raise DomainError(f"position {p} outside 0..{n - 1}")
        object.__setattr__(self, "positions", positions)
        if not self.epsilon >= 0:
            raise DomainError(f"epsilon must be >= 0, got {self.epsilon}")
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def num_inputs(self) -> int:
        return len(self.positions) * self.X0.shape[1]

    @property
    def center(self) -> torch.Tensor:
        """Clean values of the perturbed entries, flattened row by row."""
        return self.X0[list(self.positions)].reshape(-1)

    def with_epsilon(self, epsilon: float) -> "PerturbationSpec":
        return replace(self, epsilon=epsilon)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Maps flattened perturbed entries (..., K) back to full inputs (..., n, m)."""
        m = self.X0.shape[1]
        full = self.X0.expand(*x.shape[:-1], *self.X0.shape).clone()
        full[..., list(self.positions), :] = x.reshape(*x.shape[:-1], len(self.positions), m)
        return full


@dataclass(frozen=True)
class Interval:
    lo: torch.Tensor
    hi: torch.Tensor

    def __post_init__(self):
        lo = torch.as_tensor(self.lo, dtype=DTYPE)
        hi = torch.as_tensor(self.hi, dtype=DTYPE)
        if lo.shape != hi.shape:
            raise ShapeError("Interval.hi", lo.shape, hi.shape)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self) -> torch.Size:
        return self.lo.shape

    @property
    def width(self) -> torch.Tensor:
        return self.hi - self.lo

    def is_valid(self) -> bool:
        return bool((self.lo <= self.hi).all())

    def intersect(self, other: "Interval") -> "Interval":
        lo = torch.maximum(self.lo, other.lo)
        hi = torch.minimum(self.hi, other.hi)
        return Interval(lo, torch.maximum(hi, lo))

    def detach(self) -> "Interval":
        return Interval(self.lo.detach(), self.hi.detach())

    def broadcast_to(self, shape: Sequence[int]) -> "Interval":
        return Interval(self.lo.expand(*shape), self.hi.expand(*shape))


@dataclass(frozen=True)
class AffineBoundPair:
    omega_L: torch.Tensor
    omega_U: torch.Tensor
    theta_L: torch.Tensor
    theta_U: torch.Tensor

    def __post_init__(self):
        if self.omega_L.shape != self.omega_U.shape:
            raise ShapeError("omega_U", self.omega_L.shape, self.omega_U.shape)
        if self.theta_L.shape != self.theta_U.shape:
            raise ShapeError("theta_U", self.theta_L.shape, self.theta_U.shape)
        if self.omega_L.shape[:-1] != self.theta_L.shape:
            raise ShapeError("theta_L", self.omega_L.shape[:-1], self.theta_L.shape)

    @property
    def shape(self) -> torch.Size:
        return self.theta_L.shape

    @property
    def num_inputs(self) -> int:
        return self.omega_L.shape[-1]

    @staticmethod
    def constant(value: torch.Tensor, num_inputs: int) -> "AffineBoundPair":
        value = torch.as_tensor(value, dtype=DTYPE)
        omega = torch.zeros(*value.shape, num_inputs, dtype=DTYPE)
        return AffineBoundPair(omega, omega, value, value)

    def evaluate(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Lower and upper affine values at flattened perturbed inputs x of shape (..., K)."""
        batch = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        lower = torch.einsum("...k,bk->b...", self.omega_L, flat) + self.theta_L
        upper = torch.einsum("...k,bk->b...", self.omega_U, flat) + self.theta_U
        return lower.reshape(*batch, *self.shape), upper.reshape(*batch, *self.shape)

    def map(self, fn) -> "AffineBoundPair":
        """Applies the same exact structural op (reshape, transpose, indexing) to both sides."""
        return AffineBoundPair(fn(self.omega_L, True), fn(self.omega_U, True),
                               fn(self.theta_L, False), fn(self.theta_U, False))


def input_bounds(spec: PerturbationSpec) -> AffineBoundPair:
    n, m = spec.X0.shape
    K = spec.num_inputs
    omega = torch.zeros(n, m, K, dtype=DTYPE)
    theta = spec.X0.clone()
    eye = torch.eye(m, dtype=DTYPE)
    for slot, row in enumerate(spec.positions):
        omega[row, :, slot * m:(slot + 1) * m] = eye
        theta[row] = 0.0
    return AffineBoundPair(omega, omega, theta, theta)


def concretize(b: AffineBoundPair, spec: PerturbationSpec) -> Interval:
    """
    Worst case of each affine side over the ball: the dual norm of the coefficient block of
    every perturbed row is scaled by epsilon, and the row contributions are summed.
    """
    K = spec.num_inputs
    if b.num_inputs != K:
        raise ShapeError("omega", b.shape + (K,), b.omega_L.shape)
    rows, m = len(spec.positions), spec.X0.shape[1]
    q = spec.p_norm.dual_order
    x0 = spec.center

    def radius(omega: torch.Tensor) -> torch.Tensor:
        blocks = omega.reshape(*omega.shape[:-1], rows, m)
        return torch.linalg.vector_norm(blocks, ord=q, dim=-1).sum(dim=-1)

    lo = b.omega_L @ x0 + b.theta_L - spec.epsilon * radius(b.omega_L)
    hi = b.omega_U @ x0 + b.theta_U + spec.epsilon * radius(b.omega_U)
    return Interval(lo, torch.maximum(hi, lo))


def _along(M: torch.Tensor, t: torch.Tensor, axis: int) -> torch.Tensor:
    return torch.movedim(torch.tensordot(M, t, dims=([1], [axis])), 0, axis)


def propagate_affine(b: AffineBoundPair, W: torch.Tensor, bias: torch.Tensor, axis: int = -1) -> AffineBoundPair:
    """
    y = W x + bias applied along one value axis (the last by default). Positive weights keep
    the side, negative weights take the opposite side.
    """
    ndim = len(b.shape)
    if ndim == 0:
        raise ShapeError("bounds", ("...",), ())
    axis = axis % ndim
    W = torch.as_tensor(W, dtype=DTYPE)
    bias = torch.as_tensor(bias, dtype=DTYPE)
    if W.dim() != 2 or W.shape[1] != b.shape[axis]:
        raise ShapeError("W", (W.shape[0] if W.dim() else 0, b.shape[axis]), W.shape)
    if bias.shape != (W.shape[0],):
        raise ShapeError("bias", (W.shape[0],), bias.shape)
    W_pos = W.clamp(min=0)
    W_neg = W.clamp(max=0)
    offset = bias.reshape((-1,) + (1,) * (ndim - axis - 1))
    omega_U = _along(W_pos, b.omega_U, axis) + _along(W_neg, b.omega_L, axis)
    omega_L = _along(W_pos, b.omega_L, axis) + _along(W_neg, b.omega_U, axis)
    theta_U = _along(W_pos, b.theta_U, axis) + _along(W_neg, b.theta_L, axis) + offset
    theta_L = _along(W_pos, b.theta_L, axis) + _along(W_neg, b.theta_U, axis) + offset
    return AffineBoundPair(omega_L, omega_U, theta_L, theta_U)


def propagate_unary(b: AffineBoundPair, relax) -> AffineBoundPair:
    """Elementwise scale-and-shift by a `LinearRelaxation` whose tensors have the value shape."""
    slope_U = torch.as_tensor(relax.slope_U, dtype=DTYPE).expand(b.shape)
    slope_L = torch.as_tensor(relax.slope_L, dtype=DTYPE).expand(b.shape)
    intercept_U = torch.as_tensor(relax.intercept_U, dtype=DTYPE).expand(b.shape)
    intercept_L = torch.as_tensor(relax.intercept_L, dtype=DTYPE).expand(b.shape)
    up_pos, up_neg = slope_U.clamp(min=0), slope_U.clamp(max=0)
    lo_pos, lo_neg = slope_L.clamp(min=0), slope_L.clamp(max=0)
    omega_U = up_pos[..., None] * b.omega_U + up_neg[..., None] * b.omega_L
    omega_L = lo_pos[..., None] * b.omega_L + lo_neg[..., None] * b.omega_U
    theta_U = up_pos * b.theta_U + up_neg * b.theta_L + intercept_U
    theta_L = lo_pos * b.theta_L + lo_neg * b.theta_U + intercept_L
    return AffineBoundPair(omega_L, omega_U, theta_L, theta_U)


def add_bounds(a: AffineBoundPair, b: AffineBoundPair) -> AffineBoundPair:
    if a.omega_L.shape != b.omega_L.shape:
        raise ShapeError("addend", a.omega_L.shape, b.omega_L.shape)
    return AffineBoundPair(a.omega_L + b.omega_L, a.omega_U + b.omega_U,
                           a.theta_L + b.theta_L, a.theta_U + b.theta_U)


def scale_bounds(b: AffineBoundPair, factor: float) -> AffineBoundPair:
    if factor >= 0:
        return AffineBoundPair(b.omega_L * factor, b.omega_U * factor, b.theta_L * factor, b.theta_U * factor)
    return AffineBoundPair(b.omega_U * factor, b.omega_L * factor, b.theta_U * factor, b.theta_L * factor)


def sum_bounds(b: AffineBoundPair, axis: int, keepdim: bool = False) -> AffineBoundPair:
    axis = axis % len(b.shape)
    return AffineBoundPair(b.omega_L.sum(dim=axis, keepdim=keepdim), b.omega_U.sum(dim=axis, keepdim=keepdim),
                           b.theta_L.sum(dim=axis, keepdim=keepdim), b.theta_U.sum(dim=axis, keepdim=keepdim))


def transpose_bounds(b: AffineBoundPair, dim0: int = 0, dim1: int = 1) -> AffineBoundPair:
    return b.map(lambda t, _: t.transpose(dim0, dim1))


def expand_bounds(b: AffineBoundPair, shape: Sequence[int]) -> AffineBoundPair:
    shape = tuple(shape)
    return b.map(lambda t, has_inputs: t.expand(*shape, t.shape[-1]) if has_inputs else t.expand(*shape))


def concat_bounds(parts: Sequence[AffineBoundPair], axis: int) -> AffineBoundPair:
    axis = axis % len(parts[0].shape)
    return AffineBoundPair(torch.cat([p.omega_L for p in parts], dim=axis),
                           torch.cat([p.omega_U for p in parts], dim=axis),
                           torch.cat([p.theta_L for p in parts], dim=axis),
                           torch.cat([p.theta_U for p in parts], dim=axis))
