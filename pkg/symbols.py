# Network ops. A model is lowered to a flat `Network` of these symbols; the exact
# interpreter and the bound propagator both walk the same sequence.

from dataclasses import dataclass, field
from enum import Enum
from typing import List

import torch

from visitor import Visitor


class PoolingMode(Enum):
    MEAN = "mean"
    FIRST_TOKEN = "first_token"


class Symbol:
    def accept(self, visitor: Visitor):
        return visitor.visit(self)


@dataclass
class AttentionBlock(Symbol):
    """Multi-head self-attention followed by residual add and mean-subtraction norm."""
    layer: int
    num_heads: int
    head_dim: int
    W_Q: torch.Tensor
    b_Q: torch.Tensor
    W_K: torch.Tensor
    b_K: torch.Tensor
    W_V: torch.Tensor
    b_V: torch.Tensor
    W_O: torch.Tensor
    b_O: torch.Tensor
    norm_gamma: torch.Tensor
    norm_beta: torch.Tensor

    def head_columns(self, head: int) -> slice:
        return slice(head * self.head_dim, (head + 1) * self.head_dim)


@dataclass
class FeedForwardBlock(Symbol):
    """Two-layer ReLU FFN followed by residual add and mean-subtraction norm."""
    layer: int
    W_1: torch.Tensor
    b_1: torch.Tensor
    W_2: torch.Tensor
    b_2: torch.Tensor
    norm_gamma: torch.Tensor
    norm_beta: torch.Tensor


@dataclass
class Pooling(Symbol):
    mode: PoolingMode


@dataclass
class Dense(Symbol):
    # x @ W + b
    name: str
    W: torch.Tensor
    b: torch.Tensor


@dataclass
class Network(Symbol):
    ops: List[Symbol] = field(default_factory=list)


def mean_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return (x - x.mean(dim=-1, keepdim=True)) * gamma + beta


def mean_norm_matrix(gamma: torch.Tensor) -> torch.Tensor:
    """(out, in) matrix M with M @ v == (v - mean(v)) * gamma for a row v."""
    m = gamma.shape[0]
    centering = torch.eye(m, dtype=gamma.dtype) - torch.full((m, m), 1.0 / m, dtype=gamma.dtype)
    return gamma[:, None] * centering
