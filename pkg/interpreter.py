# Interpreter evaluates the network exactly; it is the concrete oracle for the bound engine.

import math
from typing import List, Optional, Tuple

import torch

from symbols import (AttentionBlock, Dense, FeedForwardBlock, Network, Pooling, PoolingMode,
                     mean_norm)
from visitor import Visitor


class Interpreter(Visitor):
    """
    Runs a `Network` on concrete inputs of shape (..., n, m); leading dimensions are
    treated as a batch. With `record_attention` the softmax outputs of every head are
    kept in `attention` as (layer, head, probabilities).
    """

    def __init__(self, record_attention: bool = False):
        self.value: Optional[torch.Tensor] = None
        self.record_attention = record_attention
        self.attention: List[Tuple[int, int, torch.Tensor]] = []

    def evaluate(self, network: Network, X: torch.Tensor) -> torch.Tensor:
        self.value = X
        self.attention = []
        network.accept(self)
        return self.value

    def visit_attention_block(self, op: AttentionBlock):
        X = self.value
        outputs = []
        for head in range(op.num_heads):
            cols = op.head_columns(head)
            Q = X @ op.W_Q[:, cols] + op.b_Q[cols]
            K = X @ op.W_K[:, cols] + op.b_K[cols]
            V = X @ op.W_V[:, cols] + op.b_V[cols]
            scores = Q @ K.transpose(-1, -2) / math.sqrt(op.head_dim)
            probs = torch.softmax(scores, dim=-1)
            if self.record_attention:
                self.attention.append((op.layer, head, probs))
            outputs.append(probs @ V)
        attended = torch.cat(outputs, dim=-1) @ op.W_O + op.b_O
        self.value = mean_norm(X + attended, op.norm_gamma, op.norm_beta)

    def visit_feed_forward_block(self, op: FeedForwardBlock):
        X = self.value
        hidden = torch.relu(X @ op.W_1 + op.b_1)
        self.value = mean_norm(X + hidden @ op.W_2 + op.b_2, op.norm_gamma, op.norm_beta)

    def visit_pooling(self, op: Pooling):
        if op.mode == PoolingMode.MEAN:
            self.value = self.value.mean(dim=-2)
        else:
            self.value = self.value[..., 0, :]

    def visit_dense(self, op: Dense):
        self.value = self.value @ op.W + op.b
