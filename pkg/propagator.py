# BoundPropagator walks the same network ops as the Interpreter, carrying affine bounds
# over the perturbed input entries instead of concrete values.

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch

from bounds import (DTYPE, AffineBoundPair, Interval, PerturbationSpec, add_bounds, concat_bounds,
                    concretize, input_bounds, propagate_affine, propagate_unary, scale_bounds, sum_bounds,
                    transpose_bounds)
from errors import UnverifiableError
from relaxations import (MatMul, PlaneHook, Side, matmul_bounds, pair_for_matmul, relu_relaxation,
                         softmax_bounds)
from strategies import AlphaPolicy, SiteContext
from symbols import (AttentionBlock, Dense, FeedForwardBlock, Network, Pooling, PoolingMode,
                     mean_norm_matrix)
from visitor import Visitor

logger = logging.getLogger(__name__)


class BoundPropagator(Visitor):
    def __init__(self, spec: PerturbationSpec, policy: AlphaPolicy, plane_hook: Optional[PlaneHook] = None):
        self.spec = spec
        self.policy = policy
        self.plane_hook = plane_hook
        self.bounds: Optional[AffineBoundPair] = None

    def run(self, network: Network) -> AffineBoundPair:
        self.bounds = input_bounds(self.spec)
        network.accept(self)
        return self.bounds

    def _trace(self, what: str, b: AffineBoundPair):
        if logger.isEnabledFor(logging.DEBUG):
            width = concretize(b, self.spec).width.detach()
            logger.debug("%s: max width %.6g mean width %.6g", what, float(width.max()), float(width.mean()))

    def _matmul(self, layer: int, head: int, matmul: MatMul, Ab, Bb, A_int, B_int) -> AffineBoundPair:
        for interval in (A_int, B_int):
            if not (torch.isfinite(interval.lo).all() and torch.isfinite(interval.hi).all()):
                raise UnverifiableError(layer, head, math.nan, f"{matmul.value} operand bounds are not finite")
        Xb, Yb, X_int, Y_int = pair_for_matmul(Ab, Bb, A_int, B_int)
        context = SiteContext(layer, head, matmul, Xb, Yb, X_int, Y_int, self.spec)
        alphas = {side: self.policy.select(context, side) for side in (Side.U, Side.L)}
        return matmul_bounds(Ab, Bb, A_int, B_int, alphas, layer, head, matmul, self.plane_hook)

    def _check_finite(self, b: AffineBoundPair, layer: int, what: str):
        if not all(bool(torch.isfinite(t).all()) for t in (b.omega_L, b.omega_U, b.theta_L, b.theta_U)):
            raise UnverifiableError(layer, -1, math.nan, f"{what} bounds are not finite")

    def _normalize(self, b: AffineBoundPair, gamma: torch.Tensor, beta: torch.Tensor) -> AffineBoundPair:
        return propagate_affine(b, mean_norm_matrix(gamma), beta)

    def visit_attention_block(self, op: AttentionBlock):
        X = self.bounds
        heads = []
        for head in range(op.num_heads):
            cols = op.head_columns(head)
            Qb = propagate_affine(X, op.W_Q[:, cols].T, op.b_Q[cols])
            Kb = propagate_affine(X, op.W_K[:, cols].T, op.b_K[cols])
            Vb = propagate_affine(X, op.W_V[:, cols].T, op.b_V[cols])
            Q_int, K_int = concretize(Qb, self.spec), concretize(Kb, self.spec)

            Sb = self._matmul(op.layer, head, MatMul.QK, Qb, Kb, Q_int, K_int)
            Sb = scale_bounds(Sb, 1.0 / math.sqrt(op.head_dim))
            S_int = concretize(Sb, self.spec)
            self._trace(f"layer {op.layer} head {head} scores", Sb)

            Pb = softmax_bounds(Sb, S_int, self.spec, op.layer, head)
            unit = Interval(torch.zeros(Pb.shape, dtype=DTYPE), torch.ones(Pb.shape, dtype=DTYPE))
            P_int = concretize(Pb, self.spec).intersect(unit)

            Vt = transpose_bounds(Vb)
            V_int = concretize(Vb, self.spec)
            Vt_int = Interval(V_int.lo.T, V_int.hi.T)
            heads.append(self._matmul(op.layer, head, MatMul.AV, Pb, Vt, P_int, Vt_int))

        attended = propagate_affine(concat_bounds(heads, axis=1), op.W_O.T, op.b_O)
        self.bounds = self._normalize(add_bounds(X, attended), op.norm_gamma, op.norm_beta)
        self._check_finite(self.bounds, op.layer, "attention output")
        self._trace(f"layer {op.layer} attention", self.bounds)

    def visit_feed_forward_block(self, op: FeedForwardBlock):
        X = self.bounds
        hidden = propagate_affine(X, op.W_1.T, op.b_1)
        hidden_int = concretize(hidden, self.spec)
        if not (torch.isfinite(hidden_int.lo).all() and torch.isfinite(hidden_int.hi).all()):
            raise UnverifiableError(op.layer, -1, math.nan, "feed-forward hidden bounds are not finite")
        activated = propagate_unary(hidden, relu_relaxation(hidden_int.lo, hidden_int.hi))
        out = propagate_affine(activated, op.W_2.T, op.b_2)
        self.bounds = self._normalize(add_bounds(X, out), op.norm_gamma, op.norm_beta)
        self._check_finite(self.bounds, op.layer, "feed-forward output")
        self._trace(f"layer {op.layer} feed-forward", self.bounds)

    def visit_pooling(self, op: Pooling):
        if op.mode == PoolingMode.MEAN:
            n = self.bounds.shape[0]
            self.bounds = scale_bounds(sum_bounds(self.bounds, axis=0), 1.0 / n)
        else:
            self.bounds = self.bounds.map(lambda t, _: t[0])

    def visit_dense(self, op: Dense):
        self.bounds = propagate_affine(self.bounds, op.W.T, op.b)
        self._trace(op.name, self.bounds)


def difference_matrix(num_classes: int, label: int) -> torch.Tensor:
    """(c - 1, c) matrix whose rows are e_label - e_i for every i != label."""
    rows = []
    for i in range(num_classes):
        if i == label:
            continue
        row = torch.zeros(num_classes, dtype=DTYPE)
        row[label] = 1.0
        row[i] = -1.0
        rows.append(row)
    return torch.stack(rows)


@dataclass
class PropagationResult:
    logits: AffineBoundPair
    logit_interval: Interval
    margins: AffineBoundPair
    margin_interval: Interval


def propagate_task(model, task, policy: AlphaPolicy, plane_hook: Optional[PlaneHook] = None) -> PropagationResult:
    """Bounds on the logits and on every margin logit[label] - logit[i], i != label."""
    logits = BoundPropagator(task.spec, policy, plane_hook).run(model.network())
    C = difference_matrix(model.config.num_classes, task.label)
    margins = propagate_affine(logits, C, torch.zeros(C.shape[0], dtype=DTYPE))
    return PropagationResult(logits, concretize(logits, task.spec), margins, concretize(margins, task.spec))


def margin_bounds(model, task, policy: AlphaPolicy, plane_hook: Optional[PlaneHook] = None) -> torch.Tensor:
    """Lower bound of each margin; the verified margin is their minimum."""
    return propagate_task(model, task, policy, plane_hook).margin_interval.lo
