"""
Sound linear relaxations used by the bound engine.

Unary: ReLU, exp and reciprocal each get an upper and a lower line on the element's
interval. Bilinear: a product x*y on the box [qL, qU] x [kL, kU] is sandwiched by planes.
Two plane families touch the saddle surface on opposite sides; the exact envelope of
the pair is min/max of the two, which equals a plane minus a ReLU of the plane
difference. Relaxing that ReLU with slope alpha in [0, 1] gives a plane interpolating
between the families: alpha = 0 is family A, alpha = 1 is family B.

All functions are elementwise over tensors of any shape; python floats are accepted.
"""
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Callable, Mapping, Optional, Tuple

import torch

from bounds import (DTYPE, AffineBoundPair, Interval, PerturbationSpec, concretize, expand_bounds,
                    propagate_unary, sum_bounds)
from errors import DomainError, ShapeError, UnverifiableError


class MatMul(Enum):
    QK = "QK"
    AV = "AV"


class Side(Enum):
    U = "U"
    L = "L"


def _tensor(value) -> torch.Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


@dataclass(frozen=True)
class LinearRelaxation:
    slope_U: torch.Tensor
    intercept_U: torch.Tensor
    slope_L: torch.Tensor
    intercept_L: torch.Tensor

    def upper(self, x) -> torch.Tensor:
        return self.slope_U * _tensor(x) + self.intercept_U

    def lower(self, x) -> torch.Tensor:
        return self.slope_L * _tensor(x) + self.intercept_L


@dataclass(frozen=True)
class PlanarBound:
    """The plane coef_x * x + coef_y * y + const."""
    coef_x: torch.Tensor
    coef_y: torch.Tensor
    const: torch.Tensor

    def __call__(self, x, y) -> torch.Tensor:
        return self.coef_x * _tensor(x) + self.coef_y * _tensor(y) + self.const


@dataclass(frozen=True)
class DotSite:
    """
    One scalar product Q[i, h] * K[j, h] (or P[i, h] * V^T[j, h] for AV). The index fields
    are None when the intervals hold a whole group of sites as tensors.
    """
    layer: int
    head: int
    matmul: MatMul
    q_bounds: Interval
    k_bounds: Interval
    i: Optional[int] = None
    j: Optional[int] = None
    h: Optional[int] = None

    def __post_init__(self):
        if not (self.q_bounds.is_valid() and self.k_bounds.is_valid()):
            raise DomainError(f"site {self.key()}: interval with lo > hi")

    def key(self, side: Optional[Side] = None) -> tuple:
        return (self.layer, self.head, self.matmul, self.i, self.j, self.h, side)


# unary functions

def relu_relaxation(l, u) -> LinearRelaxation:
    l, u = _tensor(l), _tensor(u)
    if (l > u).any():
        raise DomainError("relu_relaxation: lower bound above upper bound")
    active = l >= 0
    dead = u <= 0
    unstable = ~(active | dead)
    width = torch.where(unstable, u - l, torch.ones_like(u))
    one, zero = torch.ones_like(u), torch.zeros_like(u)
    slope_U = torch.where(active, one, torch.where(dead, zero, u / width))
    intercept_U = torch.where(unstable, -u * l / width, zero)
    # |l| == |u| keeps slope 0
    slope_L = torch.where(active, one, torch.where(unstable & (u.abs() > l.abs()), one, zero))
    return LinearRelaxation(slope_U, intercept_U, slope_L, zero.clone())


def exp_relaxation(l, u) -> LinearRelaxation:
    """Lower: tangent at the midpoint. Upper: chord through (l, e^l) and (u, e^u)."""
    l, u = _tensor(l), _tensor(u)
    if (l > u).any():
        raise DomainError("exp_relaxation: lower bound above upper bound")
    t = (l + u) / 2
    e_t = torch.exp(t)
    e_l, e_u = torch.exp(l), torch.exp(u)
    w = u - l
    positive = w > 0
    w_safe = torch.where(positive, w, torch.ones_like(w))
    # (e^u - e^l) / w without forming e^w
    chord = torch.where(positive, e_u * -torch.expm1(-w_safe) / w_safe, e_l)
    return LinearRelaxation(chord, e_l - chord * l, e_t, e_t * (1 - t))


def reciprocal_relaxation(l, u) -> LinearRelaxation:
    """1/x on [l, u] with l > 0. Lower: tangent at the midpoint. Upper: chord."""
    l, u = _tensor(l), _tensor(u)
    if (l <= 0).any():
        raise DomainError("reciprocal_relaxation: interval must be strictly positive")
    if (l > u).any():
        raise DomainError("reciprocal_relaxation: lower bound above upper bound")
    t = (l + u) / 2
    return LinearRelaxation(-1 / (l * u), 1 / l + 1 / u, -1 / (t * t), 2 / t)


# bilinear planes

def dot_plane_A(q: Interval, k: Interval) -> Tuple[PlanarBound, PlanarBound]:
    upper = PlanarBound(k.hi, q.lo, -(q.lo * k.hi))
    lower = PlanarBound(k.lo, q.lo, -(q.lo * k.lo))
    return upper, lower


def dot_plane_B(q: Interval, k: Interval) -> Tuple[PlanarBound, PlanarBound]:
    upper = PlanarBound(k.lo, q.hi, -(q.hi * k.lo))
    lower = PlanarBound(k.hi, q.hi, -(q.hi * k.hi))
    return upper, lower


def fused_dot_value(q: float, k: float, planes_A, planes_B, form: str = "relu") -> Tuple[float, float]:
    """
    Envelope of the two plane families at the point (q, k): upper = min(upper_A, upper_B),
    lower = max(lower_A, lower_B). The "relu" form computes upper_A - relu(upper_A - upper_B)
    and lower_A + relu(lower_B - lower_A) in exact rational arithmetic, so it agrees with
    the "minmax" form bit for bit.
    """
    upper_A = float(planes_A[0](q, k))
    lower_A = float(planes_A[1](q, k))
    upper_B = float(planes_B[0](q, k))
    lower_B = float(planes_B[1](q, k))
    if form == "minmax":
        return min(upper_A, upper_B), max(lower_A, lower_B)
    if form != "relu":
        raise ValueError(f"unknown form {form!r}")
    uA, uB, lA, lB = (Fraction(v) for v in (upper_A, upper_B, lower_A, lower_B))
    upper = uA - max(Fraction(0), uA - uB)
    lower = lA + max(Fraction(0), lB - lA)
    return float(upper), float(lower)


def relu_input_plane(q: Interval, k: Interval, side: Side) -> PlanarBound:
    """The ReLU argument of the fused bound: upper_A - upper_B for U, lower_B - lower_A for L."""
    upper_A, lower_A = dot_plane_A(q, k)
    upper_B, lower_B = dot_plane_B(q, k)
    if side == Side.U:
        a, b = upper_A, upper_B
    else:
        a, b = lower_B, lower_A
    return PlanarBound(a.coef_x - b.coef_x, a.coef_y - b.coef_y, a.const - b.const)


def plane_range(plane: PlanarBound, q: Interval, k: Interval) -> Interval:
    lo = torch.where(plane.coef_x >= 0, plane.coef_x * q.lo, plane.coef_x * q.hi) \
        + torch.where(plane.coef_y >= 0, plane.coef_y * k.lo, plane.coef_y * k.hi) + plane.const
    hi = torch.where(plane.coef_x >= 0, plane.coef_x * q.hi, plane.coef_x * q.lo) \
        + torch.where(plane.coef_y >= 0, plane.coef_y * k.hi, plane.coef_y * k.lo) + plane.const
    return Interval(lo, torch.maximum(hi, lo))


def relu_input_interval(site: DotSite, side: Side) -> Interval:
    """Range of the fused bound's ReLU argument over the site's box."""
    return plane_range(relu_input_plane(site.q_bounds, site.k_bounds, side), site.q_bounds, site.k_bounds)


def alpha_plane(site: DotSite, side: Side, alpha) -> PlanarBound:
    alpha = _tensor(alpha)
    if ((alpha < 0) | (alpha > 1)).any():
        raise DomainError(f"alpha outside [0, 1] at site {site.key(side)}")
    qL, qU = site.q_bounds.lo, site.q_bounds.hi
    kL, kU = site.k_bounds.lo, site.k_bounds.hi
    beta = 1 - alpha
    if side == Side.U:
        return PlanarBound(beta * kU + alpha * kL,
                           beta * qL + alpha * qU,
                           -(beta * (qL * kU) + alpha * (qU * kL)))
    return PlanarBound(alpha * kU + beta * kL,
                       alpha * qU + beta * qL,
                       -(alpha * (qU * kU) + beta * (qL * kL)))


# assembly

PlaneHook = Callable[[PlanarBound], PlanarBound]


def substitute_plane(plane: PlanarBound, Xb: AffineBoundPair, Yb: AffineBoundPair, upper: bool):
    """Replaces x and y in the plane by their affine bounds, taking the side each sign needs."""
    cx_pos, cx_neg = plane.coef_x.clamp(min=0), plane.coef_x.clamp(max=0)
    cy_pos, cy_neg = plane.coef_y.clamp(min=0), plane.coef_y.clamp(max=0)
    if upper:
        x_same, x_other, y_same, y_other = Xb.omega_U, Xb.omega_L, Yb.omega_U, Yb.omega_L
        tx_same, tx_other, ty_same, ty_other = Xb.theta_U, Xb.theta_L, Yb.theta_U, Yb.theta_L
    else:
        x_same, x_other, y_same, y_other = Xb.omega_L, Xb.omega_U, Yb.omega_L, Yb.omega_U
        tx_same, tx_other, ty_same, ty_other = Xb.theta_L, Xb.theta_U, Yb.theta_L, Yb.theta_U
    omega = cx_pos[..., None] * x_same + cx_neg[..., None] * x_other \
        + cy_pos[..., None] * y_same + cy_neg[..., None] * y_other
    theta = cx_pos * tx_same + cx_neg * tx_other + cy_pos * ty_same + cy_neg * ty_other + plane.const
    return omega, theta


def product_bounds(Xb: AffineBoundPair, Yb: AffineBoundPair, X_int: Interval, Y_int: Interval,
                   alphas: Mapping[Side, torch.Tensor], layer: int = -1, head: int = -1,
                   matmul: MatMul = MatMul.QK, plane_hook: Optional[PlaneHook] = None) -> AffineBoundPair:
    """Elementwise product X * Y of equally shaped tensors bounded with alpha planes."""
    if Xb.shape != Yb.shape:
        raise ShapeError("product operand", Xb.shape, Yb.shape)
    site = DotSite(layer, head, matmul, X_int, Y_int)
    upper = alpha_plane(site, Side.U, alphas[Side.U])
    lower = alpha_plane(site, Side.L, alphas[Side.L])
    if plane_hook is not None:
        upper, lower = plane_hook(upper), plane_hook(lower)
    omega_U, theta_U = substitute_plane(upper, Xb, Yb, upper=True)
    omega_L, theta_L = substitute_plane(lower, Xb, Yb, upper=False)
    return AffineBoundPair(omega_L, omega_U, theta_L, theta_U)


def pair_for_matmul(Ab: AffineBoundPair, Bb: AffineBoundPair, A_int: Interval, B_int: Interval):
    """Broadcasts A (r, s) and B (t, s) to (r, t, s) so that site (i, j, h) is A[i, h] * B[j, h]."""
    if len(Ab.shape) != 2 or len(Bb.shape) != 2 or Ab.shape[1] != Bb.shape[1]:
        raise ShapeError("matmul operand", (Ab.shape[0], "s"), Bb.shape)
    r, s = Ab.shape
    t = Bb.shape[0]
    shape = (r, t, s)
    Xb = expand_bounds(Ab.map(lambda x, _: x.unsqueeze(1)), shape)
    Yb = expand_bounds(Bb.map(lambda x, _: x.unsqueeze(0)), shape)
    X_int = Interval(A_int.lo.unsqueeze(1), A_int.hi.unsqueeze(1)).broadcast_to(shape)
    Y_int = Interval(B_int.lo.unsqueeze(0), B_int.hi.unsqueeze(0)).broadcast_to(shape)
    return Xb, Yb, X_int, Y_int


def matmul_bounds(Ab: AffineBoundPair, Bb: AffineBoundPair, A_int: Interval, B_int: Interval,
                  alphas: Mapping[Side, torch.Tensor], layer: int = -1, head: int = -1,
                  matmul: MatMul = MatMul.QK, plane_hook: Optional[PlaneHook] = None) -> AffineBoundPair:
    """
    Bounds of A @ B^T for A (r, s) and B (t, s). `alphas` maps each side to an (r, t, s)
    tensor; every scalar product gets its own plane and the planes are summed over s.
    """
    Xb, Yb, X_int, Y_int = pair_for_matmul(Ab, Bb, A_int, B_int)
    for side, alpha in alphas.items():
        if tuple(alpha.shape) != tuple(Xb.shape):
            raise ShapeError(f"alpha[{side.value}]", Xb.shape, alpha.shape)
    products = product_bounds(Xb, Yb, X_int, Y_int, alphas, layer, head, matmul, plane_hook)
    return sum_bounds(products, axis=2)


def _finite(*tensors) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)


def _require_finite(layer: int, head: int, what: str, *tensors):
    if not _finite(*tensors):
        raise UnverifiableError(layer, head, float("nan"), f"{what} is not finite")


def _require_finite_bounds(layer: int, head: int, what: str, b: AffineBoundPair, interval: Interval):
    _require_finite(layer, head, what, b.omega_L, b.omega_U, b.theta_L, b.theta_U, interval.lo, interval.hi)


def softmax_bounds(Sb: AffineBoundPair, S_int: Interval, spec: PerturbationSpec,
                   layer: int = -1, head: int = -1) -> AffineBoundPair:
    """
    Row softmax of scores (n, n) as exp(S) * 1/sum(exp(S)). The inner product uses fixed
    family-A planes. Any non-finite intermediate makes the head unverifiable.
    """
    _require_finite(layer, head, "attention score bounds", S_int.lo, S_int.hi)
    exp_box = Interval(torch.exp(S_int.lo), torch.exp(S_int.hi))
    _require_finite(layer, head, "exp of the score bounds", exp_box.hi)
    exp_relax = exp_relaxation(S_int.lo, S_int.hi)
    _require_finite(layer, head, "exp relaxation", exp_relax.slope_U, exp_relax.intercept_U,
                    exp_relax.slope_L, exp_relax.intercept_L)
    Eb = propagate_unary(Sb, exp_relax)
    E_int = concretize(Eb, spec).intersect(exp_box)
    _require_finite_bounds(layer, head, "softmax numerator bounds", Eb, E_int)

    Db = sum_bounds(Eb, axis=1, keepdim=True)
    D_int = concretize(Db, spec).intersect(Interval(E_int.lo.sum(dim=1, keepdim=True),
                                                    E_int.hi.sum(dim=1, keepdim=True)))
    _require_finite_bounds(layer, head, "softmax denominator bounds", Db, D_int)
    lowest = float(D_int.lo.min())
    if lowest <= 0:
        raise UnverifiableError(layer, head, lowest)
    recip_relax = reciprocal_relaxation(D_int.lo, D_int.hi)
    Rb = propagate_unary(Db, recip_relax)
    R_int = concretize(Rb, spec).intersect(Interval(1 / D_int.hi, 1 / D_int.lo))
    _require_finite_bounds(layer, head, "reciprocal bounds", Rb, R_int)

    shape = Eb.shape
    Rb = expand_bounds(Rb, shape)
    R_int = R_int.broadcast_to(shape)
    zeros = torch.zeros(shape, dtype=DTYPE)
    Pb = product_bounds(Eb, Rb, E_int, R_int, {Side.U: zeros, Side.L: zeros}, layer, head)
    _require_finite(layer, head, "softmax bounds", Pb.omega_L, Pb.omega_U, Pb.theta_L, Pb.theta_U)
    return Pb


def flip_x_coefficient(plane: PlanarBound) -> PlanarBound:
    """Deliberately unsound plane mutation used to exercise the soundness check."""
    return PlanarBound(-plane.coef_x, plane.coef_y, plane.const)
