"""Subsumption losses on boxes and their aggregation across GNN layers and
domains.

Two families, selectable per training mode:

* distance losses: penalize how far a subclass box sticks out of its
  superclass box (positive), or how deeply two boxes that should be disjoint
  overlap (negative), measured with the element-wise box distance.
* overlap losses: negative log of containment / non-overlap volume ratios,
  computed with hard or temperature-smoothed volumes.

Plus the two volume regularizers: a big-box penalty (sum of squared sides)
and a small-box penalty that kicks in when any side drops below 1/l0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import Box, center_offset, box_distance, intersection_corners, hard_volume, gumbel_volume


class DivergenceError(RuntimeError):
    """Raised by training loops when the objective stops being finite."""


@dataclass
class SemanticLossWeights:
    """Weights of the combined objective.  Defaults are the prediction-task
    values; prediction-free training overrides them from its own config."""

    alpha: float = 0.1
    beta_neg: float = 0.05
    gamma_random: float = 0.0
    lambda_wd: float = 0.1
    lambda_small: float = 0.0
    l0: float = 1.0

    def __post_init__(self):
        vals = (self.alpha, self.beta_neg, self.gamma_random, self.lambda_wd, self.lambda_small)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if self.l0 <= 0:
            raise ValueError("l0 must be positive")


def _check_dims(a: Box, b: Box):
    if a.z.shape[-1] != b.z.shape[-1]:
        raise ValueError(f"box dimension mismatch: {a.z.shape[-1]} vs {b.z.shape[-1]}")


def _norm(v: Tensor, norm: str) -> Tensor:
    # entries of v are already clamped at zero, so the L1 norm is a plain sum
    if norm == "l2":
        return ad.sqrt(ad.sum_(v * v, axis=-1))
    if norm == "l1":
        return ad.sum_(v, axis=-1)
    raise ValueError(f"unknown norm {norm!r}")


def _neg_log_total(v: Tensor) -> Tensor:
    """-log(v) extended with -log(0) := +inf (gradient 0 there).  Keeps hard
    overlap losses total: an empty hard intersection becomes an infinite-loss
    signal rather than an exception."""
    data = np.where(v.data > 0.0, -np.log(np.where(v.data > 0.0, v.data, 1.0)), np.inf)

    def vjp(g):
        return (np.where(v.data > 0.0, -g / np.where(v.data > 0.0, v.data, 1.0), 0.0),)

    return ad.node(data, (v,), vjp)


def loss_distance_pos(c_box: Box, d_box: Box, norm: str = "l2") -> Tensor:
    """Norm of max(0, d_i + 2 o_i^C); zero exactly when C sits inside D."""
    _check_dims(c_box, d_box)
    d = box_distance(c_box, d_box)
    _, o_c = center_offset(c_box)
    return _norm(ad.relu(d + 2.0 * o_c), norm)


def loss_distance_neg(c_box: Box, d_box: Box, norm: str = "l2") -> Tensor:
    """Norm of max(0, -d_i), gated by the all-dimensions-overlap indicator
    (a constant under differentiation): any separating axis kills the loss."""
    _check_dims(c_box, d_box)
    d = box_distance(c_box, d_box)
    base = _norm(ad.relu(-d), norm)
    indicator = ad.constant((d.data < 0.0).all(axis=-1).astype(np.float64))
    return base * indicator


def _volume(b: Box, temp) -> Tensor:
    return hard_volume(b) if temp is None else gumbel_volume(b, temp)


def loss_overlap_pos(c_box: Box, d_box: Box, temp: float | None = None) -> Tensor:
    """-log(Vol(C ∩ D) / Vol(C)).  `temp=None` selects hard volumes, where an
    empty intersection yields +inf; training should pass a Gumbel temperature."""
    _check_dims(c_box, d_box)
    inter = intersection_corners(c_box, d_box)
    ratio = _volume(inter, temp) / _volume(c_box, temp)
    return _neg_log_total(ratio)


OVERLAP_RATIO_CAP = 1.0 - 1e-7


def loss_overlap_neg(c_box: Box, d_box: Box, temp: float | None = None) -> Tensor:
    """-log(1 - Vol(C ∩ D) / min(Vol(C), Vol(D))), ratio clamped to 1 - 1e-7
    so total overlap stays finite."""
    _check_dims(c_box, d_box)
    inter = intersection_corners(c_box, d_box)
    vol_min = ad.minimum(_volume(c_box, temp), _volume(d_box, temp))
    ratio = ad.minimum(_volume(inter, temp) / vol_min, ad.constant(OVERLAP_RATIO_CAP))
    return -ad.log(1.0 - ratio)


def reg_big_box(b: Box) -> Tensor:
    """Sum of squared side lengths."""
    s = b.sides()
    return ad.sum_(s * s, axis=-1)


def reg_small_box(b: Box, l0: float) -> Tensor:
    """Sum of max(0, 1/side - l0); one-sided penalty on sides below 1/l0."""
    if l0 <= 0:
        raise ValueError("l0 must be positive")
    s = b.sides()
    if np.any(s.data <= 0.0):
        raise ValueError("reg_small_box requires strictly positive sides")
    return ad.sum_(ad.relu(1.0 / s - l0), axis=-1)


# -- aggregation over layers and domains ------------------------------------------


@dataclass
class DomainBoxes:
    """Boxes for every class of one domain at one layer, row-aligned with
    `classes`."""

    classes: tuple
    box: Box

    def __post_init__(self):
        self._index = {c: i for i, c in enumerate(self.classes)}

    def rows(self, names, context: str) -> Box:
        try:
            idx = np.array([self._index[n] for n in names], dtype=np.int64)
        except KeyError as missing:
            raise KeyError(f"missing box for class {missing.args[0]} ({context})") from None
        sides = self.box.exact_sides
        return Box(
            ad.gather_rows(self.box.z, idx),
            ad.gather_rows(self.box.Z, idx),
            exact_sides=None if sides is None else ad.gather_rows(sides, idx),
        )


@dataclass
class LossReportRow:
    layer: int
    domain: str
    pos_per_class: float
    neg_per_class: float


def _pair_loss(kind: str, sub: Box, sup: Box, temp, norm) -> Tensor:
    if kind == "distance":
        return loss_distance_pos(sub, sup, norm)
    if kind == "overlap":
        return loss_overlap_pos(sub, sup, temp)
    raise ValueError(f"unknown loss kind {kind!r}")


def _pair_loss_neg(kind: str, a: Box, b: Box, temp, norm) -> Tensor:
    if kind == "distance":
        return loss_distance_neg(a, b, norm)
    if kind == "overlap":
        return loss_overlap_neg(a, b, temp)
    raise ValueError(f"unknown loss kind {kind!r}")


def semantic_loss_total(
    layer_boxes,
    g,
    kind: str,
    w: SemanticLossWeights,
    *,
    random_negatives=None,
    include_domains=None,
    include_layer0: bool = True,
    temp: float | None = None,
    norm: str = "l2",
    report: list | None = None,
) -> Tensor:
    """Sum of subsumption losses over layers, domains, and axiom pairs.

    layer_boxes: list over layers (index 0 = priors) of dicts
    domain name -> DomainBoxes.  Hierarchy pairs contribute positive loss;
    disjointness pairs contribute negative loss weighted by `w.beta_neg`;
    `random_negatives` (dict domain -> list of (class, non-ancestor) pairs)
    contribute negative loss weighted by `w.beta_neg * w.gamma_random`.

    Accumulation is domain-major with a fixed ordering, so per-domain calls
    summed in sorted-domain order reproduce the joint result bit for bit.
    If `report` is given, per-layer per-domain sums averaged by class count
    are appended to it.
    """
    random_negatives = random_negatives or {}
    domains = sorted(layer_boxes[0].keys())
    if include_domains is not None:
        domains = [d for d in domains if d in include_domains]
    layers = range(len(layer_boxes)) if include_layer0 else range(1, len(layer_boxes))

    total = ad.constant(0.0)
    for dom in domains:
        pos_pairs = list(g.hierarchy.get(dom, ()))
        disj_pairs = list(g.disjoint.get(dom, ()))
        rand_pairs = list(random_negatives.get(dom, ()))
        for layer in layers:
            db = layer_boxes[layer].get(dom)
            if db is None:
                raise KeyError(f"missing boxes for domain {dom} at layer {layer}")
            ctx = f"domain {dom}, layer {layer}"
            pos = ad.constant(0.0)
            if pos_pairs:
                subs = db.rows([p[0] for p in pos_pairs], ctx)
                sups = db.rows([p[1] for p in pos_pairs], ctx)
                pos = ad.sum_(_pair_loss(kind, subs, sups, temp, norm))
            disj = ad.constant(0.0)
            if disj_pairs:
                lhs = db.rows([p[0] for p in disj_pairs], ctx)
                rhs = db.rows([p[1] for p in disj_pairs], ctx)
                disj = ad.sum_(_pair_loss_neg(kind, lhs, rhs, temp, norm))
            rand = ad.constant(0.0)
            if rand_pairs:
                lhs = db.rows([p[0] for p in rand_pairs], ctx)
                rhs = db.rows([p[1] for p in rand_pairs], ctx)
                rand = ad.sum_(_pair_loss_neg(kind, lhs, rhs, temp, norm))
            total = total + pos + w.beta_neg * (disj + w.gamma_random * rand)
            if report is not None:
                n = max(1, len(db.classes))
                report.append(
                    LossReportRow(
                        layer=layer,
                        domain=dom,
                        pos_per_class=pos.item() / n,
                        neg_per_class=(disj.item() + rand.item()) / n,
                    )
                )
    return total
