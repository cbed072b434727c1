"""Prediction-free training: shallow prior boxes per domain, and joint
prior+network training of box embeddings from hierarchy and disjointness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .boxes import contains, make_box
from .gnn import HeteroGnnModel, as_layer_boxes, gnn_forward
from .kg import GraphError, KnowledgeGraph
from .losses import (
    DivergenceError,
    SemanticLossWeights,
    loss_overlap_neg,
    loss_overlap_pos,
    reg_big_box,
    reg_small_box,
    semantic_loss_total,
)

__all__ = [
    "PriorTrainConfig",
    "PriorEpoch",
    "PriorResult",
    "train_priors",
    "JointTrainConfig",
    "JointEpoch",
    "train_joint",
    "with_disjointness",
    "containment_fraction",
]


@dataclass
class PriorTrainConfig:
    """Shallow per-domain box training. `dim` is the latent length (twice the
    box dimension); None takes the domain's declared prior width."""

    epochs: int = 1000
    lr: float = 1e-2
    reg_lambda: float = 1e-3
    gumbel_temp: float = 0.25
    neg_ratio: float = 2.0
    dim: int | None = None
    use_closure: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0 or self.gumbel_temp <= 0:
            raise ValueError("lr and gumbel_temp must be positive")
        if self.reg_lambda < 0 or self.neg_ratio < 0:
            raise ValueError("reg_lambda and neg_ratio must be non-negative")
        if self.dim is not None and (self.dim < 2 or self.dim % 2):
            raise ValueError("dim must be an even number of latent entries")


@dataclass
class PriorEpoch:
    epoch: int
    total: float
    pos_per_class: float
    neg_per_class: float


@dataclass
class PriorResult:
    domain: str
    classes: tuple
    latents: np.ndarray
    history: list = field(repr=False)


def _closure_pairs(g: KnowledgeGraph, domain: str) -> list:
    pairs = []
    for c in g.classes_in_domain(domain):
        for anc in sorted(g.ancestors(c)):
            if anc != c:
                pairs.append((c, anc))
    return pairs


def _unrelated_negatives(g: KnowledgeGraph, c: str, ratio: float, rng) -> list:
    """Non-ancestor draws for c, minus c's own descendants: a parent paired
    with its child would contradict the containment objective."""
    return [x for x in g.sample_negatives(c, ratio, rng) if c not in g.ancestors(x)]


def train_priors(
    g: KnowledgeGraph, domain: str, cfg: PriorTrainConfig | None = None, seed: int = 0
) -> PriorResult:
    """Fit one box per class so subclasses overlap their parents and sampled
    non-ancestors do not.

    Positive pairs are the domain's direct hierarchy edges (the transitive
    closure with `use_closure`); per positive pair, round(neg_ratio) negatives
    are resampled every epoch from the subclass's non-ancestors.  Volumes are
    smoothed at `gumbel_temp`; big boxes pay `reg_lambda` times the squared
    side sum.  A domain with a single class trains on the regularizer alone.
    """
    cfg = cfg or PriorTrainConfig()
    classes = g.classes_in_domain(domain)
    pairs = _closure_pairs(g, domain) if cfg.use_closure else list(g.hierarchy.get(domain, ()))
    if not pairs and len(classes) > 1:
        raise GraphError(f"domain {domain} has no hierarchy edges to train on")

    dim = cfg.dim if cfg.dim is not None else g.domains[domain].dim_prior
    if dim % 2:
        raise GraphError(f"latent width must be even, got {dim}")
    rng = np.random.default_rng(seed)
    half = dim // 2
    lower = rng.uniform(-1.0, 1.0, size=(len(classes), half))
    width = rng.uniform(-1.0, 0.0, size=(len(classes), half))
    latents = Tensor(np.concatenate([lower, width], axis=1), requires_grad=True)

    row = {c: i for i, c in enumerate(classes)}
    sub_idx = np.asarray([row[a] for a, _ in pairs], dtype=int)
    sup_idx = np.asarray([row[b] for _, b in pairs], dtype=int)
    # classes whose ancestor set spans the whole domain have nothing to reject
    can_negate = [a for a, _ in pairs if len(g.ancestors(a)) < len(classes)]
    k = int(round(cfg.neg_ratio))

    opt = Adam([latents], lr=cfg.lr)
    history = []
    n = max(1, len(classes))
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        pos = ad.constant(0.0)
        neg = ad.constant(0.0)
        if len(pairs):
            subs = make_box(ad.gather_rows(latents, sub_idx))
            sups = make_box(ad.gather_rows(latents, sup_idx))
            pos = ad.sum_(loss_overlap_pos(subs, sups, cfg.gumbel_temp))
        if can_negate and k > 0:
            neg_src, neg_tgt = [], []
            for a in can_negate:
                for x in _unrelated_negatives(g, a, cfg.neg_ratio, rng):
                    neg_src.append(row[a])
                    neg_tgt.append(row[x])
            if neg_src:
                lhs = make_box(ad.gather_rows(latents, np.asarray(neg_src, dtype=int)))
                rhs = make_box(ad.gather_rows(latents, np.asarray(neg_tgt, dtype=int)))
                neg = ad.sum_(loss_overlap_neg(lhs, rhs, cfg.gumbel_temp))
        reg = ad.sum_(reg_big_box(make_box(latents)))
        total = pos + neg + cfg.reg_lambda * reg
        if not np.isfinite(total.data):
            raise DivergenceError(f"non-finite objective at epoch {epoch} (total={total.data})")
        ad.backward(total)
        opt.step()
        history.append(PriorEpoch(epoch, float(total.data), pos.item() / n, neg.item() / n))
    return PriorResult(domain, classes, latents.data.copy(), history)


@dataclass
class JointTrainConfig:
    """Joint prior+network schedule; the learning rate after epoch k is
    initial_lr * (1 - lr_decay)^k, exactly."""

    epochs: int = 500
    initial_lr: float = 0.1
    lr_decay: float = 0.001
    reg_lambda: float = 0.001
    small_box_lambda: float = 0.01
    beta_neg: float = 0.5
    gamma_random: float = 1.0
    l0: float = 1.0
    gumbel_temp: float = 0.25
    random_ratio: float = 1.0
    include_layer0: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0.0 <= self.lr_decay < 1.0:
            raise ValueError("lr_decay must lie in [0, 1)")
        if min(self.reg_lambda, self.small_box_lambda, self.beta_neg,
               self.gamma_random, self.random_ratio) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.l0 <= 0 or self.gumbel_temp <= 0:
            raise ValueError("l0 and gumbel_temp must be positive")


@dataclass
class JointEpoch:
    epoch: int
    total: float
    lr: float
    rows: list = field(repr=False)


def with_disjointness(g: KnowledgeGraph, extra: dict) -> KnowledgeGraph:
    """Graph with additional disjointness pairs merged in (duplicates dropped)."""
    merged = {dom: list(pairs) for dom, pairs in g.disjoint.items()}
    for dom, pairs in extra.items():
        if dom not in g.domains:
            raise GraphError(f"unknown domain {dom}")
        bucket = merged.setdefault(dom, [])
        seen = set(bucket)
        for a, b in pairs:
            if (a, b) not in seen:
                bucket.append((a, b))
                seen.add((a, b))
    return KnowledgeGraph(
        g.domains, g.nodes, list(g.relations.values()), list(g.edges), g.hierarchy, merged
    )


def train_joint(
    g: KnowledgeGraph,
    model: HeteroGnnModel,
    cfg: JointTrainConfig | None = None,
    kind: str = "distance",
    disjointness: dict | None = None,
    seed: int = 0,
) -> tuple[HeteroGnnModel, list]:
    """Train prior latents and network weights against the box losses alone.

    Objective per epoch: subsumption loss over every layer's boxes, plus
    beta_neg * (disjointness + gamma_random * sampled random negatives), plus
    small_box_lambda * small-box penalty and reg_lambda * squared network
    weights.  Random negatives are redrawn each epoch; overlap losses use
    `gumbel_temp`.  Aborts on a non-finite objective.
    """
    cfg = cfg or JointTrainConfig()
    if disjointness:
        g = with_disjointness(g, disjointness)
    rng = np.random.default_rng(seed)
    params = model.params(include_priors=True)
    weights = model.params(include_priors=False)
    w = SemanticLossWeights(
        beta_neg=cfg.beta_neg,
        gamma_random=cfg.gamma_random,
        lambda_wd=cfg.reg_lambda,
        lambda_small=cfg.small_box_lambda,
        l0=cfg.l0,
    )
    temp = cfg.gumbel_temp if kind == "overlap" else None
    domains = sorted(g.domains)
    eligible = {
        dom: [
            c
            for c in g.classes_in_domain(dom)
            if len(g.ancestors(c)) < len(g.classes_in_domain(dom))
        ]
        for dom in domains
    }
    k = int(round(cfg.random_ratio))
    draw_random = cfg.gamma_random > 0 and k > 0

    opt = Adam(params, lr=cfg.initial_lr)
    history = []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.initial_lr * (1.0 - cfg.lr_decay) ** epoch
        rand = None
        if draw_random:
            rand = {
                dom: [
                    (c, x)
                    for c in eligible[dom]
                    for x in _unrelated_negatives(g, c, cfg.random_ratio, rng)
                ]
                for dom in domains
            }
        opt.zero_grad()
        layer_boxes = as_layer_boxes(model, gnn_forward(model, g))
        rows: list = []
        total = semantic_loss_total(
            layer_boxes,
            g,
            kind,
            w,
            random_negatives=rand,
            include_layer0=cfg.include_layer0,
            temp=temp,
            report=rows,
        )
        if cfg.small_box_lambda:
            start = 0 if cfg.include_layer0 else 1
            small = ad.constant(0.0)
            for li in range(start, len(layer_boxes)):
                for dom in domains:
                    small = small + ad.sum_(reg_small_box(layer_boxes[li][dom].box, cfg.l0))
            total = total + cfg.small_box_lambda * small
        if cfg.reg_lambda:
            wd = ad.constant(0.0)
            for p in weights:
                wd = wd + ad.sum_(p * p)
            total = total + cfg.reg_lambda * wd
        if not np.isfinite(total.data):
            raise DivergenceError(f"non-finite objective at epoch {epoch} (total={total.data})")
        ad.backward(total)
        opt.step()
        history.append(JointEpoch(epoch, float(total.data), opt.lr, rows))
    return model, history


def containment_fraction(
    model: HeteroGnnModel, g: KnowledgeGraph, include_layer0: bool = True
) -> float:
    """Fraction of hierarchy pairs whose subclass box sits corner-inside its
    superclass box, over every layer and domain.  1.0 when no pairs exist."""
    layer_boxes = as_layer_boxes(model, gnn_forward(model, g))
    start = 0 if include_layer0 else 1
    hits, count = 0, 0
    for li in range(start, len(layer_boxes)):
        for dom in sorted(g.domains):
            pairs = list(g.hierarchy.get(dom, ()))
            if not pairs:
                continue
            db = layer_boxes[li][dom]
            ctx = f"domain {dom}, layer {li}"
            subs = db.rows([p[0] for p in pairs], ctx)
            sups = db.rows([p[1] for p in pairs], ctx)
            ok = contains(sups, subs)
            hits += int(np.count_nonzero(ok))
            count += len(pairs)
    return hits / count if count else 1.0
