"""Edge-level fitness regression on top of the graph embeddings.

Two gene embeddings from the final message-passing layer are combined into a
single vector, passed through a fully connected head, and regressed against
measured deletion fitness.  Training minimizes

    MSE + alpha * (hierarchy loss + beta * disjointness loss) + lambda * ||w||^2

where the hierarchy terms act on the boxes formed at every layer and ||w||^2
ranges over network weights (prior latents excluded).  Symmetric combiners
make predictions independent of gene order; the triple extension multiplies
three embeddings in a canonical order so all six argument orders agree
bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import make_box
from .gnn import HeteroGnnModel, as_layer_boxes, gnn_forward, init_model
from .kg import FitnessDataset, GraphError, KnowledgeGraph
from .losses import (
    DivergenceError,
    LossReportRow,
    SemanticLossWeights,
    semantic_loss_total,
)

COMBINER_METHODS = ("product", "bilinear", "intersection", "concatenation")


@dataclass
class PairCombiner:
    """How two gene vectors merge into one head input.

    product:        x1 * x2 (element-wise)
    bilinear:       x1 * (W x2) + x2 * (W x1), W a learned square matrix
    intersection:   corners of Box(x1) n Box(x2); the upper corner is the
                    lower corner plus a temperature-smoothed side length, so
                    empty intersections keep positive width and gradients
    concatenation:  (x1 || x2), order-dependent by construction
    """

    method: str
    w: Tensor | None = None
    temp: float = 0.25

    def __post_init__(self):
        if self.method not in COMBINER_METHODS:
            raise ValueError(f"unknown combiner method {self.method!r}")
        if self.temp <= 0:
            raise ValueError("smoothing temperature must be positive")

    def params(self) -> list:
        return [self.w] if self.method == "bilinear" and self.w is not None else []


def combine(x1, x2, c: PairCombiner) -> Tensor:
    """Merge two vectors (or two row-aligned batches of vectors)."""
    x1, x2 = ad.as_tensor(x1), ad.as_tensor(x2)
    single = x1.data.ndim == 1
    if single:
        x1 = ad.reshape(x1, (1, -1))
        x2 = ad.reshape(x2, (1, -1))
    if c.method != "concatenation" and x1.shape[-1] != x2.shape[-1]:
        raise ValueError(
            f"combiner inputs must share width, got {x1.shape[-1]} and {x2.shape[-1]}"
        )

    if c.method == "product":
        out = x1 * x2
    elif c.method == "bilinear":
        if c.w is None:
            raise ValueError("bilinear combiner needs a mixing matrix")
        d = x1.shape[-1]
        if c.w.shape != (d, d):
            raise ValueError(f"mixing matrix must be square {d} x {d}, got {c.w.shape}")
        wt = ad.transpose(c.w)
        out = x1 * (x2 @ wt) + x2 * (x1 @ wt)
    elif c.method == "intersection":
        a, b = make_box(x1), make_box(x2)
        z = ad.maximum(a.z, b.z)
        side = ad.minimum(a.Z, b.Z) - z
        upper = z + c.temp * ad.softplus(side * (1.0 / c.temp))
        out = ad.concat([z, upper], axis=-1)
    else:
        out = ad.concat([x1, x2], axis=-1)
    return ad.reshape(out, (-1,)) if single else out


@dataclass
class PredictionHead:
    """Fully connected regressor: relu between hidden layers, linear scalar
    output."""

    layers: list  # of (weights [d_in, d_out], bias [d_out])

    def __post_init__(self):
        if not self.layers:
            raise ValueError("head needs at least one layer")
        for w, b in self.layers:
            if w.data.ndim != 2 or b.data.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError("head layer shapes are inconsistent")
        if self.layers[-1][0].shape[1] != 1:
            raise ValueError("final head layer must produce a scalar")

    def params(self) -> list:
        return [t for pair in self.layers for t in pair]


def init_head(d_in: int, dims=(64, 1), seed=0) -> PredictionHead:
    """Fan-scaled uniform weights and zero biases; `dims` lists the output
    width of each layer, ending in 1."""
    rng = np.random.default_rng(seed)
    layers = []
    prev = d_in
    for d_out in dims:
        limit = math.sqrt(6.0 / (prev + d_out))
        w = Tensor(rng.uniform(-limit, limit, size=(prev, d_out)), requires_grad=True)
        b = Tensor(np.zeros(d_out), requires_grad=True)
        layers.append((w, b))
        prev = d_out
    return PredictionHead(layers)


def head_forward(head: PredictionHead, x: Tensor) -> Tensor:
    """[P, d_in] rows to a [P] vector of predictions."""
    h = x
    for w, b in head.layers[:-1]:
        h = ad.relu(h @ w + b)
    w, b = head.layers[-1]
    return ad.reshape(h @ w + b, (-1,))


@dataclass
class FitnessModel:
    """Graph model, pair combiner, and regression head, bound to the domain
    whose classes are the genes."""

    gnn: HeteroGnnModel
    combiner: PairCombiner
    head: PredictionHead
    gene_domain: str

    def params(self, include_priors: bool = True) -> list:
        return self.gnn.params(include_priors) + self.combiner.params() + self.head.params()

    def network_params(self) -> list:
        """Weight-decay scope: everything except the prior latents."""
        return self.gnn.params(include_priors=False) + self.combiner.params() + self.head.params()

    def with_params(self, tensors) -> "FitnessModel":
        """Same structure over a replacement parameter list (ordered as
        `params()` returns them)."""
        tensors = list(tensors)
        if len(tensors) != len(self.params()):
            raise ValueError(
                f"expected {len(self.params())} parameter tensors, got {len(tensors)}"
            )
        n_gnn = len(self.gnn.params())
        gnn = self.gnn.with_params(tensors[:n_gnn])
        rest = tensors[n_gnn:]
        if self.combiner.params():
            combiner = PairCombiner(self.combiner.method, rest[0], self.combiner.temp)
            rest = rest[1:]
        else:
            combiner = self.combiner
        head = PredictionHead([(rest[i], rest[i + 1]) for i in range(0, len(rest), 2)])
        return FitnessModel(gnn, combiner, head, self.gene_domain)


def build_fitness_model(
    g: KnowledgeGraph,
    gene_domain: str,
    *,
    depth: int = 2,
    method: str = "product",
    head_dims=(64, 1),
    seed=0,
    priors=None,
    temp: float = 0.25,
) -> FitnessModel:
    """Model with freshly initialized graph weights, combiner, and head, all
    drawn from one seeded generator in a fixed order."""
    if gene_domain not in g.domains:
        raise GraphError(f"unknown gene domain {gene_domain}")
    rng = np.random.default_rng(seed)
    gnn = init_model(g, depth=depth, seed=rng, priors=priors)
    d = g.domains[gene_domain].dim_gnn
    w = None
    if method == "bilinear":
        limit = math.sqrt(6.0 / (2 * d))
        w = Tensor(rng.uniform(-limit, limit, size=(d, d)), requires_grad=True)
    combiner = PairCombiner(method, w, temp)
    d_in = 2 * d if method == "concatenation" else d
    head = init_head(d_in, head_dims, rng)
    return FitnessModel(gnn, combiner, head, gene_domain)


# -- prediction ------------------------------------------------------------------


def _gene_rows(model: FitnessModel, names) -> np.ndarray:
    return np.array(
        [model.gnn.class_row(model.gene_domain, n) for n in names], dtype=np.int64
    )


def predict_pairs(model: FitnessModel, g: KnowledgeGraph, pairs, gene_features=None) -> Tensor:
    """Predictions for a list of (gene, gene) pairs as a [P] tensor."""
    if gene_features is None:
        gene_features = gnn_forward(model.gnn, g)[-1][model.gene_domain]
    x1 = ad.gather_rows(gene_features, _gene_rows(model, [p[0] for p in pairs]))
    x2 = ad.gather_rows(gene_features, _gene_rows(model, [p[1] for p in pairs]))
    return head_forward(model.head, combine(x1, x2, model.combiner))


def predict_pair(model: FitnessModel, g: KnowledgeGraph, gene_a: str, gene_b: str) -> float:
    return float(predict_pairs(model, g, [(gene_a, gene_b)]).data[0])


def predict_triples(model: FitnessModel, g: KnowledgeGraph, triples, gene_features=None) -> Tensor:
    """Product-combiner extension to gene triples.  Genes multiply in sorted
    name order, making the result exactly invariant to argument order."""
    if model.combiner.method != "product":
        raise ValueError("triple prediction requires the product combiner")
    if gene_features is None:
        gene_features = gnn_forward(model.gnn, g)[-1][model.gene_domain]
    ordered = [sorted(t) for t in triples]
    xa = ad.gather_rows(gene_features, _gene_rows(model, [t[0] for t in ordered]))
    xb = ad.gather_rows(gene_features, _gene_rows(model, [t[1] for t in ordered]))
    xc = ad.gather_rows(gene_features, _gene_rows(model, [t[2] for t in ordered]))
    return head_forward(model.head, xa * xb * xc)


def predict_triple(model, g, gene_a: str, gene_b: str, gene_c: str) -> float:
    return float(predict_triples(model, g, [(gene_a, gene_b, gene_c)]).data[0])


def r_squared(y, y_hat) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1 or y.size < 2:
        raise ValueError("need equal-length vectors with at least two entries")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("undefined for constant targets")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


# -- training ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 160
    lr: float = 1e-4
    weights: SemanticLossWeights = field(default_factory=SemanticLossWeights)
    loss_kind: str = "distance"
    folds: int = 5
    seed: int = 0
    batch_size: int | None = None  # None = full batch
    temp: float | None = None  # overlap-loss smoothing
    norm: str = "l2"
    exclude_gene_domain: bool = True
    include_layer0: bool = True
    freeze_gnn: bool = False
    fine_tune_priors: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    total: float
    mse: float
    semantic_rows: list  # of LossReportRow


def fitness_objective(model, g, pairs, y, cfg: TrainConfig, report=None):
    """Full objective on one batch: returns (total, mse) tensors."""
    layers = gnn_forward(model.gnn, g)
    preds = predict_pairs(model, g, pairs, gene_features=layers[-1][model.gene_domain])
    err = preds - ad.constant(np.asarray(y, dtype=np.float64))
    mse = ad.mean(err * err)
    total = mse
    w = cfg.weights
    if w.alpha != 0.0:
        include = None
        if cfg.exclude_gene_domain:
            include = [d for d in sorted(g.domains) if d != model.gene_domain]
        sem = semantic_loss_total(
            as_layer_boxes(model.gnn, layers),
            g,
            cfg.loss_kind,
            w,
            include_domains=include,
            include_layer0=cfg.include_layer0,
            temp=cfg.temp,
            norm=cfg.norm,
            report=report,
        )
        total = total + w.alpha * sem
    if w.lambda_wd != 0.0:
        decay = None
        for p in model.network_params():
            s = ad.sum_(p * p)
            decay = s if decay is None else decay + s
        total = total + w.lambda_wd * decay
    return total, mse


def train(
    model: FitnessModel,
    g: KnowledgeGraph,
    dataset: FitnessDataset,
    cfg: TrainConfig,
    on_epoch=None,
):
    """Full-batch (or deterministically mini-batched) Adam training.

    Returns (model, per-epoch metrics); the model is updated in place.
    Raises DivergenceError as soon as the objective stops being finite.
    `on_epoch(epoch, model)`, if given, runs after each epoch's updates;
    it sees the live model, so it must not mutate parameters.
    """
    dataset.check_against(g, model.gene_domain)
    pairs = [(a, b) for a, b, _ in dataset.records]
    y = np.array([v for _, _, v in dataset.records], dtype=np.float64)
    if not pairs:
        raise GraphError("empty fitness dataset")

    if cfg.freeze_gnn:
        opt_params = model.combiner.params() + model.head.params()
    else:
        opt_params = (
            model.gnn.params(include_priors=cfg.fine_tune_priors)
            + model.combiner.params()
            + model.head.params()
        )
    opt = ad.Adam(opt_params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)

    metrics = []
    n = len(pairs)
    for epoch in range(cfg.epochs):
        if cfg.batch_size is None:
            batches = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            batches = [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        total_sum = 0.0
        mse_sum = 0.0
        rows: list[LossReportRow] = []
        for idx in batches:
            rows = []
            bp = [pairs[i] for i in idx]
            total, mse = fitness_objective(model, g, bp, y[idx], cfg, report=rows)
            if not np.isfinite(total.data):
                raise DivergenceError(
                    f"non-finite objective at epoch {epoch} (total={total.data})"
                )
            opt.zero_grad()
            ad.backward(total, leaves=opt_params)
            opt.step()
            total_sum += float(total.data) * len(idx)
            mse_sum += float(mse.data) * len(idx)
        metrics.append(EpochMetrics(epoch, total_sum / n, mse_sum / n, rows))
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model, metrics
