"""Heterogeneous message passing over the knowledge graph.

Every relation owns, at every layer, a small module that combines a node's
own features with an element-wise max over the sources of its incoming edges
under that relation.  A node's layer output is the mean of the module outputs
across the relations that actually delivered messages to it; nodes reached by
no relation fall back to the averaged self-paths.  Stacking layers widens the
receptive field one hop at a time.

Feature matrices are row-aligned with the sorted class list of their domain.
Each domain keeps its own widths, so modules touching two domains are
rectangular.  Any layer's features convert to boxes by the latent halving
convention, which is how hierarchy losses act on every depth at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import Box, make_box
from .kg import GraphError, KnowledgeGraph, Relation
from .losses import DomainBoxes


@dataclass
class SageModule:
    """Affine transform pair for one relation at one layer.

    Weights are stored input-major (a feature row maps through ``h @ w``):
    w_self is [target width in, out], w_neigh [source width in, out]."""

    relation: Relation
    w_self: Tensor
    w_neigh: Tensor
    bias: Tensor

    def params(self) -> list:
        return [self.w_self, self.w_neigh, self.bias]


class MessageCapture:
    """Per-edge source features gathered during one forward pass.

    Records are keyed by (layer, relation key); captured tensors retain their
    gradients, so after a backward pass each edge occurrence can be scored by
    value times gradient."""

    def __init__(self):
        self.records: dict = {}

    def register(self, layer: int, relation: Relation, edges, gathered: Tensor) -> None:
        gathered.retain_grad = True
        self.records[(layer, relation.key)] = (list(edges), gathered)

    def lookup(self, layer: int, edge):
        """(tensor, row) for one edge occurrence, or None when not recorded."""
        rec = self.records.get((layer, edge[1].key))
        if rec is None:
            return None
        edges, tensor = rec
        try:
            return tensor, edges.index(edge)
        except ValueError:
            return None


@dataclass
class HeteroGnnModel:
    """Per-domain prior latents plus one SageModule per (layer, relation).

    `classes` pins the row order of every feature matrix and must match the
    graph the model runs on."""

    classes: dict
    priors: dict
    layers: list

    def __post_init__(self):
        self._row = {d: {c: i for i, c in enumerate(cs)} for d, cs in self.classes.items()}

    @property
    def depth(self) -> int:
        return len(self.layers)

    def class_row(self, domain: str, name: str) -> int:
        try:
            return self._row[domain][name]
        except KeyError:
            raise GraphError(f"unknown class {name} in domain {domain}") from None

    def params(self, include_priors: bool = True) -> list:
        out = []
        if include_priors:
            out.extend(self.priors[d] for d in sorted(self.priors))
        for lay in self.layers:
            for key in sorted(lay):
                out.extend(lay[key].params())
        return out

    def with_params(self, tensors) -> "HeteroGnnModel":
        """Same structure over a replacement parameter list (ordered as
        `params()` returns them)."""
        tensors = list(tensors)
        if len(tensors) != len(self.params()):
            raise ValueError(
                f"expected {len(self.params())} parameter tensors, got {len(tensors)}"
            )
        it = iter(tensors)
        priors = {d: next(it) for d in sorted(self.priors)}
        layers = []
        for lay in self.layers:
            rebuilt = {}
            for key in sorted(lay):
                m = lay[key]
                rebuilt[key] = SageModule(m.relation, next(it), next(it), next(it))
            layers.append(rebuilt)
        return HeteroGnnModel(self.classes, priors, layers)


def _glorot(rng, d_in: int, d_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)), requires_grad=True)


def init_model(g: KnowledgeGraph, depth: int = 2, seed: int = 0, priors=None) -> HeteroGnnModel:
    """Fresh model for a graph: per-class prior latents plus fan-scaled
    uniform weights for every (layer, relation) module, all drawn in a fixed
    order from one seeded generator.

    `priors` optionally supplies pre-trained latents per domain as arrays of
    shape [n_classes, dim_prior]; domains not listed are drawn fresh with
    lower corners uniform in [-1, 1] and width parameters uniform in [-1, 0]
    (small initial boxes).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    for name in sorted(g.domains):
        d = g.domains[name]
        if d.dim_prior % 2 or d.dim_gnn % 2:
            raise GraphError(f"domain {name}: feature widths must be even to form boxes")

    rng = np.random.default_rng(seed)
    given = dict(priors or {})
    classes = {}
    prior_tensors = {}
    for name in sorted(g.domains):
        cs = g.classes_in_domain(name)
        classes[name] = cs
        dp = g.domains[name].dim_prior
        if name in given:
            lat = np.asarray(given[name], dtype=np.float64)
            if lat.shape != (len(cs), dp):
                raise GraphError(
                    f"prior latents for domain {name}: expected shape "
                    f"{(len(cs), dp)}, got {lat.shape}"
                )
        else:
            half = dp // 2
            lower = rng.uniform(-1.0, 1.0, size=(len(cs), half))
            width = rng.uniform(-1.0, 0.0, size=(len(cs), half))
            lat = np.concatenate([lower, width], axis=1)
        prior_tensors[name] = Tensor(lat, requires_grad=True)

    layers = []
    for layer in range(depth):
        mods = {}
        for rel in g.relations_sorted():
            src, tgt = g.domains[rel.source], g.domains[rel.target]
            d_in_t = tgt.dim_prior if layer == 0 else tgt.dim_gnn
            d_in_s = src.dim_prior if layer == 0 else src.dim_gnn
            mods[rel.key] = SageModule(
                rel,
                _glorot(rng, d_in_t, tgt.dim_gnn),
                _glorot(rng, d_in_s, tgt.dim_gnn),
                Tensor(np.zeros(tgt.dim_gnn), requires_grad=True),
            )
        layers.append(mods)
    return HeteroGnnModel(classes, prior_tensors, layers)


def sage_forward_layer(features, g: KnowledgeGraph, modules, *, capture=None, layer_index=1):
    """One message-passing step over every domain.

    features: domain name -> [n_classes, width] tensor, rows ordered like
    `classes_in_domain`.  For each node and each relation with at least one
    incoming edge there, compute relu(h @ w_self + maxagg @ w_neigh + bias)
    and average over those relations; nodes no relation reaches fall back to
    the mean of relu(h @ w_self + bias) over every relation targeting their
    domain.
    """
    row_of = {d: {c: i for i, c in enumerate(g.classes_in_domain(d))} for d in g.domains}
    out = {}
    for dom in sorted(g.domains):
        targeting = [r for r in g.relations_sorted() if r.target == dom]
        if not targeting:
            raise GraphError(
                f"domain {dom} is targeted by no relation; its features cannot be updated"
            )
        h = features[dom]
        n = h.shape[0]
        counts = np.zeros(n)
        contrib = None
        self_terms = []
        for rel in targeting:
            m = modules.get(rel.key)
            if m is None:
                raise GraphError(
                    f"no module for relation {rel.name} ({rel.source} -> {rel.target})"
                )
            if h.shape[1] != m.w_self.shape[0]:
                raise ValueError(
                    f"relation {rel.name}: self weights expect input dim "
                    f"{m.w_self.shape[0]}, got {h.shape[1]}"
                )
            src_feats = features[rel.source]
            if src_feats.shape[1] != m.w_neigh.shape[0]:
                raise ValueError(
                    f"relation {rel.name}: neighbor weights expect input dim "
                    f"{m.w_neigh.shape[0]}, got {src_feats.shape[1]}"
                )
            self_term = h @ m.w_self + m.bias
            self_terms.append(self_term)
            edges = g.edges_of(rel)
            if not edges:
                continue
            src_idx = np.array([row_of[rel.source][s] for s, _, _ in edges], dtype=np.int64)
            tgt_idx = np.array([row_of[dom][o] for _, _, o in edges], dtype=np.int64)
            gathered = ad.gather_rows(src_feats, src_idx)
            if capture is not None:
                capture.register(layer_index, rel, edges, gathered)
            uniq, seg = np.unique(tgt_idx, return_inverse=True)
            agg = ad.segment_max(gathered, seg, len(uniq))
            pre = ad.gather_rows(self_term, uniq) + agg @ m.w_neigh
            contrib_r = ad.scatter_rows(ad.relu(pre), uniq, n)
            contrib = contrib_r if contrib is None else contrib + contrib_r
            counts[uniq] += 1.0

        covered = counts > 0
        pieces = []
        if contrib is not None:
            inv = np.zeros((n, 1))
            inv[covered, 0] = 1.0 / counts[covered]
            pieces.append(contrib * ad.constant(inv))
        if not covered.all():
            fb = None
            for st in self_terms:
                r_st = ad.relu(st)
                fb = r_st if fb is None else fb + r_st
            mask = np.zeros((n, 1))
            mask[~covered, 0] = 1.0 / len(targeting)
            pieces.append(fb * ad.constant(mask))
        out[dom] = pieces[0] if len(pieces) == 1 else pieces[0] + pieces[1]
    return out


def gnn_forward(model: HeteroGnnModel, g: KnowledgeGraph, capture=None) -> list:
    """Features at every depth: element 0 is the prior latents themselves,
    element k the output of the k-th message-passing layer."""
    if set(model.classes) != set(g.domains):
        raise GraphError("model domains do not match the graph")
    for name in sorted(g.domains):
        if model.classes[name] != g.classes_in_domain(name):
            raise GraphError(f"model classes for domain {name} do not match the graph")
    feats = dict(model.priors)
    layers = [feats]
    for i, mods in enumerate(model.layers):
        feats = sage_forward_layer(feats, g, mods, capture=capture, layer_index=i + 1)
        layers.append(feats)
    return layers


def boxes_at_layer(latents) -> Box:
    """Boxes from an [n, 2k] feature matrix (first half lower corners,
    second half width parameters)."""
    return make_box(latents)


def as_layer_boxes(model: HeteroGnnModel, layer_features) -> list:
    """DomainBoxes per layer per domain, ready for the hierarchy losses."""
    return [
        {d: DomainBoxes(model.classes[d], boxes_at_layer(t)) for d, t in feats.items()}
        for feats in layer_features
    ]
