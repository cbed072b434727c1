"""Explaining pair predictions by scoring the edges incident to each gene.

A gene's first-layer feature is built from the embeddings of its neighbours,
one gathered row per incoming edge.  The importance of an edge is the
input-times-gradient of that row with respect to the pair prediction, summed
over feature entries.  On a locally linear path those scores decompose the
prediction exactly.  Pair scores are then combined multiplicatively across the
two genes' edge lists and accumulated over many pairs into a table keyed by
ordered (edge, edge); mirrored keys are merged only when reporting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .gnn import MessageCapture, gnn_forward
from .kg import KnowledgeGraph, Relation
from .predictor import FitnessModel, predict_pairs

__all__ = [
    "EdgeKey",
    "PairImportanceTable",
    "input_x_gradient",
    "accumulate_from_scores",
    "accumulate_pair_importances",
    "filter_importances",
    "export_importances",
]


@dataclass(frozen=True)
class EdgeKey:
    """Identity of a gene-incident edge: its subject class and relation."""

    subject: str
    predicate: Relation


def _key_order(k: EdgeKey) -> tuple:
    return (k.subject,) + k.predicate.key


def input_x_gradient(
    model: FitnessModel, g: KnowledgeGraph, gene_a: str, gene_b: str
) -> tuple[list, list]:
    """Score every edge pointing at either gene by input-times-gradient.

    Runs one captured forward pass, differentiates the pair prediction, and
    for each edge (subject, predicate, gene) sums value*gradient over the
    gathered first-layer source row.  Returns one `[(EdgeKey, score), ...]`
    list per gene, in graph edge order; a gene with no incoming edges gets an
    empty list.
    """
    capture = MessageCapture()
    layers = gnn_forward(model.gnn, g, capture=capture)
    pred = predict_pairs(
        model, g, [(gene_a, gene_b)], gene_features=layers[-1][model.gene_domain]
    )
    ad.backward(ad.sum_(pred))
    return (
        _edge_scores(capture, g, gene_a),
        _edge_scores(capture, g, gene_b),
    )


def _edge_scores(capture: MessageCapture, g: KnowledgeGraph, gene: str) -> list:
    scores = []
    for edge in g.edges:
        subject, relation, obj = edge
        if obj != gene:
            continue
        hit = capture.lookup(1, edge)
        if hit is None:
            continue
        gathered, row = hit
        values = gathered.data[row]
        # a row the prediction never touches has no stored gradient
        grads = gathered.grad[row] if gathered.grad is not None else np.zeros_like(values)
        scores.append((EdgeKey(subject, relation), float(np.dot(values, grads))))
    return scores


@dataclass
class PairImportanceTable:
    """Scores accumulated over gene pairs, keyed by ordered (EdgeKey, EdgeKey)."""

    scores: dict = field(default_factory=dict)

    def symmetrized(self) -> "PairImportanceTable":
        """Merge mirrored keys, reporting each unordered edge pair once."""
        merged: dict = {}
        for (k1, k2), value in self.scores.items():
            canon = (k1, k2) if _key_order(k1) <= _key_order(k2) else (k2, k1)
            merged[canon] = merged.get(canon, 0.0) + value
        return PairImportanceTable(merged)

    def sorted_entries(self) -> list:
        """Entries descending by score; ties break on the key tuples."""
        return sorted(
            self.scores.items(),
            key=lambda kv: (-kv[1], _key_order(kv[0][0]), _key_order(kv[0][1])),
        )


def accumulate_from_scores(score_pairs) -> PairImportanceTable:
    """Fold per-pair edge scores into one table.

    Each item is a `(scores_a, scores_b)` pair of keyed lists; every cross
    combination contributes the product of its two scores under the ordered
    key `(key_a, key_b)`.  Per-key contributions are summed with exact
    rounding, so the result does not depend on the order of the input.
    """
    buckets: dict = {}
    for scores_a, scores_b in score_pairs:
        for k1, l1 in scores_a:
            for k2, l2 in scores_b:
                buckets.setdefault((k1, k2), []).append(l1 * l2)
    return PairImportanceTable({key: math.fsum(vals) for key, vals in buckets.items()})


def accumulate_pair_importances(
    model: FitnessModel, g: KnowledgeGraph, pairs
) -> PairImportanceTable:
    """Attribute every pair in `pairs` and accumulate the edge-pair products."""
    return accumulate_from_scores(
        input_x_gradient(model, g, a, b) for a, b in pairs
    )


def filter_importances(
    table: PairImportanceTable,
    allow_predicates: set,
    allow_superclasses: set,
    g: KnowledgeGraph,
) -> PairImportanceTable:
    """Keep entries where at least one edge key matches the allow lists.

    A key matches when its predicate (relation or relation name) is allowed,
    or when its subject is the allowed class itself or any descendant of one.
    Empty allow sets keep nothing.
    """
    allow_p = set(allow_predicates)
    allow_s = set(allow_superclasses)

    def key_ok(k: EdgeKey) -> bool:
        if k.predicate in allow_p or k.predicate.name in allow_p:
            return True
        return bool(allow_s) and not allow_s.isdisjoint(g.ancestors(k.subject))

    kept = {
        pair: value
        for pair, value in table.scores.items()
        if key_ok(pair[0]) or key_ok(pair[1])
    }
    return PairImportanceTable(kept)


def export_importances(table: PairImportanceTable) -> str:
    """Render the symmetrized table as ranked tab-separated rows."""
    lines = ["rank\tscore\tpred1\tclass1\tpred2\tclass2"]
    for rank, ((k1, k2), score) in enumerate(table.symmetrized().sorted_entries(), 1):
        lines.append(
            "%d\t%.17g\t%s\t%s\t%s\t%s"
            % (rank, score, k1.predicate.name, k1.subject, k2.predicate.name, k2.subject)
        )
    return "\n".join(lines) + "\n"
