"""Scoring candidate edge additions by how far they move the generated boxes.

Adding one edge to the training graph and re-running the (frozen) network
displaces the final-layer boxes; real held-out edges should displace them
less than randomly drawn ones.  Each candidate is evaluated against the
pristine training graph, grouped by relation, ranked by displacement, and the
real-versus-baseline distance samples are compared with a two-sided
Mann-Whitney U test.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .boxes import make_box
from .gnn import gnn_forward
from .kg import GraphError, KnowledgeGraph, Relation

__all__ = [
    "BASELINE_KINDS",
    "RevisionResult",
    "embedding_displacement",
    "evaluate_revisions",
    "mann_whitney_u",
    "results_lines",
    "split_edges_stratified",
    "summary_table",
]

BASELINE_KINDS = ("real", "constrained", "random")

# exhaustive enumeration of group assignments is exact but only affordable
# for small samples; beyond these bounds the tie-corrected normal
# approximation takes over
EXACT_MAX_MIN_N = 8
EXACT_COMBINATION_CAP = 500_000


@dataclass(frozen=True)
class RevisionResult:
    """One evaluated candidate edge: its displacement and rank (1 = smallest
    displacement within the relation group)."""

    edge: tuple
    kind: str
    distance: float
    rank: int


def _gnn_of(model):
    return getattr(model, "gnn", model)


def split_edges_stratified(g: KnowledgeGraph, fraction: float, seed) -> tuple:
    """Hold out about `fraction` of the edges of every relation.

    Returns (g_train, test_edges).  The held-out count is rounded per
    relation, so relations with very few edges may contribute none.  Both the
    training graph's edge sequence and the test list keep the original edge
    order; relation declarations all survive, only edges move.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = set()
    by_rel = {}
    for i, (_, rel, _) in enumerate(g.edges):
        by_rel.setdefault(rel.key, []).append(i)
    for key in sorted(by_rel):
        idx = by_rel[key]
        n_test = int(round(fraction * len(idx)))
        perm = rng.permutation(len(idx))
        test_idx.update(idx[j] for j in perm[:n_test])
    test_edges = [e for i, e in enumerate(g.edges) if i in test_idx]
    if not test_edges:
        raise GraphError("graph has too few edges to hold any out")
    train_edges = [e for i, e in enumerate(g.edges) if i not in test_idx]
    g_train = KnowledgeGraph(
        g.domains, g.nodes, g.relations.values(), train_edges, g.hierarchy, g.disjoint
    )
    return g_train, test_edges


def _validate_edge(g: KnowledgeGraph, edge) -> None:
    subject, relation, obj = edge
    if subject not in g.nodes:
        raise GraphError(f"unknown edge endpoint {subject!r}")
    if obj not in g.nodes:
        raise GraphError(f"unknown edge endpoint {obj!r}")
    declared = g.relations.get(relation.key)
    if declared != relation:
        raise GraphError(f"relation {relation.name!r} is not declared in the graph")


def _mean_box_change(before: dict, after: dict, mode: str) -> float:
    from .boxes import box_distance

    total, cells = 0.0, 0
    for dom in sorted(before):
        b0 = make_box(before[dom])
        b1 = make_box(after[dom])
        if mode == "corners":
            d = np.abs(b1.z.data - b0.z.data) + np.abs(b1.Z.data - b0.Z.data)
        elif mode == "eq6":
            d = box_distance(b0, b1).data
        else:
            raise ValueError(f"unknown displacement mode {mode!r}")
        total += float(d.sum())
        cells += d.size
    return total / cells


def _displacement(gnn, g_train: KnowledgeGraph, base_final: dict, edge, mode: str) -> float:
    revised = gnn_forward(gnn, g_train.with_edge(edge))[-1]
    return _mean_box_change(base_final, revised, mode)


def embedding_displacement(model, g_train: KnowledgeGraph, edge, *, mode: str = "corners") -> float:
    """Mean final-layer box change caused by adding one edge.

    The default aggregates |change in lower corner| + |change in upper corner|
    over every node and box dimension; an edge the graph already contains
    yields exactly 0.  Mode "eq6" instead averages the element-wise box
    distance between each node's original and revised box (negative for
    overlapping boxes).
    """
    if mode not in ("corners", "eq6"):
        raise ValueError(f"unknown displacement mode {mode!r}")
    _validate_edge(g_train, edge)
    gnn = _gnn_of(model)
    base = gnn_forward(gnn, g_train)[-1]
    return _displacement(gnn, g_train, base, edge, mode)


def evaluate_revisions(
    model,
    g_train: KnowledgeGraph,
    test_edges,
    *,
    seed: int = 0,
    kinds=BASELINE_KINDS,
    mode: str = "corners",
) -> dict:
    """Displace each test edge and per-edge baseline draws, grouped by relation.

    For every test edge one candidate per kind is scored: the edge itself
    ("real"), a draw with endpoints from the relation's source and target
    domains ("constrained"), and a draw over all nodes ("random").  A random
    draw whose endpoints cannot bind to the relation's declared domains sends
    no messages, so its displacement is 0.  Results keep input order within
    each relation; ranks order each relation group by ascending distance.
    """
    existing = set(g_train.edges)
    for edge in test_edges:
        _validate_edge(g_train, edge)
        if edge in existing:
            raise ValueError(f"test edge {edge!r} is already in the training graph")

    gnn = _gnn_of(model)
    base = gnn_forward(gnn, g_train)[-1]
    rng = np.random.default_rng(seed)
    all_nodes = sorted(g_train.nodes)

    grouped: dict = {}
    for edge in test_edges:
        _, relation, _ = edge
        src_pool = g_train.classes_in_domain(relation.source)
        tgt_pool = g_train.classes_in_domain(relation.target)
        for kind in kinds:
            if kind == "real":
                cand = edge
            elif kind == "constrained":
                cand = (
                    src_pool[rng.integers(len(src_pool))],
                    relation,
                    tgt_pool[rng.integers(len(tgt_pool))],
                )
            elif kind == "random":
                cand = (
                    all_nodes[rng.integers(len(all_nodes))],
                    relation,
                    all_nodes[rng.integers(len(all_nodes))],
                )
            else:
                raise ValueError(f"unknown baseline kind {kind!r}")
            well_typed = (
                g_train.domain_of(cand[0]) == relation.source
                and g_train.domain_of(cand[2]) == relation.target
            )
            if not well_typed:
                dist = 0.0
            elif cand in existing:
                dist = 0.0
            else:
                dist = _displacement(gnn, g_train, base, cand, mode)
            grouped.setdefault(relation, []).append((kind, cand, dist))

    results: dict = {}
    for relation, items in grouped.items():
        order = sorted(range(len(items)), key=lambda i: (items[i][2], i))
        ranks = {i: rank for rank, i in enumerate(order, 1)}
        results[relation] = [
            RevisionResult(cand, kind, dist, ranks[i])
            for i, (kind, cand, dist) in enumerate(items)
        ]
    return results


# -- rank-sum significance test -----------------------------------------------------


def _midranks(values: list) -> list:
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(len(arr))
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks.tolist()


def mann_whitney_u(sample_a, sample_b, method: str = "auto") -> tuple:
    """Two-sided rank-sum test; returns (U for sample_a, p).

    Ties receive midranks.  Small samples are enumerated exhaustively
    (every assignment of the pooled observations to the two groups); larger
    ones use the tie-corrected normal approximation with continuity
    correction.  A pooled sample with zero rank variance gives p = 1.
    """
    a = [float(x) for x in sample_a]
    b = [float(x) for x in sample_b]
    if not a or not b:
        raise ValueError("mann_whitney_u needs non-empty samples")
    na, nb = len(a), len(b)
    n = na + nb
    ranks = _midranks(a + b)
    u_a = sum(ranks[:na]) - na * (na + 1) / 2
    mu = na * nb / 2

    if method == "auto":
        small = min(na, nb)
        exact_ok = small <= EXACT_MAX_MIN_N and math.comb(n, small) <= EXACT_COMBINATION_CAP
        method = "exact" if exact_ok else "normal"

    if method == "exact":
        k = min(na, nb)
        offset = k * (k + 1) / 2
        dev = abs(u_a - mu)
        hits = total = 0
        for combo in itertools.combinations(range(n), k):
            u = sum(ranks[i] for i in combo) - offset
            total += 1
            if abs(u - mu) >= dev - 1e-9:
                hits += 1
        return u_a, hits / total

    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    _, tie_counts = np.unique(np.asarray(a + b), return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts))
    var = (na * nb / 12) * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return u_a, 1.0
    z = max(0.0, abs(u_a - mu) - 0.5) / math.sqrt(var)
    return u_a, min(1.0, math.erfc(z / math.sqrt(2)))


# -- report files -------------------------------------------------------------------


def results_lines(results: dict) -> str:
    """Per-candidate rows: relation, kind, edge, distance."""
    lines = []
    for relation in sorted(results, key=lambda r: r.key):
        for row in results[relation]:
            subject, _, obj = row.edge
            lines.append(
                "%s\t%s\t%s->%s\t%.17g"
                % (relation.name, row.kind, subject, obj, row.distance)
            )
    return "\n".join(lines) + "\n"


SUMMARY_COLUMNS = (
    "relation",
    "n_test",
    "mean_dist_real",
    "mean_dist_constrained",
    "mean_dist_random",
    "u_real_vs_random",
    "p_real_vs_random",
    "u_real_vs_constrained",
    "p_real_vs_constrained",
)


def summary_table(results: dict) -> str:
    """One row per relation: counts, mean distances per kind, U statistics."""
    lines = ["\t".join(SUMMARY_COLUMNS)]
    for relation in sorted(results, key=lambda r: r.key):
        dists = {kind: [] for kind in BASELINE_KINDS}
        for row in results[relation]:
            dists.setdefault(row.kind, []).append(row.distance)
        cells = [relation.name, str(len(dists["real"]))]
        for kind in BASELINE_KINDS:
            cells.append("%.17g" % np.mean(dists[kind]) if dists[kind] else "nan")
        for kind in ("random", "constrained"):
            if dists["real"] and dists[kind]:
                u, p = mann_whitney_u(dists["real"], dists[kind])
                cells += ["%.17g" % u, "%.17g" % p]
            else:
                cells += ["nan", "nan"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
