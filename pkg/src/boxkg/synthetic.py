"""Deterministic synthetic knowledge graphs for experiments and tests.

Two generators: a two-domain class hierarchy for containment training, and a
gene-annotation benchmark whose pair fitness is a known function of shared
annotation ancestry, so a model reading the graph structure can recover it.
"""

from __future__ import annotations

import numpy as np

from .kg import DomainId, FitnessDataset, KnowledgeGraph, Relation, add_reverse_edges

__all__ = ["hierarchy_demo_graph", "fitness_benchmark"]


def _tree(prefix: str, branches: int, leaves: int) -> tuple[list, list]:
    """Root, `branches` children, `leaves` grandchildren spread round-robin."""
    root = f"{prefix}_root"
    mids = [f"{prefix}_mid{i}" for i in range(branches)]
    leafs = [f"{prefix}_leaf{i}" for i in range(leaves)]
    pairs = [(m, root) for m in mids]
    pairs += [(leaf, mids[i % branches]) for i, leaf in enumerate(leafs)]
    return [root] + mids + leafs, pairs


def hierarchy_demo_graph(seed: int = 0, dim_prior: int = 4, dim_gnn: int = 4) -> KnowledgeGraph:
    """Two domains of ten classes each, three hierarchy levels per domain.

    Each function leaf points at one process class so messages flow both ways
    (the reverse relation is added); edge targets are drawn per seed.
    """
    fn_classes, fn_pairs = _tree("fn", 3, 6)
    pr_classes, pr_pairs = _tree("pr", 3, 6)
    rel = Relation("related_to", "function", "process")
    rng = np.random.default_rng(seed)
    edges = [
        (leaf, rel, pr_classes[rng.integers(len(pr_classes))])
        for leaf in fn_classes[4:]
    ]
    g = KnowledgeGraph(
        {
            "function": DomainId("function", dim_prior, dim_gnn),
            "process": DomainId("process", dim_prior, dim_gnn),
        },
        {c: "function" for c in fn_classes} | {c: "process" for c in pr_classes},
        [rel],
        edges,
        {"function": fn_pairs, "process": pr_pairs},
        {},
    )
    return add_reverse_edges(g)


def fitness_benchmark(
    seed: int = 0,
    n_genes: int = 30,
    branches: int = 4,
    leaves_per_branch: int = 2,
    annotations_per_gene: int = 2,
    dim_prior: int = 8,
    dim_gnn: int = 16,
) -> tuple[KnowledgeGraph, FitnessDataset]:
    """Annotation graph plus a fitness table derived from it.

    Every gene is annotated with distinct function leaves; the fitness of a
    pair is 1 - 0.8 * Jaccard overlap of the ancestor closures of the two
    annotation sets, so shared ancestry lowers fitness.  All pairs of genes
    appear in the dataset.
    """
    rng = np.random.default_rng(seed)
    fn_root = "fn_root"
    mids = [f"fn_b{i}" for i in range(branches)]
    leafs = [f"fn_b{i}_l{j}" for i in range(branches) for j in range(leaves_per_branch)]
    hierarchy = [(m, fn_root) for m in mids]
    hierarchy += [(leaf, mids[i]) for i, m in enumerate(mids) for leaf in leafs if leaf.startswith(m + "_")]
    genes = [f"g{i:02d}" for i in range(n_genes)]
    rel = Relation("annotates", "function", "gene")

    edges = []
    for gene in genes:
        picks = rng.choice(len(leafs), size=annotations_per_gene, replace=False)
        edges += [(leafs[i], rel, gene) for i in sorted(picks)]

    g = KnowledgeGraph(
        {
            "function": DomainId("function", dim_prior, dim_gnn),
            "gene": DomainId("gene", dim_prior, dim_gnn),
        },
        {c: "function" for c in [fn_root] + mids + leafs} | {x: "gene" for x in genes},
        [rel],
        edges,
        {"function": hierarchy},
        {},
    )
    g = add_reverse_edges(g)

    closures = {
        gene: frozenset().union(
            *(g.ancestors(s) for s, r, o in g.edges if r == rel and o == gene)
        )
        for gene in genes
    }
    records = []
    for i, a in enumerate(genes):
        for b in genes[i + 1 :]:
            shared = len(closures[a] & closures[b])
            union = len(closures[a] | closures[b])
            records.append((a, b, 1.0 - 0.8 * shared / union))
    return g, FitnessDataset.from_records(records)
