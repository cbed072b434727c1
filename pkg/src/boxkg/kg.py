"""Typed knowledge graphs: domain-partitioned nodes, typed edges, per-domain
class hierarchies and disjointness axioms, plus the dataset plumbing around
them (negative sampling, frequency filtering, reverse edges, gene-based
cross-validation splits).

File formats
------------
Axiom file: one `subject<TAB>predicate<TAB>object` triple per line; the
predicates ``subClassOf`` and ``disjointWith`` are reserved for hierarchy and
disjointness axioms, everything else is a typed edge.  ``#`` starts a comment
line; blank lines are ignored.

Domain file: `class<TAB>domain` membership lines and relation declarations
`@rel<TAB>name<TAB>source_domain<TAB>target_domain`.

Fitness file: `gene_a<TAB>gene_b<TAB>fitness` with a decimal fitness score.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

REVERSE_SUFFIX = "_rev"
SUBCLASS_PRED = "subClassOf"
DISJOINT_PRED = "disjointWith"


class GraphError(ValueError):
    """Malformed or inconsistent graph data (maps to a data error downstream)."""


@dataclass(frozen=True)
class DomainId:
    """A node domain with its embedding dimensions. `dim_prior` is the length
    of the prior latent vector (twice the box dimension); `dim_gnn` the
    per-layer feature width, constant across GNN layers."""

    name: str
    dim_prior: int = 10
    dim_gnn: int = 32

    def __post_init__(self):
        if self.dim_prior < 1 or self.dim_gnn < 1:
            raise GraphError(f"domain {self.name}: dims must be >= 1")


@dataclass(frozen=True)
class Relation:
    name: str
    source: str
    target: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.name, self.source, self.target)

    @property
    def is_reverse(self) -> bool:
        return self.name.endswith(REVERSE_SUFFIX)

    def reversed_(self) -> "Relation":
        return Relation(self.name + REVERSE_SUFFIX, self.target, self.source)


class KnowledgeGraph:
    """Immutable after construction; all derived indexes are precomputed.

    edges are (subject ClassId, Relation, object ClassId) triples stored as a
    deduplicated sequence in first-seen order.
    """

    def __init__(self, domains, nodes, relations, edges, hierarchy, disjoint):
        self.domains: dict[str, DomainId] = dict(domains)
        self.nodes: dict[str, str] = dict(nodes)
        self.relations: dict[tuple, Relation] = {r.key: r for r in relations}
        seen = set()
        uniq = []
        for e in edges:
            if e not in seen:
                seen.add(e)
                uniq.append(e)
        self.edges: tuple = tuple(uniq)
        self.hierarchy: dict[str, tuple] = {
            d: tuple(dict.fromkeys(pairs)) for d, pairs in hierarchy.items()
        }
        self.disjoint: dict[str, tuple] = {
            d: tuple(dict.fromkeys(tuple(sorted(p)) for p in pairs))
            for d, pairs in disjoint.items()
        }
        self._validate()
        self._classes_by_domain = {
            d: tuple(sorted(c for c, dom in self.nodes.items() if dom == d))
            for d in self.domains
        }
        self._parents: dict[str, tuple] = {c: () for c in self.nodes}
        for pairs in self.hierarchy.values():
            for sub, sup in pairs:
                self._parents[sub] = self._parents[sub] + (sup,)
        self._ancestor_cache: dict[str, frozenset] = {}

    # -- invariants -----------------------------------------------------------

    def _validate(self):
        for c, d in self.nodes.items():
            if d not in self.domains:
                raise GraphError(f"class {c}: undeclared domain {d}")
        for s, r, o in self.edges:
            if r.key not in self.relations:
                raise GraphError(f"edge uses undeclared relation {r.name}")
            for end, want in ((s, r.source), (o, r.target)):
                if end not in self.nodes:
                    raise GraphError(f"undeclared class in edge: {end}")
                if self.nodes[end] != want:
                    raise GraphError(
                        f"edge ({s},{r.name},{o}): {end} is in domain "
                        f"{self.nodes[end]}, relation expects {want}"
                    )
        for d, pairs in self.hierarchy.items():
            for sub, sup in pairs:
                for c in (sub, sup):
                    if c not in self.nodes:
                        raise GraphError(f"undeclared class in hierarchy: {c}")
                if self.nodes[sub] != d or self.nodes[sup] != d:
                    raise GraphError(f"cross-domain hierarchy pair ({sub},{sup})")
            self._check_acyclic(d, pairs)
        for d, pairs in self.disjoint.items():
            for a, b in pairs:
                if a == b:
                    raise GraphError(f"disjointness of a class with itself: {a}")
                if self.nodes.get(a) != d or self.nodes.get(b) != d:
                    raise GraphError(f"cross-domain disjointness pair ({a},{b})")

    @staticmethod
    def _check_acyclic(domain, pairs):
        children: dict[str, list] = {}
        for sub, sup in pairs:
            children.setdefault(sub, []).append(sup)
        color: dict[str, int] = {}
        for start in children:
            if color.get(start):
                continue
            stack = [(start, iter(children.get(start, ())))]
            color[start] = 1
            while stack:
                nd, it = stack[-1]
                advanced = False
                for nxt in it:
                    if color.get(nxt) == 1:
                        raise GraphError(f"hierarchy cycle in domain {domain} at {nxt}")
                    if color.get(nxt) is None:
                        color[nxt] = 1
                        stack.append((nxt, iter(children.get(nxt, ()))))
                        advanced = True
                        break
                if not advanced:
                    color[nd] = 2
                    stack.pop()

    # -- accessors --------------------------------------------------------------

    def classes_in_domain(self, domain: str) -> tuple:
        if domain not in self.domains:
            raise GraphError(f"unknown domain {domain}")
        return self._classes_by_domain[domain]

    def domain_of(self, c: str) -> str:
        if c not in self.nodes:
            raise GraphError(f"undeclared class {c}")
        return self.nodes[c]

    def edges_of(self, relation: Relation) -> list:
        return [e for e in self.edges if e[1] == relation]

    def relations_sorted(self) -> list[Relation]:
        return [self.relations[k] for k in sorted(self.relations)]

    # -- derived graphs ------------------------------------------------------------

    def with_edge(self, edge) -> "KnowledgeGraph":
        """Return a graph with one extra edge (a set union; duplicates collapse)."""
        s, r, o = edge
        rels = list(self.relations.values())
        if r.key not in self.relations:
            rels.append(r)
        return KnowledgeGraph(
            self.domains, self.nodes, rels, list(self.edges) + [edge],
            self.hierarchy, self.disjoint,
        )

    def with_domain_dims(self, dims: dict) -> "KnowledgeGraph":
        """dims: domain name -> (dim_prior, dim_gnn)."""
        domains = dict(self.domains)
        for name, (dp, dg) in dims.items():
            if name not in domains:
                raise GraphError(f"unknown domain {name} in dims")
            domains[name] = replace(domains[name], dim_prior=dp, dim_gnn=dg)
        return KnowledgeGraph(
            domains, self.nodes, self.relations.values(), self.edges,
            self.hierarchy, self.disjoint,
        )

    # -- closures and sampling -------------------------------------------------------

    def ancestors(self, c: str) -> frozenset:
        """Reflexive-transitive closure over hierarchy pairs, including c."""
        if c not in self.nodes:
            raise GraphError(f"undeclared class {c}")
        cached = self._ancestor_cache.get(c)
        if cached is not None:
            return cached
        out = {c}
        frontier = [c]
        while frontier:
            nxt = []
            for n in frontier:
                for p in self._parents[n]:
                    if p not in out:
                        out.add(p)
                        nxt.append(p)
            frontier = nxt
        result = frozenset(out)
        self._ancestor_cache[c] = result
        return result

    def sample_negatives(self, c: str, ratio: float, rng_seed) -> list:
        """Draw round(ratio) classes from c's domain that are not ancestors of
        c (uniform with replacement over the complement, so the call always
        terminates).  `rng_seed` is an integer or a numpy Generator."""
        anc = self.ancestors(c)
        pool = [x for x in self.classes_in_domain(self.domain_of(c)) if x not in anc]
        if not pool:
            raise GraphError(f"no non-ancestor classes to sample in domain of {c}")
        k = int(round(ratio))
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        idx = rng.integers(0, len(pool), size=k)
        return [pool[i] for i in idx]


# -- parsing / serialization ---------------------------------------------------------


def _lines(text):
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield i, line


def parse_domain_text(domain_text: str):
    """Returns (domains, nodes, relations) from membership and @rel lines."""
    domains: dict[str, DomainId] = {}
    nodes: dict[str, str] = {}
    relations: dict[tuple, Relation] = {}
    for ln, line in _lines(domain_text):
        parts = line.split("\t")
        if parts[0] == "@rel":
            if len(parts) != 4:
                raise GraphError(f"domain file line {ln}: @rel needs name, source, target")
            _, name, src, tgt = parts
            for d in (src, tgt):
                domains.setdefault(d, DomainId(d))
            relations.setdefault((name, src, tgt), Relation(name, src, tgt))
        elif len(parts) == 2:
            cls, dom = parts
            if not cls or not dom:
                raise GraphError(f"domain file line {ln}: empty class or domain")
            domains.setdefault(dom, DomainId(dom))
            if cls in nodes and nodes[cls] != dom:
                raise GraphError(
                    f"domain file line {ln}: class {cls} declared in both "
                    f"{nodes[cls]} and {dom}"
                )
            nodes[cls] = dom
        else:
            raise GraphError(f"domain file line {ln}: expected 2 tab-separated fields")
    return domains, nodes, relations


def parse_graph(axiom_text: str, domain_text: str) -> KnowledgeGraph:
    domains, nodes, relations = parse_domain_text(domain_text)
    edges = []
    hierarchy: dict[str, list] = {d: [] for d in domains}
    disjoint: dict[str, list] = {d: [] for d in domains}
    for ln, line in _lines(axiom_text):
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphError(f"axiom file line {ln}: expected 3 tab-separated fields")
        s, p, o = parts
        for c in (s, o):
            if c not in nodes:
                raise GraphError(f"axiom file line {ln}: undeclared class {c}")
        if p == SUBCLASS_PRED:
            if nodes[s] != nodes[o]:
                raise GraphError(f"axiom file line {ln}: cross-domain hierarchy pair")
            hierarchy[nodes[s]].append((s, o))
        elif p == DISJOINT_PRED:
            if nodes[s] != nodes[o]:
                raise GraphError(f"axiom file line {ln}: cross-domain disjointness pair")
            if s == o:
                raise GraphError(f"axiom file line {ln}: class disjoint with itself")
            disjoint[nodes[s]].append((s, o))
        else:
            key = (p, nodes[s], nodes[o])
            rel = relations.get(key)
            if rel is None:
                raise GraphError(
                    f"axiom file line {ln}: relation {p} not declared for "
                    f"{nodes[s]} -> {nodes[o]}"
                )
            edges.append((s, rel, o))
    return KnowledgeGraph(domains, nodes, relations.values(), edges, hierarchy, disjoint)


def serialize_graph(g: KnowledgeGraph) -> tuple[str, str]:
    """Inverse of parse_graph up to ordering normalization (round-trips)."""
    dom_lines = [f"{c}\t{d}" for c, d in sorted(g.nodes.items())]
    dom_lines += [f"@rel\t{r.name}\t{r.source}\t{r.target}" for r in g.relations_sorted()]
    ax_lines = []
    for d in sorted(g.hierarchy):
        ax_lines += [f"{sub}\t{SUBCLASS_PRED}\t{sup}" for sub, sup in g.hierarchy[d]]
    for d in sorted(g.disjoint):
        ax_lines += [f"{a}\t{DISJOINT_PRED}\t{b}" for a, b in g.disjoint[d]]
    ax_lines += [f"{s}\t{r.name}\t{o}" for s, r, o in g.edges]
    return "\n".join(ax_lines) + "\n", "\n".join(dom_lines) + "\n"


# -- graph transforms ---------------------------------------------------------------


def add_reverse_edges(g: KnowledgeGraph) -> KnowledgeGraph:
    """Add (o, r_rev, s) for every edge (s, r, o) of a non-reverse relation.
    Idempotent: edges behave as a set and _rev relations are not re-reversed."""
    relations = {k: r for k, r in g.relations.items()}
    edges = list(g.edges)
    for s, r, o in g.edges:
        if r.is_reverse:
            continue
        rev = r.reversed_()
        relations.setdefault(rev.key, rev)
        edges.append((o, relations[rev.key], s))
    return KnowledgeGraph(
        g.domains, g.nodes, relations.values(), edges, g.hierarchy, g.disjoint
    )


def filter_rare_relations(g: KnowledgeGraph, min_count: int) -> KnowledgeGraph:
    """Drop all edges of relations with fewer than min_count edges.  Nodes,
    hierarchies, and relation declarations are unchanged."""
    if min_count < 1:
        raise GraphError("min_count must be >= 1")
    counts: dict[tuple, int] = {}
    for _, r, _ in g.edges:
        counts[r.key] = counts.get(r.key, 0) + 1
    edges = [e for e in g.edges if counts[e[1].key] >= min_count]
    return KnowledgeGraph(
        g.domains, g.nodes, g.relations.values(), edges, g.hierarchy, g.disjoint
    )


# -- fitness data --------------------------------------------------------------------


@dataclass(frozen=True)
class FitnessDataset:
    """Real-valued scores on unordered gene pairs.  Pairs are canonicalized to
    lexicographic order and deduplicated (last occurrence wins)."""

    records: tuple  # of (gene_a, gene_b, fitness) with gene_a < gene_b

    @staticmethod
    def from_records(records) -> "FitnessDataset":
        dedup: dict[tuple, float] = {}
        for a, b, y in records:
            if a == b:
                raise GraphError(f"fitness pair of a gene with itself: {a}")
            key = (a, b) if a < b else (b, a)
            dedup[key] = float(y)
        return FitnessDataset(tuple((a, b, y) for (a, b), y in dedup.items()))

    def genes(self) -> tuple:
        out = sorted({g for a, b, _ in self.records for g in (a, b)})
        return tuple(out)

    def restrict_to(self, gene_set) -> "FitnessDataset":
        keep = frozenset(gene_set)
        return FitnessDataset(
            tuple(r for r in self.records if r[0] in keep and r[1] in keep)
        )

    def check_against(self, g: KnowledgeGraph, gene_domain: str) -> None:
        members = set(g.classes_in_domain(gene_domain))
        for a, b, _ in self.records:
            for gene in (a, b):
                if gene not in members:
                    raise GraphError(f"fitness gene {gene} not in domain {gene_domain}")


def parse_fitness(text: str) -> FitnessDataset:
    records = []
    for ln, line in _lines(text):
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphError(f"fitness file line {ln}: expected 3 tab-separated fields")
        a, b, raw = parts
        try:
            y = float(raw)
        except ValueError:
            raise GraphError(f"fitness file line {ln}: bad fitness literal {raw!r}") from None
        if not np.isfinite(y) or y < 0:
            raise GraphError(f"fitness file line {ln}: fitness must be finite and >= 0")
        records.append((a, b, y))
    return FitnessDataset.from_records(records)


def serialize_fitness(d: FitnessDataset) -> str:
    return "\n".join(f"{a}\t{b}\t{y!r}" for a, b, y in d.records) + "\n"


def split_by_genes(d: FitnessDataset, folds: int, rng_seed: int) -> list:
    """Partition genes into `folds` disjoint sets; per fold, train pairs have
    both genes outside the held-out set and valid pairs both genes inside it.
    Mixed pairs are discarded."""
    if folds < 2:
        raise GraphError("folds must be >= 2")
    genes = list(d.genes())
    if len(genes) < folds:
        raise GraphError(f"cannot split {len(genes)} genes into {folds} folds")
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(genes))
    parts = np.array_split(order, folds)
    out = []
    for part in parts:
        valid_genes = {genes[i] for i in part}
        train_genes = {x for x in genes if x not in valid_genes}
        out.append((d.restrict_to(train_genes), d.restrict_to(valid_genes)))
    return out
