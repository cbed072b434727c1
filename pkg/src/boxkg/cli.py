"""Command line entry points: synthetic data, training, attribution, link
evaluation, and box export.

All commands accept --config (a JSON run configuration), --seed, --jobs, and
--output; flag values override the corresponding config keys.  Exit codes:
0 success, 2 configuration error, 3 data error (unreadable or inconsistent
inputs), 4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .attribution import (
    accumulate_pair_importances,
    export_importances,
    filter_importances,
)
from .boxes import make_box
from .checkpoint import (
    CheckpointError,
    checkpoint_for_fitness,
    checkpoint_for_gnn,
    checkpoint_for_priors,
    load_checkpoint,
    model_from_checkpoint,
    priors_from_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_config
from .gnn import HeteroGnnModel, gnn_forward, init_model
from .kg import (
    GraphError,
    KnowledgeGraph,
    parse_fitness,
    parse_graph,
    serialize_fitness,
    serialize_graph,
    split_by_genes,
)
from .linkeval import (
    evaluate_revisions,
    results_lines,
    split_edges_stratified,
    summary_table,
)
from .losses import DivergenceError, SemanticLossWeights
from .predictor import (
    FitnessModel,
    TrainConfig,
    build_fitness_model,
    predict_pairs,
    r_squared,
    train,
)
from .synthetic import fitness_benchmark, hierarchy_demo_graph
from .training import train_joint, train_priors, with_disjointness

F = "%.17g"


# -- shared plumbing -----------------------------------------------------------


def _read_text(path: str, what: str) -> str:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read {what} {path}: {e.strerror}") from None


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _out_dir(cfg: RunConfig) -> str:
    out = cfg.paths.output
    os.makedirs(out, exist_ok=True)
    return out


def _load_graph(cfg: RunConfig) -> KnowledgeGraph:
    if cfg.paths.graph is None or cfg.paths.domains is None:
        raise ConfigError("paths.graph and paths.domains are required")
    g = parse_graph(
        _read_text(cfg.paths.graph, "axiom file"),
        _read_text(cfg.paths.domains, "domain file"),
    )
    if cfg.dims:
        for name in cfg.dims:
            if name not in g.domains:
                raise ConfigError(f"dims: unknown domain {name!r}")
        g = g.with_domain_dims({d: tuple(v) for d, v in cfg.dims.items()})
    return g


def _load_fitness(cfg: RunConfig):
    if cfg.paths.fitness is None:
        raise ConfigError("paths.fitness is required")
    return parse_fitness(_read_text(cfg.paths.fitness, "fitness file"))


def _load_prior_arrays(g: KnowledgeGraph, path: str) -> dict:
    """Prior latents from a priors checkpoint, validated against the graph's
    class lists so every row lands on the class it was trained for."""
    stored = priors_from_checkpoint(load_checkpoint(path))
    out = {}
    for domain, (classes, latents) in stored.items():
        if domain not in g.domains:
            raise CheckpointError(f"priors checkpoint covers unknown domain {domain!r}")
        expected = list(g.classes_in_domain(domain))
        if classes != expected:
            raise CheckpointError(
                f"priors checkpoint classes for domain {domain!r} do not match the graph"
            )
        out[domain] = latents
    return out


def _check_model_graph(gnn: HeteroGnnModel, g: KnowledgeGraph) -> None:
    expected = {d: g.classes_in_domain(d) for d in g.domains}
    got = {d: tuple(cs) for d, cs in gnn.classes.items()}
    if got != expected:
        raise CheckpointError("checkpoint class lists do not match the graph")


def _load_model(args, g: KnowledgeGraph):
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    gnn = model.gnn if isinstance(model, FitnessModel) else model
    _check_model_graph(gnn, g)
    return model


# -- gen-synthetic ---------------------------------------------------------------


def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    sec = cfg.synthetic
    paths = {
        "graph": os.path.join(out, "axioms.txt"),
        "domains": os.path.join(out, "domains.txt"),
        "output": out,
    }
    if sec.preset == "hierarchy":
        g = hierarchy_demo_graph(
            seed=cfg.seed,
            dim_prior=sec.dim_prior if sec.dim_prior is not None else 4,
            dim_gnn=sec.dim_gnn if sec.dim_gnn is not None else 4,
        )
        dataset = None
    else:
        g, dataset = fitness_benchmark(
            seed=cfg.seed,
            n_genes=sec.n_genes,
            dim_prior=sec.dim_prior if sec.dim_prior is not None else 8,
            dim_gnn=sec.dim_gnn if sec.dim_gnn is not None else 16,
        )
        paths["fitness"] = os.path.join(out, "fitness.tsv")
        _write_text(paths["fitness"], serialize_fitness(dataset))
    axioms, domains = serialize_graph(g)
    _write_text(paths["graph"], axioms)
    _write_text(paths["domains"], domains)

    # a ready-to-run config: the domain file format does not carry embedding
    # dims, so they ride along here
    emitted = {
        "paths": paths,
        "seed": cfg.seed,
        "dims": {d: [g.domains[d].dim_prior, g.domains[d].dim_gnn] for d in sorted(g.domains)},
    }
    _write_text(
        os.path.join(out, "config.json"),
        json.dumps(emitted, indent=2, sort_keys=True) + "\n",
    )
    n_pairs = len(dataset.records) if dataset is not None else 0
    print(
        f"wrote {sec.preset} graph: {len(g.nodes)} classes, "
        f"{len(g.edges)} edges, {n_pairs} fitness pairs -> {out}"
    )
    return 0


# -- train-priors -----------------------------------------------------------------


def cmd_train_priors(args, cfg: RunConfig) -> int:
    g = _load_graph(cfg)
    if cfg.priors.domains is not None:
        domains = cfg.priors.domains
        for d in domains:
            if d not in g.domains:
                raise ConfigError(f"priors.domains: unknown domain {d!r}")
    else:
        # flat multi-class domains (e.g. genes) have no subsumption signal to
        # train on; they keep their random initialization downstream
        domains = [
            d
            for d in sorted(g.domains)
            if g.hierarchy.get(d) or len(g.classes_in_domain(d)) == 1
        ]
        if not domains:
            raise GraphError("no domain has hierarchy edges to train on")
    out = _out_dir(cfg)

    results = [train_priors(g, d, cfg=cfg.priors, seed=cfg.seed) for d in domains]

    lines = ["domain\tepoch\ttotal\tpos_per_class\tneg_per_class"]
    for res in results:
        for ep in res.history:
            lines.append(
                "%s\t%d\t%s\t%s\t%s"
                % (res.domain, ep.epoch, F % ep.total, F % ep.pos_per_class, F % ep.neg_per_class)
            )
    _write_text(os.path.join(out, "priors_metrics.tsv"), "\n".join(lines) + "\n")

    final = {res.domain: res.history[-1].total for res in results}
    env = checkpoint_for_priors(
        results,
        config=cfg.snapshot(),
        metadata={"epochs_completed": cfg.priors.epochs, "final_losses": final},
    )
    save_checkpoint(os.path.join(out, "priors.json"), env)
    for res in results:
        print(f"domain {res.domain}: final loss {final[res.domain]:.6g}")
    return 0


# -- train-joint -------------------------------------------------------------------


def cmd_train_joint(args, cfg: RunConfig) -> int:
    g = _load_graph(cfg)
    sec = cfg.joint
    if sec.disjointness:
        g = with_disjointness(g, {d: [tuple(p) for p in ps] for d, ps in sec.disjointness.items()})
    if sec.holdout_test_edges:
        split_seed = cfg.linkeval.split_seed if cfg.linkeval.split_seed is not None else cfg.seed
        g, _ = split_edges_stratified(g, cfg.linkeval.test_fraction, split_seed)
    priors = None
    if sec.priors_checkpoint is not None:
        priors = _load_prior_arrays(g, sec.priors_checkpoint)
    model = init_model(g, depth=sec.depth, seed=cfg.seed, priors=priors)
    model, history = train_joint(g, model, cfg=sec, kind=cfg.mode, seed=cfg.seed)
    out = _out_dir(cfg)

    lines = ["epoch\ttotal\tlr\tmean_pos\tmean_neg"]
    for ep in history:
        pos = np.mean([r.pos_per_class for r in ep.rows]) if ep.rows else float("nan")
        neg = np.mean([r.neg_per_class for r in ep.rows]) if ep.rows else float("nan")
        lines.append(
            "%d\t%s\t%s\t%s\t%s" % (ep.epoch, F % ep.total, F % ep.lr, F % pos, F % neg)
        )
    _write_text(os.path.join(out, "joint_metrics.tsv"), "\n".join(lines) + "\n")

    env = checkpoint_for_gnn(
        model,
        config=cfg.snapshot(),
        metadata={
            "epochs_completed": sec.epochs,
            "final_losses": {"total": history[-1].total},
        },
    )
    save_checkpoint(os.path.join(out, "joint.json"), env)
    print(f"joint training done: final loss {history[-1].total:.6g}")
    return 0


# -- train-fitness ------------------------------------------------------------------


def _fitness_train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    sec = cfg.fitness
    return TrainConfig(
        epochs=sec.epochs,
        lr=sec.lr,
        weights=SemanticLossWeights(
            alpha=sec.alpha,
            beta_neg=sec.beta_neg,
            gamma_random=sec.gamma_random,
            lambda_wd=sec.lambda_wd,
            lambda_small=sec.lambda_small,
            l0=sec.l0,
        ),
        loss_kind=cfg.mode,
        folds=sec.folds,
        seed=seed,
        batch_size=sec.batch_size,
        temp=sec.temp if cfg.mode == "overlap" else None,
        norm=sec.norm,
        exclude_gene_domain=sec.exclude_gene_domain,
        include_layer0=sec.include_layer0,
        freeze_gnn=sec.freeze_gnn,
        fine_tune_priors=sec.fine_tune_priors,
    )


def _build_for_fitness(cfg: RunConfig, g: KnowledgeGraph, priors, seed: int) -> FitnessModel:
    sec = cfg.fitness
    return build_fitness_model(
        g,
        sec.gene_domain,
        depth=sec.depth,
        method=sec.combiner,
        head_dims=tuple(sec.head_dims),
        seed=seed,
        priors=priors,
        temp=sec.temp,
    )


def cmd_train_fitness(args, cfg: RunConfig) -> int:
    g = _load_graph(cfg)
    dataset = _load_fitness(cfg)
    sec = cfg.fitness
    priors = None
    if sec.priors_checkpoint is not None:
        priors = _load_prior_arrays(g, sec.priors_checkpoint)
    folds = split_by_genes(dataset, sec.folds, cfg.seed)

    def run_fold(item):
        i, (tr, va) = item
        if len(va.records) < 2:
            raise GraphError(f"fold {i}: too few held-out pairs to score")
        model = _build_for_fitness(cfg, g, priors, cfg.seed + i)
        model, metrics = train(model, g, tr, _fitness_train_config(cfg, cfg.seed + i))
        y_true = np.array([y for _, _, y in va.records])
        preds = predict_pairs(model, g, [(a, b) for a, b, _ in va.records]).data
        try:
            r2 = r_squared(y_true, preds)
        except ValueError as e:
            raise GraphError(f"fold {i}: {e}") from None
        return i, metrics, va.records, preds, r2

    items = list(enumerate(folds))
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            fold_runs = list(pool.map(run_fold, items))
    else:
        fold_runs = [run_fold(item) for item in items]

    out = _out_dir(cfg)
    metric_lines = ["fold\tepoch\ttotal\tmse"]
    pred_lines = ["gene_a\tgene_b\ty_true\ty_pred"]
    r2s = []
    for i, metrics, records, preds, r2 in fold_runs:
        r2s.append(r2)
        for m in metrics:
            metric_lines.append("%d\t%d\t%s\t%s" % (i, m.epoch, F % m.total, F % m.mse))
        for (a, b, y), p in zip(records, preds):
            pred_lines.append("%s\t%s\t%s\t%s" % (a, b, F % y, F % p))
    _write_text(os.path.join(out, "fitness_metrics.tsv"), "\n".join(metric_lines) + "\n")
    _write_text(os.path.join(out, "predictions.tsv"), "\n".join(pred_lines) + "\n")

    mean_r2 = float(np.mean(r2s))
    sd_r2 = float(np.std(r2s, ddof=1))
    summary = ["fold\tr2\tr2_sd"]
    summary += ["%d\t%s\tnan" % (i, F % r2) for i, r2 in enumerate(r2s)]
    summary.append("all\t%s\t%s" % (F % mean_r2, F % sd_r2))
    _write_text(os.path.join(out, "fitness_summary.tsv"), "\n".join(summary) + "\n")

    # the shipped model trains on every labeled pair; the cross-validation
    # above is the honest estimate of how well that model generalizes
    model = _build_for_fitness(cfg, g, priors, cfg.seed)
    model, metrics = train(model, g, dataset, _fitness_train_config(cfg, cfg.seed))
    env = checkpoint_for_fitness(
        model,
        config=cfg.snapshot(),
        metadata={
            "epochs_completed": sec.epochs,
            "final_losses": {"total": metrics[-1].total, "mse": metrics[-1].mse},
            "fold_r2": r2s,
            "mean_r2": mean_r2,
            "sd_r2": sd_r2,
        },
    )
    save_checkpoint(os.path.join(out, "fitness.json"), env)
    for i, r2 in enumerate(r2s):
        print(f"fold {i}: r2 {r2:.4f}")
    print(f"mean r2 {mean_r2:.4f} (sd {sd_r2:.4f})")
    return 0


# -- attribute ------------------------------------------------------------------------


def cmd_attribute(args, cfg: RunConfig) -> int:
    g = _load_graph(cfg)
    model = _load_model(args, g)
    if not isinstance(model, FitnessModel):
        raise CheckpointError("attribution needs a fitness checkpoint")
    sec = cfg.attribution
    if sec.pairs is not None:
        pairs = [tuple(p) for p in sec.pairs]
        for p in pairs:
            if len(p) != 2:
                raise ConfigError("attribution.pairs entries must be [gene_a, gene_b]")
    else:
        pairs = [(a, b) for a, b, _ in _load_fitness(cfg).records]
    table = accumulate_pair_importances(model, g, pairs)
    if sec.allow_predicates or sec.allow_superclasses:
        table = filter_importances(
            table, set(sec.allow_predicates), set(sec.allow_superclasses), g
        )
    out = _out_dir(cfg)
    text = export_importances(table)
    _write_text(os.path.join(out, "importances.tsv"), text)
    print(f"attributed {len(pairs)} pairs: {len(text.splitlines()) - 1} edge-pair scores")
    return 0


# -- link-eval ---------------------------------------------------------------------


def cmd_link_eval(args, cfg: RunConfig) -> int:
    g = _load_graph(cfg)
    model = _load_model(args, g)
    sec = cfg.linkeval
    split_seed = sec.split_seed if sec.split_seed is not None else cfg.seed
    g_train, test_edges = split_edges_stratified(g, sec.test_fraction, split_seed)
    results = evaluate_revisions(
        model,
        g_train,
        test_edges,
        seed=cfg.seed,
        kinds=tuple(sec.kinds),
        mode=sec.displacement_mode,
    )
    out = _out_dir(cfg)
    _write_text(os.path.join(out, "linkeval_results.tsv"), results_lines(results))
    summary = summary_table(results)
    _write_text(os.path.join(out, "linkeval_summary.tsv"), summary)
    sys.stdout.write(summary)
    return 0


# -- export-boxes -------------------------------------------------------------------


def cmd_export_boxes(args, cfg: RunConfig) -> int:
    g = _load_graph(cfg)
    model = _load_model(args, g)
    gnn = model.gnn if isinstance(model, FitnessModel) else model
    layers = gnn_forward(gnn, g)
    lines = ["class\tdomain\tlayer\tz\tZ"]
    n_rows = 0
    for domain in sorted(g.domains):
        boxes = [make_box(layer[domain]) for layer in layers]
        for i, cls in enumerate(g.classes_in_domain(domain)):
            for li, box in enumerate(boxes):
                z = ",".join(F % v for v in box.z.data[i])
                upper = ",".join(F % v for v in box.Z.data[i])
                lines.append("%s\t%s\t%d\t%s\t%s" % (cls, domain, li, z, upper))
                n_rows += 1
    out = _out_dir(cfg)
    _write_text(os.path.join(out, "boxes.tsv"), "\n".join(lines) + "\n")
    print(f"wrote {n_rows} box rows ({len(layers)} layers) -> {out}")
    return 0


def parse_box_export(text: str) -> dict:
    """Inverse of the box export: (class, domain, layer) -> (z, Z) arrays."""
    out = {}
    lines = text.splitlines()
    if not lines or lines[0] != "class\tdomain\tlayer\tz\tZ":
        raise ValueError("not a box export file")
    for line in lines[1:]:
        cls, domain, layer, z, upper = line.split("\t")
        out[(cls, domain, int(layer))] = (
            np.array([float(v) for v in z.split(",")]),
            np.array([float(v) for v in upper.split(",")]),
        )
    return out


# -- entry point --------------------------------------------------------------------

_COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, False),
    "train-priors": (cmd_train_priors, False),
    "train-joint": (cmd_train_joint, False),
    "train-fitness": (cmd_train_fitness, False),
    "attribute": (cmd_attribute, True),
    "link-eval": (cmd_link_eval, True),
    "export-boxes": (cmd_export_boxes, True),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boxkg",
        description="Box-embedding knowledge graph training and analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, needs_checkpoint) in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker threads for folds")
        p.add_argument("--output", default=None, help="override output directory")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint to load")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn, _ = _COMMANDS[args.command]
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output is not None:
            cfg.paths.output = args.output
        return fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (GraphError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
