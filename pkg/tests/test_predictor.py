"""Pair combination, the regression head, fitness training, and R^2."""

import numpy as np
import pytest

import boxkg.autodiff as ad
from boxkg.autodiff import Tensor, finite_diff_check, kink_watch
from boxkg.gnn import HeteroGnnModel, SageModule, init_model
from boxkg.kg import DomainId, FitnessDataset, GraphError, KnowledgeGraph, Relation
from boxkg.losses import DivergenceError, SemanticLossWeights
from boxkg.predictor import (
    FitnessModel,
    PairCombiner,
    PredictionHead,
    TrainConfig,
    build_fitness_model,
    combine,
    fitness_objective,
    head_forward,
    init_head,
    predict_pair,
    predict_pairs,
    predict_triple,
    r_squared,
    train,
)


def isp(y):
    """Inverse softplus: the latent width parameter giving side length y."""
    return float(np.log(np.expm1(y)))


def graph(domains, nodes, relations, edges=(), hierarchy=None):
    return KnowledgeGraph(
        {d.name: d for d in domains}, nodes, relations, list(edges), hierarchy or {}, {}
    )


# -- combiners -------------------------------------------------------------------


def test_product_combiner():
    out = combine(np.array([1.0, 2.0]), np.array([3.0, 4.0]), PairCombiner("product"))
    assert np.array_equal(out.data, [3.0, 8.0])


def test_bilinear_identity_doubles_product():
    c = PairCombiner("bilinear", w=Tensor(np.eye(2)))
    out = combine(np.array([1.0, 2.0]), np.array([3.0, 4.0]), c)
    assert np.array_equal(out.data, [6.0, 16.0])


def test_bilinear_hand_matrix():
    c = PairCombiner("bilinear", w=Tensor(np.array([[0.0, 1.0], [0.0, 0.0]])))
    out = combine(np.array([1.0, 2.0]), np.array([3.0, 4.0]), c)
    # x1*(W x2) + x2*(W x1) with W picking the second coordinate
    assert np.array_equal(out.data, [10.0, 0.0])


def test_concatenation_keeps_argument_order():
    c = PairCombiner("concatenation")
    assert np.array_equal(combine(np.array([1.0]), np.array([2.0]), c).data, [1.0, 2.0])
    assert np.array_equal(combine(np.array([2.0]), np.array([1.0]), c).data, [2.0, 1.0])


def test_intersection_combiner_overlapping():
    x1 = np.array([0.0, isp(3.0)])  # box [0, 3]
    x2 = np.array([1.0, isp(3.0)])  # box [1, 4]
    out = combine(x1, x2, PairCombiner("intersection", temp=0.25))
    want_upper = 1.0 + 0.25 * (8.0 + np.log1p(np.exp(-8.0)))  # smoothed min(3,4)
    np.testing.assert_allclose(out.data, [1.0, want_upper], rtol=1e-15)


def test_intersection_combiner_empty_keeps_positive_width():
    x1 = np.array([0.0, isp(1.0)])  # box [0, 1]
    x2 = np.array([2.0, isp(1.0)])  # box [2, 3]
    out = combine(x1, x2, PairCombiner("intersection", temp=0.25))
    z, upper = out.data
    assert z == 2.0
    np.testing.assert_allclose(upper - z, 0.25 * np.log1p(np.exp(-4.0)), rtol=1e-13)
    assert upper > z


def test_combiner_validation():
    with pytest.raises(ValueError, match="method"):
        PairCombiner("average")
    with pytest.raises(ValueError, match="square"):
        combine(np.ones(2), np.ones(2), PairCombiner("bilinear", w=Tensor(np.ones((2, 3)))))
    with pytest.raises(ValueError, match="mixing"):
        combine(np.ones(2), np.ones(2), PairCombiner("bilinear"))
    with pytest.raises(ValueError, match="width"):
        combine(np.ones(2), np.ones(3), PairCombiner("product"))


def test_combiner_batched_rows():
    x1 = np.array([[1.0, 2.0], [5.0, 6.0]])
    x2 = np.array([[3.0, 4.0], [7.0, 8.0]])
    out = combine(x1, x2, PairCombiner("product"))
    assert np.array_equal(out.data, [[3.0, 8.0], [35.0, 48.0]])


# -- head ------------------------------------------------------------------------


def test_head_forward_hand():
    head = PredictionHead(
        [
            (Tensor(np.eye(2)), Tensor(np.zeros(2))),
            (Tensor(np.array([[1.0], [1.0]])), Tensor(np.array([0.5]))),
        ]
    )
    out = head_forward(head, Tensor(np.array([[1.0, -1.0]])))
    # relu(1, -1) = (1, 0), then 1 + 0 + 0.5
    assert np.array_equal(out.data, [1.5])


def test_head_final_width_must_be_one():
    with pytest.raises(ValueError, match="scalar"):
        PredictionHead([(Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))])
    with pytest.raises(ValueError, match="layer"):
        PredictionHead([])


def test_init_head_shapes():
    head = init_head(6, dims=(64, 1), seed=0)
    assert [w.shape for w, _ in head.layers] == [(6, 64), (64, 1)]
    assert [b.shape for _, b in head.layers] == [(64,), (1,)]
    again = init_head(6, dims=(64, 1), seed=0)
    assert np.array_equal(head.layers[0][0].data, again.layers[0][0].data)


# -- hand-built model end to end ----------------------------------------------


def hand_model(prior_rows, head_w, head_b, method="product"):
    r = Relation("r", "gene", "gene")
    names = tuple(sorted(f"g{i + 1}" for i in range(len(prior_rows))))
    g = graph(
        [DomainId("gene", 2, 2)], {n: "gene" for n in names}, [r]
    )
    gnn = HeteroGnnModel(
        {"gene": names},
        {"gene": Tensor(np.asarray(prior_rows, dtype=float), requires_grad=True)},
        [
            {
                r.key: SageModule(
                    r,
                    Tensor(np.eye(2), requires_grad=True),
                    Tensor(np.zeros((2, 2)), requires_grad=True),
                    Tensor(np.zeros(2), requires_grad=True),
                )
            }
        ],
    )
    head = PredictionHead([(Tensor(np.asarray(head_w, dtype=float), requires_grad=True),
                            Tensor(np.asarray(head_b, dtype=float), requires_grad=True))])
    return FitnessModel(gnn, PairCombiner(method), head, "gene"), g


def test_predict_pair_hand_value():
    # layer-1 features are relu(priors); product then linear head
    model, g = hand_model(
        [[1.5, 2.0], [0.5, 3.0], [1.0, 1.0]], [[2.0], [-1.0]], [1.0]
    )
    got = predict_pair(model, g, "g1", "g2")
    assert got == 2.0 * (1.5 * 0.5) - (2.0 * 3.0) + 1.0  # -3.5
    assert predict_pair(model, g, "g2", "g1") == got


def test_predict_pair_unknown_gene():
    model, g = hand_model([[1.0, 1.0]], [[1.0], [1.0]], [0.0])
    with pytest.raises(GraphError, match="nope"):
        predict_pair(model, g, "g1", "nope")


def test_predict_triple_hand_value():
    model, g = hand_model(
        [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], [[1.0], [1.0]], [0.5]
    )
    got = predict_triple(model, g, "g1", "g2", "g3")
    assert got == 15.0 + 48.0 + 0.5


def test_predict_triple_permutation_invariant():
    model, g = hand_model(
        [[1.1, 2.7], [0.3, 4.2], [5.5, 0.6]], [[1.3], [-0.7]], [0.2]
    )
    import itertools

    values = {
        predict_triple(model, g, *perm)
        for perm in itertools.permutations(["g1", "g2", "g3"])
    }
    assert len(values) == 1


def test_predict_triple_with_ones_equals_pair():
    model, g = hand_model(
        [[1.5, 2.0], [0.5, 3.0], [1.0, 1.0]], [[2.0], [-1.0]], [1.0]
    )
    assert predict_triple(model, g, "g1", "g2", "g3") == predict_pair(model, g, "g1", "g2")


def test_predict_triple_requires_product():
    model, g = hand_model([[1.0, 1.0]] * 3, [[1.0], [1.0]], [0.0], method="concatenation")
    model.head.layers[0] = (Tensor(np.ones((4, 1))), Tensor(np.zeros(1)))
    with pytest.raises(ValueError, match="product"):
        predict_triple(model, g, "g1", "g2", "g3")


# -- symmetry over random models -------------------------------------------------


def symmetric_fixture(method, seed):
    r = Relation("near", "gene", "gene")
    names = {f"g{i}": "gene" for i in range(6)}
    edges = [("g0", r, "g1"), ("g1", r, "g2"), ("g3", r, "g4"), ("g4", r, "g0")]
    g = graph([DomainId("gene", 4, 4)], names, [r], edges)
    model = build_fitness_model(
        g, "gene", depth=1, method=method, head_dims=(8, 1), seed=seed
    )
    return model, g


@pytest.mark.parametrize("method", ["product", "intersection", "bilinear"])
def test_pair_symmetry_random_models(method):
    model, g = symmetric_fixture(method, seed=3)
    rng = np.random.default_rng(0)
    genes = [f"g{i}" for i in range(6)]
    pairs = [tuple(rng.choice(genes, size=2, replace=False)) for _ in range(200)]
    fwd = predict_pairs(model, g, pairs).data
    rev = predict_pairs(model, g, [(b, a) for a, b in pairs]).data
    assert np.max(np.abs(fwd - rev)) <= (1e-12 if method == "bilinear" else 0.0)


def test_concatenation_is_order_dependent():
    model, g = symmetric_fixture("concatenation", seed=3)
    fwd = predict_pairs(model, g, [("g0", "g1"), ("g2", "g5")]).data
    rev = predict_pairs(model, g, [("g1", "g0"), ("g5", "g2")]).data
    assert np.any(fwd != rev)


# -- r squared -------------------------------------------------------------------


def test_r_squared_values():
    y = np.array([1.0, 2.0, 3.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full(3, 2.0)) == 0.0
    assert r_squared(y, np.array([1.0, 2.0, 4.0])) == 0.5


def test_r_squared_validation():
    with pytest.raises(ValueError, match="constant"):
        r_squared(np.ones(3), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError, match="length"):
        r_squared(np.ones(3), np.ones(4))
    with pytest.raises(ValueError, match="length"):
        r_squared(np.ones(1), np.ones(1))


# -- training --------------------------------------------------------------------


def training_fixture():
    """Two domains: genes plus a 3-class function hierarchy reached by
    annotation edges, so semantic terms have something to act on."""
    ann = Relation("annotated", "gene", "fn")
    ann_r = ann.reversed_()
    genes = {f"g{i}": "gene" for i in range(4)}
    fns = {"root": "fn", "fa": "fn", "fb": "fn"}
    edges = [
        ("g0", ann, "fa"),
        ("g1", ann, "fa"),
        ("g2", ann, "fb"),
        ("g3", ann, "fb"),
    ]
    edges += [(o, ann_r, s) for s, _, o in edges]
    g = KnowledgeGraph(
        {"gene": DomainId("gene", 4, 4), "fn": DomainId("fn", 4, 4)},
        genes | fns,
        [ann, ann_r],
        edges,
        {"fn": [("fa", "root"), ("fb", "root")]},
        {},
    )
    data = FitnessDataset.from_records(
        [
            ("g0", "g1", 0.9),
            ("g0", "g2", 0.3),
            ("g0", "g3", 0.35),
            ("g1", "g2", 0.25),
            ("g1", "g3", 0.3),
            ("g2", "g3", 0.85),
        ]
    )
    return g, data


def test_training_reduces_mse():
    g, data = training_fixture()
    model = build_fitness_model(g, "gene", depth=1, head_dims=(8, 1), seed=1)
    cfg = TrainConfig(
        epochs=150,
        lr=5e-3,
        weights=SemanticLossWeights(alpha=0.0, lambda_wd=0.0),
        seed=0,
    )
    _, metrics = train(model, g, data, cfg)
    assert metrics[-1].mse < 0.25 * metrics[0].mse


def test_alpha_zero_is_pure_mse():
    g, data = training_fixture()
    finals = []
    for kind in ("distance", "overlap"):
        model = build_fitness_model(g, "gene", depth=1, head_dims=(8, 1), seed=1)
        cfg = TrainConfig(
            epochs=10,
            lr=1e-3,
            weights=SemanticLossWeights(alpha=0.0, lambda_wd=0.0),
            loss_kind=kind,
            seed=0,
        )
        train(model, g, data, cfg)
        finals.append(model.head.layers[0][0].data.copy())
    assert np.array_equal(finals[0], finals[1])


def test_head_only_training_is_monotone():
    g, data = training_fixture()
    for seed in range(5):
        model = build_fitness_model(g, "gene", depth=1, head_dims=(8, 1), seed=seed)
        cfg = TrainConfig(
            epochs=60,
            lr=1e-3,
            weights=SemanticLossWeights(alpha=0.0, lambda_wd=0.0),
            freeze_gnn=True,
            seed=seed,
        )
        _, metrics = train(model, g, data, cfg)
        losses = [m.total for m in metrics]
        assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_semantic_loss_decreases_when_weighted():
    g, data = training_fixture()
    for seed in range(5):
        model = build_fitness_model(g, "gene", depth=1, head_dims=(8, 1), seed=seed)
        cfg = TrainConfig(
            epochs=120,
            lr=5e-3,
            weights=SemanticLossWeights(alpha=0.1, beta_neg=0.05, lambda_wd=0.0),
            seed=seed,
        )
        _, metrics = train(model, g, data, cfg)
        first = sum(r.pos_per_class for r in metrics[0].semantic_rows)
        last = sum(r.pos_per_class for r in metrics[-1].semantic_rows)
        assert last <= first


def test_semantic_report_skips_gene_domain_by_default():
    g, data = training_fixture()
    model = build_fitness_model(g, "gene", depth=1, head_dims=(8, 1), seed=2)
    cfg = TrainConfig(epochs=1, lr=1e-3, seed=0)
    _, metrics = train(model, g, data, cfg)
    domains = {r.domain for r in metrics[0].semantic_rows}
    assert domains == {"fn"}


def test_divergence_detected():
    g, data = training_fixture()
    model = build_fitness_model(g, "gene", depth=1, head_dims=(8, 1), seed=1)
    model.head.layers[0][0].data[:] = 1e200
    cfg = TrainConfig(epochs=3, lr=1e-3, seed=0)
    with np.errstate(over="ignore"), pytest.raises(DivergenceError, match="epoch 0"):
        train(model, g, data, cfg)


def test_batched_training_matches_determinism():
    g, data = training_fixture()
    runs = []
    for _ in range(2):
        model = build_fitness_model(g, "gene", depth=1, head_dims=(8, 1), seed=4)
        cfg = TrainConfig(epochs=5, lr=1e-3, batch_size=2, seed=7)
        train(model, g, data, cfg)
        runs.append(model.head.layers[0][0].data.copy())
    assert np.array_equal(runs[0], runs[1])


def test_train_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError, match="folds"):
        TrainConfig(folds=1)
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0.0)


def test_with_params_round_trip():
    g, _ = training_fixture()
    model = build_fitness_model(g, "gene", depth=1, method="bilinear", head_dims=(4, 1), seed=0)
    fresh = [Tensor(p.data * 2.0, requires_grad=True) for p in model.params()]
    rebuilt = model.with_params(fresh)
    assert rebuilt.params() == fresh
    assert rebuilt.combiner.method == "bilinear"
    with pytest.raises(ValueError, match="parameter"):
        model.with_params(fresh[:-1])


def test_objective_gradient_matches_finite_differences():
    g, data = training_fixture()
    template = build_fitness_model(g, "gene", depth=1, head_dims=(3, 1), seed=0)
    cfg = TrainConfig(
        epochs=1,
        lr=1e-3,
        weights=SemanticLossWeights(alpha=0.1, beta_neg=0.05, lambda_wd=0.01),
        seed=0,
    )
    pairs = [(a, b) for a, b, _ in data.records]
    y = np.array([y for _, _, y in data.records])
    shapes = [p.shape for p in template.params()]

    def scalar_f(ts):
        m = template.with_params(ts)
        total, _ = fitness_objective(m, g, pairs, y, cfg)
        return total

    rng = np.random.default_rng(21)
    accepted = 0
    for _ in range(60):
        if accepted == 3:
            break
        point = [rng.standard_normal(s) * 0.7 for s in shapes]
        with kink_watch() as watch:
            scalar_f([Tensor(a) for a in point])
        if watch.min_gap < 1e-2:
            continue
        assert finite_diff_check(scalar_f, point, step=1e-5) < 1e-4
        accepted += 1
    assert accepted == 3
