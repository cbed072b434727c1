import math

import numpy as np
import pytest

from boxkg import autodiff as ad
from boxkg import boxes as bx
from boxkg import kg
from boxkg import losses as ls


def box1(z, Z):
    return bx.Box(ad.Tensor(np.atleast_1d(np.asarray(z, float))),
                  ad.Tensor(np.atleast_1d(np.asarray(Z, float))))


# -- distance losses ---------------------------------------------------------------


def test_distance_pos_zero_iff_contained_hand_cases():
    assert ls.loss_distance_pos(box1(1, 2), box1(0, 5)).item() == 0.0
    assert ls.loss_distance_pos(box1(0, 4), box1(1, 2)).item() == pytest.approx(2.0)
    assert ls.loss_distance_pos(box1(0, 1), box1(3, 4)).item() == pytest.approx(3.0)


def test_distance_pos_zero_iff_containment_random():
    rng = np.random.default_rng(0)
    c = bx.make_box(rng.uniform(-2, 2, size=(10_000, 6)))
    d = bx.make_box(rng.uniform(-2, 2, size=(10_000, 6)))
    loss = ls.loss_distance_pos(c, d).data
    contained = bx.contains(d, c)
    np.testing.assert_array_equal(loss == 0.0, contained)


def test_distance_neg_hand_cases():
    assert ls.loss_distance_neg(box1(0, 1), box1(3, 4)).item() == 0.0
    assert ls.loss_distance_neg(box1(0, 2), box1(1, 5)).item() == pytest.approx(1.0)
    assert ls.loss_distance_neg(box1(0, 2), box1(0, 2)).item() == pytest.approx(2.0)


def test_distance_neg_zero_when_any_axis_separates():
    # overlap in dim 0, separation in dim 1: indicator kills the loss
    c = box1([0.0, 0.0], [2.0, 1.0])
    d = box1([1.0, 5.0], [3.0, 6.0])
    assert ls.loss_distance_neg(c, d).item() == 0.0
    assert bx.intersect(c, d) is None


def test_distance_losses_dimension_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        ls.loss_distance_pos(box1([0, 0], [1, 1]), box1([0], [1]))


def test_l1_norm_option():
    # per-dim violations 3 and 4: L2 gives 5, L1 gives 7
    c = box1([0.0, 0.0], [1.0, 1.0])
    d_far = box1([3.0, 4.0], [4.0, 5.0])
    assert ls.loss_distance_pos(c, d_far, norm="l2").item() == pytest.approx(5.0)
    assert ls.loss_distance_pos(c, d_far, norm="l1").item() == pytest.approx(7.0)


# -- overlap losses -----------------------------------------------------------------


def test_overlap_pos_identity_is_zero_hard():
    b = box1([0.0, 1.0], [2.0, 4.0])
    assert ls.loss_overlap_pos(b, b).item() == 0.0


def test_overlap_pos_half_contained_hard():
    got = ls.loss_overlap_pos(box1(0, 2), box1(1, 5)).item()
    assert got == pytest.approx(math.log(2.0), rel=1e-12)


def test_overlap_pos_disjoint_hard_is_infinite():
    assert math.isinf(ls.loss_overlap_pos(box1(0, 1), box1(2, 3)).item())


def test_overlap_pos_gumbel_finite_on_disjoint():
    got = ls.loss_overlap_pos(box1(0, 1), box1(2, 3), temp=0.25).item()
    assert math.isfinite(got) and got > 0


def test_overlap_neg_hand_cases():
    assert ls.loss_overlap_neg(box1(0, 1), box1(2, 3)).item() == 0.0
    assert ls.loss_overlap_neg(box1(0, 2), box1(1, 5)).item() == pytest.approx(math.log(2.0))
    b = box1([0.0], [2.0])
    assert ls.loss_overlap_neg(b, b).item() == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_overlap_pos_monotone_under_dilation_about_contained_center():
    # D generated to contain C's center so dilation about it only grows D
    rng = np.random.default_rng(1)
    for _ in range(100):
        c = bx.make_box(rng.uniform(-1.5, 1.5, size=4))
        center = (c.z.data + c.Z.data) / 2
        lo = center - rng.uniform(0.05, 1.0, size=2)
        hi = center + rng.uniform(0.05, 1.0, size=2)
        temp = rng.choice([None, 0.25])
        prev = math.inf
        for s in np.linspace(0.2, 3.0, 12):
            d = box1(center + s * (lo - center), center + s * (hi - center))
            cur = ls.loss_overlap_pos(c, d, temp=temp).item()
            assert cur <= prev + 1e-9
            prev = cur


# -- regularizers ---------------------------------------------------------------------


def test_reg_big_box_hand_values():
    assert ls.reg_big_box(box1([0, 0], [2, 3])).item() == pytest.approx(13.0)
    assert ls.reg_big_box(box1([5] * 4, [6] * 4)).item() == pytest.approx(4.0)
    tiny = box1([0.0], [1e-12])
    assert ls.reg_big_box(tiny).item() == pytest.approx(0.0, abs=1e-20)


def test_reg_small_box_hand_values():
    assert ls.reg_small_box(box1(0, 2), 1.0).item() == 0.0
    assert ls.reg_small_box(box1(0, 0.25), 1.0).item() == pytest.approx(3.0)
    assert ls.reg_small_box(box1(0, 1), 1.0).item() == 0.0


def test_reg_small_box_rejects_non_positive_side():
    crossed = bx.Box(ad.Tensor(np.array([1.0])), ad.Tensor(np.array([0.5])))
    with pytest.raises(ValueError, match="positive"):
        ls.reg_small_box(crossed, 1.0)


# -- shared properties ----------------------------------------------------------------


def test_losses_invariant_under_joint_dimension_permutation():
    rng = np.random.default_rng(2)
    for _ in range(50):
        lat_c = rng.uniform(-2, 2, size=8)
        lat_d = rng.uniform(-2, 2, size=8)
        perm = rng.permutation(4)
        permuted = lambda lat: np.concatenate([lat[:4][perm], lat[4:][perm]])
        c, d = bx.make_box(lat_c), bx.make_box(lat_d)
        cp, dp = bx.make_box(permuted(lat_c)), bx.make_box(permuted(lat_d))
        for fn in (
            lambda a, b: ls.loss_distance_pos(a, b),
            lambda a, b: ls.loss_distance_neg(a, b),
            lambda a, b: ls.loss_overlap_pos(a, b, temp=0.25),
            lambda a, b: ls.loss_overlap_neg(a, b, temp=0.25),
        ):
            assert fn(c, d).item() == pytest.approx(fn(cp, dp).item(), rel=1e-10)
        assert ls.reg_big_box(c).item() == pytest.approx(ls.reg_big_box(cp).item(), rel=1e-10)


def _loss_builders():
    return [
        ("distance_pos", lambda c, d: ls.loss_distance_pos(c, d)),
        ("distance_neg", lambda c, d: ls.loss_distance_neg(c, d)),
        ("overlap_pos_gumbel", lambda c, d: ls.loss_overlap_pos(c, d, temp=0.25)),
        ("overlap_neg_gumbel", lambda c, d: ls.loss_overlap_neg(c, d, temp=0.25)),
        ("reg_big", lambda c, d: ls.reg_big_box(c) + ls.reg_big_box(d)),
        ("reg_small", lambda c, d: ls.reg_small_box(c, 1.0) + ls.reg_small_box(d, 1.0)),
    ]


def test_loss_gradients_match_finite_differences():
    # step 1e-3, tolerance 1e-4, points rejected within 1e-2 of piecewise kinks
    rng = np.random.default_rng(3)
    for name, build in _loss_builders():
        accepted = 0
        while accepted < 100:
            lat = rng.uniform(-2.0, 2.0, size=(2, 6))

            def f(latents):
                c = bx.make_box(latents[0])
                d = bx.make_box(latents[1])
                return build(c, d)

            with ad.kink_watch() as w:
                f([ad.Tensor(lat[0]), ad.Tensor(lat[1])])
            if w.min_gap < 1e-2:
                continue
            err = ad.finite_diff_check(f, [lat[0], lat[1]], step=1e-3)
            assert err < 1e-4, f"{name}: {err}"
            accepted += 1


# -- aggregation ------------------------------------------------------------------------


def _domain_boxes(classes, latents):
    return ls.DomainBoxes(classes=tuple(classes), box=bx.make_box(ad.Tensor(latents)))


def _tiny_graph():
    dom = "c\tD1\nd\tD1\ne\tD1\n"
    ax = "c\tsubClassOf\td\n"
    return kg.parse_graph(ax, dom)


def test_semantic_total_zero_when_all_contained():
    g = _tiny_graph()
    w_one = 0.5413248546129181  # softplus = 1.0
    w_three = 2.8952103407129962  # softplus = 3.0
    latents = np.array(
        [
            [0.0, 0.0, w_one, w_one],  # c = [0,1]^2
            [-1.0, -1.0, w_three, w_three],  # d = [-1,2]^2, contains c
            [5.0, 5.0, 0.0, 0.0],  # e uninvolved
        ]
    )
    db = _domain_boxes(("c", "d", "e"), latents)
    w = ls.SemanticLossWeights(beta_neg=1.0)
    total = ls.semantic_loss_total([{"D1": db}], g, "distance", w)
    assert total.item() == 0.0


def test_semantic_total_single_pair_matches_direct_loss():
    g = _tiny_graph()
    latents = np.random.default_rng(4).uniform(-1, 1, size=(3, 4))
    db = _domain_boxes(("c", "d", "e"), latents)
    w = ls.SemanticLossWeights(beta_neg=0.0)
    total = ls.semantic_loss_total([{"D1": db}], g, "distance", w)
    c_box = bx.make_box(latents[0])
    d_box = bx.make_box(latents[1])
    assert total.item() == pytest.approx(ls.loss_distance_pos(c_box, d_box).item(), rel=1e-12)


def test_semantic_total_two_layers_doubles():
    g = _tiny_graph()
    latents = np.random.default_rng(5).uniform(-1, 1, size=(3, 4))
    db = _domain_boxes(("c", "d", "e"), latents)
    w = ls.SemanticLossWeights(beta_neg=0.3, gamma_random=1.0)
    rand = {"D1": [("c", "e")]}
    one = ls.semantic_loss_total([{"D1": db}], g, "distance", w, random_negatives=rand)
    two = ls.semantic_loss_total([{"D1": db}, {"D1": db}], g, "distance", w, random_negatives=rand)
    assert two.item() == pytest.approx(2 * one.item(), rel=1e-12)


def test_semantic_total_additive_over_domains_exactly():
    dom = "c\tD1\nd\tD1\nx\tD2\ny\tD2\n"
    ax = "c\tsubClassOf\td\nx\tsubClassOf\ty\n"
    g = kg.parse_graph(ax, dom)
    rng = np.random.default_rng(6)
    d1 = _domain_boxes(("c", "d"), rng.uniform(-1, 1, size=(2, 4)))
    d2 = _domain_boxes(("x", "y"), rng.uniform(-1, 1, size=(2, 4)))
    w = ls.SemanticLossWeights()
    joint = ls.semantic_loss_total([{"D1": d1, "D2": d2}], g, "distance", w)
    only1 = ls.semantic_loss_total([{"D1": d1, "D2": d2}], g, "distance", w, include_domains={"D1"})
    only2 = ls.semantic_loss_total([{"D1": d1, "D2": d2}], g, "distance", w, include_domains={"D2"})
    assert joint.item() == only1.item() + only2.item()


def test_semantic_total_layer0_exclusion_flag():
    g = _tiny_graph()
    latents = np.random.default_rng(7).uniform(-1, 1, size=(3, 4))
    db = _domain_boxes(("c", "d", "e"), latents)
    w = ls.SemanticLossWeights()
    both = ls.semantic_loss_total([{"D1": db}, {"D1": db}], g, "distance", w)
    upper = ls.semantic_loss_total([{"D1": db}, {"D1": db}], g, "distance", w, include_layer0=False)
    assert upper.item() == pytest.approx(both.item() / 2, rel=1e-12)


def test_semantic_total_missing_class_box_errors():
    g = _tiny_graph()
    db = _domain_boxes(("c", "e"), np.zeros((2, 4)))  # no box for d
    with pytest.raises(KeyError, match="missing box for class d"):
        ls.semantic_loss_total([{"D1": db}], g, "distance", ls.SemanticLossWeights())


def test_semantic_total_report_rows():
    g = _tiny_graph()
    latents = np.random.default_rng(8).uniform(-1, 1, size=(3, 4))
    db = _domain_boxes(("c", "d", "e"), latents)
    report = []
    ls.semantic_loss_total(
        [{"D1": db}], g, "overlap", ls.SemanticLossWeights(), temp=0.25, report=report
    )
    assert len(report) == 1
    row = report[0]
    assert (row.layer, row.domain) == (0, "D1")
    direct = ls.loss_overlap_pos(
        bx.make_box(latents[0]), bx.make_box(latents[1]), temp=0.25
    ).item()
    assert row.pos_per_class == pytest.approx(direct / 3)


def test_weights_validation():
    with pytest.raises(ValueError):
        ls.SemanticLossWeights(alpha=-0.1)
    with pytest.raises(ValueError):
        ls.SemanticLossWeights(l0=0.0)
