import math
import time

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from growth_reference import as_tuples, random_instance, reference_grow
from treecnn.growth import (
    NO_NODE,
    AllBranchesFull,
    ChildSummary,
    GrowthConfig,
    PlacementPlan,
    average_outputs,
    build_candidates,
    check_for_merge,
    compute_likelihood,
    grow,
    replay,
)


def leaves(*ids, can_deepen=True):
    return [ChildSummary(i, 0, True, can_deepen) for i in ids]


def summaries(children):
    return [ChildSummary(*c) for c in children]


# ----------------------------------------------------------- average_outputs


def test_average_single_image_is_the_slice():
    o = np.arange(6.0).reshape(2, 3, 1)
    np.testing.assert_array_equal(average_outputs(o), o[:, :, 0])


def test_average_two_images():
    assert average_outputs(np.array([[[1.0, 3.0]]]))[0, 0] == 2.0


def test_average_matches_triple_loop():
    o = np.random.default_rng(5).standard_normal((4, 6, 10))
    want = np.zeros((4, 6))
    for k in range(4):
        for m in range(6):
            s = 0.0
            for i in range(10):
                s += o[k, m, i]
            want[k, m] = s / 10
    assert np.array_equal(average_outputs(o), want)


@pytest.mark.parametrize("bad", [np.zeros((0, 1, 1)), np.zeros((2, 2)), np.array([[[np.nan]]])])
def test_average_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        average_outputs(bad)


# -------------------------------------------------------- compute_likelihood


def test_likelihood_examples():
    np.testing.assert_allclose(compute_likelihood([[0.0], [0.0]])[:, 0], [0.5, 0.5])
    np.testing.assert_allclose(compute_likelihood([[math.log(3)], [0.0]])[:, 0], [0.75, 0.25])
    out = compute_likelihood([[0.0], [0.0], [0.0]], [False, True, False])
    assert list(out[:, 0]) == [0.5, 0.0, 0.5]


def test_likelihood_all_masked():
    with pytest.raises(AllBranchesFull):
        compute_likelihood([[1.0], [2.0]], [True, True])


@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**16))
def test_likelihood_columns_sum_to_one(k, m, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random(k) < 0.4
    assume(not mask.all())
    lik = compute_likelihood(rng.standard_normal((k, m)) * 5, mask)
    assert np.all(lik >= 0) and np.all(lik[mask] == 0)
    np.testing.assert_allclose(lik.sum(axis=0), 1.0, atol=1e-6)


# ---------------------------------------------------------- build_candidates


def test_candidates_single_class():
    s = build_candidates([[0.2], [0.5], [0.3]], labels=[7])
    assert len(s) == 1
    assert s[0].label == 7 and s[0].value == (0.5, 0.3, 0.2) and s[0].nodes == (1, 2, 0)


def test_candidates_pad_short_columns():
    s = build_candidates([[0.6], [0.4]], node_ids=[11, 12])
    assert s[0].value == (0.6, 0.4, 0.0) and s[0].nodes == (11, 12, NO_NODE)


def test_candidates_label_breaks_ties():
    s = build_candidates([[0.5, 0.5], [0.5, 0.5]], labels=[9, 3])
    assert [c.label for c in s] == [3, 9]


def _sort_everything(lik, labels, ids):
    rows = []
    for j, lab in enumerate(labels):
        pairs = sorted(((-lik[r, j], r) for r in range(lik.shape[0])))
        top = [(-v, ids[r]) for v, r in pairs[:3]] + [(0.0, NO_NODE)] * 3
        rows.append((tuple(v for v, _ in top[:3]), tuple(n for _, n in top[:3]), lab))
    rows.sort(key=lambda r: (-r[0][0], r[2]))
    return rows


@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 2**16), st.booleans())
def test_candidates_match_sort_everything(k, m, seed, quantise):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 3, (k, m)) / 2.0 if quantise else rng.random((k, m))
    lik = raw / np.maximum(raw.sum(axis=0), 1e-12)
    labels = [int(x) for x in rng.permutation(50)[:m]]
    ids = [100 + r for r in range(k)]
    got = [(c.value, c.nodes, c.label) for c in build_candidates(lik, labels, ids)]
    assert got == _sort_everything(lik, labels, ids)
    assert all(c[0][0] >= c[0][1] >= c[0][2] for c in got)


# ----------------------------------------------------------- check_for_merge


def test_check_for_merge_examples():
    leaf = ChildSummary(1)
    assert not check_for_merge(ChildSummary(0, 2, False), ChildSummary(1, 2, False), 5)
    assert not check_for_merge(ChildSummary(0, 4, False), leaf, 5)
    assert check_for_merge(ChildSummary(0, 3, False), leaf, 5)
    assert check_for_merge(ChildSummary(0), leaf, 5)
    assert not check_for_merge(ChildSummary(0, can_deepen=False), leaf, 5)
    assert not check_for_merge(ChildSummary(0), None, 5)


# ---------------------------------------------------------------------- grow

CFG = GrowthConfig(alpha=0.1, beta=0.1, max_children=5)


def test_close_top_two_merges():
    children = [ChildSummary(10, 2, False), ChildSummary(11), ChildSummary(12)]
    plan = grow(children, [[0.48], [0.45], [0.05]], CFG, labels=[6])
    a = plan.actions[0]
    assert (a.kind, a.keep, a.absorb) == ("merge", 10, 11)


def test_no_clear_winner_makes_new_leaf():
    plan = grow(leaves(1, 2, 3), [[0.34], [0.33], [0.33]], CFG, labels=[6])
    assert plan.actions[0].kind == "new-leaf"


def test_two_children_alpha_zero_always_adds():
    cfg = GrowthConfig(alpha=0.0, beta=1.0, max_children=10)
    plan = grow([ChildSummary(1, 3, False), ChildSummary(2, 3, False)], [[0.6], [0.4]], cfg, labels=[2])
    assert (plan.actions[0].kind, plan.actions[0].node) == ("add", 1)


@given(st.lists(st.floats(0.001, 0.999), min_size=1, max_size=8), st.integers(0, 100))
def test_two_children_alpha_zero_property(col, seed):
    assume(all(abs(p - 0.5) > 1e-9 for p in col))
    lik = np.array([col, [1 - p for p in col]])
    cfg = GrowthConfig(alpha=0.0, beta=1.0, max_children=100, seed=seed)
    plan = grow([ChildSummary(1, 2, False), ChildSummary(2, 2, False)], lik, cfg)
    for a in plan.actions:
        assert a.kind == "add"
        assert a.node == (1 if col[a.cls] > 0.5 else 2)


def test_toy_two_stage_example():
    # stage 1: C4 and C5 resemble leaves C1 and C2, C6 resembles nothing
    root = leaves(1, 2, 3)
    lik = np.array([[0.80, 0.10, 0.34], [0.10, 0.80, 0.33], [0.10, 0.10, 0.33]])
    plan = grow(root, lik, CFG, labels=[4, 5, 6])
    assert as_tuples(plan) == [("add", 4, 1), ("add", 5, 2), ("new-leaf", 6)]
    after = replay(root, plan, CFG.max_children)
    assert [(c.node_id, c.n_children) for c in after] == [(1, 2), (2, 2), (3, 0), (-2, 0)]
    # stage 2: C7 and C8 both clearly belong under B1
    plan2 = grow(after, np.array([[0.7, 0.6], [0.1, 0.2], [0.1, 0.1], [0.1, 0.1]]), CFG, labels=[7, 8])
    assert as_tuples(plan2) == [("add", 7, 1), ("add", 8, 1)]


def test_full_children_are_masked_then_new_leaves():
    children = [ChildSummary(1, 4, False), ChildSummary(2, 5, False)]
    plan = grow(children, [[0.9, 0.9, 0.9], [0.1, 0.1, 0.1]], CFG, labels=[7, 8, 9])
    assert as_tuples(plan) == [("add", 7, 1), ("new-leaf", 8), ("new-leaf", 9)]
    assert plan.events


def test_leaf_at_depth_limit_is_full():
    plan = grow(leaves(1, 2, can_deepen=False), [[0.9], [0.1]], CFG, labels=[5])
    assert as_tuples(plan) == [("new-leaf", 5)]


def test_merge_refused_when_only_two_children():
    plan = grow(leaves(1, 2), [[0.5], [0.5]], GrowthConfig(0.1, 0.0, 5), labels=[9])
    assert plan.actions[0].kind == "add"


def test_grow_input_errors():
    with pytest.raises(ValueError):
        grow(leaves(1, 2), [[1.0]], CFG)
    with pytest.raises(ValueError):
        grow(leaves(1), [[0.5, 0.5]], CFG, labels=[3, 3])


def test_plan_json_round_trip():
    plan = grow(leaves(1, 2, 3), [[0.48, 0.9], [0.45, 0.05], [0.07, 0.05]], GrowthConfig(0.1, 0.1, 5), labels=[4, 5])
    back = PlacementPlan.from_dict(plan.to_dict())
    assert back == plan


# ---------------------------------------------------------------- properties


@given(st.integers(0, 2**32 - 1))
def test_plan_invariants(seed):
    rng = np.random.default_rng(seed)
    children, L, alpha, beta, maxc, labels = random_instance(rng)
    cfg = GrowthConfig(alpha, beta, maxc, seed=seed)
    kids = summaries(children)
    plan = grow(kids, L, cfg, labels=labels)
    assert sorted(plan.classes()) == sorted(labels)
    assert plan == grow(kids, L, cfg, labels=labels)
    after = replay(kids, plan, maxc)  # raises when a branch overflows
    assert len(after) >= 1


@given(st.integers(0, 2**32 - 1))
def test_masking_is_monotone(seed):
    rng = np.random.default_rng(seed)
    children, L, alpha, beta, maxc, labels = random_instance(rng)
    kids = summaries(children)
    plan = grow(kids, L, GrowthConfig(alpha, beta, maxc, seed=seed), labels=labels)
    state = {c.node_id: c for c in kids}
    full = {c.node_id for c in kids if (c.is_leaf and not c.can_deepen) or (not c.is_leaf and c.n_children >= maxc)}
    for a in plan.actions:
        targets = [t for t in (a.node, a.keep, a.absorb) if t is not None]
        assert not full & set(targets), (a, full)
        if a.kind == "new-leaf":
            continue
        step = PlacementPlan([a])
        for c in replay([state[t] for t in targets], step):
            state[c.node_id] = c
            if c.n_children >= maxc:
                full.add(c.node_id)
        if a.kind == "merge":
            full.add(a.absorb)


@given(
    st.integers(1, 6),
    st.integers(1, 8),
    st.integers(-8, 8),
    st.integers(0, 2**16),
    st.sampled_from([0.0, 0.1, 0.25]),
    st.sampled_from([0.0, 0.1, 0.25]),
)
def test_plan_is_shift_invariant(k, m, c, seed, alpha, beta):
    rng = np.random.default_rng(seed)
    # quarter-grid values keep the max-subtracted softmax inputs exact
    avg = rng.integers(-8, 9, (k, m)) / 4.0
    shifted = avg.copy()
    col = rng.integers(0, m)
    shifted[:, col] += c
    kids = summaries([(10 + i, 2, False, True) for i in range(k)])
    cfg = GrowthConfig(alpha, beta, 5, seed=seed)
    a = grow(kids, compute_likelihood(avg), cfg)
    b = grow(kids, compute_likelihood(shifted), cfg)
    assert a == b


def run_oracle_comparison(n=1000, seed=2024):
    """Compare ``grow`` with the reference on ``n`` random instances.

    Returns ``(mismatches, instances_with_merge, seconds)``.
    """
    rng = np.random.default_rng(seed)
    mismatches, merges = [], 0
    t0 = time.perf_counter()
    for i in range(n):
        children, L, alpha, beta, maxc, labels = random_instance(rng)
        # I <= 5 probe images per class feed the averaged outputs
        images = int(rng.integers(1, 6))
        o = np.repeat(np.log(L)[:, :, None], images, axis=2)
        if rng.random() < 0.5:  # the other half keeps exact ties
            o = o + rng.standard_normal(o.shape) * 0.5
        lik = compute_likelihood(average_outputs(o))
        cfg = GrowthConfig(alpha, beta, maxc, seed=i)
        got = as_tuples(grow(summaries(children), lik, cfg, labels=labels))
        want = reference_grow(children, lik, alpha, beta, maxc, labels, seed=i)
        merges += any(a[0] == "merge" for a in got)
        if got != want:
            mismatches.append((i, got, want))
    return mismatches, merges, time.perf_counter() - t0


def test_matches_reference_on_random_instances():
    mismatches, merges, seconds = run_oracle_comparison()
    assert not mismatches, mismatches[:3]
    assert merges > 0  # the merge branch is exercised
    assert seconds < 30
