import copy

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treecnn import trainer
from treecnn.data import DatasetSplit
from treecnn.growth import GrowthConfig
from treecnn.nn import zoo
from treecnn.nn.network import TrainingSchedule
from treecnn.nn.spec import LayerSpec, NetworkSpec, count_weights
from treecnn.stubs import ConstantClassifier, encode_labels, oracle_factory
from treecnn.tree import Tree

SHAPE = (1, 8, 8)
QUICK = TrainingSchedule(epochs=2, batch_size=16, lr=0.05, flip_prob=0.0)


def templates(n_classes, shape=SHAPE, seed=0):
    return np.random.default_rng(seed).standard_normal((n_classes,) + shape).astype(np.float32)


def blobs(classes, per_class, tag="train", shape=SHAPE, seed=0):
    """Each class is a fixed random template plus small noise."""
    base = templates(10, shape)
    rng = np.random.default_rng(seed + (tag == "test"))
    labels = np.repeat(np.asarray(classes), per_class)
    images = base[labels] + 0.3 * rng.standard_normal((len(labels),) + shape).astype(np.float32)
    return DatasetSplit(images, labels, tag)


def tiny_factory(seed=0):
    return trainer.NodeFactory(SHAPE, root_shrink=8, branch_shrink=8, root_fc_shrink=16, branch_fc_shrink=16, seed=seed)


def tiny_tree(groups, max_children=10, seed=0):
    cfg = GrowthConfig(alpha=0.0, beta=1.0, max_children=max_children)
    tree = trainer.build_initial_tree(groups, tiny_factory(seed), cfg, seed=seed)
    classes = [c for g in groups for c in g]
    trainer.train_initial_tree(tree, blobs(classes, 20), blobs(classes, 5, "test"), QUICK, QUICK, seed)
    return tree, cfg


def route_by_branch(monkeypatch, tree, placement):
    """Make probing report a clear preference for the branch named in ``placement``."""
    real = trainer.probe_node

    def fake(t, node_id, samples):
        if node_id != t.root:
            return real(t, node_id, samples)
        k = len(t.node(node_id).children)
        out = np.zeros((k, len(samples), len(samples[0])))
        for m, s in enumerate(samples):
            cls = int(round(float(s[0, 0, 0, 0])))
            out[placement[cls], m, :] = 5.0
        return out

    monkeypatch.setattr(trainer, "probe_node", fake)


def tagged(classes, per_class, tag="train"):
    """Split whose pixel [0,0,0] carries the label, for the patched probe."""
    split = blobs(classes, per_class, tag)
    split.images[:, 0, 0, 0] = split.labels
    return split


# ----------------------------------------------------------------- probing


def test_probe_constant_stub():
    tree = Tree.flat([0, 1, 2])
    tree.nodes[tree.root].classifier = ConstantClassifier([1.0, 2.0, 3.0])
    out = trainer.probe_root(tree, [np.zeros((5, 1)), np.zeros((5, 1))])
    assert out.shape == (3, 2, 5)
    assert np.all(out[:, 0, 0][:, None, None] == out)


def test_probe_single_image_is_one_forward_pass():
    tree, _ = tiny_tree([[0, 1], [2, 3]])
    x = blobs([4], 1).images
    out = trainer.probe_root(tree, [x])
    assert out.shape == (2, 1, 1)
    np.testing.assert_array_equal(out[:, 0, 0], tree.nodes[tree.root].classifier.predict_logits(x)[0])


def test_probe_shape_fifty_per_class():
    tree = Tree.from_groups([[0, 1, 8], [3, 5, 7]])
    tree.nodes[tree.root].classifier = ConstantClassifier([0.3, 0.7])
    train = DatasetSplit(np.zeros((5000, 1)), np.repeat(np.arange(10), 500))
    probes = trainer.draw_probes(train, [2, 4, 6, 9], count=50)
    assert trainer.probe_root(tree, probes).shape == (2, 4, 50)


def test_probe_untrained_is_an_error():
    tree = trainer.build_initial_tree([[0, 1], [2]], tiny_factory())
    with pytest.raises(ValueError, match="no trained"):
        trainer.probe_root(tree, [np.zeros((1,) + SHAPE)])


def test_draw_probes_without_replacement():
    train = DatasetSplit(np.arange(30.0)[:, None], np.repeat([0, 1, 2], 10))
    probes = trainer.draw_probes(train, [0, 2], fraction=0.25, rng=np.random.default_rng(4))
    assert [len(p) for p in probes] == [3, 3]
    assert len(set(probes[1][:, 0])) == 3 and set(probes[1][:, 0]) <= set(range(20, 30))
    with pytest.raises(ValueError):
        trainer.draw_probes(train, [7])


# ------------------------------------------------------------------ stages


def stage_config(new, cfg, stage=1, seed=0):
    return trainer.StageConfig(new, cfg, QUICK, QUICK, probe_count=5, seed=seed, stage=stage)


def test_zero_new_classes_costs_nothing():
    tree, cfg = tiny_tree([[0, 1], [2, 3]])
    before = trainer._checksums(tree)
    _, report = trainer.run_incremental_stage(tree, stage_config([], cfg), blobs([0, 1, 2, 3], 5), blobs([0, 1, 2, 3], 5, "test"))
    assert report.effort == 0 and report.retrained == []
    assert report.checksums == before


def test_cifar10_like_stage_retrains_the_right_nodes(monkeypatch):
    tree, cfg = tiny_tree([[0, 1, 8], [3, 5, 7]])
    vehicles, animals = tree.nodes[tree.root].children
    route_by_branch(monkeypatch, tree, {9: 0, 2: 1, 4: 1, 6: 1})
    classes = list(range(10))
    _, report = trainer.run_incremental_stage(tree, stage_config([2, 4, 6, 9], cfg), tagged(classes, 10), tagged(classes, 3, "test"))
    by_node = {r.node: r for r in report.retrained}
    assert set(by_node) == {tree.root, vehicles, animals}
    assert by_node[tree.root].classes == classes and by_node[tree.root].samples == 100
    assert by_node[animals].classes == [2, 3, 4, 5, 6, 7]
    assert by_node[vehicles].classes == [0, 1, 8, 9]
    assert tree.nodes[tree.root].classifier.n_outputs == 2
    assert report.effort == sum(r.weights * r.samples for r in report.retrained)


def test_untouched_branch_is_bit_identical(monkeypatch):
    tree, cfg = tiny_tree([[0, 1], [2, 3]])
    b1, b2 = tree.nodes[tree.root].children
    saved = [a.copy() for _, a in tree.nodes[b2].classifier.state_arrays()]
    route_by_branch(monkeypatch, tree, {4: 0, 5: 0})
    classes = list(range(6))
    _, report = trainer.run_incremental_stage(tree, stage_config([4, 5], cfg), tagged(classes, 8), tagged(classes, 2, "test"))
    assert b2 not in {r.node for r in report.retrained}
    after = [a for _, a in tree.nodes[b2].classifier.state_arrays()]
    assert all(np.array_equal(x, y) for x, y in zip(saved, after))
    assert sorted(tree.subtree_classes(b1)) == [0, 1, 4, 5]


def test_stage_is_deterministic():
    tree, cfg = tiny_tree([[0, 1], [2, 3]])
    classes = list(range(6))
    train, test = blobs(classes, 10), blobs(classes, 3, "test")
    reports = []
    for _ in range(2):
        t = copy.deepcopy(tree)
        _, r = trainer.run_incremental_stage(t, stage_config([4, 5], cfg, seed=7), train, test)
        reports.append(r.to_dict())
    assert reports[0] == reports[1]
    assert trainer.StageReport.from_dict(reports[0]).to_dict() == reports[0]


def test_known_class_cannot_be_added_again():
    tree, cfg = tiny_tree([[0, 1], [2, 3]])
    with pytest.raises(ValueError, match="already"):
        trainer.run_incremental_stage(tree, stage_config([3], cfg), blobs([0, 1, 2, 3], 5), blobs([0, 1, 2, 3], 5, "test"))


# ------------------------------------------------------------------ effort


def test_effort_b1_at_twenty_classes():
    b1 = count_weights(zoo.network_b(20), zoo.BASELINE_MODES["B:I"])
    full = count_weights(zoo.network_b(100))
    assert (b1, full) == (3_166_208, 7_931_584)
    assert trainer.baseline_effort(20, 10_000, "B:I") == b1 * 10_000
    assert round(b1 * 10_000 / (full * 50_000), 4) == 0.0798


def test_effort_single_weight_single_sample():
    spec = NetworkSpec((1,), (LayerSpec("fully-connected", "f", units=1, bias=False),))
    assert trainer.training_effort([(spec, None, 1)]) == 1


def test_effort_b2_ratio():
    b2 = count_weights(zoo.network_b(100), zoo.BASELINE_MODES["B:II"])
    assert b2 == 6_787_072
    assert round(b2 / 7_931_584, 3) == 0.856


@given(st.lists(st.integers(1, 100), min_size=1, max_size=6, unique=True), st.integers(1, 600))
def test_baseline_effort_nested_and_monotone(counts, per_class):
    counts = sorted(counts)
    table, raw, ref = trainer.effort_table(counts, per_class)
    modes = list(zoo.BASELINE_MODES)
    for n in counts:
        vals = [raw[n][m] for m in modes]
        assert vals == sorted(vals)
    for m in modes:
        vals = [raw[n][m] for n in counts]
        assert vals == sorted(vals)
    assert max(table[n]["B:V"] for n in counts) == 1.0


# ---------------------------------------------------------------- baseline

B_SHAPE = (1, 16, 16)


def baseline_state():
    return trainer.BaselineState(input_shape=B_SHAPE, shrink=8, fc_shrink=16, seed=3)


def test_baseline_b1_leaves_convs_untouched():
    train = blobs([0, 1, 2, 3], 10, shape=B_SHAPE)
    test = blobs([0, 1, 2, 3], 3, "test", shape=B_SHAPE)
    state, first = trainer.run_baseline_stage(baseline_state(), "B:I", train.restrict([0, 1]), test.restrict([0, 1]), QUICK)
    assert first.effort == count_weights(state.net.spec) * 20
    convs = {k: a.copy() for k, a in state.net.parameters() if state.net.layers[k[0]].kind == "conv"}
    fcs = {k: a.copy() for k, a in state.net.parameters() if state.net.layers[k[0]].kind == "fully-connected"}
    state2, report = trainer.run_baseline_stage(state, "B:I", train, test, QUICK, [2, 3], stage=1)
    after = dict(state2.net.parameters())
    assert all(np.array_equal(a, after[k]) for k, a in convs.items())
    assert any(not np.array_equal(a, after[k]) for k, a in fcs.items() if a.shape == after[k].shape)
    assert report.effort == count_weights(state2.net.spec, zoo.BASELINE_MODES["B:I"]) * 40
    assert state2.classes == [0, 1, 2, 3] and report.accuracy is not None


def test_widening_preserves_old_logits():
    state, _ = trainer.run_baseline_stage(
        baseline_state(), "B:V", blobs([0, 1, 2], 5, shape=B_SHAPE), blobs([0, 1, 2], 2, "test", shape=B_SHAPE), QUICK
    )
    x = blobs([0, 1, 2], 2, shape=B_SHAPE).images
    wide = state.net.reindex_outputs([0, 1, 2, None, None], np.random.default_rng(0))
    # a wider matmul may round differently in the last float32 bit
    np.testing.assert_allclose(wide.predict_logits(x)[:, :3], state.net.predict_logits(x), rtol=1e-5, atol=1e-6)


def test_unknown_baseline_mode():
    with pytest.raises(ValueError):
        trainer.run_baseline_stage(baseline_state(), "B:VI", blobs([0], 2, shape=B_SHAPE), blobs([0], 1, "test", shape=B_SHAPE), QUICK)


# ---------------------------------------------------------------- accuracy


def labelled(classes, per_class, tag="test"):
    labels = np.repeat(classes, per_class)
    return DatasetSplit(encode_labels(labels), labels, tag)


def test_oracle_tree_is_perfect():
    tree = Tree.from_groups([[0, 1, 2], [3, 4]], factory=oracle_factory)
    assert trainer.evaluate_accuracy(tree, labelled([0, 1, 2, 3, 4], 4)) == 100.0


def test_misrouting_root_scores_zero():
    tree = Tree.from_groups([[0, 1], [2, 3]], factory=oracle_factory)
    tree.nodes[tree.root].classifier = ConstantClassifier([0.0, 1.0])
    assert trainer.evaluate_accuracy(tree, labelled([0, 1], 10)) == 0.0


class RandomRoot:
    trained = True
    n_outputs = 2

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict_logits(self, batch):
        return self.rng.random((len(batch), 2))


def test_random_root_is_a_coin_flip():
    tree = Tree.flat([0, 1])
    tree.nodes[tree.root].classifier = RandomRoot(11)
    acc = trainer.evaluate_accuracy(tree, labelled([0, 1], 1000))
    assert abs(acc - 50.0) <= 5.0


def test_unknown_test_class_is_an_error():
    tree = Tree.flat([0, 1], factory=oracle_factory)
    with pytest.raises(ValueError, match="unknown"):
        trainer.evaluate_accuracy(tree, labelled([0, 5], 1))
