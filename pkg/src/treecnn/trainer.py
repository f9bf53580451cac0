"""Learning stages: probing, growth, selective retraining, effort and accuracy.

The tree side follows the incremental protocol (probe the root with a
sample of each new class, place the classes, retrain the root and every
node whose label transform changed on old + new data).  The baseline side
fine-tunes one VGG-style network at a chosen depth on all data seen so far.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from treecnn import growth
from treecnn.nn import zoo
from treecnn.nn.network import Network, TrainingSchedule, train_network
from treecnn.nn.spec import count_weights
from treecnn.seeds import subseed, substream
from treecnn.tree import Tree, apply_plan, predict_batch

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ configs


@dataclass
class NodeFactory:
    """Creates node networks; branch and root architectures are named zoo entries."""

    input_shape: tuple = zoo.CIFAR_SHAPE
    root_arch: str = "cifar100-root"
    branch_arch: str = "cifar100-branch"
    root_shrink: int = 1
    branch_shrink: int = 1
    root_fc_shrink: int | None = None
    branch_fc_shrink: int | None = None
    seed: int = 0

    def spec_for(self, is_root, n_outputs):
        if is_root:
            return zoo.build(self.root_arch, n_outputs, self.input_shape, self.root_shrink, self.root_fc_shrink)
        return zoo.build(self.branch_arch, n_outputs, self.input_shape, self.branch_shrink, self.branch_fc_shrink)

    def __call__(self, tree, node_id, n_outputs):
        is_root = tree.root is None or node_id == tree.root
        # keyed by tree state so a resumed run draws the same weights
        rng = substream(self.seed, "init", node_id, tree._next_id, n_outputs)
        return Network(self.spec_for(is_root, n_outputs), rng=rng)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class StageConfig:
    new_classes: list
    growth: growth.GrowthConfig = field(default_factory=growth.GrowthConfig)
    root_schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    branch_schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    probe_fraction: float = 0.10
    probe_count: int | None = None
    seed: int = 0
    stage: int = 1

    def __post_init__(self):
        if not 0.0 < self.probe_fraction <= 1.0:
            raise ValueError("probe_fraction must lie in (0, 1]")
        if self.probe_count is not None and self.probe_count < 1:
            raise ValueError("probe_count must be >= 1")


@dataclass
class NodeTraining:
    node: int
    arch: str
    weights: int
    samples: int
    classes: list

    @property
    def effort(self):
        return self.weights * self.samples


@dataclass
class StageReport:
    stage: int
    new_classes: list
    classes_so_far: list
    plan: dict | None = None
    retrained: list = field(default_factory=list)
    effort: int = 0
    effort_normalized: float | None = None
    accuracy: float | None = None
    accuracy_old: float | None = None
    checksums: dict = field(default_factory=dict)
    model: str = "tree"

    def to_dict(self):
        d = asdict(self)
        d["retrained"] = [dict(asdict(r) if isinstance(r, NodeTraining) else r) for r in self.retrained]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["retrained"] = [NodeTraining(**r) for r in d.get("retrained", [])]
        return cls(**d)


# ------------------------------------------------------------------- effort


def training_effort(retrained):
    """Sum of weights x training samples over ``(spec, layer_subset, samples)`` triples."""
    total = 0
    for spec, subset, samples in retrained:
        total += count_weights(spec, subset) * int(samples)
    return total


def baseline_effort(n_classes, n_samples, mode, input_shape=zoo.CIFAR_SHAPE, shrink=1, fc_shrink=None):
    """Effort of one fine-tuning stage of the baseline at depth ``mode``."""
    spec = zoo.network_b(n_classes, input_shape, shrink, fc_shrink)
    return training_effort([(spec, zoo.BASELINE_MODES[mode], n_samples)])


def effort_table(class_counts, samples_per_class, modes=tuple(zoo.BASELINE_MODES), reference=None, **arch):
    """Normalised baseline effort per stage (rows) and mode (columns).

    ``reference`` defaults to the largest B:V entry, i.e. the final stage.
    """
    raw = {n: {m: baseline_effort(n, n * samples_per_class, m, **arch) for m in modes} for n in class_counts}
    if reference is None:
        reference = max(baseline_effort(n, n * samples_per_class, "B:V", **arch) for n in class_counts)
    return {n: {m: raw[n][m] / reference for m in modes} for n in class_counts}, raw, reference


# ----------------------------------------------------------------- probing


def probe_node(tree, node_id, samples):
    """``K x M x I`` outputs of a node for ``samples`` (one array of I images per new class)."""
    node = tree.node(node_id)
    clf = node.classifier
    if clf is None or not getattr(clf, "trained", False):
        raise ValueError(f"node {node_id} has no trained classifier to probe")
    sizes = {len(s) for s in samples}
    if len(sizes) != 1 or 0 in sizes:
        raise ValueError("every new class needs the same, non-zero number of probe images")
    outs = [np.asarray(clf.predict_logits(s), dtype=np.float64) for s in samples]  # each I x K
    return np.stack(outs, axis=0).transpose(2, 0, 1)


def probe_root(tree, samples):
    return probe_node(tree, tree.root, samples)


def draw_probes(train, classes, fraction=0.1, count=None, rng=None):
    """Per class, images drawn without replacement: ``count`` or ``ceil(fraction * n)``.

    Every class gets the same number (the smallest request) so the probe
    tensor is rectangular.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    index = train.by_class()
    sizes = []
    for c in classes:
        if c not in index:
            raise ValueError(f"class {c} has no training images")
        n = len(index[c])
        sizes.append(min(n, count) if count else max(1, math.ceil(fraction * n)))
    per_class = min(sizes)
    return [train.images[rng.choice(index[c], size=per_class, replace=False)] for c in classes]


# ----------------------------------------------------------------- growing


def _child_summaries(tree, node_id):
    return [growth.ChildSummary.of(tree, c) for c in tree.node(node_id).children]


def grow_node(tree, node_id, classes, probes, config, rng):
    """Probe ``node_id`` with the new classes, plan placements and apply them.

    Classes sent to an existing trained branch that still has room below it
    (depth limit) are placed by growing that branch recursively.
    Returns the list of ``(node_id, plan)`` pairs that were applied.
    """
    node = tree.node(node_id)
    summaries = _child_summaries(tree, node_id)
    labels = list(classes)
    outputs = probe_node(tree, node_id, [probes[c] for c in labels])
    avg = growth.average_outputs(outputs)
    mask = [
        (s.is_leaf and not s.can_deepen) or (not s.is_leaf and s.n_children >= config.max_children)
        for s in summaries
    ]
    try:
        lik = growth.compute_likelihood(avg, mask)
        plan = growth.grow(summaries, lik, config, labels=labels, rng=rng)
    except growth.AllBranchesFull:
        plan = growth.PlacementPlan([growth.NewLeaf(c) for c in sorted(labels)], ["all children full"])

    existing = {c for c in node.children}
    deferred = {}
    applied = growth.PlacementPlan(events=list(plan.events))
    for action in plan.actions:
        target = tree.nodes.get(action.node) if action.kind == "add" else None
        if (
            target is not None
            and action.node in existing
            and not target.is_leaf
            and getattr(target.classifier, "trained", False)
            and tree.max_depth is not None
            and tree.depth(target.id) + 2 <= tree.max_depth
        ):
            deferred.setdefault(target.id, []).append(action.cls)
        else:
            apply_plan(tree, node_id, growth.PlacementPlan([action]))
        applied.actions.append(action)
    plans = [(node_id, applied)]
    for child_id, cls_list in deferred.items():
        plans.extend(grow_node(tree, child_id, cls_list, probes, config, rng))
    return plans


def _snapshot_transforms(tree):
    return {n.id: dict(n.label_transform) for n in tree.internal_nodes()}


# ---------------------------------------------------------------- training


def train_node(tree, node_id, train, schedule, seed, stage):
    """Retrain one node on every class below it, targets = child positions."""
    node = tree.node(node_id)
    classes = sorted(node.label_transform)
    data = train.restrict(classes)
    targets = np.array([node.label_transform[int(c)] for c in data.labels], dtype=np.int64)
    sched = replace(schedule, seed=subseed(seed, "train", stage, node_id))
    net = node.classifier
    _, samples = train_network(net, data.images, targets, sched)
    weights = count_weights(net.spec)
    return NodeTraining(node_id, net.spec.title, weights, samples, classes)


def build_initial_tree(groups, factory, growth_config=None, class_names=None, seed=0):
    cfg = growth_config or growth.GrowthConfig()
    return Tree.from_groups(
        groups,
        factory=factory,
        max_children=cfg.max_children,
        max_depth=cfg.max_depth,
        rng=substream(seed, "reindex"),
        class_names=class_names,
    )


def train_initial_tree(tree, train, test, root_schedule, branch_schedule, seed=0):
    """Stage 0: train every node of a freshly built tree."""
    records = []
    for node in tree.internal_nodes():
        sched = root_schedule if node.id == tree.root else branch_schedule
        records.append(train_node(tree, node.id, train, sched, seed, 0))
    classes = tree.classes()
    report = StageReport(
        stage=0,
        new_classes=classes,
        classes_so_far=classes,
        retrained=records,
        effort=sum(r.effort for r in records),
        accuracy=evaluate_accuracy(tree, test.restrict(classes)),
        checksums=_checksums(tree),
    )
    return tree, report


def _checksums(tree):
    return {str(n.id): n.classifier.checksum() for n in tree.internal_nodes() if n.classifier is not None}


def run_incremental_stage(tree, config, train, test):
    """One learning stage: probe, grow, retrain changed nodes, evaluate.

    ``train``/``test`` must cover every class learned so far plus the new
    ones (old data is reused to fight forgetting).  Nodes whose label
    transform is unchanged keep their weights untouched.
    """
    known = set(tree.classes())
    new = [int(c) for c in config.new_classes]
    if known.intersection(new):
        raise ValueError(f"classes {sorted(known.intersection(new))} are already in the tree")
    old_classes = sorted(known)
    if not new:
        acc = evaluate_accuracy(tree, test.restrict(old_classes))
        report = StageReport(
            config.stage, [], old_classes, plan=None, effort=0, accuracy=acc, accuracy_old=acc,
            checksums=_checksums(tree),
        )
        return tree, report

    tree.rng = substream(config.seed, "reindex", config.stage)
    probe_rng = substream(config.seed, "probe", config.stage)
    probes = dict(zip(new, draw_probes(train, new, config.probe_fraction, config.probe_count, probe_rng)))
    before = _snapshot_transforms(tree)
    merge_rng = substream(config.seed, "merge-tiebreak", config.stage)
    plans = grow_node(tree, tree.root, new, probes, config.growth, merge_rng)

    after = _snapshot_transforms(tree)
    changed = [nid for nid in after if nid == tree.root or before.get(nid) != after[nid]]
    order = [n.id for n in tree.internal_nodes() if n.id in changed]
    records = []
    for nid in order:
        sched = config.root_schedule if nid == tree.root else config.branch_schedule
        records.append(train_node(tree, nid, train, sched, config.seed, config.stage))

    classes = sorted(known | set(new))
    report = StageReport(
        stage=config.stage,
        new_classes=new,
        classes_so_far=classes,
        plan={"plans": [{"node": nid, **p.to_dict()} for nid, p in plans]},
        retrained=records,
        effort=sum(r.effort for r in records),
        accuracy=evaluate_accuracy(tree, test.restrict(classes)),
        accuracy_old=evaluate_accuracy(tree, test.restrict(old_classes)) if old_classes else None,
        checksums=_checksums(tree),
    )
    log.info("stage %d: placed %s, retrained %s, effort %d", config.stage, new, order, report.effort)
    return tree, report


# ---------------------------------------------------------------- baseline


@dataclass
class BaselineState:
    """The fine-tuned baseline network and the dataset label of each output."""

    net: Network | None = None
    classes: list = field(default_factory=list)
    input_shape: tuple = zoo.CIFAR_SHAPE
    shrink: int = 1
    fc_shrink: int | None = None
    seed: int = 0

    def spec(self, n):
        return zoo.network_b(n, self.input_shape, self.shrink, self.fc_shrink)


def run_baseline_stage(state, mode, train, test, schedule, new_classes=None, stage=0):
    """Add output neurons for ``new_classes`` and fine-tune the ``mode`` layer subset.

    The first call (no network yet) trains every layer from scratch.
    ``train`` holds all data seen so far.
    """
    if mode not in zoo.BASELINE_MODES:
        raise ValueError(f"unknown baseline mode {mode!r}")
    if new_classes is None:
        new_classes = [c for c in train.classes() if c not in state.classes]
    new_classes = [int(c) for c in new_classes]
    classes = list(state.classes) + new_classes
    if state.net is None:
        net = Network(state.spec(len(classes)), rng=substream(state.seed, "init", "baseline"))
        subset = None
    else:
        net = state.net.reindex_outputs(
            list(range(len(state.classes))) + [None] * len(new_classes),
            substream(state.seed, "init", "baseline", stage),
        )
        subset = zoo.BASELINE_MODES[mode]
    data = train.restrict(classes)
    lookup = {c: i for i, c in enumerate(classes)}
    targets = np.array([lookup[int(c)] for c in data.labels], dtype=np.int64)
    sched = replace(schedule, seed=subseed(state.seed, "train", "baseline", stage))
    _, samples = train_network(net, data.images, targets, sched, trainable=subset)
    effort = training_effort([(net.spec, subset, samples)])
    new_state = replace(state, net=net, classes=classes)
    old = list(state.classes)
    report = StageReport(
        stage=stage,
        new_classes=new_classes,
        classes_so_far=sorted(classes),
        retrained=[NodeTraining(-1, net.spec.title, count_weights(net.spec, subset), samples, sorted(classes))],
        effort=effort,
        accuracy=evaluate_accuracy(new_state, test.restrict(classes)),
        accuracy_old=evaluate_accuracy(new_state, test.restrict(old)) if old else None,
        checksums={"baseline": net.checksum()},
        model=mode,
    )
    return new_state, report


# -------------------------------------------------------------- evaluation


def predict(model, images):
    if isinstance(model, Tree):
        return predict_batch(model, images)
    if isinstance(model, BaselineState):
        out = model.net.predict(images)
        return np.asarray(model.classes, dtype=np.int64)[out]
    raise TypeError(f"cannot predict with {type(model).__name__}")


def evaluate_accuracy(model, test):
    """Top-1 accuracy in percent.  Test labels must all be known to the model."""
    known = set(model.classes() if isinstance(model, Tree) else model.classes)
    unknown = set(int(c) for c in np.unique(test.labels)) - known
    if unknown:
        raise ValueError(f"test data contains classes unknown to the model: {sorted(unknown)}")
    if len(test) == 0:
        return None
    pred = predict(model, test.images)
    return float(100.0 * np.mean(pred == test.labels))
