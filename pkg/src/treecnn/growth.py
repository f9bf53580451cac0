"""Placement of new classes under a node from its softmax-likelihood matrix.

Pure decision logic: given the node's outputs on probe images of the new
classes and a summary of its children, produce a :class:`PlacementPlan`.
Rows of every matrix are the node's children (in order), columns the new
classes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

NO_NODE = -1


class AllBranchesFull(ValueError):
    """Every child is masked; the caller must add new leaves at the parent."""


@dataclass(frozen=True)
class GrowthConfig:
    alpha: float = 0.1
    beta: float = 0.1
    max_children: int = 5
    max_depth: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.max_children < 2:
            raise ValueError("max_children must be >= 2")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ChildSummary:
    """What the policy needs to know about one child of the node being grown.

    ``can_deepen`` is False for a leaf that may not turn into a branch
    (it already sits at the depth limit).
    """

    node_id: int
    n_children: int = 0
    is_leaf: bool = True
    can_deepen: bool = True

    @classmethod
    def of(cls, tree, node_id):
        node = tree.node(node_id)
        can_deepen = tree.max_depth is None or tree.depth(node_id) + 1 <= tree.max_depth
        return cls(node_id, len(node.children), node.is_leaf, can_deepen)


@dataclass(frozen=True)
class Candidate:
    label: int
    value: tuple
    nodes: tuple


@dataclass(frozen=True)
class Action:
    kind: str  # "add" | "merge" | "new-leaf"
    cls: int
    node: int | None = None
    keep: int | None = None
    absorb: int | None = None

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def AddToChild(cls, node):
    return Action("add", int(cls), node=int(node))


def MergeThenAdd(cls, keep, absorb):
    return Action("merge", int(cls), keep=int(keep), absorb=int(absorb))


def NewLeaf(cls):
    return Action("new-leaf", int(cls))


@dataclass
class PlacementPlan:
    actions: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def classes(self):
        return [a.cls for a in self.actions]

    def to_dict(self):
        return {"actions": [a.to_dict() for a in self.actions], "events": list(self.events)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls([Action(**a) for a in d["actions"]], list(d.get("events", [])))


# ----------------------------------------------------------------- matrices


def average_outputs(outputs):
    """Mean over the image axis of a ``K x M x I`` output tensor."""
    o = np.asarray(outputs, dtype=np.float64)
    if o.ndim != 3 or min(o.shape) < 1:
        raise ValueError(f"expected a non-empty K x M x I array, got shape {o.shape}")
    if not np.all(np.isfinite(o)):
        raise ValueError("outputs contain non-finite values")
    # sequential accumulation keeps the result identical to a plain loop
    acc = np.zeros(o.shape[:2])
    for i in range(o.shape[2]):
        acc += o[:, :, i]
    return acc / o.shape[2]


def compute_likelihood(avg, full_mask=None):
    """Column-wise softmax over rows not flagged in ``full_mask``; masked rows are 0."""
    avg = np.asarray(avg, dtype=np.float64)
    k = avg.shape[0]
    mask = np.zeros(k, dtype=bool) if full_mask is None else np.asarray(full_mask, dtype=bool)
    if mask.shape != (k,):
        raise ValueError(f"mask has shape {mask.shape}, expected ({k},)")
    if mask.all():
        raise AllBranchesFull("all children are full")
    live = avg[~mask]
    e = np.exp(live - live.max(axis=0, keepdims=True))
    out = np.zeros_like(avg)
    out[~mask] = e / e.sum(axis=0, keepdims=True)
    return out


def _top3(column, mask, node_ids):
    rows = [r for r in np.argsort(-column, kind="stable") if not mask[r]][:3]
    values = [float(column[r]) for r in rows] + [0.0] * (3 - len(rows))
    nodes = [int(node_ids[r]) for r in rows] + [NO_NODE] * (3 - len(rows))
    return tuple(values), tuple(nodes)


def build_candidates(likelihood, labels=None, node_ids=None, full_mask=None):
    """Ordered list S: per class the top-3 likelihoods, sorted by the best one.

    Ties on the best value go to the smaller class label; ties inside a
    column go to the lower child position.  Fewer than three live children
    are padded with ``0.0`` / ``NO_NODE``.
    """
    lik = np.asarray(likelihood, dtype=np.float64)
    k, m = lik.shape
    labels = list(range(m)) if labels is None else [int(x) for x in labels]
    node_ids = list(range(k)) if node_ids is None else list(node_ids)
    mask = np.zeros(k, dtype=bool) if full_mask is None else np.asarray(full_mask, dtype=bool)
    cands = []
    for j in range(m):
        value, nodes = _top3(lik[:, j], mask, node_ids)
        cands.append(Candidate(labels[j], value, nodes))
    cands.sort(key=lambda c: (-c.value[0], c.label))
    return cands


# ------------------------------------------------------------------ policy


def _capacity(summary):
    # a leaf counts as one child when judged as a merge target
    return 1 if summary.is_leaf else summary.n_children


def check_for_merge(node1, node2, max_children):
    """True when ``node2`` is a leaf and ``node1`` can take it plus one new class."""
    if node2 is None or node1 is None or not node2.is_leaf:
        return False
    if node1.is_leaf and not node1.can_deepen:
        return False
    return _capacity(node1) < max_children - 1


class _State:
    """Mutable view of the children while a plan is being built."""

    def __init__(self, children, max_children):
        self.children = [ChildSummary(c.node_id, c.n_children, c.is_leaf, c.can_deepen) for c in children]
        self.alive = [True] * len(children)
        self.max_children = max_children
        self.row = {c.node_id: i for i, c in enumerate(children)}

    def full_mask(self):
        out = []
        for c, alive in zip(self.children, self.alive):
            if not alive:
                out.append(True)
            elif c.is_leaf:
                out.append(not c.can_deepen)
            else:
                out.append(c.n_children >= self.max_children)
        return np.array(out, dtype=bool)

    def summary(self, node_id):
        return None if node_id == NO_NODE else self.children[self.row[node_id]]

    def add(self, node_id):
        r = self.row[node_id]
        c = self.children[r]
        n = 2 if c.is_leaf else c.n_children + 1
        self.children[r] = ChildSummary(c.node_id, n, False, True)

    def merge(self, keep, absorb):
        self.alive[self.row[absorb]] = False
        r = self.row[keep]
        c = self.children[r]
        n = 2 if c.is_leaf else c.n_children + 1
        self.children[r] = ChildSummary(c.node_id, n, False, True)


def grow(children, likelihood, config, labels=None, rng=None):
    """Greedy placement of every new class (one column of ``likelihood`` each).

    ``children`` are :class:`ChildSummary` objects for the rows.  After each
    placement the class's column is dropped, children that became full are
    masked, the remaining columns are renormalised over live rows and S is
    rebuilt.  Equal top-two likelihoods pick the merge direction with
    ``rng`` (default: seeded from ``config.seed``).
    """
    lik = np.asarray(likelihood, dtype=np.float64)
    k, m = lik.shape
    if len(children) != k:
        raise ValueError(f"{len(children)} children for a likelihood matrix with {k} rows")
    labels = list(range(m)) if labels is None else [int(x) for x in labels]
    if len(set(labels)) != m:
        raise ValueError("class labels must be unique and match the columns")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    state = _State(children, config.max_children)
    node_ids = [c.node_id for c in children]
    col_of = {lab: j for j, lab in enumerate(labels)}
    remaining = list(labels)
    plan = PlacementPlan()

    while remaining:
        mask = state.full_mask()
        if mask.all():
            for lab in sorted(remaining):
                plan.actions.append(NewLeaf(lab))
            plan.events.append(f"all children full; new leaves for {sorted(remaining)}")
            break
        cols = [col_of[lab] for lab in remaining]
        sub = lik[:, cols].copy()
        sub[mask] = 0.0
        # correctly rounded sums, so the result does not depend on summation order
        totals = np.array([math.fsum(sub[:, j]) for j in range(sub.shape[1])])
        # a column whose live mass underflowed to zero is treated as uniform over live rows
        zero = totals <= 0
        if zero.any():
            sub[np.ix_(~mask, zero)] = 1.0
            totals[zero] = (~mask).sum()
        sub /= totals
        best = build_candidates(sub, remaining, node_ids, mask)[0]
        lab = best.label
        (v1, v2, v3), (n1, n2, _) = best.value, best.nodes

        if v1 - v2 > config.alpha:
            plan.actions.append(AddToChild(lab, n1))
            state.add(n1)
        elif v2 - v3 > config.beta:
            if v1 == v2 and n2 != NO_NODE and rng.random() < 0.5:
                n1, n2 = n2, n1
            s1, s2 = state.summary(n1), state.summary(n2)
            # a merge may not leave the node being grown with a single child
            if check_for_merge(s1, s2, config.max_children) and sum(state.alive) > 2:
                plan.actions.append(MergeThenAdd(lab, n1, n2))
                state.merge(n1, n2)
                state.add(n1)
            else:
                target = n1
                if s2 is not None and s2.n_children < s1.n_children:
                    target = n2
                if mask[state.row[target]]:
                    plan.actions.append(NewLeaf(lab))
                    plan.events.append(f"class {lab}: merge refused and smaller node {target} full; new leaf")
                else:
                    plan.actions.append(AddToChild(lab, target))
                    state.add(target)
        else:
            plan.actions.append(NewLeaf(lab))
        remaining.remove(lab)
    return plan


def replay(children, plan, max_children=None):
    """Child summaries after applying ``plan`` (new leaves appended, absorbed removed).

    Raises ValueError when an action would overfill a non-root child.
    """
    state = {c.node_id: c for c in children}
    order = [c.node_id for c in children]
    fresh = -2
    for a in plan.actions:
        if a.kind == "new-leaf":
            state[fresh] = ChildSummary(fresh)
            order.append(fresh)
            fresh -= 1
            continue
        target = a.node if a.kind == "add" else a.keep
        if target not in state:
            raise ValueError(f"action {a} targets unknown or absorbed node {target}")
        if a.kind == "merge":
            if not state[a.absorb].is_leaf:
                raise ValueError(f"action {a} absorbs a non-leaf")
            del state[a.absorb]
            order.remove(a.absorb)
        c = state[target]
        n = (2 if c.is_leaf else c.n_children + 1) + (1 if a.kind == "merge" else 0)
        if max_children is not None and n > max_children:
            raise ValueError(f"action {a} gives node {target} {n} > {max_children} children")
        state[target] = ChildSummary(target, n, False, True)
    return [state[i] for i in order]
