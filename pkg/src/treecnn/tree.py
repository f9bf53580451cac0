"""The Tree-CNN hierarchy: nodes, label transforms, inference and structural edits.

Every non-leaf node owns a classifier with one output per child and a
label transform mapping each dataset class of its subtree to the index of
the child that leads to it.  Leaves carry exactly one class.

A classifier is any object with ``n_outputs``, ``predict_logits(batch)``
and ``reindex_outputs(keep, rng)``; :class:`treecnn.nn.Network` is the real
one, :mod:`treecnn.stubs` has test doubles.  New branch classifiers come
from ``tree.factory(tree, node_id, n_outputs)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TreeError(ValueError):
    """Malformed tree or an illegal structural edit."""


@dataclass
class TreeNode:
    id: int
    parent: int | None = None
    children: list = field(default_factory=list)
    classifier: object = None
    label_transform: dict | None = None
    leaf_class: int | None = None

    @property
    def is_leaf(self):
        return self.leaf_class is not None

    @property
    def kind(self):
        if self.parent is None:
            return "root"
        return "leaf" if self.is_leaf else "branch"


class Tree:
    def __init__(self, factory=None, max_children=None, max_depth=2, rng=None, class_names=None):
        self.nodes = {}
        self.root = None
        self.factory = factory
        self.max_children = max_children
        self.max_depth = max_depth
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.class_names = class_names
        self._next_id = 0

    # ------------------------------------------------------------ building

    def _new_node(self, **kw):
        node = TreeNode(id=self._next_id, **kw)
        self.nodes[node.id] = node
        self._next_id += 1
        return node

    def _make_classifier(self, node_id, n_outputs):
        if self.factory is None:
            return None
        return self.factory(self, node_id, n_outputs)

    @classmethod
    def from_groups(cls, groups, factory=None, **kw):
        """Root whose children are leaves (singleton groups) or branches of leaves."""
        tree = cls(factory=factory, **kw)
        root = tree._new_node()
        tree.root = root.id
        for g in groups:
            g = list(g)
            if len(g) == 1:
                leaf = tree._new_node(parent=root.id, leaf_class=int(g[0]))
                root.children.append(leaf.id)
            else:
                branch = tree._new_node(parent=root.id)
                root.children.append(branch.id)
                for c in g:
                    leaf = tree._new_node(parent=branch.id, leaf_class=int(c))
                    branch.children.append(leaf.id)
        for node in tree.internal_nodes():
            _rebuild_transform(tree, node)
            node.classifier = tree._make_classifier(node.id, len(node.children))
        _check_unique_leaves(tree)
        return tree

    @classmethod
    def flat(cls, classes, factory=None, **kw):
        return cls.from_groups([[c] for c in classes], factory=factory, **kw)

    # ------------------------------------------------------------- queries

    def node(self, node_id):
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TreeError(f"no node with id {node_id}") from None

    def internal_nodes(self):
        """Non-leaf nodes in breadth-first order from the root."""
        return [n for n in self.walk() if not n.is_leaf]

    def walk(self):
        out, queue = [], [self.root]
        while queue:
            node = self.nodes[queue.pop(0)]
            out.append(node)
            queue.extend(node.children)
        return out

    def leaves(self):
        return [n for n in self.walk() if n.is_leaf]

    def classes(self):
        return sorted(n.leaf_class for n in self.leaves())

    def subtree_classes(self, node_id):
        node = self.node(node_id)
        if node.is_leaf:
            return [node.leaf_class]
        out = []
        for c in node.children:
            out.extend(self.subtree_classes(c))
        return out

    def depth(self, node_id):
        d, node = 0, self.node(node_id)
        while node.parent is not None:
            node = self.nodes[node.parent]
            d += 1
        return d

    def leaf_of(self, cls):
        for n in self.leaves():
            if n.leaf_class == cls:
                return n
        raise TreeError(f"class {cls} is not in the tree")

    def path_to(self, cls):
        """Node ids from the root to the leaf of ``cls``, following label transforms."""
        path = [self.root]
        node = self.nodes[self.root]
        while not node.is_leaf:
            lt = node.label_transform or {}
            if cls not in lt:
                raise TreeError(f"class {cls} missing from label transform of node {node.id}")
            node = self.nodes[node.children[lt[cls]]]
            path.append(node.id)
        return path

    def is_full(self, node_id):
        node = self.node(node_id)
        return (
            not node.is_leaf
            and node.parent is not None
            and self.max_children is not None
            and len(node.children) >= self.max_children
        )

    def name_of(self, cls):
        if self.class_names and 0 <= cls < len(self.class_names):
            return self.class_names[cls]
        return str(cls)


# ----------------------------------------------------------------- helpers


def _rebuild_transform(tree, node):
    lt = {}
    for i, child in enumerate(node.children):
        for c in tree.subtree_classes(child):
            lt[c] = i
    node.label_transform = lt


def _refresh_ancestors(tree, node_id):
    node = tree.node(node_id)
    while node is not None:
        if not node.is_leaf:
            _rebuild_transform(tree, node)
        node = tree.nodes[node.parent] if node.parent is not None else None


def _check_unique_leaves(tree):
    seen = set()
    for leaf in tree.leaves():
        if leaf.leaf_class in seen:
            raise TreeError(f"class {leaf.leaf_class} appears on two leaves")
        seen.add(leaf.leaf_class)


def _widen(tree, node, keep):
    if node.classifier is not None:
        node.classifier = node.classifier.reindex_outputs(keep, tree.rng)


def _ensure_new_class(tree, cls):
    if cls in set(tree.classes()):
        raise TreeError(f"class {cls} already present in the tree")


def _check_capacity(tree, node, extra=1):
    if node.parent is None or tree.max_children is None:
        return
    if len(node.children) + extra > tree.max_children:
        raise TreeError(f"node {node.id} would exceed max_children={tree.max_children}")


def _check_depth(tree, depth):
    if tree.max_depth is not None and depth > tree.max_depth:
        raise TreeError(f"edit would create a leaf at depth {depth} > max_depth={tree.max_depth}")


def _convert_leaf(tree, node):
    """Turn a leaf into a branch holding its old class as the first leaf child."""
    _check_depth(tree, tree.depth(node.id) + 1)
    old = tree._new_node(parent=node.id, leaf_class=node.leaf_class)
    node.leaf_class = None
    node.children = [old.id]


# ---------------------------------------------------------------- inference


def route(tree, node_id, batch):
    """Child positions chosen by ``node_id``'s classifier (ties -> lowest index)."""
    node = tree.node(node_id)
    if node.classifier is None:
        raise TreeError(f"non-leaf node {node.id} has no classifier")
    logits = np.asarray(node.classifier.predict_logits(batch))
    if logits.shape[1] != len(node.children):
        raise TreeError(
            f"node {node.id}: classifier has {logits.shape[1]} outputs for {len(node.children)} children"
        )
    return np.argmax(logits, axis=1)


def predict_batch(tree, images):
    """Class label for every image, descending one node at a time."""
    images = np.asarray(images)
    out = np.full(len(images), -1, dtype=np.int64)
    stack = [(tree.root, np.arange(len(images)))]
    while stack:
        node_id, idx = stack.pop()
        if len(idx) == 0:
            continue
        node = tree.node(node_id)
        if node.is_leaf:
            out[idx] = node.leaf_class
            continue
        if not node.children:
            raise TreeError(f"non-leaf node {node.id} has no children")
        choice = route(tree, node_id, images[idx])
        for pos, child in enumerate(node.children):
            stack.append((child, idx[choice == pos]))
    return out


def class_predict(tree, image):
    """Label of one image: follow the highest output neuron until a leaf."""
    node = tree.node(tree.root)
    image = np.asarray(image)[None]
    while not node.is_leaf:
        if not node.children:
            raise TreeError(f"non-leaf node {node.id} has no children")
        pos = int(route(tree, node.id, image)[0])
        node = tree.nodes[node.children[pos]]
    return node.leaf_class


# ------------------------------------------------------------------- edits


def add_class_to_node(tree, cls, target):
    """Place new class ``cls`` under child ``target`` of the node being grown.

    A leaf target becomes a branch with two leaves (its old class, ``cls``)
    and a fresh classifier; a branch target gains a leaf and one output.
    """
    _ensure_new_class(tree, cls)
    node = tree.node(target)
    if node.parent is None:
        raise TreeError("target must be a child, not the root")
    if node.is_leaf:
        _convert_leaf(tree, node)
        leaf = tree._new_node(parent=node.id, leaf_class=int(cls))
        node.children.append(leaf.id)
        node.classifier = tree._make_classifier(node.id, 2)
    else:
        _check_capacity(tree, node)
        _check_depth(tree, tree.depth(node.id) + 1)
        leaf = tree._new_node(parent=node.id, leaf_class=int(cls))
        node.children.append(leaf.id)
        _widen(tree, node, list(range(len(node.children) - 1)) + [None])
    _refresh_ancestors(tree, node.id)
    return tree


def add_new_node(tree, cls, parent):
    """New leaf child of ``parent`` carrying ``cls``; the parent gains an output."""
    _ensure_new_class(tree, cls)
    node = tree.node(parent)
    if node.is_leaf:
        raise TreeError("cannot add a child to a leaf; use add_class_to_node")
    _check_capacity(tree, node)
    _check_depth(tree, tree.depth(node.id) + 1)
    leaf = tree._new_node(parent=node.id, leaf_class=int(cls))
    node.children.append(leaf.id)
    _widen(tree, node, list(range(len(node.children) - 1)) + [None])
    _refresh_ancestors(tree, node.id)
    return tree


def merge_nodes(tree, keep, absorb, parent):
    """Move leaf ``absorb`` under sibling ``keep``; ``parent`` loses one output."""
    pnode = tree.node(parent)
    knode, anode = tree.node(keep), tree.node(absorb)
    if anode.parent != parent or knode.parent != parent:
        raise TreeError("keep and absorb must both be children of parent")
    if keep == absorb:
        raise TreeError("cannot merge a node into itself")
    if not anode.is_leaf:
        raise TreeError(f"node {absorb} is not a leaf and cannot be absorbed")
    if len(pnode.children) <= 2:
        raise TreeError(f"merging would leave node {parent} with a single child")
    if not knode.is_leaf:
        _check_capacity(tree, knode)
        _check_depth(tree, tree.depth(knode.id) + 1)
    pos = pnode.children.index(absorb)
    pnode.children.pop(pos)
    _widen(tree, pnode, [i for i in range(len(pnode.children) + 1) if i != pos])
    if knode.is_leaf:
        _convert_leaf(tree, knode)
        knode.children.append(anode.id)
        knode.classifier = tree._make_classifier(knode.id, 2)
    else:
        knode.children.append(anode.id)
        _widen(tree, knode, list(range(len(knode.children) - 1)) + [None])
    anode.parent = knode.id
    _refresh_ancestors(tree, knode.id)
    return tree


def apply_plan(tree, parent, plan):
    """Replay a placement plan computed for ``parent``'s children."""
    for action in plan.actions:
        kind = action.kind
        if kind == "add":
            add_class_to_node(tree, action.cls, action.node)
        elif kind == "merge":
            merge_nodes(tree, action.keep, action.absorb, parent)
            add_class_to_node(tree, action.cls, action.keep)
        elif kind == "new-leaf":
            add_new_node(tree, action.cls, parent)
        else:
            raise TreeError(f"unknown plan action {kind!r}")
    return tree


# -------------------------------------------------------------- validation


def validate_tree(tree, max_children=None, max_depth=None, check_classifiers=True):
    """Every structural violation found, as readable strings (empty == valid)."""
    max_children = tree.max_children if max_children is None else max_children
    max_depth = tree.max_depth if max_depth is None else max_depth
    problems = []
    if tree.root is None or tree.root not in tree.nodes:
        return ["tree has no root"]
    if tree.nodes[tree.root].parent is not None:
        problems.append("root has a parent")
    seen, order = set(), []
    stack = [(tree.root, 0)]
    while stack:
        nid, depth = stack.pop()
        if nid in seen:
            problems.append(f"node {nid} reached twice (cycle or shared child)")
            continue
        if nid not in tree.nodes:
            problems.append(f"dangling child id {nid}")
            continue
        seen.add(nid)
        node = tree.nodes[nid]
        order.append((node, depth))
        for c in node.children:
            if c in tree.nodes and tree.nodes[c].parent != nid:
                problems.append(f"node {c} has parent {tree.nodes[c].parent}, expected {nid}")
            stack.append((c, depth + 1))
    for nid in tree.nodes:
        if nid not in seen:
            problems.append(f"node {nid} is unreachable from the root")

    leaf_classes = {}
    for node, depth in order:
        if node.is_leaf:
            if node.children:
                problems.append(f"leaf {node.id} has children")
            if node.classifier is not None or node.label_transform:
                problems.append(f"leaf {node.id} carries a classifier or label transform")
            if node.leaf_class in leaf_classes:
                problems.append(f"duplicate leaf class {node.leaf_class} (nodes {leaf_classes[node.leaf_class]}, {node.id})")
            leaf_classes.setdefault(node.leaf_class, node.id)
            if max_depth is not None and depth > max_depth:
                problems.append(f"leaf {node.id} at depth {depth} exceeds max_depth={max_depth}")
            continue
        if len(node.children) < 2:
            problems.append(f"non-leaf node {node.id} has {len(node.children)} child(ren); needs >= 2")
        if node.parent is not None and max_children is not None and len(node.children) > max_children:
            problems.append(f"branch {node.id} has {len(node.children)} children > max_children={max_children}")
        if check_classifiers:
            if node.classifier is None:
                problems.append(f"non-leaf node {node.id} has no classifier")
            elif node.classifier.n_outputs != len(node.children):
                problems.append(
                    f"node {node.id}: classifier has {node.classifier.n_outputs} outputs for {len(node.children)} children"
                )
        lt = node.label_transform or {}
        expected = {}
        for i, c in enumerate(node.children):
            if c in tree.nodes:
                for cls in tree.subtree_classes(c):
                    expected[cls] = i
        if lt != expected:
            missing = sorted(set(expected) - set(lt))
            extra = sorted(set(lt) - set(expected))
            wrong = sorted(k for k in set(lt) & set(expected) if lt[k] != expected[k])
            problems.append(
                f"label transform of node {node.id} is inconsistent (missing {missing}, extra {extra}, misrouted {wrong})"
            )
    if not problems:
        for cls, leaf_id in leaf_classes.items():
            try:
                path = tree.path_to(cls)
            except TreeError as exc:
                problems.append(str(exc))
                continue
            if path[-1] != leaf_id:
                problems.append(f"class {cls} resolves to node {path[-1]}, not its leaf {leaf_id}")
    return problems


# ------------------------------------------------------------------ export


def to_dot(tree, title="Tree-CNN", max_children=None):
    """Graphviz rendering: full branches yellow, partial branches blue, leaves green."""
    max_children = tree.max_children if max_children is None else max_children
    lines = [f'digraph "{title}" {{', "  node [style=filled, fontname=Helvetica];"]
    for node in tree.walk():
        if node.parent is None:
            attrs = 'label="Root", shape=box, fillcolor=lightgray, class="root"'
        elif node.is_leaf:
            attrs = f'label="{tree.name_of(node.leaf_class)}", shape=ellipse, fillcolor=palegreen, class="leaf"'
        else:
            full = max_children is not None and len(node.children) >= max_children
            colour, cls = ("gold", "branch full") if full else ("lightblue", "branch")
            attrs = f'label="B{node.id} ({len(node.children)})", shape=box, fillcolor={colour}, class="{cls}"'
        lines.append(f"  n{node.id} [{attrs}];")
    for node in tree.walk():
        for c in node.children:
            lines.append(f"  n{node.id} -> n{c};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def topology_dict(tree, classifier_meta=None):
    """Structure-only snapshot; ``classifier_meta(node)`` adds per-node classifier info."""
    nodes = []
    for node in tree.walk():
        d = {"id": node.id, "parent": node.parent, "children": list(node.children)}
        if node.is_leaf:
            d["leaf_class"] = node.leaf_class
        else:
            d["label_transform"] = {str(k): v for k, v in sorted(node.label_transform.items())}
            if node.classifier is not None:
                d["n_outputs"] = node.classifier.n_outputs
                if classifier_meta is not None:
                    d.update(classifier_meta(node))
        nodes.append(d)
    return {
        "root": tree.root,
        "max_children": tree.max_children,
        "max_depth": tree.max_depth,
        "next_id": tree._next_id,
        "class_names": list(tree.class_names) if tree.class_names else None,
        "nodes": nodes,
    }


def tree_from_dict(d, load_classifier=None, factory=None, rng=None):
    """Inverse of :func:`topology_dict`.

    ``load_classifier(node_dict)`` returns a classifier; without it each
    non-leaf gets a :class:`treecnn.stubs.ClassifierRef` placeholder.
    """
    from treecnn.stubs import ClassifierRef

    tree = Tree(
        factory=factory,
        max_children=d.get("max_children"),
        max_depth=d.get("max_depth"),
        rng=rng,
        class_names=tuple(d["class_names"]) if d.get("class_names") else None,
    )
    tree.root = d["root"]
    for nd in d["nodes"]:
        node = TreeNode(id=nd["id"], parent=nd["parent"], children=list(nd["children"]))
        if "leaf_class" in nd:
            node.leaf_class = nd["leaf_class"]
        else:
            node.label_transform = {int(k): v for k, v in nd.get("label_transform", {}).items()}
            if load_classifier is not None:
                node.classifier = load_classifier(nd)
            elif "n_outputs" in nd:
                node.classifier = ClassifierRef(nd["n_outputs"], nd.get("checksum"))
        tree.nodes[node.id] = node
    tree._next_id = d.get("next_id", max(tree.nodes) + 1)
    return tree
