"""Network instances, loss, SGD with momentum and the training loop."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from treecnn.nn.layers import build_layer, he_uniform, softmax
from treecnn.nn.spec import SpecError, resolve_subset


@dataclass
class TrainingSchedule:
    """Optimiser and schedule settings.  Defaults are the full-scale CIFAR recipe."""

    epochs: int = 300
    batch_size: int = 128
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_decay_start: int = 200
    lr_decay_every: int = 50
    momentum: float = 0.9
    weight_decay: float = 1e-3
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.lr_decay <= 0 or self.lr_decay_every < 1:
            raise ValueError("learning-rate settings must be positive")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")

    def lr_at(self, epoch):
        if epoch < self.lr_decay_start:
            return self.lr
        steps = 1 + (epoch - self.lr_decay_start) // self.lr_decay_every
        return self.lr * self.lr_decay**steps

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Network:
    """Trainable instance of a :class:`NetworkSpec`.

    Weights live in ``layers[i].params``.  ``frozen`` lists layer indices
    that neither receive updates nor refresh batch-norm statistics.
    """

    def __init__(self, spec, rng=None, dtype=np.float32):
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        shapes = [spec.input_shape] + spec.shapes()
        self.layers = [build_layer(l, shapes[i], rng, self.dtype) for i, l in enumerate(spec.layers)]
        self.frozen = frozenset()
        self.velocity = {}
        self.trained = False
        self.history = []

    # ------------------------------------------------------------- inference

    @property
    def n_outputs(self):
        return self.spec.n_outputs

    def _check_input(self, x):
        if x.ndim != len(self.spec.input_shape) + 1 or tuple(x.shape[1:]) != self.spec.input_shape:
            raise SpecError(
                f"input shape {tuple(x.shape[1:])} does not match {self.spec.input_shape}",
                self.spec.layers[0].name,
            )

    def _logit_layers(self):
        n = len(self.layers)
        return n - 1 if self.layers[-1].kind == "softmax" else n

    def forward(self, x, train=False, rng=None, caches=None):
        """Logits (everything before a trailing softmax layer)."""
        x = np.asarray(x)
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        for i in range(self._logit_layers()):
            layer = self.layers[i]
            x, cache = layer.forward(x, train and i not in self.frozen, rng)
            if caches is not None:
                caches.append(cache)
        return x

    def predict_proba(self, x, batch_size=512):
        return softmax(self.predict_logits(x, batch_size))

    def predict_logits(self, x, batch_size=512):
        x = np.asarray(x)
        if len(x) == 0:
            return np.zeros((0, self.n_outputs), dtype=self.dtype)
        return np.concatenate(
            [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        )

    def predict(self, x, batch_size=512):
        return np.argmax(self.predict_logits(x, batch_size), axis=1)

    # ------------------------------------------------------------- structure

    def parameters(self):
        """``((layer_index, param_name), array)`` for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for pname in sorted(layer.params):
                yield (i, pname), layer.params[pname]

    def set_trainable(self, subset=None):
        """Freeze everything outside ``subset`` (layer/group names; None = all)."""
        keep = set(resolve_subset(self.spec, subset))
        self.frozen = frozenset(i for i in range(len(self.layers)) if i not in keep)
        return self

    def state_arrays(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(((i, k), a) for k, a in layer.state_arrays())
        return out

    def checksum(self):
        h = hashlib.sha256()
        for _, arr in self.state_arrays():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def copy(self):
        return copy.deepcopy(self)

    def reindex_outputs(self, keep, rng=None):
        """Copy whose output neuron ``j`` is old neuron ``keep[j]``.

        ``None`` entries get freshly initialised weights, so widening by k
        classes is ``list(range(n)) + [None] * k``.
        """
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        new = self.copy()
        new.spec = self.spec.with_outputs(len(keep))
        idx = self.spec.last_weighted
        layer = new.layers[idx]
        layer.spec = new.spec.layers[idx]
        w_old = self.layers[idx].params["W"]
        fan_in = w_old.shape[0]
        fresh = he_uniform(rng, (fan_in, len(keep)), fan_in, self.dtype)
        w = np.empty((fan_in, len(keep)), dtype=self.dtype)
        b = np.zeros(len(keep), dtype=self.dtype)
        for j, src in enumerate(keep):
            if src is None:
                w[:, j] = fresh[:, j]
            else:
                w[:, j] = w_old[:, src]
                if "b" in layer.params:
                    b[j] = self.layers[idx].params["b"][src]
        layer.params["W"] = w
        if "b" in layer.params:
            layer.params["b"] = b
        new.velocity = {}
        return new


def forward(net, batch):
    """Eval-mode logits for ``batch`` (shape ``[B, *input_shape]``)."""
    return net.forward(batch, train=False)


def loss_and_gradients(net, batch, labels, rng=None):
    """Mean softmax cross-entropy and its gradient for every unfrozen parameter.

    Returns ``(loss, grads)`` where ``grads`` maps ``(layer_index, name)``
    to an array shaped like the parameter.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_out = net.n_outputs
    if labels.size and (labels.min() < 0 or labels.max() >= n_out):
        raise ValueError(f"labels must lie in [0, {n_out}); got range [{labels.min()}, {labels.max()}]")
    if len(labels) != len(batch):
        raise ValueError("batch and labels differ in length")
    caches = []
    logits = net.forward(batch, train=True, rng=rng, caches=caches)
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    probs[rows, labels] -= 1.0
    dy = (probs / len(labels)).astype(net.dtype)

    trainable = [i for i in range(len(caches)) if i not in net.frozen and net.layers[i].params]
    grads = {}
    if not trainable:
        return loss, grads
    first = min(trainable)
    for i in range(len(caches) - 1, first - 1, -1):
        layer = net.layers[i]
        dx, g = layer.backward(dy, caches[i], need_dx=i > first)
        if i not in net.frozen:
            for pname, arr in g.items():
                grads[(i, pname)] = arr
        dy = dx
    return loss, grads


def sgd_update(net, grads, schedule, epoch):
    """In-place momentum step: ``v = mu*v - lr*(g + wd*w); w += v``.

    Weight decay applies to conv/fully-connected weights (``W``) only.
    """
    lr = schedule.lr_at(epoch)
    mu = schedule.momentum
    wd = schedule.weight_decay
    for key, g in grads.items():
        i, pname = key
        w = net.layers[i].params[pname]
        if g.shape != w.shape:
            raise SpecError(f"gradient shape {g.shape} != weight shape {w.shape}", net.layers[i].name)
        step = g + wd * w if (wd and pname == "W") else g
        v = net.velocity.get(key)
        v = -lr * step if v is None else mu * v - lr * step
        v = v.astype(w.dtype, copy=False)
        net.velocity[key] = v
        w += v
    return net


def train_network(net, images, labels, schedule, trainable=None, progress=None):
    """Mini-batch SGD over ``(images, labels)``.

    Returns ``(net, samples_seen)`` where ``samples_seen`` is the number of
    distinct training samples (0 when ``schedule.epochs == 0``), the figure
    used for training-effort accounting.  ``net.history`` receives the mean
    loss of each epoch.
    """
    from treecnn.data import augment_flip

    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= net.n_outputs:
        raise ValueError(f"labels must lie in [0, {net.n_outputs})")
    if schedule.epochs == 0:
        return net, 0
    net.set_trainable(trainable)
    net.velocity = {}  # every training session starts from rest
    shuffle_ss, dropout_ss, flip_ss = np.random.SeedSequence(schedule.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    flip_rng = np.random.default_rng(flip_ss)
    can_flip = images.ndim == 4 and schedule.flip_prob > 0
    n = len(images)
    for epoch in range(schedule.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            xb = images[idx].astype(net.dtype, copy=False)
            if can_flip:
                xb = augment_flip(xb, schedule.flip_prob, flip_rng)
            loss, grads = loss_and_gradients(net, xb, labels[idx], rng=dropout_rng)
            sgd_update(net, grads, schedule, epoch)
            total += loss * len(idx)
        net.history.append(total / n)
        if progress is not None:
            progress(epoch, total / n)
    net.set_trainable(None)
    net.trained = True
    return net, n
