"""Node and baseline architectures.

``cifar10_root``/``cifar10_branch`` are the CIFAR-10 Tree-CNN nodes,
``network_b`` the VGG-style fine-tuning baseline, ``cifar100_root`` and
``cifar100_branch`` the CIFAR-100 Tree-CNN nodes.  Every builder takes the
output count, an input shape (default 3x32x32) and a ``shrink`` divisor for
channel and hidden widths so the same topologies run at desk scale.

Convolutions are followed by batch-norm then ReLU and use same-padding.
Layers are grouped (``CONV-1``..``CONV-4``, ``FC``) for fine-tuning
subsets and weight counting.
"""
from treecnn.nn.spec import LayerSpec, NetworkSpec

CIFAR_SHAPE = (3, 32, 32)


class _Builder:
    def __init__(self, shrink=1, fc_shrink=None):
        self.layers = []
        self.shrink = shrink
        self.fc_shrink = shrink if fc_shrink is None else fc_shrink
        self._count = {}

    def _name(self, stem):
        self._count[stem] = self._count.get(stem, 0) + 1
        return f"{stem}{self._count[stem]}"

    def conv(self, group, channels, kernel):
        ch = max(1, channels // self.shrink)
        self.layers.append(LayerSpec("conv", self._name("conv"), group, channels=ch, kernel=kernel, bias=False))
        self.layers.append(LayerSpec("batch-norm", self._name("bn"), group))
        self.layers.append(LayerSpec("relu", self._name("relu"), group))
        return self

    def dropout(self, group, p):
        self.layers.append(LayerSpec("dropout", self._name("drop"), group, p=p))
        return self

    def pool(self, group, kind="max", window=2):
        self.layers.append(LayerSpec(f"{kind}-pool", self._name("pool"), group, window=window))
        return self

    def fc(self, units, relu=True, scale=True):
        u = max(1, units // self.fc_shrink) if scale else units
        self.layers.append(LayerSpec("fully-connected", self._name("fc"), "FC", units=u))
        if relu:
            self.layers.append(LayerSpec("relu", self._name("relu"), "FC"))
        return self

    def softmax(self):
        self.layers.append(LayerSpec("softmax", "softmax", "FC"))
        return self

    def spec(self, input_shape, title):
        return NetworkSpec(input_shape=tuple(input_shape), layers=tuple(self.layers), title=title)


def cifar10_root(n_outputs=2, input_shape=CIFAR_SHAPE, shrink=1, fc_shrink=None):
    b = _Builder(shrink, fc_shrink)
    b.conv("CONV-1", 64, 5).pool("CONV-1")
    b.conv("CONV-2", 128, 3).dropout("CONV-2", 0.5).conv("CONV-2", 128, 3).pool("CONV-2")
    b.fc(512).dropout("FC", 0.5).fc(128).dropout("FC", 0.5)
    # the table lists a ReLU on the output layer too
    b.fc(n_outputs, relu=True, scale=False).softmax()
    return b.spec(input_shape, "cifar10-root")


def cifar10_branch(n_outputs, input_shape=CIFAR_SHAPE, shrink=1, fc_shrink=None):
    b = _Builder(shrink, fc_shrink)
    b.conv("CONV-1", 32, 5).pool("CONV-1").dropout("CONV-1", 0.25)
    b.conv("CONV-2", 64, 5).pool("CONV-2").dropout("CONV-2", 0.25)
    b.conv("CONV-3", 64, 3).pool("CONV-3", "avg").dropout("CONV-3", 0.25)
    b.fc(128).dropout("FC", 0.5)
    b.fc(n_outputs, relu=True, scale=False).softmax()
    return b.spec(input_shape, "cifar10-branch")


def network_b(n_outputs, input_shape=CIFAR_SHAPE, shrink=1, fc_shrink=None):
    b = _Builder(shrink, fc_shrink)
    for block, ch in (("CONV-1", 64), ("CONV-2", 128), ("CONV-3", 256), ("CONV-4", 512)):
        b.conv(block, ch, 3).dropout(block, 0.5).conv(block, ch, 3)
        b.pool(block, "avg" if block == "CONV-4" else "max")
    b.fc(1024).dropout("FC", 0.5).fc(1024).dropout("FC", 0.5)
    b.fc(n_outputs, relu=False, scale=False).softmax()
    return b.spec(input_shape, "network-b")


def cifar100_root(n_outputs, input_shape=CIFAR_SHAPE, shrink=1, fc_shrink=None):
    b = _Builder(shrink, fc_shrink)
    b.conv("CONV-1", 64, 5).pool("CONV-1")
    b.conv("CONV-2", 128, 3).dropout("CONV-2", 0.5).conv("CONV-2", 128, 3).pool("CONV-2")
    b.conv("CONV-3", 256, 3).dropout("CONV-3", 0.5).conv("CONV-3", 256, 3).pool("CONV-3", "avg")
    b.fc(1024).dropout("FC", 0.5).fc(1024).dropout("FC", 0.5)
    b.fc(n_outputs, relu=False, scale=False).softmax()
    return b.spec(input_shape, "cifar100-root")


def cifar100_branch(n_outputs, input_shape=CIFAR_SHAPE, shrink=1, fc_shrink=None):
    b = _Builder(shrink, fc_shrink)
    b.conv("CONV-1", 32, 5).pool("CONV-1").dropout("CONV-1", 0.25)
    b.conv("CONV-2", 64, 5).pool("CONV-2").dropout("CONV-2", 0.25)
    b.conv("CONV-3", 64, 3).dropout("CONV-3", 0.5).conv("CONV-3", 64, 3).pool("CONV-3", "avg")
    b.fc(512).dropout("FC", 0.5).fc(128).dropout("FC", 0.5)
    b.fc(n_outputs, relu=False, scale=False).softmax()
    return b.spec(input_shape, "cifar100-branch")


ARCHITECTURES = {
    "cifar10-root": cifar10_root,
    "cifar10-branch": cifar10_branch,
    "network-b": network_b,
    "cifar100-root": cifar100_root,
    "cifar100-branch": cifar100_branch,
}

# Fine-tuning depths of the baseline, counted from the classifier end.
BASELINE_MODES = {
    "B:I": ("FC",),
    "B:II": ("FC", "CONV-4"),
    "B:III": ("FC", "CONV-4", "CONV-3"),
    "B:IV": ("FC", "CONV-4", "CONV-3", "CONV-2"),
    "B:V": ("FC", "CONV-4", "CONV-3", "CONV-2", "CONV-1"),
}


def build(name, n_outputs, input_shape=CIFAR_SHAPE, shrink=1, fc_shrink=None):
    try:
        fn = ARCHITECTURES[name]
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    return fn(n_outputs, input_shape=input_shape, shrink=shrink, fc_shrink=fc_shrink)
