"""Dataset readers/writers, preprocessing, augmentation and class schedules."""
from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

CIFAR10_LABELS = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

CIFAR100_LABELS = (
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle",
    "bicycle", "bottle", "bowl", "boy", "bridge", "bus", "butterfly", "camel",
    "can", "castle", "caterpillar", "cattle", "chair", "chimpanzee", "clock",
    "cloud", "cockroach", "couch", "crab", "crocodile", "cup", "dinosaur",
    "dolphin", "elephant", "flatfish", "forest", "fox", "girl", "hamster",
    "house", "kangaroo", "keyboard", "lamp", "lawn_mower", "leopard", "lion",
    "lizard", "lobster", "man", "maple_tree", "motorcycle", "mountain", "mouse",
    "mushroom", "oak_tree", "orange", "orchid", "otter", "palm_tree", "pear",
    "pickup_truck", "pine_tree", "plain", "plate", "poppy", "porcupine",
    "possum", "rabbit", "raccoon", "ray", "road", "rocket", "rose", "sea",
    "seal", "shark", "shrew", "skunk", "skyscraper", "snail", "snake", "spider",
    "squirrel", "streetcar", "sunflower", "sweet_pepper", "table", "tank",
    "telephone", "television", "tiger", "tractor", "train", "trout", "tulip",
    "turtle", "wardrobe", "whale", "willow_tree", "wolf", "woman", "worm",
)

DIGIT_LABELS = tuple(str(i) for i in range(10))


class DataFormatError(ValueError):
    """Malformed or truncated dataset file."""


@dataclass
class DatasetSplit:
    """Images ``(n, C, H, W)`` with integer class labels.

    ``meta`` carries format details needed for byte-exact re-serialisation
    (CIFAR-100 coarse labels, IDX dimensionality).
    """

    images: np.ndarray
    labels: np.ndarray
    tag: str = "train"
    class_names: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.tag not in ("train", "test"):
            raise ValueError(f"split tag must be 'train' or 'test', got {self.tag!r}")

    def __len__(self):
        return len(self.labels)

    def classes(self):
        return sorted(int(c) for c in np.unique(self.labels))

    def by_class(self):
        """Class label -> sorted indices of its records."""
        return {c: np.flatnonzero(self.labels == c) for c in self.classes()}

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        meta = {k: (v[idx] if isinstance(v, np.ndarray) and len(v) == len(self) else v) for k, v in self.meta.items()}
        return DatasetSplit(self.images[idx], self.labels[idx], self.tag, self.class_names, meta)

    def restrict(self, classes):
        """Records whose label is in ``classes``, original order kept."""
        return self.take(np.flatnonzero(np.isin(self.labels, list(classes))))

    def name_of(self, label):
        if self.class_names and 0 <= label < len(self.class_names):
            return self.class_names[label]
        return str(label)


# ------------------------------------------------------------------ CIFAR


def parse_cifar(blob, variant, tag="train", expected_count=None):
    variant = int(variant)
    if variant not in (10, 100):
        raise ValueError("CIFAR variant must be 10 or 100")
    head = 1 if variant == 10 else 2
    rec = head + 3072
    if len(blob) == 0:
        raise DataFormatError("empty CIFAR file")
    if len(blob) % rec:
        raise DataFormatError(f"file size {len(blob)} is not a multiple of the {rec}-byte record")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, rec)
    n = len(raw)
    if expected_count is not None and n != expected_count:
        raise DataFormatError(f"expected {expected_count} records, found {n}")
    labels = raw[:, head - 1].astype(np.int64)
    if labels.max() >= variant:
        bad = int(np.argmax(labels >= variant))
        raise DataFormatError(f"record {bad}: label {labels[bad]} out of range for CIFAR-{variant}")
    meta = {"format": f"cifar{variant}"}
    if variant == 100:
        coarse = raw[:, 0].astype(np.int64)
        if coarse.max() >= 20:
            raise DataFormatError("coarse label out of range for CIFAR-100")
        meta["coarse"] = coarse
    images = raw[:, head:].reshape(n, 3, 32, 32).copy()
    names = CIFAR10_LABELS if variant == 10 else CIFAR100_LABELS
    return DatasetSplit(images, labels, tag, names, meta)


def load_cifar(path, variant, tag="train", expected_count=None):
    """Read a CIFAR-10 / CIFAR-100 binary batch file."""
    with open(path, "rb") as fh:
        return parse_cifar(fh.read(), variant, tag, expected_count)


def dump_cifar(split, variant):
    variant = int(variant)
    n = len(split)
    pixels = np.ascontiguousarray(split.images, dtype=np.uint8).reshape(n, 3072)
    if variant == 10:
        head = split.labels.astype(np.uint8)[:, None]
    else:
        coarse = split.meta.get("coarse", np.zeros(n, dtype=np.int64))
        head = np.stack([coarse.astype(np.uint8), split.labels.astype(np.uint8)], axis=1)
    return np.concatenate([head, pixels], axis=1).tobytes()


def save_cifar(split, path, variant):
    with open(path, "wb") as fh:
        fh.write(dump_cifar(split, variant))


# -------------------------------------------------------------------- IDX

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.str[1:]: code for code, dt in _IDX_TYPES.items()}


def parse_idx(blob):
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0 or blob[2] not in _IDX_TYPES:
        raise DataFormatError("not an IDX file (bad magic)")
    dtype = _IDX_TYPES[blob[2]]
    ndim = blob[3]
    if ndim < 1 or len(blob) < 4 + 4 * ndim:
        raise DataFormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4 : 4 + 4 * ndim])
    count = int(np.prod(dims))
    body = blob[4 + 4 * ndim :]
    if len(body) != count * dtype.itemsize:
        raise DataFormatError(f"IDX payload has {len(body)} bytes, header implies {count * dtype.itemsize}")
    return np.frombuffer(body, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def dump_idx(array):
    array = np.asarray(array)
    key = array.dtype.str[1:]
    if key not in _IDX_CODES:
        raise DataFormatError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, _IDX_CODES[key], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.astype(array.dtype.newbyteorder(">")).tobytes()


def read_idx(path):
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def write_idx(path, array):
    with open(path, "wb") as fh:
        fh.write(dump_idx(array))


def load_idx(images_path, labels_path=None, tag="train", class_names=None):
    """Image IDX file (``n x H x W`` or ``n x C x H x W``) plus optional label file.

    Without a label file every label is -1.
    """
    images = read_idx(images_path)
    if images.ndim not in (3, 4):
        raise DataFormatError(f"image IDX must be 3- or 4-dimensional, got {images.ndim}")
    idx_ndim = images.ndim
    if images.ndim == 3:
        images = images[:, None]
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1 or len(labels) != len(images):
            raise DataFormatError("label IDX must be 1-dimensional with one label per image")
        if len(labels) and labels.min() < 0:
            raise DataFormatError("negative label in IDX label file")
    else:
        labels = np.full(len(images), -1)
    return DatasetSplit(images, labels, tag, class_names, {"format": "idx", "idx_ndim": idx_ndim})


def save_idx(split, images_path, labels_path=None):
    images = split.images
    if split.meta.get("idx_ndim", 3 if images.shape[1] == 1 else 4) == 3:
        images = images[:, 0]
    write_idx(images_path, np.ascontiguousarray(images))
    if labels_path is not None:
        write_idx(labels_path, split.labels.astype(np.uint8))


# ---------------------------------------------------------- preprocessing


@dataclass
class PreprocessStats:
    """Transform fitted on a training split: GCN settings and optional ZCA."""

    gcn: bool = True
    eps: float = 1e-8
    zca_mean: np.ndarray | None = None
    zca_matrix: np.ndarray | None = None
    zca_reg: float = 1e-2


def global_contrast_normalize(images, eps=1e-8):
    """Per image: subtract the mean, divide by the RMS (floored at ``eps``)."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    x = x - x.mean(axis=1, keepdims=True)
    scale = np.sqrt((x * x).mean(axis=1, keepdims=True))
    x = x / np.maximum(scale, eps)
    return x.reshape(np.shape(images))


def fit_preprocess(train, gcn=True, zca=True, zca_reg=1e-2, eps=1e-8):
    if train.tag != "train":
        raise ValueError("preprocessing statistics must come from a training split")
    stats = PreprocessStats(gcn=gcn, eps=eps, zca_reg=zca_reg)
    if zca:
        x = train.images.astype(np.float64)
        if gcn:
            x = global_contrast_normalize(x, eps)
        x = x.reshape(len(x), -1)
        mean = x.mean(axis=0)
        xc = x - mean
        cov = xc.T @ xc / len(xc)
        evals, evecs = np.linalg.eigh(cov)
        evals = np.clip(evals, 0.0, None)
        stats.zca_mean = mean
        stats.zca_matrix = (evecs * (1.0 / np.sqrt(evals + zca_reg))) @ evecs.T
    return stats


def preprocess(split, stats=None):
    """GCN then ZCA whitening.  ``stats`` defaults to a fit on ``split`` itself
    (allowed only for training splits)."""
    if stats is None:
        stats = fit_preprocess(split)
    x = split.images.astype(np.float64)
    if stats.gcn:
        x = global_contrast_normalize(x, stats.eps)
    if stats.zca_matrix is not None:
        flat = x.reshape(len(x), -1)
        x = ((flat - stats.zca_mean) @ stats.zca_matrix).reshape(x.shape)
    return DatasetSplit(x.astype(np.float32), split.labels, split.tag, split.class_names, dict(split.meta))


def augment_flip(batch, p=0.5, rng=None):
    """Mirror each image about its vertical axis with probability ``p``."""
    if rng is None:
        rng = np.random.default_rng()
    flip = rng.random(len(batch)) < p
    if not flip.any():
        return batch
    out = batch.copy()
    out[flip] = batch[flip][..., ::-1]
    return out


def downsample(split, factor):
    """Average-pool images by an integer factor (desk-scale CIFAR)."""
    if factor == 1:
        return split
    n, c, h, w = split.images.shape
    ho, wo = h // factor, w // factor
    x = split.images[:, :, : ho * factor, : wo * factor].astype(np.float64)
    x = x.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))
    if split.images.dtype == np.uint8:
        x = np.rint(x).astype(np.uint8)
    return DatasetSplit(x, split.labels, split.tag, split.class_names, dict(split.meta))


# -------------------------------------------------------------- schedules


@dataclass(frozen=True)
class ClassSchedule:
    """Ordered, disjoint groups of class labels introduced one group per stage."""

    groups: tuple

    def __post_init__(self):
        groups = tuple(tuple(int(c) for c in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        seen = set()
        for i, g in enumerate(groups):
            if not g:
                raise ValueError(f"schedule group {i} is empty")
            dup = seen.intersection(g)
            if dup or len(set(g)) != len(g):
                raise ValueError(f"schedule group {i} repeats classes {sorted(dup) or list(g)}")
            seen.update(g)

    def __len__(self):
        return len(self.groups)

    def classes_through(self, t):
        return [c for g in self.groups[: t + 1] for c in g]

    def to_text(self, class_names=None):
        lines = []
        for i, g in enumerate(self.groups):
            names = [class_names[c] if class_names else str(c) for c in g]
            lines.append(f"{i}: " + ", ".join(names))
        return "\n".join(lines) + "\n"


def _norm(name):
    return re.sub(r"[\s_]+", "_", name.strip().lower())


def parse_schedule(text, class_names=None):
    """One group per line, ``[index:] a, b, c``; ``#`` starts a comment.

    Entries are class names (spaces and underscores are interchangeable)
    or integer labels.
    """
    lookup = {_norm(n): i for i, n in enumerate(class_names)} if class_names else {}
    groups = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.match(r"^\s*\d+\s*:(.*)$", line)
        if m:
            line = m.group(1)
        group = []
        for tok in (t.strip() for t in line.split(",")):
            if not tok:
                continue
            if tok.isdigit():
                group.append(int(tok))
            elif _norm(tok) in lookup:
                group.append(lookup[_norm(tok)])
            else:
                raise ValueError(f"line {lineno}: unknown class {tok!r}")
        groups.append(group)
    return ClassSchedule(tuple(groups))


def bundled_schedule_text(name):
    return resources.files("treecnn").joinpath("schedules", name).read_text()


def load_schedule(path, class_names=None):
    """Schedule from a file path, or a bundled name such as ``cifar100-paper.txt``."""
    if not os.path.exists(path):
        text = bundled_schedule_text(path)
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_schedule(text, class_names)


def stage_slices(split, schedule, t):
    """``(all data of groups 0..t, data of group t)``."""
    if not 0 <= t < len(schedule):
        raise IndexError(f"stage {t} outside schedule of {len(schedule)} groups")
    return split.restrict(schedule.classes_through(t)), split.restrict(schedule.groups[t])


# ------------------------------------------------------- desk-scale data


def make_digits(size=28, test_fraction=0.2, seed=0):
    """The 8x8 scikit-learn digits upsampled to ``size`` x ``size`` uint8.

    A small real 10-class image set shipped with scikit-learn, used for
    CPU-scale runs.  Returns ``(train, test)`` split per class.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    digits = load_digits()
    imgs = digits.images / 16.0
    big = np.stack([zoom(im, size / 8.0, order=1) for im in imgs])
    big = np.rint(np.clip(big, 0.0, 1.0) * 255).astype(np.uint8)[:, None]
    labels = digits.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        pick = rng.choice(idx, size=int(round(len(idx) * test_fraction)), replace=False)
        test_mask[pick] = True
    meta = {"format": "idx", "idx_ndim": 3}
    train = DatasetSplit(big[~test_mask], labels[~test_mask], "train", DIGIT_LABELS, dict(meta))
    test = DatasetSplit(big[test_mask], labels[test_mask], "test", DIGIT_LABELS, dict(meta))
    return train, test


def write_digits_idx(out_dir, size=28, seed=0):
    """Write the desk-scale digits set as four IDX files; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    train, test = make_digits(size=size, seed=seed)
    paths = {}
    for split in (train, test):
        img = os.path.join(out_dir, f"{split.tag}-images-idx3-ubyte")
        lab = os.path.join(out_dir, f"{split.tag}-labels-idx1-ubyte")
        save_idx(split, img, lab)
        paths[split.tag] = (img, lab)
    return paths
