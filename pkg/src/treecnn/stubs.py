"""Stand-in classifiers for structural tests, audits and fuzzing."""
import hashlib

import numpy as np


class ClassifierRef:
    """Placeholder carrying only the output count (and checksum) of a saved classifier."""

    trained = True

    def __init__(self, n_outputs, checksum_value=None):
        self.n_outputs = int(n_outputs)
        self._checksum = checksum_value

    def checksum(self):
        return self._checksum

    def predict_logits(self, batch):
        raise RuntimeError("ClassifierRef holds no weights; load the checkpoint to run inference")

    def reindex_outputs(self, keep, rng=None):
        return ClassifierRef(len(keep), None)


class ConstantClassifier:
    """Emits the same score vector for every input."""

    trained = True

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)

    @property
    def n_outputs(self):
        return len(self.scores)

    def predict_logits(self, batch):
        return np.tile(self.scores, (len(batch), 1))

    def reindex_outputs(self, keep, rng=None):
        return ConstantClassifier([self.scores[k] if k is not None else -np.inf for k in keep])

    def checksum(self):
        return hashlib.sha256(self.scores.tobytes()).hexdigest()


class OracleRouter:
    """Perfect router: reads the class label from element 0 of each input and
    sends it toward the child that the node's label transform names.

    ``version`` stands in for trained weights: bump it to simulate a retrain.
    """

    trained = True

    def __init__(self, tree, node_id, version=0):
        self.tree = tree
        self.node_id = node_id
        self.version = version

    @property
    def n_outputs(self):
        return len(self.tree.nodes[self.node_id].children)

    def predict_logits(self, batch):
        node = self.tree.nodes[self.node_id]
        k = len(node.children)
        labels = np.asarray(batch).reshape(len(batch), -1)[:, 0].astype(np.int64)
        out = np.zeros((len(batch), k))
        for i, c in enumerate(labels):
            pos = node.label_transform.get(int(c))
            if pos is not None:
                out[i, pos] = 1.0
        return out

    def reindex_outputs(self, keep, rng=None):
        return OracleRouter(self.tree, self.node_id, self.version + 1)

    def checksum(self):
        return hashlib.sha256(f"{self.node_id}:{self.version}".encode()).hexdigest()


def oracle_factory(tree, node_id, n_outputs):
    return OracleRouter(tree, node_id)


def encode_labels(labels, shape=(1,)):
    """Inputs for :class:`OracleRouter`: the label in element 0, zeros elsewhere."""
    labels = np.asarray(labels)
    x = np.zeros((len(labels),) + tuple(shape))
    x.reshape(len(labels), -1)[:, 0] = labels
    return x
