"""Frozen multinomial-logistic classifier used to score reconstructions."""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import log_softmax

from ..errors import ContractViolation, StateError
from ..mathcore import Rng


class SurrogateClassifier:
    """Softmax regression on raw pixels, fitted once by minibatch SGD and then frozen."""

    def __init__(self, n_classes: int = 10, epochs: int = 8, lr: float = 0.5,
                 batch: int = 100, seed: int = 0):
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.batch = batch
        self.seed = seed
        self.W: np.ndarray | None = None
        self.b: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.W is not None

    def fit(self, images, labels) -> "SurrogateClassifier":
        X = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        y = np.asarray(labels, dtype=np.int64)
        if X.shape[0] != y.shape[0] or X.shape[0] == 0:
            raise ContractViolation("need as many labels as images, and at least one")
        n, d = X.shape
        W = np.zeros((d, self.n_classes))
        b = np.zeros(self.n_classes)
        rng = Rng(self.seed, stream_id=11)
        onehot = np.eye(self.n_classes)[y]
        for epoch in range(self.epochs):
            lr = self.lr / (1.0 + epoch)
            order = rng.permutation(n)
            for start in range(0, n, self.batch):
                idx = order[start:start + self.batch]
                p = np.exp(log_softmax(X[idx] @ W + b, axis=1))
                g = (p - onehot[idx]) / len(idx)
                W -= lr * (X[idx].T @ g)
                b -= lr * g.sum(axis=0)
        self.W, self.b = W, b
        return self

    def predict(self, images) -> np.ndarray:
        if not self.fitted:
            raise StateError("classifier has not been trained; call fit() first")
        X = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        if X.shape[1] != self.W.shape[0]:
            raise ContractViolation(f"images have {X.shape[1]} pixels, classifier expects {self.W.shape[0]}")
        return np.argmax(X @ self.W + self.b, axis=1)

    def accuracy(self, images, labels) -> float:
        labels = np.asarray(labels)
        if len(labels) == 0:
            raise ContractViolation("accuracy of an empty set")
        return float(np.mean(self.predict(images) == labels))


_CACHE: dict[str, SurrogateClassifier] = {}


def _fingerprint(images: np.ndarray, labels: np.ndarray, epochs: int) -> str:
    h = hashlib.sha1()
    h.update(str((images.shape, epochs)).encode())
    h.update(np.ascontiguousarray(labels).tobytes())
    h.update(np.ascontiguousarray(images[::97]).tobytes())
    return h.hexdigest()


def trained_classifier(train_images, train_labels, epochs: int = 8, seed: int = 0) -> SurrogateClassifier:
    """Fit once per (data, epochs) in this process and reuse afterwards."""
    images = np.asarray(train_images)
    labels = np.asarray(train_labels)
    key = _fingerprint(images, labels, epochs) + f":{seed}"
    if key not in _CACHE:
        _CACHE[key] = SurrogateClassifier(epochs=epochs, seed=seed).fit(images, labels)
    return _CACHE[key]


def evaluate_classifier(reconstructions, labels, train_images=None, train_labels=None,
                        classifier: SurrogateClassifier | None = None, epochs: int = 8) -> float:
    """Fraction of reconstructions the frozen classifier labels correctly.

    Pass a fitted ``classifier`` or the training data to fit (and cache) one.
    """
    if classifier is None:
        if train_images is None or train_labels is None:
            raise StateError("no trained classifier and no training data to fit one")
        classifier = trained_classifier(train_images, train_labels, epochs)
    return classifier.accuracy(reconstructions, labels)
