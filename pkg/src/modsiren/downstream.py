"""Classifiers operating directly on fitted latent vectors."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .meta_trainer import OptimizerState, adamw_update


@dataclass
class ClassifierReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list
    n_params: int = 0
    train_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "macro_f1": self.macro_f1,
            "per_class_f1": list(self.per_class_f1), "n_params": self.n_params,
            "train_seconds": self.train_seconds, **self.extra,
        }


def evaluate(predictions, labels, n_classes: int | None = None) -> ClassifierReport:
    """Accuracy and macro-F1; a class with no support and no predictions scores 0."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.size == 0:
        raise UsageError("predictions and labels must be non-empty and of equal length")
    if n_classes is None:
        n_classes = int(max(pred.max(), true.max())) + 1
    f1 = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        f1.append(float(2 * tp / denom) if denom else 0.0)
    return ClassifierReport(float(np.mean(pred == true)), float(np.mean(f1)), f1)


def knn_predict(train_latents, train_labels, queries, k: int = 1) -> np.ndarray:
    """Euclidean k-NN majority vote.

    Ties between classes go to the class owning the nearest of the tied
    neighbours, then to the lowest class index.
    """
    X = np.asarray(train_latents, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if X.shape[0] == 0:
        raise UsageError("k-NN needs a non-empty training set")
    if not 1 <= k <= X.shape[0]:
        raise UsageError(f"k must lie in 1..{X.shape[0]}, got {k}")
    d2 = ((Q[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = np.empty(Q.shape[0], dtype=np.int64)
    for q, nbrs in enumerate(order):
        votes = y[nbrs]
        classes, counts = np.unique(votes, return_counts=True)
        tied = classes[counts == counts.max()]
        if len(tied) == 1:
            out[q] = tied[0]
            continue
        best = None
        for rank, c in enumerate(votes):  # neighbours sorted by distance
            if c in tied:
                dist = d2[q, nbrs[rank]]
                if best is None or dist < best[0] or (dist == best[0] and c < best[1]):
                    best = (dist, c)
                if best is not None and dist > best[0]:
                    break
        out[q] = best[1]
    return out


class MLPClassifier:
    """ReLU MLP with dropout after each hidden layer."""

    def __init__(self, n_in: int, hidden=(512, 128), n_classes: int = 2,
                 dropout: float = 0.2, seed: int = 0):
        rng = np.random.default_rng(seed)
        sizes = [n_in, *hidden, n_classes]
        self.shapes = []
        chunks = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(a)
            chunks += [rng.uniform(-bound, bound, size=(b, a)).ravel(),
                       rng.uniform(-bound, bound, size=b)]
            self.shapes += [(b, a), (b,)]
        self.theta = np.concatenate(chunks)
        self.dropout = dropout
        self.n_classes = n_classes

    @property
    def n_params(self) -> int:
        return int(self.theta.size)

    def _unpack(self, theta):
        out, off = [], 0
        for shape in self.shapes:
            n = int(np.prod(shape))
            out.append(theta[off:off + n].reshape(shape))
            off += n
        return out

    def logits(self, X, theta=None, rng=None):
        params = self._unpack(self.theta if theta is None else theta)
        h, cache = X, []
        n_layers = len(params) // 2
        for i in range(n_layers):
            W, b = params[2 * i], params[2 * i + 1]
            z = h @ W.T + b
            if i == n_layers - 1:
                return z, cache
            a = np.maximum(z, 0.0)
            mask = None
            if rng is not None and self.dropout > 0:
                mask = (rng.random(a.shape) >= self.dropout) / (1.0 - self.dropout)
                a = a * mask
            cache.append((h, z, mask))
            h = a

    def loss_and_grad(self, X, y, rng):
        params = self._unpack(self.theta)
        z, cache = self.logits(X, rng=rng)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        n = X.shape[0]
        loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
        dz = p
        dz[np.arange(n), y] -= 1.0
        dz /= n
        grads = [None] * len(params)
        n_layers = len(params) // 2
        h_last = cache[-1]
        # output layer input is the post-dropout activation of the last hidden layer
        a_prev = np.maximum(h_last[1], 0.0) * (1 if h_last[2] is None else h_last[2])
        grads[-2] = dz.T @ a_prev
        grads[-1] = dz.sum(0)
        da = dz @ params[-2]
        for i in range(n_layers - 2, -1, -1):
            h_in, zi, mask = cache[i]
            if mask is not None:
                da = da * mask
            dzi = da * (zi > 0)
            grads[2 * i] = dzi.T @ h_in
            grads[2 * i + 1] = dzi.sum(0)
            if i > 0:
                da = dzi @ params[2 * i]
        return loss, np.concatenate([g.ravel() for g in grads])

    def predict(self, X):
        z, _ = self.logits(np.asarray(X, dtype=np.float64))
        return np.argmax(z, axis=1)


def split_indices(n: int, seed: int, fractions=(0.7, 0.1, 0.2)):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def mlp_classify_train(latent_dataset, hidden=(512, 128), dropout: float = 0.2,
                       epochs: int = 50, lr: float = 1e-3, batch_size: int = 64,
                       weight_decay: float = 0.01, seed: int = 0, split=None):
    """Train on a 70/10/20 split; report test metrics of the best-validation epoch.

    ``split`` may supply explicit (train, val, test) index arrays.
    """
    if latent_dataset.labels is None:
        raise UsageError("MLP classification needs a labelled latent dataset")
    X = np.asarray(latent_dataset.latents, dtype=np.float64)
    y = np.asarray(latent_dataset.labels, dtype=np.int64)
    n_classes = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise UsageError("MLP classification needs at least two classes")
    tr, va, te = split if split is not None else split_indices(len(y), seed)
    model = MLPClassifier(X.shape[1], hidden, n_classes, dropout, seed)
    state = OptimizerState.zeros(model.n_params)
    rng = np.random.default_rng([seed, 1])
    best_theta, best_val = model.theta.copy(), -1.0
    t0 = time.perf_counter()
    for _ in range(epochs):
        order = rng.permutation(tr)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            _, grad = model.loss_and_grad(X[idx], y[idx], rng)
            model.theta, state = adamw_update(model.theta, grad, state, lr,
                                              weight_decay=weight_decay)
        val_eval = va if len(va) else tr
        val_acc = float(np.mean(model.predict(X[val_eval]) == y[val_eval]))
        if val_acc > best_val:
            best_val, best_theta = val_acc, model.theta.copy()
    seconds = time.perf_counter() - t0
    model.theta = best_theta
    test_idx = te if len(te) else tr
    report = evaluate(model.predict(X[test_idx]), y[test_idx], n_classes)
    report.n_params = model.n_params
    report.train_seconds = seconds
    report.extra = {"best_val_accuracy": best_val if epochs else None, "epochs": epochs}
    return model, report


def knn_report(latent_dataset, k: int = 1, seed: int = 0, split=None) -> ClassifierReport:
    """k-NN with the same split convention as the MLP (train+val as the reference set)."""
    if latent_dataset.labels is None:
        raise UsageError("k-NN classification needs a labelled latent dataset")
    X = np.asarray(latent_dataset.latents, dtype=np.float64)
    y = np.asarray(latent_dataset.labels, dtype=np.int64)
    tr, va, te = split if split is not None else split_indices(len(y), seed)
    ref = np.concatenate([tr, va])
    t0 = time.perf_counter()
    pred = knn_predict(X[ref], y[ref], X[te], k)
    report = evaluate(pred, y[te], int(y.max()) + 1)
    report.train_seconds = time.perf_counter() - t0
    return report
