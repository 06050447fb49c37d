"""Unsupervised k-means classifiers with label matching, and the posterior linear head."""
from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

NUM_CLASSES = 10


class NotFittedError(RuntimeError):
    pass


def _numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def reduce_posterior(posterior):
    """Sum ``[B, K, M]`` posterior presences over the part axis."""
    return posterior.sum(-1)


def hungarian_match(cost):
    """Permutation ``perm`` minimizing ``sum_i cost[i, perm[i]]``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=np.int64)
    perm[rows] = cols
    return perm


@dataclass
class KMeansClassifier:
    centers: np.ndarray      # [k, K]
    permutation: np.ndarray  # [k], cluster id -> class label
    source: str = "prior"


@dataclass
class LinearClassifier:
    weights: np.ndarray  # [K, 10]
    bias: np.ndarray     # [10]
    source: str = "posterior"


def _sq_dists(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def kmeans_plus_plus(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = ((x - centers[0]) ** 2).sum(-1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(-1))
    return np.array(centers)


def lloyd(x, k, seed, max_iter=300, tol=1e-6):
    """k-means++ seeding followed by Lloyd iterations.

    An emptied cluster is reseeded with the point farthest from its current
    center (lowest index on ties, each point used at most once per round).
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(x, k, rng)
    assign = np.zeros(len(x), dtype=np.int64)
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        assign = d.argmin(1)
        new = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for c in range(k):
            if counts[c]:
                new[c] = x[assign == c].mean(0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            far = d[np.arange(len(x)), assign]
            order = np.argsort(-far, kind="stable")
            for c, idx in zip(empty, order):
                new[c] = x[idx]
        shift = np.sqrt(((new - centers) ** 2).sum(-1)).max()
        centers = new
        if shift < tol and not len(empty):
            break
    assign = _sq_dists(x, centers).argmin(1)
    return centers, assign


def fit_kmeans_classifier(features, labels, k=NUM_CLASSES, seed=0, source="prior"):
    features = _numpy(features).astype(np.float64)
    labels = _numpy(labels).astype(np.int64)
    if len(features) < k:
        raise ValueError(f"need at least k={k} samples, got {len(features)}")
    centers, assign = lloyd(features, k, seed)
    counts = np.zeros((k, k))
    np.add.at(counts, (assign, labels), 1)
    return KMeansClassifier(centers=centers, permutation=hungarian_match(-counts), source=source)


def predict_kmeans(clf, features):
    if clf is None or clf.centers is None:
        raise NotFittedError("k-means classifier is not fitted")
    features = _numpy(features).astype(np.float64)
    return clf.permutation[_sq_dists(features, clf.centers).argmin(1)]


def linear_loss(weights, bias, features, labels):
    """Mean cross-entropy of the linear head; torch tensors in, scalar out."""
    logits = features @ weights + bias
    return torch.nn.functional.cross_entropy(logits, labels)


def train_linear(features, labels, epochs=100, lr=0.1, num_classes=NUM_CLASSES):
    """Full-batch Adam on the cross-entropy of a linear map; starts from zero weights."""
    x = torch.as_tensor(_numpy(features), dtype=torch.float64)
    y = torch.as_tensor(_numpy(labels), dtype=torch.int64)
    weights = torch.zeros(x.shape[1], num_classes, dtype=torch.float64, requires_grad=True)
    bias = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([weights, bias], lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        linear_loss(weights, bias, x, y).backward()
        opt.step()
    return LinearClassifier(weights.detach().numpy().copy(), bias.detach().numpy().copy())


def predict_linear(clf, features):
    features = _numpy(features).astype(np.float64)
    return (features @ clf.weights + clf.bias).argmax(1)


def classifier_features(source, prior, posterior):
    """Pick the ``[B, K]`` feature matrix a classifier of ``source`` consumes.

    ``posterior`` may be the full ``[B, K, M]`` array or already reduced to ``[B, K]``.
    """
    if source == "prior":
        return prior
    if source == "posterior":
        return reduce_posterior(posterior) if posterior.ndim == 3 else posterior
    raise ValueError(f"unknown feature source {source!r}")


def predict(clf, prior, posterior):
    """Labels from either classifier type given the model's two presence outputs."""
    feats = classifier_features(clf.source, prior, posterior)
    if isinstance(clf, LinearClassifier):
        return predict_linear(clf, feats)
    return predict_kmeans(clf, feats)


def accuracy(pred, labels):
    pred, labels = _numpy(pred), _numpy(labels)
    return float((pred == labels).mean())
