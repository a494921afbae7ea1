"""Frozen-feature probes: kNN, linear probe, collapse diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coding_rate import CodingRateConfig, coding_rate_value
from .encoder import EncoderParams, encode_numpy
from .views import eval_view

DEFAULT_K = 20


@dataclass
class FeatureTable:
    features: np.ndarray  # d×M, unit columns
    labels: np.ndarray  # (M,)
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[1] if self.features.ndim == 2 else '?'} feature columns "
                f"but {self.labels.shape[0]} labels")
        norms = np.linalg.norm(self.features, axis=0)
        if self.features.size and np.max(np.abs(norms - 1.0)) > 1e-8:
            raise ValueError("feature columns must be unit norm")

    @property
    def d(self) -> int:
        return self.features.shape[0]

    @property
    def M(self) -> int:
        return self.features.shape[1]


def knn_probe(train: FeatureTable, val: FeatureTable, k: int = DEFAULT_K) -> float:
    """Majority vote among the k most cosine-similar training features.

    Training points tied with the k-th largest similarity all vote, so the
    neighbourhood never depends on storage order. Equal vote counts go to
    the smaller class id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if train.M == 0:
        raise ValueError("empty training table")
    if k > train.M:
        raise ValueError(f"k={k} exceeds training set size {train.M}")
    if val.M == 0:
        return float("nan")
    sims = val.features.T @ train.features  # (Mv, Mt)
    kth = -np.partition(-sims, k - 1, axis=1)[:, k - 1]
    n_cls = int(max(train.labels.max(), val.labels.max())) + 1
    counts = (sims >= kth[:, None]).astype(np.float64) @ np.eye(n_cls)[train.labels]
    pred = np.argmax(counts, axis=1)  # first max = smallest class id
    return float(np.mean(pred == val.labels))


def linear_probe(train: FeatureTable, val: FeatureTable, epochs: int = 500, lr: float = 1.0,
                 seed: int = 0, weight_decay: float = 0.0) -> float:
    """Multinomial logistic regression by full-batch gradient descent."""
    if train.M == 0 or val.M == 0:
        raise ValueError("linear probe needs non-empty splits")
    rng = np.random.default_rng(seed)
    n_cls = int(max(train.labels.max(), val.labels.max())) + 1
    X = train.features.T
    Y = np.eye(n_cls)[train.labels]
    W = 1e-3 * rng.standard_normal((train.d, n_cls))
    b = np.zeros(n_cls)
    for epoch in range(epochs):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        loss = -np.mean(np.sum(Y * np.log(np.maximum(P, 1e-300)), axis=1))
        if not np.isfinite(loss):
            raise FloatingPointError(f"linear probe loss is not finite at epoch {epoch}: {loss}")
        G = (P - Y) / train.M
        W -= lr * (X.T @ G + weight_decay * W)
        b -= lr * G.sum(axis=0)
    pred = np.argmax(val.features.T @ W + b, axis=1)
    return float(np.mean(pred == val.labels))


def effective_rank(features: np.ndarray) -> float:
    """exp(entropy of the normalized eigenvalues of ZZᵀ/M); Z is d×M."""
    Z = np.asarray(features, dtype=np.float64)
    ev = np.clip(np.linalg.eigvalsh(Z @ Z.T / Z.shape[1]), 0.0, None)
    p = ev / ev.sum()
    p = p[p > 0]
    return float(np.clip(np.exp(-np.sum(p * np.log(p))), 1.0, Z.shape[0]))


def mean_pairwise_cosine(features: np.ndarray, max_pairs: int = 10_000, seed: int = 0) -> float:
    Z = np.asarray(features, dtype=np.float64)
    M = Z.shape[1]
    total = M * (M - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(M, k=1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(0, M, size=max_pairs)
        j = (i + rng.integers(1, M, size=max_pairs)) % M
    return float(np.mean(np.sum(Z[:, i] * Z[:, j], axis=0)))


def collapse_metrics(features: np.ndarray, eps: float = 0.5) -> dict:
    Z = np.asarray(features, dtype=np.float64)
    if Z.shape[1] < 2:
        raise ValueError("collapse metrics need at least 2 features")
    return {
        "coding_rate": coding_rate_value(Z, CodingRateConfig(eps)),
        "effective_rank": effective_rank(Z),
        "mean_pairwise_cosine": mean_pairwise_cosine(Z),
    }


def extract_features(params: EncoderParams, images: np.ndarray, short_edge: int, size: int) -> np.ndarray:
    """Unit cls features (d, M) of the deterministic eval view of each image."""
    P = params.cfg.patch_size
    seqs = [eval_view(img, short_edge, size, P) for img in images]
    tokens = np.stack([s.tokens.T for s in seqs])
    return encode_numpy(params, tokens, seqs[0].grid).T


def probe_suite(params: EncoderParams, dataset, short_edge: int, size: int, k: int = DEFAULT_K,
                probe_epochs: int = 500, probe_lr: float = 1.0, seed: int = 0) -> dict:
    """kNN, linear probe and collapse metrics of ``params`` on a train/val dataset."""
    feats = extract_features(params, dataset.images, short_edge, size)
    tr, va = dataset.indices("train"), dataset.indices("val")
    train = FeatureTable(feats[:, tr], dataset.labels[tr], "train")
    val = FeatureTable(feats[:, va], dataset.labels[va], "val")
    out = {
        "knn": knn_probe(train, val, min(k, train.M)),
        "linear": linear_probe(train, val, probe_epochs, probe_lr, seed),
    }
    out.update(collapse_metrics(feats))
    return out
