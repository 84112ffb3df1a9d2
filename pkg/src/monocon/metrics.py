"""k-NN accuracy, Recall@k and Spearman correlation.

Neighbors are ranked by cosine similarity. Equal similarities keep the
smaller gallery index first, and majority-vote ties go to the smallest
class id, so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DegenerateError, DimensionError


@dataclass
class EvalSplit:
    gallery: np.ndarray
    gallery_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray

    def __post_init__(self):
        self.gallery = np.asarray(self.gallery, dtype=np.float64)
        self.query = np.asarray(self.query, dtype=np.float64)
        self.gallery_labels = np.asarray(self.gallery_labels)
        self.query_labels = np.asarray(self.query_labels)
        if len(self.gallery) == 0:
            raise DimensionError("gallery is empty")
        if self.gallery.shape[1] != self.query.shape[1]:
            raise DimensionError(f"gallery width {self.gallery.shape[1]} != query width {self.query.shape[1]}")

    @classmethod
    def from_datasets(cls, gallery, query) -> "EvalSplit":
        return cls(gallery.features, gallery.labels, query.features, query.labels)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateError("cosine similarity undefined for a zero embedding")
    return x / norms


def neighbor_ranking(split: EvalSplit, k: int) -> np.ndarray:
    """Indices of the ``k`` most cosine-similar gallery rows for every query."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > len(split.gallery):
        raise ConfigError(f"k={k} exceeds gallery size {len(split.gallery)}")
    sim = _unit_rows(split.query) @ _unit_rows(split.gallery).T
    # stable sort on -sim: equal similarities keep ascending gallery index
    return np.argsort(-sim, axis=1, kind="stable")[:, :k]


def knn_predict(split: EvalSplit, k: int = 5) -> np.ndarray:
    nbrs = split.gallery_labels[neighbor_ranking(split, k)]
    n_classes = int(max(split.gallery_labels.max(), split.query_labels.max(initial=0))) + 1
    votes = np.zeros((len(nbrs), n_classes), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(len(nbrs)), k), nbrs.ravel()), 1)
    return np.argmax(votes, axis=1)  # first max = smallest class id


def knn_accuracy(split: EvalSplit, k: int = 5) -> float:
    if len(split.query) == 0:
        raise DimensionError("query set is empty")
    return float(np.mean(knn_predict(split, k) == split.query_labels))


def recall_at_k(split: EvalSplit, k: int = 1) -> float:
    """Fraction of queries with at least one same-label item among their top ``k``."""
    if len(split.query) == 0:
        raise DimensionError("query set is empty")
    nbrs = split.gallery_labels[neighbor_ranking(split, k)]
    return float(np.mean(np.any(nbrs == split.query_labels[:, None], axis=1)))


def recall_curve(split: EvalSplit, ks) -> dict[int, float]:
    ks = sorted(set(int(k) for k in ks))
    nbrs = split.gallery_labels[neighbor_ranking(split, ks[-1])]
    hit = np.cumsum(nbrs == split.query_labels[:, None], axis=1) > 0
    return {k: float(np.mean(hit[:, k - 1])) for k in ks}


def spearman(pred_scores, gold_scores) -> float:
    """Pearson correlation of average ranks."""
    a = np.asarray(pred_scores, dtype=np.float64)
    b = np.asarray(gold_scores, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"score sequences differ in shape: {a.shape} vs {b.shape}")
    if len(a) < 2:
        raise DimensionError("need at least two scores")
    ra, rb = rankdata(a) - (len(a) + 1) / 2, rankdata(b) - (len(b) + 1) / 2
    den = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if den == 0:
        raise DegenerateError("Spearman correlation undefined for constant input")
    return float(np.clip(np.dot(ra, rb) / den, -1.0, 1.0))
