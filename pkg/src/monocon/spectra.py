"""PCA-based compactness and robustness, and correlation-structure analysis."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateError, DimensionError

CUMSUM_TOL = 1e-12


@dataclass
class PcaModel:
    mean: np.ndarray  # (1, d)
    components: np.ndarray  # (d, d), columns sorted by descending variance
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    n_samples: int

    @property
    def dim(self) -> int:
        return self.components.shape[0]


def pca_fit(train) -> PcaModel:
    """PCA via SVD of the centered data.

    Each component is sign-flipped so that its largest-magnitude entry is
    positive (first such entry on ties).
    """
    x = np.asarray(train, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError(f"PCA needs at least 2 rows, got shape {x.shape}")
    n, d = x.shape
    mean = x.mean(axis=0, keepdims=True)
    # full V is only needed to complete the basis when n < d
    _, s, vt = np.linalg.svd(x - mean, full_matrices=n < d)
    var = np.zeros(d)
    var[: len(s)] = s**2 / (n - 1)
    tot = var.sum()
    # rows equal up to rounding count as constant
    if tot <= (1e-12 * max(1.0, float(np.abs(x).max()))) ** 2:
        raise DegenerateError("PCA of constant data: total variance is zero")
    comps = vt.T.copy()
    pivot = np.argmax(np.abs(comps), axis=0)
    comps *= np.where(comps[pivot, np.arange(d)] < 0, -1.0, 1.0)
    return PcaModel(mean, comps, var, var / tot, n)


def cumulative_variance(pca: PcaModel) -> np.ndarray:
    c = np.cumsum(pca.explained_variance_ratio)
    c[-1] = 1.0
    return c


def effective_dim(pca: PcaModel, threshold: float = 0.99) -> int:
    """Smallest number of leading components whose variance share reaches ``threshold``."""
    if not 0 < threshold <= 1:
        raise ConfigError(f"threshold must be in (0, 1], got {threshold}")
    c = cumulative_variance(pca)
    return int(np.searchsorted(c, threshold - CUMSUM_TOL, side="left")) + 1


def _check_k(pca: PcaModel, x: np.ndarray, k: int):
    if x.ndim != 2 or x.shape[1] != pca.dim:
        raise DimensionError(f"expected width {pca.dim}, got shape {x.shape}")
    if not 1 <= k <= pca.dim:
        raise ConfigError(f"k must be in [1, {pca.dim}], got {k}")


def truncate_embeddings(pca: PcaModel, x, k: int) -> np.ndarray:
    """Scores of ``x`` on the first ``k`` components."""
    x = np.asarray(x, dtype=np.float64)
    _check_k(pca, x, k)
    return (x - pca.mean) @ pca.components[:, :k]


def inverse_transform(pca: PcaModel, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[1]
    return scores @ pca.components[:, :k].T + pca.mean


def pca_reconstruction_rms(pca: PcaModel, test, k: int) -> float:
    """RMS over all entries of ``test`` minus its rank-``k`` PCA reconstruction."""
    x = np.asarray(test, dtype=np.float64)
    _check_k(pca, x, k)
    resid = x - inverse_transform(pca, truncate_embeddings(pca, x, k))
    return float(np.sqrt(np.mean(resid**2)))


def correlation_matrix(features) -> np.ndarray:
    """Pearson correlation between columns.

    A column with (numerically) zero variance gets correlation 0 with every
    other column and 1 with itself.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError(f"correlation needs at least 2 rows, got shape {x.shape}")
    xc = x - x.mean(axis=0, keepdims=True)
    std = np.sqrt(np.einsum("ij,ij->j", xc, xc))
    scale = np.maximum(np.abs(x).max(axis=0), 1.0) * np.sqrt(x.shape[0])
    dead = std <= 1e-12 * scale
    z = np.where(dead, 0.0, xc / np.where(dead, 1.0, std))
    corr = np.clip(z.T @ z, -1.0, 1.0)
    corr = (corr + corr.T) / 2
    np.fill_diagonal(corr, 1.0)
    return corr


@dataclass
class Dendrogram:
    """Average-linkage merge history.

    ``merges`` rows are ``(left_id, right_id, height, size)`` with leaves
    numbered ``0..d-1`` and the cluster created by merge ``t`` numbered
    ``d + t``, the same layout as a scipy linkage matrix.
    """

    merges: list[tuple[int, int, float, int]]
    order: list[int]
    n_leaves: int

    def cut(self, n_clusters: int) -> np.ndarray:
        """Flat cluster label per leaf after stopping with ``n_clusters`` clusters left."""
        d = self.n_leaves
        if not 1 <= n_clusters <= d:
            raise ConfigError(f"n_clusters must be in [1, {d}]")
        parent = list(range(2 * d - 1))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for t, (a, b, _, _) in enumerate(self.merges[: d - n_clusters]):
            parent[find(a)] = d + t
            parent[find(b)] = d + t
        roots = [find(i) for i in range(d)]
        relabel: dict[int, int] = {}
        return np.array([relabel.setdefault(r, len(relabel)) for r in roots])


def agglomerative_order(corr) -> Dendrogram:
    """Average linkage on ``1 - corr``; ties go to the pair with the smallest ids."""
    c = np.asarray(corr, dtype=np.float64)
    d = c.shape[0]
    if c.shape != (d, d):
        raise DimensionError(f"correlation matrix must be square, got {c.shape}")
    if d == 1:
        return Dendrogram([], [0], 1)
    dist = np.maximum(1.0 - c, 0.0)
    big = np.full((2 * d - 1, 2 * d - 1), np.inf)
    big[:d, :d] = dist
    np.fill_diagonal(big, np.inf)
    size = np.zeros(2 * d - 1, dtype=np.int64)
    size[:d] = 1
    active = np.zeros(2 * d - 1, dtype=bool)
    active[:d] = True
    children: dict[int, tuple[int, int]] = {}
    merges = []
    for t in range(d - 1):
        idx = np.flatnonzero(active)
        sub = big[np.ix_(idx, idx)]
        # row-major argmin over the upper triangle = lexicographically smallest pair
        sub = np.where(np.triu(np.ones_like(sub, dtype=bool), 1), sub, np.inf)
        flat = int(np.argmin(sub))
        i, j = idx[flat // len(idx)], idx[flat % len(idx)]
        h = float(big[i, j])
        new = d + t
        ni, nj = size[i], size[j]
        others = idx[(idx != i) & (idx != j)]
        row = (ni * big[i, others] + nj * big[j, others]) / (ni + nj)
        big[new, others] = row
        big[others, new] = row
        size[new] = ni + nj
        active[[i, j]] = False
        active[new] = True
        children[new] = (int(i), int(j))
        merges.append((int(i), int(j), h, int(ni + nj)))

    order: list[int] = []
    stack = [2 * d - 2]
    while stack:
        node = stack.pop()
        if node < d:
            order.append(node)
        else:
            left, right = children[node]
            stack.extend((right, left))
    return Dendrogram(merges, order, d)


def block_score(corr, clusters) -> float:
    """Mean |corr| within clusters minus mean |corr| across clusters, diagonal excluded.

    A partition with no within-cluster pair (all singletons) uses 1 for the
    within term; a single cluster uses 0 for the across term.
    """
    c = np.abs(np.asarray(corr, dtype=np.float64))
    lab = np.asarray(clusters)
    if lab.shape != (c.shape[0],):
        raise DimensionError(f"partition of {lab.shape} does not cover {c.shape[0]} features")
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    within_mask, across_mask = same & off, ~same
    within = c[within_mask].mean() if within_mask.any() else 1.0
    across = c[across_mask].mean() if across_mask.any() else 0.0
    return float(within - across)


def best_block_cut(corr, tree: Dendrogram | None = None) -> tuple[float, np.ndarray]:
    """Maximize :func:`block_score` over the dendrogram's non-trivial cuts.

    Candidates are every cut leaving between 2 and ``d - 1`` clusters; the
    all-singletons and single-cluster partitions have no block contrast.
    Ties go to the cut with fewer clusters.
    """
    c = np.asarray(corr, dtype=np.float64)
    d = c.shape[0]
    if d < 3:
        raise DimensionError("block structure needs at least 3 features")
    tree = tree or agglomerative_order(c)
    best, best_lab = -np.inf, None
    for n in range(2, d):
        lab = tree.cut(n)
        s = block_score(c, lab)
        if s > best:
            best, best_lab = s, lab
    return float(best), best_lab


@dataclass
class SpectralReport:
    d_eff: int
    recon_rms: float
    corr: np.ndarray
    cluster_order: list[int]
    merge_tree: list[tuple[int, int, float, int]]
    block_score: float
    clusters: list[int]
    explained_variance_ratio: np.ndarray
    threshold: float = 0.99
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["corr"] = self.corr.tolist()
        out["explained_variance_ratio"] = self.explained_variance_ratio.tolist()
        out["merge_tree"] = [list(m) for m in self.merge_tree]
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def write_corr_csv(self, path, reorder: bool = True) -> None:
        order = self.cluster_order if reorder else list(range(len(self.corr)))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", *order])
            for i in order:
                w.writerow([i, *(repr(float(v)) for v in self.corr[i, order])])


def spectral_report(train, test, threshold: float = 0.99, corr_subset: int | None = None) -> SpectralReport:
    """Fit PCA on ``train``; d_eff, held-out reconstruction and block structure.

    ``corr_subset`` restricts the correlation matrix to the first rows of ``train``.
    """
    train = np.asarray(train, dtype=np.float64)
    pca = pca_fit(train)
    k = effective_dim(pca, threshold)
    rms = pca_reconstruction_rms(pca, test, k)
    corr = correlation_matrix(train if corr_subset is None else train[:corr_subset])
    tree = agglomerative_order(corr)
    score, lab = best_block_cut(corr, tree) if len(corr) >= 3 else (float("nan"), np.zeros(len(corr), int))
    return SpectralReport(k, rms, corr, tree.order, tree.merges, score, lab.tolist(),
                          pca.explained_variance_ratio, threshold)


def rank_trajectory(log) -> list[dict]:
    """One row per validation snapshot: epoch and the three d_eff values."""
    snaps = getattr(log, "snapshots", log)
    if not snaps:
        raise ConfigError("training log has no validation snapshots")
    return [{"epoch": s["epoch"], "d_eff_encoder": s["d_eff"]["encoder_out"],
             "d_eff_head_raw": s["d_eff"]["head_raw"],
             "d_eff_head_normalized": s["d_eff"]["head_normalized"]} for s in snaps]


def write_rows_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
