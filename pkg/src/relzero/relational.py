"""Pairwise patch-distance geometry: distance matrices, stability scores, top-K pairs.

Pairs are always unordered and canonical (i < j), enumerated lexicographically:
(0,1), (0,2), ..., (0,P-1), (1,2), ... Condensed vectors (stability scores,
pair probabilities) follow this order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import PatchFeatureMap


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric P x P matrix of pairwise L2 feature distances, zero diagonal."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
            raise ValueError(f"expected square matrix, got shape {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("non-finite distance")
        if (vals < 0).any():
            raise ValueError("negative distance")
        if not np.array_equal(vals, vals.T):
            raise ValueError("matrix is not symmetric")
        if np.diagonal(vals).any():
            raise ValueError("diagonal must be zero")
        vals = np.ascontiguousarray(vals)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def P(self) -> int:
        return self.values.shape[0]

    def condensed(self) -> np.ndarray:
        """Upper-triangle entries in canonical pair order."""
        iu, ju = np.triu_indices(self.P, k=1)
        return self.values[iu, ju]


@dataclass(frozen=True)
class PairIndexSet:
    """A set of unordered patch-pair indices (i < j) over P patches."""

    P: int
    pairs: frozenset[tuple[int, int]]

    def __post_init__(self) -> None:
        pairs = frozenset((int(i), int(j)) for i, j in self.pairs)
        for i, j in pairs:
            if not (0 <= i < j < self.P):
                raise ValueError(f"pair ({i}, {j}) violates 0 <= i < j < P={self.P}")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def sorted_pairs(self) -> list[tuple[int, int]]:
        return sorted(self.pairs)


@dataclass(frozen=True)
class StabilityScores:
    """Per-pair stability exp(-|d - d_hat|) in canonical pair order, values in (0, 1]."""

    P: int
    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        m = self.P * (self.P - 1) // 2
        if scores.shape != (m,):
            raise ValueError(f"expected {m} scores for P={self.P}, got {scores.shape}")
        if not np.isfinite(scores).all():
            raise ValueError("non-finite score")
        if (scores <= 0).any() or (scores > 1).any():
            raise ValueError("scores must lie in (0, 1]")
        scores = np.ascontiguousarray(scores)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)


def canonical_pairs(P: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (i, j) of all canonical pairs in lexicographic order."""
    return np.triu_indices(P, k=1)


def pairwise_distances(fm: PatchFeatureMap) -> DistanceMatrix:
    """Euclidean distance between every pair of patch features.

    Computed blockwise with a fixed summation order, so the result is bitwise
    symmetric and independent of block size.
    """
    feats = fm.features
    P = fm.P
    out = np.zeros((P, P), dtype=np.float64)
    block = 64
    for start in range(0, P, block):
        stop = min(start + block, P)
        diff = feats[start:stop, None, :] - feats[None, :, :]
        out[start:stop] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(out, 0.0)
    return DistanceMatrix(out)


def stability_scores(before: DistanceMatrix, after: DistanceMatrix) -> StabilityScores:
    """Score each pair by how little its distance moved: exp(-|d - d_hat|)."""
    if before.P != after.P:
        raise ValueError(f"dimension mismatch: {before.P} vs {after.P}")
    residual = np.abs(before.condensed() - after.condensed())
    return StabilityScores(before.P, np.exp(-residual))


def top_k_pairs(scores: StabilityScores, K: int) -> PairIndexSet:
    """The K highest-scoring canonical pairs; ties break by ascending pair index."""
    m = scores.scores.shape[0]
    if not 1 <= K <= m:
        raise ValueError(f"K={K} out of range [1, {m}]")
    # stable sort on negated scores: descending score, ties by canonical rank
    order = np.argsort(-scores.scores, kind="stable")[:K]
    iu, ju = canonical_pairs(scores.P)
    pairs = frozenset(zip(iu[order].tolist(), ju[order].tolist()))
    return PairIndexSet(scores.P, pairs)


def make_ground_truth(
    original: PatchFeatureMap, edited: PatchFeatureMap, K: int
) -> PairIndexSet:
    """Top-K pairs whose feature distance survives the edit best.

    The `edited` map is the counterpart produced by the surrogate editor or by
    an externally supplied edited/reconstructed image.
    """
    if original.P != edited.P or original.D != edited.D:
        raise ValueError(
            f"feature maps disagree: P={original.P}/{edited.P} D={original.D}/{edited.D}"
        )
    before = pairwise_distances(original)
    after = pairwise_distances(edited)
    return top_k_pairs(stability_scores(before, after), K)
