"""Similarity-based utility oracle.

Sequences are compared with unit-cost Hamming and dynamic-time-warping
distances. The prefix utility U_k of a sequence is its best prefix similarity to
any optimal sequence, so U_k = 1 exactly when the k-prefix is an optimal prefix.
"""
import numpy as np

from typing import Sequence, Union

ALPHA = 0.5

SequenceLike = Union[Sequence[int], np.ndarray]


def _as_sequence(x: SequenceLike) -> np.ndarray:
    return np.asarray(x, dtype=np.int64)


def hamming(a: SequenceLike, b: SequenceLike) -> int:
    """Number of positions at which `a` and `b` differ."""
    a, b = _as_sequence(a), _as_sequence(b)
    if a.shape != b.shape:
        raise ValueError(f"Sequences differ in length, {a.size} and {b.size}.")
    return int(np.count_nonzero(a != b))


def dtw(a: SequenceLike, b: SequenceLike) -> int:
    """Dynamic time warping distance with unit mismatch cost.

    W(i, j) = C(a_i, b_j) + min(W(i-1, j-1), W(i-1, j), W(i, j-1)) with
    W(0, 0) = 0 and W(i, 0) = W(0, j) = inf.

    Args:
        a: sequence of task ids
        b: sequence of task ids, any length

    Returns:
        W(|a|, |b|)
    """
    a, b = _as_sequence(a), _as_sequence(b)
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw requires non-empty sequences.")

    cost = (a[:, None] != b[None, :]).astype(np.float64)
    previous = np.full(b.size + 1, np.inf)
    previous[0] = 0.0
    for i in range(a.size):
        current = np.full(b.size + 1, np.inf)
        for j in range(b.size):
            current[j + 1] = cost[i, j] + min(previous[j], previous[j + 1], current[j])
        previous = current
    return int(previous[-1])


def dtw_prefix_diagonal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Diagonal W(1, 1), ..., W(L, L) of the DTW table of `a` against `b`.

    Entry k equals dtw(a[:k], b[:k]). Leading dimensions broadcast, so many pairs
    are computed at once.

    Args:
        a: array (..., L)
        b: array (..., L)

    Returns:
        array (..., L) of distances
    """
    a, b = _as_sequence(a), _as_sequence(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"Sequences differ in length, {a.shape[-1]} and {b.shape[-1]}."
        )
    length = a.shape[-1]
    cost = (a[..., :, None] != b[..., None, :]).astype(np.float64)
    batch = cost.shape[:-2]

    diagonal = np.empty(batch + (length,), dtype=np.float64)
    previous = np.full(batch + (length + 1,), np.inf)
    previous[..., 0] = 0.0
    for i in range(length):
        current = np.full(batch + (length + 1,), np.inf)
        for j in range(length):
            current[..., j + 1] = cost[..., i, j] + np.minimum(
                np.minimum(previous[..., j], previous[..., j + 1]), current[..., j]
            )
        diagonal[..., i] = current[..., i + 1]
        previous = current
    return diagonal


def similarity_from_distances(
    dw: Union[float, np.ndarray], dh: Union[float, np.ndarray], alpha: float = ALPHA
) -> Union[float, np.ndarray]:
    return alpha / (1.0 + dw) + (1.0 - alpha) / (1.0 + dh)


def similarity(a: SequenceLike, b: SequenceLike, alpha: float = ALPHA) -> float:
    """sim(a, b) = α / (1 + D_W) + (1 - α) / (1 + D_H)."""
    dh = hamming(a, b)
    dw = dtw(a, b)
    return float(similarity_from_distances(float(dw), float(dh), alpha))


def utility_matrix(
    taus: np.ndarray, optimal: np.ndarray, alpha: float = ALPHA, chunk: int = 4096
) -> np.ndarray:
    """Prefix utilities of many sequences against one optimal set.

    Uses one DTW table per (sequence, optimal sequence) pair and a cumulative
    Hamming count for all prefixes.

    Args:
        taus: array (m, L) of sequences
        optimal: array (k, L) of optimal sequences
        alpha: DTW weight
        chunk: pairs processed at once

    Returns:
        array (m, L), row i is the utility vector of taus[i]
    """
    taus = np.atleast_2d(_as_sequence(taus))
    optimal = np.atleast_2d(_as_sequence(optimal))
    if optimal.shape[0] == 0 or optimal.size == 0:
        raise ValueError("The optimal set is empty.")
    if taus.shape[1] != optimal.shape[1]:
        raise ValueError(
            f"Sequence length {taus.shape[1]} does not match optimal length "
            f"{optimal.shape[1]}."
        )

    rows = max(1, chunk // optimal.shape[0])
    result = np.empty(taus.shape, dtype=np.float64)
    for start in range(0, taus.shape[0], rows):
        block = taus[start : start + rows, None, :]
        dh = np.cumsum(block != optimal[None, :, :], axis=-1).astype(np.float64)
        dw = dtw_prefix_diagonal(block, optimal[None, :, :])
        result[start : start + rows] = np.amax(
            similarity_from_distances(dw, dh, alpha), axis=1
        )
    return result


def utility_vector(
    tau: SequenceLike, optimal: np.ndarray, alpha: float = ALPHA
) -> np.ndarray:
    """U_k(τ) = max over τ* in S* of sim(τ[:k], τ*[:k]), for k = 1..L."""
    tau = _as_sequence(tau)
    if tau.ndim != 1:
        raise ValueError(f"Expected a single sequence, got shape {tau.shape}.")
    return utility_matrix(tau[None, :], optimal, alpha)[0]


def scalar_utility(u: np.ndarray) -> float:
    """Ū = Σ_k U_k, at most L and equal to L only for optimal sequences."""
    return float(np.sum(u))
