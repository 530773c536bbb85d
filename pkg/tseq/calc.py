import numpy as np
from scipy import stats

try:
    import bottleneck as bn

    bottleneck_found = True
except ImportError:
    bottleneck_found = False

from typing import Tuple


def moving_mean(x: np.ndarray, n: int) -> np.ndarray:
    """Calculates the rolling mean.

    Uses bottleneck.move_mean if available otherwise np.cumsum based algorithm.

    Args:
        x: array
        n: window size
    """
    if not 1 <= n <= x.size:
        raise ValueError(f"Window {n} invalid for {x.size} values.")
    if bottleneck_found:
        return bn.move_mean(x, n)[n - 1 :]
    r = np.cumsum(x, dtype=np.float64)
    r[n:] = r[n:] - r[:-n]  # type: ignore
    return r[n - 1 :] / n


def moving_std(x: np.ndarray, n: int) -> np.ndarray:
    """Calculates the rolling standard deviation.

    Uses bottleneck.move_std if available otherwise np.cumsum based algorithm.

    Args:
        x: array
        n: window size
    """
    if not 1 <= n <= x.size:
        raise ValueError(f"Window {n} invalid for {x.size} values.")
    if bottleneck_found:
        return bn.move_std(x, n)[n - 1 :]

    sums = np.empty(x.size - n + 1)
    sqrs = np.empty(x.size - n + 1)

    tab = np.cumsum(x) / n
    sums[0] = tab[n - 1]
    sums[1:] = tab[n:] - tab[:-n]

    tab = np.cumsum(x * x) / n
    sqrs[0] = tab[n - 1]
    sqrs[1:] = tab[n:] - tab[:-n]

    return np.sqrt(np.maximum(sqrs - sums * sums, 0.0))


def average_ranks(scores: np.ndarray) -> np.ndarray:
    """Ranks each row, 1 for the highest score, ties sharing their average rank.

    Args:
        scores: array (problems, methods)

    Returns:
        ranks, same shape; each row sums to m(m + 1) / 2
    """
    scores = np.atleast_2d(scores)
    return stats.rankdata(-scores, method="average", axis=1)


def sign_test(
    a: np.ndarray, b: np.ndarray, alternative: str = "two-sided"
) -> Tuple[int, int, float]:
    """Paired sign test, ties are discarded.

    Args:
        a: scores of the first method
        b: paired scores of the second method
        alternative: 'two-sided', or 'greater' if a is expected to beat b

    Returns:
        wins of a, losses of a, p-value
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Paired scores differ in shape, {a.shape} and {b.shape}.")
    wins = int(np.count_nonzero(a > b))
    losses = int(np.count_nonzero(a < b))
    if wins + losses == 0:
        return 0, 0, 1.0
    p = stats.binomtest(wins, wins + losses, 0.5, alternative=alternative).pvalue
    return wins, losses, float(p)
