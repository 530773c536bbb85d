import numpy as np
from numpy.lib import stride_tricks
import pytest

from tseq import calc

# Force using custom
calc.bottleneck_found = False


def test_moving_mean():
    x = np.random.random(1000)
    v = stride_tricks.sliding_window_view(x, 9)
    assert np.all(np.isclose(np.mean(v, axis=1), calc.moving_mean(x, 9)))
    v = stride_tricks.sliding_window_view(x, 10)
    assert np.all(np.isclose(np.mean(v, axis=1), calc.moving_mean(x, 10)))
    assert np.all(np.isclose(calc.moving_mean(x, 1000), np.mean(x)))
    with pytest.raises(ValueError):
        calc.moving_mean(x, 1001)


def test_moving_std():
    x = np.random.random(1000)
    v = stride_tricks.sliding_window_view(x, 9)
    assert np.all(np.isclose(np.std(v, axis=1), calc.moving_std(x, 9)))
    v = stride_tricks.sliding_window_view(x, 10)
    assert np.all(np.isclose(np.std(v, axis=1), calc.moving_std(x, 10)))
    with pytest.raises(ValueError):
        calc.moving_std(x, 0)


def test_average_ranks():
    ranks = calc.average_ranks(np.array([[8.0, 6.0, 6.0], [5.0, 7.0, 6.0]]))
    assert np.all(ranks == [[1.0, 2.5, 2.5], [3.0, 1.0, 2.0]])
    assert np.all(calc.average_ranks([4.0, 4.0]) == [[1.5, 1.5]])

    x = np.random.random((50, 4))
    assert np.all(np.isclose(np.sum(calc.average_ranks(x), axis=1), 10.0))


def test_sign_test():
    a = np.array([8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0])
    b = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0])
    wins, losses, p = calc.sign_test(a, b)
    assert (wins, losses) == (6, 1)
    assert np.isclose(p, 16.0 / 128.0)
    _, _, p = calc.sign_test(a, b, alternative="greater")
    assert np.isclose(p, 8.0 / 128.0)

    assert calc.sign_test(a, a) == (0, 0, 1.0)
    with pytest.raises(ValueError):
        calc.sign_test(a, b[:4])
