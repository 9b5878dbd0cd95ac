import zlib

import numpy as np


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # derivative of softplus; tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def relative_error(actual, expected):
    """
    Max-norm relative error of ``actual`` against ``expected``.

    The scale is the largest magnitude in ``expected``; an all-zero reference
    falls back to the absolute error.
    """
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    if actual.shape != expected.shape:
        raise ValueError(f"shape mismatch {actual.shape} vs {expected.shape}")
    if actual.size == 0:
        return 0.0
    diff = float(np.max(np.abs(actual - expected)))
    scale = float(np.max(np.abs(expected)))
    return diff / scale if scale > 0.0 else diff


def central_difference(func, x, step=1e-6):
    """
    Numerical gradient of the scalar function ``func`` at array ``x``.

        df/dx_i ~ ( f(x + step e_i) - f(x - step e_i) ) / (2 step)

    ``x`` is perturbed in place and restored after every entry, so ``func``
    may close over the very array it is given. Views with any strides work.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    for index in np.ndindex(x.shape):
        saved = x[index]
        x[index] = saved + step
        f_plus = float(func(x))
        x[index] = saved - step
        f_minus = float(func(x))
        x[index] = saved
        grad[index] = (f_plus - f_minus) / (2.0 * step)
    return grad


def chi_square_homogeneity(table):
    """
    Pearson statistic and degrees of freedom of a contingency table whose rows
    are groups and whose columns are categories, against the hypothesis that
    all rows share one distribution. Categories empty in every row are dropped.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or np.any(table.sum(axis=1) <= 0.0):
        raise ValueError("expected a 2-D table with no empty row")
    table = table[:, table.sum(axis=0) > 0.0]
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / table.sum()
    statistic = float(np.sum((table - expected) ** 2 / expected))
    return statistic, (table.shape[0] - 1) * (table.shape[1] - 1)


def make_rng(seed, stream=""):
    """
    Counter-based generator for one named stream of a run.

    The same ``(seed, stream)`` yields the same numbers on every platform.
    """
    key = zlib.crc32(str(stream).encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), key])))
