import numpy as np
from numba import jit


@jit(nopython=True, cache=True)
def clip_to_box(x, lower, upper):
    """Componentwise Euclidean projection onto [lower, upper]."""
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        value = x[i]
        if value < lower[i]:
            value = lower[i]
        elif value > upper[i]:
            value = upper[i]
        out[i] = value
    return out


@jit(nopython=True, cache=True)
def project_to_ball(x, center, radius):
    """Radial rescale onto the Euclidean ball around center."""
    n = x.shape[0]
    norm_sq = 0.0
    for i in range(n):
        d = x[i] - center[i]
        norm_sq += d * d
    norm = np.sqrt(norm_sq)
    out = x.copy()
    if norm <= radius:
        return out
    scale = radius / norm
    for i in range(n):
        out[i] = center[i] + scale * (x[i] - center[i])
    return out


@jit(nopython=True, cache=True)
def elastic_net_subgradient(x, mu):
    """mu * x + sign(x) with sign(0) = 0."""
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        value = x[i]
        if value > 0.0:
            out[i] = mu * value + 1.0
        elif value < 0.0:
            out[i] = mu * value - 1.0
        else:
            out[i] = 0.0
    return out


@jit(nopython=True, cache=True)
def csr_row_dot(indptr, indices, data, row, x):
    total = 0.0
    for pos in range(indptr[row], indptr[row + 1]):
        total += data[pos] * x[indices[pos]]
    return total


@jit(nopython=True, cache=True)
def hinge_row_subgradient(indptr, indices, data, row, label, x):
    """Subgradient of max{0, 1 - label * <x, a_row>}; zero at the kink."""
    out = np.zeros(x.shape[0])
    margin = label * csr_row_dot(indptr, indices, data, row, x)
    if 1.0 - margin > 0.0:
        for pos in range(indptr[row], indptr[row + 1]):
            out[indices[pos]] = -label * data[pos]
    return out


@jit(nopython=True, cache=True)
def neumaier_add(total, compensation, value):
    """One step of Neumaier compensated summation; returns (total, compensation)."""
    t = total + value
    if abs(total) >= abs(value):
        compensation += (total - t) + value
    else:
        compensation += (value - t) + total
    return t, compensation


@jit(nopython=True, cache=True)
def update_weighted_average(average, x, weight, weight_sum):
    """x_bar + (weight / weight_sum) * (x - x_bar), the averaging recursion in incremental form."""
    ratio = weight / weight_sum
    out = np.empty_like(average)
    for i in range(average.shape[0]):
        out[i] = average[i] + ratio * (x[i] - average[i])
    return out


@jit(nopython=True, cache=True)
def weighted_history_average(history, weights):
    """Direct sum of weights[t] * history[t] / sum(weights) over the rows of history."""
    n_rows = history.shape[0]
    n_cols = history.shape[1]
    total_weight = 0.0
    for t in range(n_rows):
        total_weight += weights[t]
    out = np.zeros(n_cols)
    for t in range(n_rows):
        eta = weights[t] / total_weight
        for j in range(n_cols):
            out[j] += eta * history[t, j]
    return out


# Non-JIT wrappers for the scalar power laws used by schedules
def power_law(base, exponent, k):
    """base / (k + 1) ** exponent for integer or array k."""
    return base / np.power(np.asarray(k, dtype=np.float64) + 1.0, exponent)
