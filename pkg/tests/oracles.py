"""Independent reference computations used by the tests."""

import numpy as np

FD_STEP = 1e-5
# Entries smaller than this are compared on an absolute scale: central
# differences at step 1e-5 carry about 1e-10 of round-off, which would
# otherwise dominate the ratio for near-zero partials.
REL_FLOOR = 1e-5


def central_difference(f, theta, h=FD_STEP):
    theta = np.array(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        up = f(theta)
        theta[i] = old - h
        down = f(theta)
        theta[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def max_relative_error(analytic, numeric, floor=REL_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_check(model, loss_fn):
    """Compare ``loss_fn(model) -> (loss, ParamGradient)`` against central differences."""
    theta0 = model.get_flat()

    def f(theta):
        model.set_flat(theta)
        return loss_fn(model)[0]

    numeric = central_difference(f, theta0)
    model.set_flat(theta0)
    analytic = loss_fn(model)[1].flat()
    return max_relative_error(analytic, numeric)


def pearson_brute(R):
    """Pearson matrix by explicit double loop over columns and rows."""
    R = [list(map(float, row)) for row in np.asarray(R)]
    n, D = len(R), len(R[0])
    means = [sum(R[k][i] for k in range(n)) / n for i in range(D)]
    out = np.full((D, D), np.nan)
    for i in range(D):
        for j in range(D):
            sxy = sum((R[k][i] - means[i]) * (R[k][j] - means[j]) for k in range(n))
            sxx = sum((R[k][i] - means[i]) ** 2 for k in range(n))
            syy = sum((R[k][j] - means[j]) ** 2 for k in range(n))
            if sxx > 0 and syy > 0:
                out[i, j] = sxy / (sxx * syy) ** 0.5
    return out


def alpha_bars_brute(betas):
    prod, out = 1.0, []
    for b in betas:
        prod *= 1.0 - b
        out.append(prod)
    return np.array(out)
