"""Brute-force reference implementations used as test oracles.

Everything here is deliberately naive: explicit loops over points and Python
sets, no KD-trees, no vectorized tricks shared with the library.
"""

import math

import numpy as np


def nn_brute(queries, reference):
    idx, dist = [], []
    for q in queries:
        best, best_d = -1, math.inf
        for j, r in enumerate(reference):
            d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(q, r)))
            if d < best_d:
                best, best_d = j, d
        idx.append(best)
        dist.append(best_d)
    return np.array(idx), np.array(dist)


def chamfer_brute(A, B):
    return 0.5 * (nn_brute(A, B)[1].mean() + nn_brute(B, A)[1].mean())


def chamfer_sq_brute(A, B):
    return float(np.mean(nn_brute(A, B)[1] ** 2))


def occupied(points, res):
    return {tuple(int(math.floor(c / res)) for c in p) for p in points}


def iou_brute(A, B, res):
    a, b = occupied(A, res), occupied(B, res)
    return len(a & b) / len(a | b)


def jsd_brute(A, B, res):
    def columns(P):
        hist = {}
        for x, y, _ in occupied(P, res):
            hist[(x, y)] = hist.get((x, y), 0) + 1
        return hist

    ha, hb = columns(A), columns(B)
    na, nb = sum(ha.values()), sum(hb.values())
    total = 0.0
    for key in set(ha) | set(hb):
        p, q = ha.get(key, 0) / na, hb.get(key, 0) / nb
        m = 0.5 * (p + q)
        if p > 0:
            total += 0.5 * p * math.log(p / m)
        if q > 0:
            total += 0.5 * q * math.log(q / m)
    return total


def fps_brute(points, k, start):
    chosen = [start]
    while len(chosen) < k:
        best, best_d = -1, -1.0
        for i, p in enumerate(points):
            d = min(float(np.sum((p - points[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def alpha_bar_logsum(betas):
    return math.exp(math.fsum(math.log1p(-b) for b in betas))


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def finite_difference_check(params, grads, loss_fn, n_coords, seed, h=1e-5):
    """Worst relative error over ``n_coords`` random weight coordinates.

    Coordinates are spread over every tensor (at least one each) and
    ``loss_fn()`` is re-evaluated with the weight nudged by +/- h in place.
    """
    rng = np.random.default_rng(seed)
    names = sorted(params)
    picks = [(n, int(rng.integers(params[n].size))) for n in names]
    sizes = np.array([params[n].size for n in names], dtype=float)
    while len(picks) < n_coords:
        n = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((n, int(rng.integers(params[n].size))))
    worst = 0.0
    for name, flat in picks:
        arr = params[name].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + h
        up = loss_fn()
        arr[flat] = orig - h
        down = loss_fn()
        arr[flat] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, rel_error(grads[name].reshape(-1)[flat], numeric))
    return worst, len(picks)


def nn_matrix(queries, reference):
    """Nearest neighbour from the full distance matrix; argmin keeps the lowest index on ties."""
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    d = np.sqrt(((q[:, None, :] - r[None, :, :]) ** 2).sum(axis=-1))
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(q)), idx]


def chamfer_matrix(A, B):
    return 0.5 * (nn_matrix(A, B)[1].mean() + nn_matrix(B, A)[1].mean())


def chamfer_sq_matrix(A, B):
    return float(np.mean(nn_matrix(A, B)[1] ** 2))
