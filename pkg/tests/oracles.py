"""Slow, independent reference computations used by the tests."""
from collections import deque
import itertools

import numpy as np


def bfs_components(opened, sites):
    """Nearest-neighbour components of the open sites by breadth-first search.

    Labels are numbered in order of first appearance; closed sites get -1.
    """
    pos = {tuple(int(c) for c in s): i for i, s in enumerate(sites)}
    d = sites.shape[1]
    lab = np.full(len(sites), -1, dtype=np.int64)
    nxt = 0
    for i, s in enumerate(sites):
        if not opened[i] or lab[i] >= 0:
            continue
        lab[i] = nxt
        q = deque([tuple(int(c) for c in s)])
        while q:
            x = q.popleft()
            for k in range(d):
                for sg in (1, -1):
                    y = list(x)
                    y[k] += sg
                    j = pos.get(tuple(y))
                    if j is not None and opened[j] and lab[j] < 0:
                        lab[j] = nxt
                        q.append(tuple(y))
        nxt += 1
    return lab


def same_partition(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    if not np.array_equal(a < 0, b < 0):
        return False
    pairs = set(zip(a[a >= 0].tolist(), b[b >= 0].tolist()))
    return len(pairs) == len(set(a[a >= 0].tolist())) == len(set(b[b >= 0].tolist()))


def dense_stationary(stay, axis, N):
    """Left Perron vector of the torus kernel, from a dense eigen-decomposition."""
    d = axis.shape[1]
    side = 2 * N + 1
    coords = list(itertools.product(range(-N, N + 1), repeat=d))
    idx = {c: i for i, c in enumerate(coords)}
    n = len(coords)
    P = np.zeros((n, n))
    for i, c in enumerate(coords):
        P[i, i] += stay[i]
        for k in range(d):
            for sg in (1, -1):
                y = list(c)
                y[k] = (y[k] + sg + N) % side - N
                P[i, idx[tuple(y)]] += axis[i, k]
    w, V = np.linalg.eig(P.T)
    v = np.real(V[:, np.argmin(np.abs(w - 1))])
    return v * (n / v.sum())


def kappa_paths_brute(admissible, closure, boundary, x, kappa):
    """All kappa-path endpoints on the boundary by exhaustive depth-first search.

    ``admissible(z, i)`` says whether the step z -> z + kappa_i e_i is allowed.
    Returns {endpoint: shortest path length}.
    """
    closure = set(closure)
    boundary = set(boundary)
    out = {}
    stack = [(tuple(x), 0)]
    seen = set()
    while stack:
        z, n = stack.pop()
        if (z, n) in seen:
            continue
        seen.add((z, n))
        if n > 0 and z in boundary:
            out[z] = min(out.get(z, n), n)
        for i, k in enumerate(kappa):
            if not admissible(z, i):
                continue
            y = list(z)
            y[i] += k
            y = tuple(y)
            if y in closure:
                stack.append((y, n + 1))
    return out
