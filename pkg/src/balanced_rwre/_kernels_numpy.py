"""Pure-numpy twins of the numba kernels.

Walk kernels vectorize over samples and consume the same counter-based
uniforms, so they return bit-identical results; they are only slower.
"""
import numpy as np

from .rng import uniforms


def _moves(d):
    m = np.zeros((2 * d + 1, d), dtype=np.int64)
    for i in range(d):
        m[2 * i + 1, i] = 1
        m[2 * i + 2, i] = -1
    return m


def _rows(pos, mode, R):
    side = 2 * R + 1
    if mode == 0:
        bad = np.any((pos < -R) | (pos > R), axis=1)
        c = np.clip(pos + R, 0, side - 1)
    else:
        bad = np.zeros(pos.shape[0], dtype=bool)
        c = (pos + R) % side
    idx = np.zeros(pos.shape[0], dtype=np.int64)
    for i in range(pos.shape[1]):
        idx = idx * side + c[:, i]
    return np.where(bad, -1, idx)


def _advance(thr, rows, keys, n, pos, moves):
    u = uniforms(keys, n)
    k = (thr[rows] <= u[:, None]).sum(axis=1)
    return pos + moves[k]


def run_stopped(thr, mode, R, x0, keys, n_max, norm, radius):
    M, d = keys.shape[0], x0.shape[0]
    moves = _moves(d)
    pos = np.tile(x0, (M, 1))
    steps = np.zeros(M, dtype=np.int64)
    status = np.full(M, 0 if norm == 0 else 2, dtype=np.int8)
    live = np.arange(M)
    for n in range(n_max):
        if live.size == 0:
            break
        rows = _rows(pos[live], mode, R)
        esc = rows < 0
        status[live[esc]] = 3
        live, rows = live[~esc], rows[~esc]
        pos[live] = _advance(thr, rows, keys[live], n, pos[live], moves)
        steps[live] = n + 1
        delta = pos[live] - x0
        if norm == 1:
            out = (delta * delta).sum(axis=1).astype(float) > radius * radius
        elif norm == 2:
            out = np.abs(delta).max(axis=1) > radius
        else:
            continue
        status[live[out]] = 1
        live = live[~out]
    return pos, steps, status


def annulus_visits(thr, mode, R, x0, target, keys, radii, cap):
    M, d = keys.shape[0], x0.shape[0]
    K = radii.shape[0]
    moves = _moves(d)
    pos = np.tile(x0, (M, 1))
    counts = np.zeros((M, K), dtype=np.int64)
    levels = np.zeros(M, dtype=np.int64)
    steps = np.zeros(M, dtype=np.int64)
    status = np.full(M, 2, dtype=np.int8)
    if np.array_equal(x0, target):
        counts[:, 0] = 1
    r2 = radii * radii
    live = np.arange(M)
    for n in range(cap):
        if live.size == 0:
            break
        rows = _rows(pos[live], mode, R)
        esc = rows < 0
        status[live[esc]] = 3
        live, rows = live[~esc], rows[~esc]
        p = _advance(thr, rows, keys[live], n, pos[live], moves)
        pos[live] = p
        steps[live] = n + 1
        s = (p * p).sum(axis=1).astype(float)
        # tau_k is a first passage, so the annulus index never decreases
        lv = np.maximum(levels[live], (s[:, None] > r2[None, :]).sum(axis=1))
        levels[live] = lv
        done = lv >= K
        status[live[done]] = 1
        hit = np.all(p == target, axis=1) & ~done
        counts[live[hit], lv[hit]] += 1
        live = live[~done]
    return counts, steps, status


def time_visits(thr, mode, R, x0, target, keys, horizons):
    M, d = keys.shape[0], x0.shape[0]
    moves = _moves(d)
    H = horizons.shape[0]
    pos = np.tile(x0, (M, 1))
    counts = np.zeros((M, H), dtype=np.int64)
    status = np.zeros(M, dtype=np.int8)
    c = np.full(M, 1 if np.array_equal(x0, target) else 0, dtype=np.int64)
    alive = np.ones(M, dtype=bool)
    n_end = int(horizons.max()) if H else 0
    h = 0
    for n in range(n_end + 1):
        while h < H and horizons[h] == n:
            counts[:, h] = c
            h += 1
        if h == H:
            break
        live = np.nonzero(alive)[0]
        rows = _rows(pos[live], mode, R)
        esc = rows < 0
        if np.any(esc):
            status[live[esc]] = 3
            alive[live[esc]] = False
            live, rows = live[~esc], rows[~esc]
        pos[live] = _advance(thr, rows, keys[live], n, pos[live], moves)
        c[live] += np.all(pos[live] == target, axis=1)
    return counts, status


def sample_path(thr, mode, R, x0, key, n):
    d = x0.shape[0]
    moves = _moves(d)
    path = np.empty((n + 1, d), dtype=np.int64)
    path[0] = x0
    keys = np.array([key], dtype=np.uint64)
    for j in range(n):
        rows = _rows(path[j : j + 1], mode, R)
        if rows[0] < 0:
            return path[: j + 1], False
        path[j + 1] = _advance(thr, rows, keys, j, path[j : j + 1], moves)[0]
    return path, True


def torus_push(phi, stay, axis, side, d):
    shape = (side,) * d
    out = phi * stay
    for i in range(d):
        pa = (phi * axis[:, i]).reshape(shape)
        out = out + np.roll(pa, 1, axis=i).ravel()
        out = out + np.roll(pa, -1, axis=i).ravel()
    return out


def _shift(a, i, s, fill):
    """a shifted by s along axis i (no wrap), padded with ``fill``."""
    out = np.full_like(a, fill)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if s > 0:
        src[i], dst[i] = slice(None, -s), slice(s, None)
    else:
        src[i], dst[i] = slice(-s, None), slice(None, s)
    out[tuple(dst)] = a[tuple(src)]
    return out


def label_clusters(open_flat, side, d):
    shape = (side,) * d
    opened = open_flat.reshape(shape)
    big = np.iinfo(np.int64).max
    lab = np.where(opened, np.arange(open_flat.size).reshape(shape), big)
    while True:
        new = lab
        for i in range(d):
            for s in (1, -1):
                new = np.minimum(new, _shift(lab, i, s, big))
        new = np.where(opened, new, big)
        if np.array_equal(new, lab):
            break
        lab = new
    flat = lab.ravel()
    out = np.full(open_flat.size, -1, dtype=np.int64)
    if np.any(open_flat):
        # roots are cluster minima, so sorting them gives first-site order
        _, inv = np.unique(flat[open_flat], return_inverse=True)
        out[open_flat] = inv
    return out


def origin_clusters(open_batch, side, d):
    M = open_batch.shape[0]
    R = (side - 1) // 2
    shape = (M,) + (side,) * d
    opened = open_batch.reshape(shape)
    centre = (slice(None),) + (R,) * d
    reach = np.zeros(shape, dtype=bool)
    reach[centre] = opened[centre]
    while True:
        grow = reach.copy()
        for i in range(1, d + 1):
            for s in (1, -1):
                grow |= _shift(reach, i, s, False)
        grow &= opened
        if np.array_equal(grow, reach):
            break
        reach = grow
    flat = reach.reshape(M, -1)
    coords = np.stack(np.unravel_index(np.arange(side**d), (side,) * d), axis=1) - R
    size = flat.sum(axis=1).astype(np.int64)
    supn = np.abs(coords).max(axis=1)
    radius = np.where(flat, supn[None, :], 0).max(axis=1).astype(np.int64)
    edge = np.any(flat & (supn == R)[None, :], axis=1)
    spread = np.zeros(M, dtype=np.int64)
    for g in range(1 << d):
        sign = np.array([-1 if (g >> i) & 1 else 1 for i in range(d)])
        v = coords @ sign
        hi = np.where(flat, v[None, :], np.iinfo(np.int64).min).max(axis=1)
        lo = np.where(flat, v[None, :], np.iinfo(np.int64).max).min(axis=1)
        spread = np.maximum(spread, np.where(size > 0, hi - lo, 0))
    return size, radius, spread, edge
