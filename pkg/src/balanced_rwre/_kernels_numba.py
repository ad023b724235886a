"""numba implementations of the hot loops (see ``kernels`` for the contracts)."""
import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
S30 = np.uint64(30)
S27 = np.uint64(27)
S31 = np.uint64(31)
S11 = np.uint64(11)
ONE = np.uint64(1)
UNIT = 2.0 ** -53

_opts = dict(nogil=True, cache=True)


@njit(inline="always")
def _mix(z):
    z = z + GOLDEN
    z = (z ^ (z >> S30)) * MIX1
    z = (z ^ (z >> S27)) * MIX2
    return z ^ (z >> S31)


@njit(inline="always")
def _uniform(key, n):
    z = _mix(key + (np.uint64(n) + ONE) * GOLDEN)
    return np.float64(z >> S11) * UNIT


@njit(inline="always")
def _row(pos, d, mode, R, side):
    idx = 0
    for i in range(d):
        c = pos[i]
        if mode == 0:
            if c < -R or c > R:
                return -1
            c = c + R
        else:
            c = (c + R) % side
        idx = idx * side + c
    return idx


@njit(inline="always")
def _step(thr, row, u, two_d, pos):
    k = 0
    while k < two_d and thr[row, k] <= u:
        k += 1
    if k > 0:
        a = (k - 1) >> 1
        if ((k - 1) & 1) == 0:
            pos[a] += 1
        else:
            pos[a] -= 1


@njit(**_opts)
def run_stopped(thr, mode, R, x0, keys, n_max, norm, radius):
    M = keys.shape[0]
    d = x0.shape[0]
    side = 2 * R + 1
    two_d = 2 * d
    r2 = radius * radius
    out = np.empty((M, d), dtype=np.int64)
    steps = np.empty(M, dtype=np.int64)
    status = np.empty(M, dtype=np.int8)
    pos = np.empty(d, dtype=np.int64)
    for m in range(M):
        key = keys[m]
        for i in range(d):
            pos[i] = x0[i]
        st = 0 if norm == 0 else 2
        n = 0
        while n < n_max:
            row = _row(pos, d, mode, R, side)
            if row < 0:
                st = 3
                break
            _step(thr, row, _uniform(key, n), two_d, pos)
            n += 1
            if norm == 1:
                s = 0.0
                for i in range(d):
                    t = pos[i] - x0[i]
                    s += t * t
                if s > r2:
                    st = 1
                    break
            elif norm == 2:
                s = 0.0
                for i in range(d):
                    t = abs(pos[i] - x0[i])
                    if t > s:
                        s = t
                if s > radius:
                    st = 1
                    break
        for i in range(d):
            out[m, i] = pos[i]
        steps[m] = n
        status[m] = st
    return out, steps, status


@njit(**_opts)
def annulus_visits(thr, mode, R, x0, target, keys, radii, cap):
    M = keys.shape[0]
    d = x0.shape[0]
    K = radii.shape[0]
    side = 2 * R + 1
    two_d = 2 * d
    counts = np.zeros((M, K), dtype=np.int64)
    steps = np.empty(M, dtype=np.int64)
    status = np.empty(M, dtype=np.int8)
    pos = np.empty(d, dtype=np.int64)
    for m in range(M):
        key = keys[m]
        for i in range(d):
            pos[i] = x0[i]
        level = 0
        at = True
        for i in range(d):
            if pos[i] != target[i]:
                at = False
        if at:
            counts[m, 0] += 1
        st = 2
        n = 0
        while n < cap:
            row = _row(pos, d, mode, R, side)
            if row < 0:
                st = 3
                break
            _step(thr, row, _uniform(key, n), two_d, pos)
            n += 1
            s = 0.0
            for i in range(d):
                s += pos[i] * pos[i]
            while level < K and s > radii[level] * radii[level]:
                level += 1
            if level == K:
                st = 1
                break
            at = True
            for i in range(d):
                if pos[i] != target[i]:
                    at = False
            if at:
                counts[m, level] += 1
        steps[m] = n
        status[m] = st
    return counts, steps, status


@njit(**_opts)
def time_visits(thr, mode, R, x0, target, keys, horizons):
    M = keys.shape[0]
    d = x0.shape[0]
    H = horizons.shape[0]
    side = 2 * R + 1
    two_d = 2 * d
    counts = np.zeros((M, H), dtype=np.int64)
    status = np.zeros(M, dtype=np.int8)
    pos = np.empty(d, dtype=np.int64)
    for m in range(M):
        key = keys[m]
        for i in range(d):
            pos[i] = x0[i]
        c = 1
        for i in range(d):
            if pos[i] != target[i]:
                c = 0
        h = 0
        n = 0
        while h < H:
            while h < H and horizons[h] == n:
                counts[m, h] = c
                h += 1
            if h == H:
                break
            row = _row(pos, d, mode, R, side)
            if row < 0:
                status[m] = 3
                for j in range(h, H):
                    counts[m, j] = c
                break
            _step(thr, row, _uniform(key, n), two_d, pos)
            n += 1
            at = True
            for i in range(d):
                if pos[i] != target[i]:
                    at = False
            if at:
                c += 1
    return counts, status


@njit(**_opts)
def sample_path(thr, mode, R, x0, key, n):
    d = x0.shape[0]
    side = 2 * R + 1
    path = np.empty((n + 1, d), dtype=np.int64)
    pos = x0.copy()
    path[0] = pos
    for j in range(n):
        row = _row(pos, d, mode, R, side)
        if row < 0:
            return path[: j + 1], False
        _step(thr, row, _uniform(key, j), 2 * d, pos)
        path[j + 1] = pos
    return path, True


@njit(**_opts)
def torus_push(phi, stay, axis, side, d):
    """Return phi P on the torus (flat arrays, row-major)."""
    n = phi.shape[0]
    pa = np.empty((n, d))
    for x in range(n):
        for i in range(d):
            pa[x, i] = phi[x] * axis[x, i]
    out = np.empty(n)
    stride = np.empty(d, dtype=np.int64)
    s = 1
    for i in range(d - 1, -1, -1):
        stride[i] = s
        s *= side
    for x in range(n):
        v = phi[x] * stay[x]
        for i in range(d):
            c = (x // stride[i]) % side
            lo = x - stride[i] if c > 0 else x + (side - 1) * stride[i]
            hi = x + stride[i] if c < side - 1 else x - (side - 1) * stride[i]
            v = v + pa[lo, i]
            v = v + pa[hi, i]
        out[x] = v
    return out


@njit(inline="always")
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit(**_opts)
def label_clusters(open_flat, side, d):
    """Union-find labels; clusters numbered by their first site in row-major order."""
    n = open_flat.shape[0]
    parent = np.arange(n)
    stride = np.empty(d, dtype=np.int64)
    s = 1
    for i in range(d - 1, -1, -1):
        stride[i] = s
        s *= side
    for x in range(n):
        if not open_flat[x]:
            continue
        for i in range(d):
            c = (x // stride[i]) % side
            if c < side - 1 and open_flat[x + stride[i]]:
                a = _find(parent, x)
                b = _find(parent, x + stride[i])
                if a != b:
                    if a < b:
                        parent[b] = a
                    else:
                        parent[a] = b
    labels = np.full(n, -1, dtype=np.int64)
    root_label = np.full(n, -1, dtype=np.int64)
    k = 0
    for x in range(n):
        if open_flat[x]:
            r = _find(parent, x)
            if root_label[r] < 0:
                root_label[r] = k
                k += 1
            labels[x] = root_label[r]
    return labels


@njit(**_opts)
def origin_clusters(open_batch, side, d):
    """Flood fill from the box centre in each sample of ``open_batch`` (M, side**d).

    Returns per sample: cluster size, max sup-norm, sup over sign vectors of the
    spread of sign.x, and whether the cluster touches the box edge.
    """
    M, n = open_batch.shape
    R = (side - 1) // 2
    stride = np.empty(d, dtype=np.int64)
    s = 1
    for i in range(d - 1, -1, -1):
        stride[i] = s
        s *= side
    centre = 0
    for i in range(d):
        centre += R * stride[i]
    nsig = 1 << d
    size = np.zeros(M, dtype=np.int64)
    radius = np.zeros(M, dtype=np.int64)
    spread = np.zeros(M, dtype=np.int64)
    edge = np.zeros(M, dtype=np.bool_)
    seen = np.zeros(n, dtype=np.bool_)
    stack = np.empty(n, dtype=np.int64)
    visited = np.empty(n, dtype=np.int64)
    coord = np.empty(d, dtype=np.int64)
    hi = np.empty(nsig, dtype=np.int64)
    lo = np.empty(nsig, dtype=np.int64)
    for m in range(M):
        if not open_batch[m, centre]:
            continue
        for g in range(nsig):
            hi[g] = -(1 << 40)
            lo[g] = 1 << 40
        top = 0
        nv = 0
        stack[top] = centre
        top += 1
        seen[centre] = True
        while top > 0:
            top -= 1
            x = stack[top]
            visited[nv] = x
            nv += 1
            r = 0
            for i in range(d):
                coord[i] = (x // stride[i]) % side - R
                a = abs(coord[i])
                if a > r:
                    r = a
                if a == R:
                    edge[m] = True
            if r > radius[m]:
                radius[m] = r
            for g in range(nsig):
                v = 0
                for i in range(d):
                    if (g >> i) & 1:
                        v -= coord[i]
                    else:
                        v += coord[i]
                if v > hi[g]:
                    hi[g] = v
                if v < lo[g]:
                    lo[g] = v
            for i in range(d):
                c = coord[i] + R
                if c > 0:
                    y = x - stride[i]
                    if open_batch[m, y] and not seen[y]:
                        seen[y] = True
                        stack[top] = y
                        top += 1
                if c < side - 1:
                    y = x + stride[i]
                    if open_batch[m, y] and not seen[y]:
                        seen[y] = True
                        stack[top] = y
                        top += 1
        for j in range(nv):
            seen[visited[j]] = False
        size[m] = nv
        best = 0
        for g in range(nsig):
            if hi[g] - lo[g] > best:
                best = hi[g] - lo[g]
        spread[m] = best
    return size, radius, spread, edge
