"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names (``diffuse``, ``follow_flows``, ``perlin_lattice``,
``contingency``) are bound to the numba versions unless numba is missing or
``CYCLEPOSE_DISABLE_NUMBA`` is set.  Both flavours stay importable under
``<name>_numba`` / ``<name>_numpy`` so they can be compared and benchmarked
in one process.
"""

import numpy as np

from ._jit import USE_NUMBA, njit

# 3x3 neighbourhood, centre first
_OFFSETS_Y = np.array([0, -1, 1, 0, 0, -1, -1, 1, 1], dtype=np.int64)
_OFFSETS_X = np.array([0, 0, 0, -1, 1, -1, 1, -1, 1], dtype=np.int64)


# ---------------------------------------------------------------------------
# heat diffusion inside one instance
# ---------------------------------------------------------------------------

def diffuse_numpy(T, ys, xs, cy, cx, width, niter):
    """Run ``niter`` Jacobi sweeps of 3x3 mean diffusion on the pixels ``(ys, xs)``.

    ``T`` is the flattened, zero-padded bounding box of one instance (row
    stride ``width``), modified in place and returned.  A unit of heat is
    injected at ``(cy, cx)`` before every sweep.  Pixels outside the
    instance are never updated, so they act as an absorbing boundary at 0.
    """
    idx = ys.astype(np.int64) * width + xs.astype(np.int64)
    neigh = idx[None, :] + (_OFFSETS_Y * width + _OFFSETS_X)[:, None]
    centre = cy * width + cx
    for _ in range(niter):
        T[centre] += 1.0
        acc = T[neigh[0]].copy()
        for k in range(1, 9):
            acc += T[neigh[k]]
        T[idx] = acc / 9.0
    return T


@njit(cache=True, nogil=True)
def diffuse_numba(T, ys, xs, cy, cx, width, niter):
    n = ys.shape[0]
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        idx[i] = ys[i] * width + xs[i]
    buf = np.empty(n, dtype=T.dtype)
    centre = cy * width + cx
    for _ in range(niter):
        T[centre] += 1.0
        for i in range(n):
            j = idx[i]
            acc = T[j]
            acc += T[j - width]
            acc += T[j + width]
            acc += T[j - 1]
            acc += T[j + 1]
            acc += T[j - width - 1]
            acc += T[j - width + 1]
            acc += T[j + width - 1]
            acc += T[j + width + 1]
            buf[i] = acc / 9.0
        for i in range(n):
            T[idx[i]] = buf[i]
    return T


# ---------------------------------------------------------------------------
# Euler integration through a flow field
# ---------------------------------------------------------------------------

def follow_flows_numpy(p, dP, niter, step):
    """Advance points ``p`` (N, 2) through the field ``dP`` (2, H, W).

    Flow vectors are sampled bilinearly; positions are clamped to the image.
    ``p`` is updated in place and returned.
    """
    H, W = dP.shape[1], dP.shape[2]
    dy, dx = dP[0], dP[1]
    for _ in range(niter):
        y, x = p[:, 0], p[:, 1]
        y0 = np.floor(y).astype(np.int64)
        x0 = np.floor(x).astype(np.int64)
        y1 = np.minimum(y0 + 1, H - 1)
        x1 = np.minimum(x0 + 1, W - 1)
        wy = y - y0
        wx = x - x0
        w00 = (1.0 - wy) * (1.0 - wx)
        w01 = (1.0 - wy) * wx
        w10 = wy * (1.0 - wx)
        w11 = wy * wx
        vy = w00 * dy[y0, x0] + w01 * dy[y0, x1] + w10 * dy[y1, x0] + w11 * dy[y1, x1]
        vx = w00 * dx[y0, x0] + w01 * dx[y0, x1] + w10 * dx[y1, x0] + w11 * dx[y1, x1]
        p[:, 0] = np.minimum(np.maximum(y + step * vy, 0.0), H - 1.0)
        p[:, 1] = np.minimum(np.maximum(x + step * vx, 0.0), W - 1.0)
    return p


@njit(cache=True, nogil=True)
def follow_flows_numba(p, dP, niter, step):
    H, W = dP.shape[1], dP.shape[2]
    for i in range(p.shape[0]):
        y = p[i, 0]
        x = p[i, 1]
        for _ in range(niter):
            y0 = int(np.floor(y))
            x0 = int(np.floor(x))
            y1 = min(y0 + 1, H - 1)
            x1 = min(x0 + 1, W - 1)
            wy = y - y0
            wx = x - x0
            w00 = (1.0 - wy) * (1.0 - wx)
            w01 = (1.0 - wy) * wx
            w10 = wy * (1.0 - wx)
            w11 = wy * wx
            vy = w00 * dP[0, y0, x0] + w01 * dP[0, y0, x1] + w10 * dP[0, y1, x0] + w11 * dP[0, y1, x1]
            vx = w00 * dP[1, y0, x0] + w01 * dP[1, y0, x1] + w10 * dP[1, y1, x0] + w11 * dP[1, y1, x1]
            y = min(max(y + step * vy, 0.0), H - 1.0)
            x = min(max(x + step * vx, 0.0), W - 1.0)
        p[i, 0] = y
        p[i, 1] = x
    return p


# ---------------------------------------------------------------------------
# gradient-lattice noise
# ---------------------------------------------------------------------------

def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_lattice_numpy(height, width, frequency, grads):
    """Evaluate gradient noise at pixel ``(i, j)`` -> lattice coords ``(i*f, j*f)``.

    ``grads`` holds unit gradient vectors, shape (gh, gw, 2), covering the
    lattice.  The raw value is bounded by sqrt(2)/2 and is returned unscaled.
    """
    u = np.arange(height, dtype=np.float64) * frequency
    v = np.arange(width, dtype=np.float64) * frequency
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = (u - i0)[:, None]
    fv = (v - j0)[None, :]
    I0, J0 = i0[:, None], j0[None, :]

    def corner(di, dj):
        g = grads[I0 + di, J0 + dj]
        return g[..., 0] * (fu - di) + g[..., 1] * (fv - dj)

    su, sv = _fade(fu), _fade(fv)
    top = corner(0, 0) + sv * (corner(0, 1) - corner(0, 0))
    bot = corner(1, 0) + sv * (corner(1, 1) - corner(1, 0))
    return top + su * (bot - top)


@njit(cache=True, nogil=True)
def perlin_lattice_numba(height, width, frequency, grads):
    out = np.empty((height, width), dtype=np.float64)
    for i in range(height):
        u = i * frequency
        i0 = int(np.floor(u))
        fu = u - i0
        su = fu * fu * fu * (fu * (fu * 6.0 - 15.0) + 10.0)
        for j in range(width):
            v = j * frequency
            j0 = int(np.floor(v))
            fv = v - j0
            sv = fv * fv * fv * (fv * (fv * 6.0 - 15.0) + 10.0)
            n00 = grads[i0, j0, 0] * fu + grads[i0, j0, 1] * fv
            n01 = grads[i0, j0 + 1, 0] * fu + grads[i0, j0 + 1, 1] * (fv - 1.0)
            n10 = grads[i0 + 1, j0, 0] * (fu - 1.0) + grads[i0 + 1, j0, 1] * fv
            n11 = grads[i0 + 1, j0 + 1, 0] * (fu - 1.0) + grads[i0 + 1, j0 + 1, 1] * (fv - 1.0)
            top = n00 + sv * (n01 - n00)
            bot = n10 + sv * (n11 - n10)
            out[i, j] = top + su * (bot - top)
    return out


# ---------------------------------------------------------------------------
# label co-occurrence histogram
# ---------------------------------------------------------------------------

def contingency_numpy(a, b, na, nb):
    """Count pixel co-occurrences of compact labels ``a`` in [0, na) and ``b`` in [0, nb)."""
    flat = a.astype(np.int64) * nb + b.astype(np.int64)
    return np.bincount(flat, minlength=na * nb).reshape(na, nb)


@njit(cache=True, nogil=True)
def contingency_numba(a, b, na, nb):
    out = np.zeros((na, nb), dtype=np.int64)
    for k in range(a.shape[0]):
        out[a[k], b[k]] += 1
    return out


if USE_NUMBA:
    diffuse = diffuse_numba
    follow_flows = follow_flows_numba
    perlin_lattice = perlin_lattice_numba
    contingency = contingency_numba
else:
    diffuse = diffuse_numpy
    follow_flows = follow_flows_numpy
    perlin_lattice = perlin_lattice_numpy
    contingency = contingency_numpy
