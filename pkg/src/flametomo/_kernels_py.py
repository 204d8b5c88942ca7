"""Pure numpy/Python versions of the hot kernels.

Signatures match ``_kernels.pyx`` and results agree to rounding; this module is used
when the compiled extension is unavailable or ``FLAMETOMO_PURE_PYTHON`` is set.
"""

import math

import numpy as np

_RAY_CHUNK = 128


def traverse_ray(origin, direction, t_near, t_far, box_min, spacing, dims, nudge):
    """Amanatides-Woo traversal of one ray over [t_near, t_far].

    Returns (cells, lengths, midpoints) as Python lists; cells are flat
    x-fastest indices. ``nudge`` shifts the point used to pick the entry cell
    forward along the ray so face/edge/corner entries resolve to one cell.
    """
    cells, lengths, mids = [], [], []
    if not (t_far - t_near > nudge):
        return cells, lengths, mids
    cell = [0, 0, 0]
    step = [0, 0, 0]
    t_max = [math.inf, math.inf, math.inf]
    t_start = t_near + nudge
    for a in range(3):
        p = origin[a] + direction[a] * t_start
        c = int(math.floor((p - box_min[a]) / spacing[a]))
        cell[a] = min(max(c, 0), dims[a] - 1)
    for a in range(3):
        d = direction[a]
        if d > 0.0:
            step[a] = 1
            t_max[a] = (box_min[a] + (cell[a] + 1) * spacing[a] - origin[a]) / d
        elif d < 0.0:
            step[a] = -1
            t_max[a] = (box_min[a] + cell[a] * spacing[a] - origin[a]) / d
    nx, ny = dims[0], dims[1]
    t_cur = t_near
    while True:
        a = 0
        if t_max[1] < t_max[a]:
            a = 1
        if t_max[2] < t_max[a]:
            a = 2
        t_exit = min(t_max[a], t_far)
        if t_exit > t_cur:
            cells.append(cell[0] + nx * (cell[1] + ny * cell[2]))
            lengths.append(t_exit - t_cur)
            mids.append(0.5 * (t_cur + t_exit))
            t_cur = t_exit
        if t_max[a] >= t_far:
            break
        cell[a] += step[a]
        if cell[a] < 0 or cell[a] >= dims[a]:
            break
        if step[a] > 0:
            t_max[a] = (box_min[a] + (cell[a] + 1) * spacing[a] - origin[a]) / direction[a]
        else:
            t_max[a] = (box_min[a] + cell[a] * spacing[a] - origin[a]) / direction[a]
    return cells, lengths, mids


def traverse_batch(origins, directions, t_near, t_far, hit, box_min, spacing, dims, nudge):
    """Traverse many rays; returns CSR arrays (ptr, cells, lengths, mids)."""
    ptr = np.zeros(len(origins) + 1, dtype=np.int64)
    all_cells, all_len, all_mid = [], [], []
    box_min = [float(v) for v in box_min]
    spacing = [float(v) for v in spacing]
    dims = [int(v) for v in dims]
    for r in range(len(origins)):
        if hit[r]:
            c, ln, m = traverse_ray(
                [float(v) for v in origins[r]], [float(v) for v in directions[r]],
                float(t_near[r]), float(t_far[r]), box_min, spacing, dims, nudge,
            )
            all_cells += c
            all_len += ln
            all_mid += m
        ptr[r + 1] = len(all_cells)
    return (
        ptr,
        np.array(all_cells, dtype=np.int64),
        np.array(all_len, dtype=np.float64),
        np.array(all_mid, dtype=np.float64),
    )


def _padded(ptr, cells, lengths, r0, r1):
    counts = np.diff(ptr[r0:r1 + 1])
    smax = int(counts.max()) if counts.size else 0
    idx = np.zeros((r1 - r0, smax), dtype=np.int64)
    ln = np.zeros((r1 - r0, smax))
    for i, r in enumerate(range(r0, r1)):
        n = counts[i]
        idx[i, :n] = cells[ptr[r]:ptr[r + 1]]
        ln[i, :n] = lengths[ptr[r]:ptr[r + 1]]
    return idx, ln, smax


def rte_forward(kappa, ib, ptr, cells, lengths):
    """March I <- I*a + I_b*(1-a), a = exp(-kappa*ds), from the far end of every ray."""
    n_rays = len(ptr) - 1
    out = np.zeros((n_rays, kappa.shape[1]))
    for r0 in range(0, n_rays, _RAY_CHUNK):
        r1 = min(r0 + _RAY_CHUNK, n_rays)
        idx, ln, smax = _padded(ptr, cells, lengths, r0, r1)
        inten = np.zeros((r1 - r0, kappa.shape[1]))
        for s in range(smax - 1, -1, -1):
            a = np.exp(-kappa[idx[:, s]] * ln[:, s, None])
            inten = inten * a + ib[idx[:, s]] * (1.0 - a)
        out[r0:r1] = inten
    return out


def rte_backward(grad_out, kappa, ib, ptr, cells, lengths):
    """Adjoint of :func:`rte_forward`; returns (grad_kappa, grad_ib) shaped like kappa."""
    n_rays = len(ptr) - 1
    gk = np.zeros_like(kappa)
    gb = np.zeros_like(ib)
    for r0 in range(0, n_rays, _RAY_CHUNK):
        r1 = min(r0 + _RAY_CHUNK, n_rays)
        idx, ln, smax = _padded(ptr, cells, lengths, r0, r1)
        counts = np.diff(ptr[r0:r1 + 1])
        incoming = np.zeros((smax, r1 - r0, kappa.shape[1]))
        inten = np.zeros((r1 - r0, kappa.shape[1]))
        for s in range(smax - 1, -1, -1):
            incoming[s] = inten
            a = np.exp(-kappa[idx[:, s]] * ln[:, s, None])
            inten = inten * a + ib[idx[:, s]] * (1.0 - a)
        lam = grad_out[r0:r1].copy()
        rows = np.arange(r1 - r0)
        for s in range(smax):
            live = rows[counts > s]
            c = idx[live, s]
            a = np.exp(-kappa[c] * ln[live, s, None])
            b = ib[c]
            lam_s = lam[live]
            # rays are accumulated in ascending order within the chunk (deterministic)
            np.add.at(gb, c, lam_s * (1.0 - a))
            np.add.at(gk, c, lam_s * (incoming[s, live] - b) * (-ln[live, s, None] * a))
            lam[live] = lam_s * a
    return gk, gb


def _hermite(values, derivs, T, t_min, t_step):
    n_nodes = values.shape[1]
    pos = (np.clip(T, t_min, t_min + (n_nodes - 1) * t_step) - t_min) / t_step
    k = np.minimum(np.floor(pos).astype(np.intp), n_nodes - 2)
    u = (pos - k)[None, :, None]
    h = t_step
    f0, f1 = values[:, k], values[:, k + 1]
    m0, m1 = derivs[:, k] * h, derivs[:, k + 1] * h
    u2, u3 = u * u, u * u * u
    val = (2 * u3 - 3 * u2 + 1) * f0 + (u3 - 2 * u2 + u) * m0 + (-2 * u3 + 3 * u2) * f1 + (u3 - u2) * m1
    der = ((6 * u2 - 6 * u) * f0 + (3 * u2 - 4 * u + 1) * m0 + (-6 * u2 + 6 * u) * f1 + (3 * u2 - 2 * u) * m1) / h
    return val, der


_CELL_CHUNK = 256


def mix_forward(T, X, values, derivs, t_min, t_step):
    """kappa[m, :] = sum_s X[m, s] * sigma_s(T[m]) with Hermite-interpolated sigma."""
    out = np.empty((T.size, values.shape[2]))
    for m0 in range(0, T.size, _CELL_CHUNK):
        m1 = min(m0 + _CELL_CHUNK, T.size)
        val, _ = _hermite(values, derivs, T[m0:m1], t_min, t_step)
        out[m0:m1] = np.einsum("ms,smn->mn", X[m0:m1], val)
    return out


def mix_backward(grad_kappa, T, X, values, derivs, t_min, t_step):
    """Adjoint of :func:`mix_forward`; returns (grad_T, grad_X)."""
    gT = np.empty(T.size)
    gX = np.empty_like(X)
    for m0 in range(0, T.size, _CELL_CHUNK):
        m1 = min(m0 + _CELL_CHUNK, T.size)
        val, der = _hermite(values, derivs, T[m0:m1], t_min, t_step)
        g = grad_kappa[m0:m1]
        gX[m0:m1] = np.einsum("mn,smn->ms", g, val)
        # outside the table the interpolant is held constant in T
        dk = np.einsum("ms,smn->mn", X[m0:m1], der)
        gT[m0:m1] = np.einsum("mn,mn->m", g, dk)
    t_hi = t_min + (values.shape[1] - 1) * t_step
    gT[(T < t_min) | (T > t_hi)] = 0.0
    return gT, gX
