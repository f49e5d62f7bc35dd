"""Compiled inner loops shared by rendering, composition and training.

Every kernel works on a *packed* scene: all entry grids concatenated into flat
arrays plus per-entry metadata. A plain field is a packed scene with one entry
and an identity placement, so field queries and composed queries run the same
arithmetic and agree bit for bit.

Grids are stored ``(Nx, Ny, Nz)`` in C order; the flat vertex index of
``(i, j, k)`` is ``(i * Ny + j) * Nz + k``. Colors carry three channels per
vertex, interleaved.

Kernels are serial and release the GIL; callers split ray ranges across threads.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True, error_model="numpy")
_INLINE = dict(_JIT, inline="always")


@njit(**_INLINE)
def softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@njit(**_INLINE)
def sigmoid(x):
    # exp overflow to inf for x < -709 still yields the correct limit 0.
    return 1.0 / (1.0 + math.exp(-x))


@njit(**_INLINE)
def _axis(g, n):
    i = int(math.floor(g))
    if i > n - 2:
        i = n - 2
    if i < 0:
        i = 0
    return i, g - i


@njit(**_INLINE)
def locate(e, px, py, pz, res, bmin, bmax, rot, trans, scale):
    """Cell of a world point in entry ``e``: (inside, ix, iy, iz, fx, fy, fz)."""
    dx = px - trans[e, 0]
    dy = py - trans[e, 1]
    dz = pz - trans[e, 2]
    s = scale[e]
    lx = (rot[e, 0, 0] * dx + rot[e, 1, 0] * dy + rot[e, 2, 0] * dz) / s
    ly = (rot[e, 0, 1] * dx + rot[e, 1, 1] * dy + rot[e, 2, 1] * dz) / s
    lz = (rot[e, 0, 2] * dx + rot[e, 1, 2] * dy + rot[e, 2, 2] * dz) / s
    if (lx < bmin[e, 0] or lx > bmax[e, 0] or ly < bmin[e, 1] or ly > bmax[e, 1]
            or lz < bmin[e, 2] or lz > bmax[e, 2]):
        return False, 0, 0, 0, 0.0, 0.0, 0.0
    ix, fx = _axis((lx - bmin[e, 0]) / (bmax[e, 0] - bmin[e, 0]) * (res[e, 0] - 1), res[e, 0])
    iy, fy = _axis((ly - bmin[e, 1]) / (bmax[e, 1] - bmin[e, 1]) * (res[e, 1] - 1), res[e, 1])
    iz, fz = _axis((lz - bmin[e, 2]) / (bmax[e, 2] - bmin[e, 2]) * (res[e, 2] - 1), res[e, 2])
    return True, ix, iy, iz, fx, fy, fz


@njit(**_INLINE)
def corners(e, ix, iy, iz, fx, fy, fz, res, off, idx, w):
    """Flat vertex indices and trilinear weights of the 8 cell corners."""
    ny = res[e, 1]
    nz = res[e, 2]
    o = off[e]
    c = 0
    for a in range(2):
        wx = fx if a == 1 else 1.0 - fx
        for b in range(2):
            wy = fy if b == 1 else 1.0 - fy
            for d in range(2):
                wz = fz if d == 1 else 1.0 - fz
                idx[c] = o + ((ix + a) * ny + (iy + b)) * nz + (iz + d)
                w[c] = wx * wy * wz
                c += 1


@njit(**_INLINE)
def lerp(a, b, t):
    return a + t * (b - a)


@njit(**_INLINE)
def trilerp(v, stride, c000, ny, nz, fx, fy, fz):
    """Nested lerps along z, y, x; a constant cell reproduces its value exactly."""
    c010 = c000 + nz * stride
    c100 = c000 + ny * nz * stride
    c110 = c100 + nz * stride
    c00 = lerp(v[c000], v[c000 + stride], fz)
    c01 = lerp(v[c010], v[c010 + stride], fz)
    c10 = lerp(v[c100], v[c100 + stride], fz)
    c11 = lerp(v[c110], v[c110 + stride], fz)
    return lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fx)


@njit(**_INLINE)
def raw_density(e, ix, iy, iz, fx, fy, fz, dens, res, off):
    ny = res[e, 1]
    nz = res[e, 2]
    base = off[e] + (ix * ny + iy) * nz + iz
    return trilerp(dens, 1, base, ny, nz, fx, fy, fz)


@njit(**_INLINE)
def raw_color(e, ix, iy, iz, fx, fy, fz, col, res, off):
    ny = res[e, 1]
    nz = res[e, 2]
    v = 3 * (off[e] + (ix * ny + iy) * nz + iz)
    return (trilerp(col, 3, v, ny, nz, fx, fy, fz),
            trilerp(col, 3, v + 1, ny, nz, fx, fy, fz),
            trilerp(col, 3, v + 2, ny, nz, fx, fy, fz))


@njit(**_INLINE)
def composed_density(px, py, pz, dens, res, off, bmin, bmax, rot, trans, scale):
    """Max-density entry at a world point.

    Returns (sigma, winner, inside, ix, iy, iz, fx, fy, fz, raw_density) where
    the cell fields locate the winner's lattice cell. Ties keep the lowest
    entry index; points outside every entry are vacuum.
    """
    best = -1.0
    best_raw = 0.0
    win = 0
    w_in = False
    w_ix = 0
    w_iy = 0
    w_iz = 0
    w_fx = 0.0
    w_fy = 0.0
    w_fz = 0.0
    for e in range(res.shape[0]):
        inside, ix, iy, iz, fx, fy, fz = locate(e, px, py, pz, res, bmin, bmax, rot, trans, scale)
        s = 0.0
        rd = 0.0
        if inside:
            rd = raw_density(e, ix, iy, iz, fx, fy, fz, dens, res, off)
            s = softplus(rd) / scale[e]
        if s > best:
            best = s
            best_raw = rd
            win = e
            w_in = inside
            w_ix = ix
            w_iy = iy
            w_iz = iz
            w_fx = fx
            w_fy = fy
            w_fz = fz
    return best, win, w_in, w_ix, w_iy, w_iz, w_fx, w_fy, w_fz, best_raw


@njit(**_INLINE)
def winner_color(win, inside, ix, iy, iz, fx, fy, fz, col, res, off):
    if not inside:
        return 0.0, 0.0, 0.0
    r, g, b = raw_color(win, ix, iy, iz, fx, fy, fz, col, res, off)
    return sigmoid(r), sigmoid(g), sigmoid(b)


@njit(**_INLINE)
def composed_sample(px, py, pz, dens, col, res, off, bmin, bmax, rot, trans, scale):
    """Max-density query over all entries: (sigma, r, g, b, winner, raw_density).

    Ties keep the lowest entry index. Points outside every entry are vacuum
    with black color.
    """
    s, win, inside, ix, iy, iz, fx, fy, fz, rd = composed_density(
        px, py, pz, dens, res, off, bmin, bmax, rot, trans, scale)
    r, g, b = winner_color(win, inside, ix, iy, iz, fx, fy, fz, col, res, off)
    return s, r, g, b, win, rd


@njit(**_JIT)
def query_points(pts, dens, col, res, off, bmin, bmax, rot, trans, scale,
                 out_sigma, out_color, out_winner, start, stop):
    for p in range(start, stop):
        s, r, g, b, win, _ = composed_sample(pts[p, 0], pts[p, 1], pts[p, 2], dens, col, res,
                                             off, bmin, bmax, rot, trans, scale)
        out_sigma[p] = s
        out_color[p, 0] = r
        out_color[p, 1] = g
        out_color[p, 2] = b
        out_winner[p] = win


@njit(**_JIT)
def slab(ox, oy, oz, dx, dy, dz, lo, hi, t_near, t_far):
    """Slab-method box interval clipped to [t_near, t_far]; (ok, t0, t1)."""
    t0 = t_near
    t1 = t_far
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return False, 0.0, 0.0
            continue
        ta = (lo[a] - o[a]) / d[a]
        tb = (hi[a] - o[a]) / d[a]
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if t0 > t1:
        return False, 0.0, 0.0
    return True, t0, t1


@njit(**_JIT)
def ray_intervals(orig, dirs, t_near, t_far, lo, hi, step, out_t0, out_n):
    for r in range(orig.shape[0]):
        ok, t0, t1 = slab(orig[r, 0], orig[r, 1], orig[r, 2], dirs[r, 0], dirs[r, 1],
                          dirs[r, 2], lo, hi, t_near[r], t_far[r])
        if ok:
            out_t0[r] = t0
            out_n[r] = int(math.floor((t1 - t0) / step))
        else:
            out_t0[r] = 0.0
            out_n[r] = 0


@njit(**_JIT)
def render_rays(orig, dirs, t0s, counts, u, step, background, stop_transmittance,
                dens, col, res, off, bmin, bmax, rot, trans, scale, out, start, stop):
    """March rays through a packed scene and alpha-composite front to back."""
    for r in range(start, stop):
        trans_t = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        for i in range(counts[r]):
            t = t0s[r] + (i + u[r]) * step
            s, qr, qg, qb, _, _ = composed_sample(
                orig[r, 0] + t * dirs[r, 0], orig[r, 1] + t * dirs[r, 1],
                orig[r, 2] + t * dirs[r, 2], dens, col, res, off, bmin, bmax, rot, trans, scale)
            alpha = -math.expm1(-s * step)
            wt = trans_t * alpha
            cr += wt * qr
            cg += wt * qg
            cb += wt * qb
            trans_t *= 1.0 - alpha
            if trans_t < stop_transmittance:
                break
        out[r, 0] = cr + trans_t * background[0]
        out[r, 1] = cg + trans_t * background[1]
        out[r, 2] = cb + trans_t * background[2]


@njit(**_JIT)
def select_samples(orig, dirs, t0s, counts, u, step, threshold, raw_floor, occ, occ_off,
                   dens, col, res, off, bmin, bmax, rot, trans, scale,
                   out_pos, out_sigma, out_color, out_ray):
    """Sample every ray, keep samples whose winning alpha clears the threshold.

    ``raw_floor[e]`` is a raw density below which entry ``e`` cannot clear the
    threshold and ``occ`` flags the cells that can reach it. Samples where no
    entry can reach its floor are dropped without activating anything.
    Candidates go through the exact composed query, so the kept set does not
    depend on the floors beyond their being conservative. Color is only
    interpolated for kept samples. Kept samples are compacted in ray order;
    returns the kept count.
    """
    kept = 0
    for r in range(orig.shape[0]):
        for i in range(counts[r]):
            t = t0s[r] + (i + u[r]) * step
            px = orig[r, 0] + t * dirs[r, 0]
            py = orig[r, 1] + t * dirs[r, 1]
            pz = orig[r, 2] + t * dirs[r, 2]
            candidate = False
            for e in range(res.shape[0]):
                inside, ix, iy, iz, fx, fy, fz = locate(e, px, py, pz, res, bmin, bmax, rot,
                                                        trans, scale)
                if not inside:
                    continue
                cell = occ_off[e] + (ix * (res[e, 1] - 1) + iy) * (res[e, 2] - 1) + iz
                if occ[cell] and raw_density(e, ix, iy, iz, fx, fy, fz, dens, res,
                                             off) >= raw_floor[e]:
                    candidate = True
                    break
            if not candidate:
                continue
            s, win, inside, ix, iy, iz, fx, fy, fz, _ = composed_density(
                px, py, pz, dens, res, off, bmin, bmax, rot, trans, scale)
            if -math.expm1(-s * step) >= threshold:
                qr, qg, qb = winner_color(win, inside, ix, iy, iz, fx, fy, fz, col, res, off)
                out_pos[kept, 0] = px
                out_pos[kept, 1] = py
                out_pos[kept, 2] = pz
                out_sigma[kept] = s
                out_color[kept, 0] = qr
                out_color[kept, 1] = qg
                out_color[kept, 2] = qb
                out_ray[kept] = r
                kept += 1
    return kept


@njit(**_JIT)
def supervised_grad(pts, tgt_sigma, tgt_color, lam_sigma, lam_color,
                    dens, col, res, bmin, bmax, gdens, gcol):
    """Mean weighted squared error on activated values of a single unplaced field.

    Gradients are accumulated into ``gdens``/``gcol`` in point order.
    """
    n = pts.shape[0]
    if n == 0:
        return 0.0
    idx = np.empty(8, np.int64)
    w = np.empty(8)
    rot = np.eye(3).reshape(1, 3, 3)
    trans = np.zeros((1, 3))
    scale = np.ones(1)
    off = np.zeros(1, np.int64)
    inv_n = 1.0 / n
    total = 0.0
    for p in range(n):
        inside, ix, iy, iz, fx, fy, fz = locate(0, pts[p, 0], pts[p, 1], pts[p, 2], res, bmin,
                                                bmax, rot, trans, scale)
        if not inside:
            continue
        rd = raw_density(0, ix, iy, iz, fx, fy, fz, dens, res, off)
        rr, rg, rb = raw_color(0, ix, iy, iz, fx, fy, fz, col, res, off)
        r = sigmoid(rr)
        g = sigmoid(rg)
        b = sigmoid(rb)
        ds = softplus(rd) - tgt_sigma[p]
        dr = r - tgt_color[p, 0]
        dg = g - tgt_color[p, 1]
        db = b - tgt_color[p, 2]
        total += lam_sigma * ds * ds + lam_color * (dr * dr + dg * dg + db * db)
        k_s = 2.0 * lam_sigma * ds * inv_n * sigmoid(rd)
        k_r = 2.0 * lam_color * dr * inv_n * r * (1.0 - r)
        k_g = 2.0 * lam_color * dg * inv_n * g * (1.0 - g)
        k_b = 2.0 * lam_color * db * inv_n * b * (1.0 - b)
        corners(0, ix, iy, iz, fx, fy, fz, res, off, idx, w)
        for c in range(8):
            v = idx[c]
            gdens[v] += w[c] * k_s
            gcol[3 * v] += w[c] * k_r
            gcol[3 * v + 1] += w[c] * k_g
            gcol[3 * v + 2] += w[c] * k_b
    return total * inv_n


@njit(**_JIT)
def rgb_grad(orig, dirs, t0s, counts, u, step, background, stop_transmittance,
             targets, dens, col, res, bmin, bmax, gdens, gcol, out_color):
    """Composite rays through a single unplaced field and backpropagate the pixel MSE.

    Loss is the mean over rays and channels of the squared color error.
    """
    n_rays = orig.shape[0]
    if n_rays == 0:
        return 0.0
    max_n = 0
    for r in range(n_rays):
        if counts[r] > max_n:
            max_n = counts[r]
    s_inside = np.zeros(max_n, np.bool_)
    s_cell = np.empty((max_n, 3), np.int64)
    s_frac = np.empty((max_n, 3))
    s_alpha = np.empty(max_n)
    s_trans = np.empty(max_n)
    s_c = np.empty((max_n, 3))
    s_dsig = np.empty(max_n)
    idx = np.empty(8, np.int64)
    w = np.empty(8)
    rot = np.eye(3).reshape(1, 3, 3)
    trans = np.zeros((1, 3))
    scale = np.ones(1)
    off = np.zeros(1, np.int64)
    norm = 1.0 / (3.0 * n_rays)
    total = 0.0
    for r in range(n_rays):
        trans_t = 1.0
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        m = 0
        for i in range(counts[r]):
            t = t0s[r] + (i + u[r]) * step
            inside, ix, iy, iz, fx, fy, fz = locate(
                0, orig[r, 0] + t * dirs[r, 0], orig[r, 1] + t * dirs[r, 1],
                orig[r, 2] + t * dirs[r, 2], res, bmin, bmax, rot, trans, scale)
            s = 0.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            if inside:
                rd = raw_density(0, ix, iy, iz, fx, fy, fz, dens, res, off)
                rr, rg, rb = raw_color(0, ix, iy, iz, fx, fy, fz, col, res, off)
                s = softplus(rd)
                cr = sigmoid(rr)
                cg = sigmoid(rg)
                cb = sigmoid(rb)
                s_dsig[i] = sigmoid(rd)
                s_cell[i, 0] = ix
                s_cell[i, 1] = iy
                s_cell[i, 2] = iz
                s_frac[i, 0] = fx
                s_frac[i, 1] = fy
                s_frac[i, 2] = fz
            alpha = -math.expm1(-s * step)
            s_inside[i] = inside
            s_alpha[i] = alpha
            s_trans[i] = trans_t
            s_c[i, 0] = cr
            s_c[i, 1] = cg
            s_c[i, 2] = cb
            wt = trans_t * alpha
            acc0 += wt * cr
            acc1 += wt * cg
            acc2 += wt * cb
            trans_t *= 1.0 - alpha
            m = i + 1
            if trans_t < stop_transmittance:
                break
        c0 = acc0 + trans_t * background[0]
        c1 = acc1 + trans_t * background[1]
        c2 = acc2 + trans_t * background[2]
        out_color[r, 0] = c0
        out_color[r, 1] = c1
        out_color[r, 2] = c2
        e0 = c0 - targets[r, 0]
        e1 = c1 - targets[r, 1]
        e2 = c2 - targets[r, 2]
        total += e0 * e0 + e1 * e1 + e2 * e2
        g0 = 2.0 * e0 * norm
        g1 = 2.0 * e1 * norm
        g2 = 2.0 * e2 * norm
        # Color seen behind sample i: B_i = a_i c_i + (1 - a_i) B_{i+1}, B_m = background.
        b0 = background[0]
        b1 = background[1]
        b2 = background[2]
        for i in range(m - 1, -1, -1):
            a = s_alpha[i]
            if s_inside[i]:
                ti = s_trans[i]
                ga = ti * (g0 * (s_c[i, 0] - b0) + g1 * (s_c[i, 1] - b1)
                           + g2 * (s_c[i, 2] - b2))
                k_s = ga * step * (1.0 - a) * s_dsig[i]
                wa = ti * a
                k_r = g0 * wa * s_c[i, 0] * (1.0 - s_c[i, 0])
                k_g = g1 * wa * s_c[i, 1] * (1.0 - s_c[i, 1])
                k_b = g2 * wa * s_c[i, 2] * (1.0 - s_c[i, 2])
                corners(0, s_cell[i, 0], s_cell[i, 1], s_cell[i, 2], s_frac[i, 0],
                        s_frac[i, 1], s_frac[i, 2], res, off, idx, w)
                for c in range(8):
                    v = idx[c]
                    wc = w[c]
                    gdens[v] += wc * k_s
                    gcol[3 * v] += wc * k_r
                    gcol[3 * v + 1] += wc * k_g
                    gcol[3 * v + 2] += wc * k_b
            b0 = a * s_c[i, 0] + (1.0 - a) * b0
            b1 = a * s_c[i, 1] + (1.0 - a) * b1
            b2 = a * s_c[i, 2] + (1.0 - a) * b2
    return total * norm
