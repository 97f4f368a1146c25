"""Fused hash-grid encode / scatter kernels (numba, single-threaded).

Loops run level by level (one level's table stays cache resident) and then
in point order, so the table-gradient scatter is a fixed sequential reduction
and bit-reproducible. The spatial hash is evaluated in uint32 arithmetic,
which agrees with the 64-bit definition on the low ``T <= 32`` bits kept.
"""

import numba
import numpy as np

P1 = np.uint32(2654435761)
P2 = np.uint32(805459861)


@numba.njit(cache=True, inline="always")
def _cell(p, rf, r):
    u = (min(max(p, -1.0), 1.0) + 1.0) * 0.5 * rf
    b = min(int(u), r - 1)
    return b, u - b


@numba.njit(cache=True, inline="always")
def _row(off, ix, iy, iz, side, dense, mask):
    if dense:
        return off + ix + iy * side + iz * side * side
    return off + ((np.uint32(ix) ^ (np.uint32(iy) * P1) ^ (np.uint32(iz) * P2)) & np.uint32(mask))


@numba.njit(cache=True)
def hash_encode_forward(pos, table, res, dense, offsets, mask):
    n = pos.shape[0]
    n_levels = res.shape[0]
    nf = table.shape[1]
    out = np.zeros((n, n_levels * nf), dtype=table.dtype)
    acc = np.zeros(nf, dtype=table.dtype)
    for l in range(n_levels):
        r = res[l]
        rf = table.dtype.type(r)
        side = r + 1
        off = offsets[l]
        dn = dense[l]
        for i in range(n):
            bx, fx = _cell(pos[i, 0], rf, r)
            by, fy = _cell(pos[i, 1], rf, r)
            bz, fz = _cell(pos[i, 2], rf, r)
            if nf == 2:
                # Scalar accumulators: the common two-feature layout.
                a0 = 0.0
                a1 = 0.0
                for c in range(8):
                    cx = c & 1
                    cy = (c >> 1) & 1
                    cz = (c >> 2) & 1
                    w = (fx if cx else 1.0 - fx) * (fy if cy else 1.0 - fy) * (fz if cz else 1.0 - fz)
                    row = _row(off, bx + cx, by + cy, bz + cz, side, dn, mask)
                    a0 += w * table[row, 0]
                    a1 += w * table[row, 1]
                out[i, 2 * l] = a0
                out[i, 2 * l + 1] = a1
                continue
            acc[:] = 0.0
            for c in range(8):
                cx = c & 1
                cy = (c >> 1) & 1
                cz = (c >> 2) & 1
                w = (fx if cx else 1.0 - fx) * (fy if cy else 1.0 - fy) * (fz if cz else 1.0 - fz)
                row = _row(off, bx + cx, by + cy, bz + cz, side, dn, mask)
                for f in range(nf):
                    acc[f] += w * table[row, f]
            for f in range(nf):
                out[i, l * nf + f] = acc[f]
    return out


@numba.njit(cache=True)
def hash_encode_backward(pos, grad_out, table, res, dense, offsets, mask, want_table, want_pos):
    n = pos.shape[0]
    n_levels = res.shape[0]
    nf = table.shape[1]
    if want_table:
        grad_table = np.zeros(table.shape, dtype=table.dtype)
    else:
        grad_table = np.zeros((0, nf), dtype=table.dtype)
    grad_pos = np.zeros((n if want_pos else 0, 3), dtype=pos.dtype)
    for l in range(n_levels):
        r = res[l]
        rf = table.dtype.type(r)
        side = r + 1
        off = offsets[l]
        dn = dense[l]
        scale = 0.5 * r
        for i in range(n):
            bx, fx = _cell(pos[i, 0], rf, r)
            by, fy = _cell(pos[i, 1], rf, r)
            bz, fz = _cell(pos[i, 2], rf, r)
            if nf == 2 and want_table and not want_pos:
                g0 = grad_out[i, 2 * l]
                g1 = grad_out[i, 2 * l + 1]
                for c in range(8):
                    cx = c & 1
                    cy = (c >> 1) & 1
                    cz = (c >> 2) & 1
                    w = (fx if cx else 1.0 - fx) * (fy if cy else 1.0 - fy) * (fz if cz else 1.0 - fz)
                    row = _row(off, bx + cx, by + cy, bz + cz, side, dn, mask)
                    grad_table[row, 0] += w * g0
                    grad_table[row, 1] += w * g1
                continue
            for c in range(8):
                cx = c & 1
                cy = (c >> 1) & 1
                cz = (c >> 2) & 1
                wx = fx if cx else 1.0 - fx
                wy = fy if cy else 1.0 - fy
                wz = fz if cz else 1.0 - fz
                w = wx * wy * wz
                row = _row(off, bx + cx, by + cy, bz + cz, side, dn, mask)
                dot = 0.0
                for f in range(nf):
                    g = grad_out[i, l * nf + f]
                    if want_table:
                        grad_table[row, f] += w * g
                    dot += g * table[row, f]
                if want_pos:
                    sx = 1.0 if cx else -1.0
                    sy = 1.0 if cy else -1.0
                    sz = 1.0 if cz else -1.0
                    # Clamped coordinates have zero derivative outside the cube.
                    if abs(pos[i, 0]) < 1.0:
                        grad_pos[i, 0] += dot * sx * wy * wz * scale
                    if abs(pos[i, 1]) < 1.0:
                        grad_pos[i, 1] += dot * wx * sy * wz * scale
                    if abs(pos[i, 2]) < 1.0:
                        grad_pos[i, 2] += dot * wx * wy * sz * scale
    return grad_table, grad_pos
