"""Compiled fragment search: which faces touch which pixels, in depth order.

This is the discrete half of the rasterizer (no gradients flow through it);
the differentiable quantities are recomputed in torch for the kept fragments.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _insert(out_face, out_depth, out_count, out_inside, p, face, depth, inside, L):
    c = out_count[p]
    if c == L and depth >= out_depth[p, L - 1]:
        return
    pos = c if c < L else L - 1
    while pos > 0 and out_depth[p, pos - 1] > depth:
        out_depth[p, pos] = out_depth[p, pos - 1]
        out_face[p, pos] = out_face[p, pos - 1]
        out_inside[p, pos] = out_inside[p, pos - 1]
        pos -= 1
    out_depth[p, pos] = depth
    out_face[p, pos] = face
    out_inside[p, pos] = inside
    if c < L:
        out_count[p] = c + 1


@njit(cache=True)
def truncate_opaque(out_face, out_depth, out_count, out_inside, falpha):
    """Drop fragments behind a constant fully-opaque one; they carry zero weight and gradient."""
    P, L = out_face.shape
    for p in range(P):
        for l in range(out_count[p]):
            f = out_face[p, l]
            if out_inside[p, l] and falpha[f] >= 1.0:
                for m in range(l + 1, out_count[p]):
                    out_face[p, m] = -1
                    out_depth[p, m] = np.inf
                    out_inside[p, m] = False
                out_count[p] = l + 1
                break


@njit(cache=True)
def gather_kernel(fpx, fz, fvalid, falpha, H, W, ndc2, sigma, thr, L,
                  out_face, out_depth, out_count, out_inside):
    """Fill per-pixel face lists (nearest first, at most ``L``).

    ``fpx`` (F, 3, 2) pixel-space vertices, ``fz`` (F, 3) camera depths.
    Squared distances are converted to NDC units by ``ndc2``. A fragment is
    kept when ``alpha * exp(-d^2 / sigma) > thr``.
    """
    F = fpx.shape[0]
    for f in range(F):
        a = falpha[f]
        if not fvalid[f] or a <= thr:
            continue
        r_px = math.sqrt(sigma * math.log(a / thr) / ndc2)
        x0, y0 = fpx[f, 0, 0], fpx[f, 0, 1]
        x1, y1 = fpx[f, 1, 0], fpx[f, 1, 1]
        x2, y2 = fpx[f, 2, 0], fpx[f, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        jmin = max(0, int(math.ceil(min(x0, x1, x2) - r_px)))
        jmax = min(W - 1, int(math.floor(max(x0, x1, x2) + r_px)))
        imin = max(0, int(math.ceil(min(y0, y1, y2) - r_px)))
        imax = min(H - 1, int(math.floor(max(y0, y1, y2) + r_px)))
        if jmin > jmax or imin > imax:
            continue
        iz0, iz1, iz2 = 1.0 / fz[f, 0], 1.0 / fz[f, 1], 1.0 / fz[f, 2]
        for i in range(imin, imax + 1):
            py = float(i)
            for j in range(jmin, jmax + 1):
                px = float(j)
                w0 = ((x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)) / area
                w1 = ((x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)) / area
                w2 = 1.0 - w0 - w1
                if w0 >= 0 and w1 >= 0 and w2 >= 0:
                    d2 = 0.0
                    b0, b1, b2 = w0, w1, w2
                else:
                    d2 = 1e300
                    b0 = b1 = b2 = 0.0
                    for e in range(3):
                        if e == 0:
                            ax, ay, bx, by = x0, y0, x1, y1
                        elif e == 1:
                            ax, ay, bx, by = x1, y1, x2, y2
                        else:
                            ax, ay, bx, by = x2, y2, x0, y0
                        ex, ey = bx - ax, by - ay
                        t = ((px - ax) * ex + (py - ay) * ey) / (ex * ex + ey * ey + 1e-30)
                        t = min(max(t, 0.0), 1.0)
                        dx, dy = px - ax - t * ex, py - ay - t * ey
                        dd = dx * dx + dy * dy
                        if dd < d2:
                            d2 = dd
                            if e == 0:
                                b0, b1, b2 = 1.0 - t, t, 0.0
                            elif e == 1:
                                b0, b1, b2 = 0.0, 1.0 - t, t
                            else:
                                b0, b1, b2 = t, 0.0, 1.0 - t
                occ = a * math.exp(-d2 * ndc2 / sigma)
                if occ <= thr:
                    continue
                depth = 1.0 / (b0 * iz0 + b1 * iz1 + b2 * iz2)
                _insert(out_face, out_depth, out_count, out_inside, i * W + j, f, depth, d2 == 0.0, L)


def gather(fpx, fz, fvalid, falpha, H, W, ndc2, sigma, thr, L, cull_opaque=True):
    """Returns ``(face, depth, inside)`` arrays of shape ``(H*W, L)``; empty slots have face -1."""
    P = H * W
    out_face = np.full((P, L), -1, dtype=np.int64)
    out_depth = np.full((P, L), np.inf)
    out_count = np.zeros(P, dtype=np.int64)
    out_inside = np.zeros((P, L), dtype=np.bool_)
    falpha = np.ascontiguousarray(falpha, dtype=np.float64)
    gather_kernel(np.ascontiguousarray(fpx, dtype=np.float64),
                  np.ascontiguousarray(fz, dtype=np.float64),
                  np.ascontiguousarray(fvalid), falpha,
                  H, W, float(ndc2), float(sigma), float(thr), int(L),
                  out_face, out_depth, out_count, out_inside)
    if cull_opaque:
        truncate_opaque(out_face, out_depth, out_count, out_inside, falpha)
    return out_face, out_depth, out_inside


# -- per-fragment shading, compositing and their adjoints ----------------------

@njit(cache=True, inline="always")
def _cross(ux, uy, wx, wy):
    return ux * wy - uy * wx


@njit(cache=True)
def _bary(px, py, ax, ay, bx, by, cx, cy, inside):
    """Barycentrics of the pixel (inside) or of its nearest point on the triangle.

    Returns (b0, b1, b2, d2, edge, t); edge is -1 inside.
    """
    if inside:
        area = _cross(bx - ax, by - ay, cx - ax, cy - ay)
        w0 = _cross(cx - bx, cy - by, px - bx, py - by) / area
        w1 = _cross(ax - cx, ay - cy, px - cx, py - cy) / area
        return w0, w1, 1.0 - w0 - w1, 0.0, -1, 0.0
    d2 = 1e300
    best = 0
    tb = 0.0
    for e in range(3):
        if e == 0:
            sx, sy, ex, ey = ax, ay, bx - ax, by - ay
        elif e == 1:
            sx, sy, ex, ey = bx, by, cx - bx, cy - by
        else:
            sx, sy, ex, ey = cx, cy, ax - cx, ay - cy
        t = ((px - sx) * ex + (py - sy) * ey) / (ex * ex + ey * ey + 1e-30)
        t = min(max(t, 0.0), 1.0)
        dx, dy = px - sx - t * ex, py - sy - t * ey
        dd = dx * dx + dy * dy
        if dd < d2:
            d2, best, tb = dd, e, t
    if best == 0:
        return 1.0 - tb, tb, 0.0, d2, 0, tb
    if best == 1:
        return 0.0, 1.0 - tb, tb, d2, 1, tb
    return tb, 0.0, 1.0 - tb, d2, 2, tb


@njit(cache=True)
def _tex_coords(u, v, pad, Ht, Wt):
    x = (u * (1.0 + 2.0 * pad) - pad) * Wt - 0.5
    y = v * Ht - 0.5
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx, fy = x - x0, y - y0
    x0i, y0i = int(x0), int(y0)
    if pad > 0:
        c0 = x0i % Wt
        c1 = (x0i + 1) % Wt
    else:
        c0 = min(max(x0i, 0), Wt - 1)
        c1 = min(max(x0i + 1, 0), Wt - 1)
    r0 = min(max(y0i, 0), Ht - 1)
    r1 = min(max(y0i + 1, 0), Ht - 1)
    return fx, fy, r0, r1, c0, c1


@njit(cache=True)
def shade_kernel(face, inside, pxv, zv, faces, uv, slot, pad, falpha, tex, W, ndc2, sigma,
                 out_occ, out_col, out_rgb, out_acc):
    """Occupancy/color of every fragment and the composited pixel values."""
    P, L = face.shape
    Ht, Wt = tex.shape[1], tex.shape[2]
    for p in range(P):
        px = float(p % W)
        py = float(p // W)
        trans = 1.0
        for l in range(L):
            f = face[p, l]
            if f < 0:
                break
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            b0, b1, b2, d2, e, t = _bary(px, py, pxv[i0, 0], pxv[i0, 1], pxv[i1, 0], pxv[i1, 1],
                                         pxv[i2, 0], pxv[i2, 1], inside[p, l])
            occ = falpha[f] * math.exp(-d2 * ndc2 / sigma)
            q0, q1, q2 = b0 / zv[i0], b1 / zv[i1], b2 / zv[i2]
            Q = q0 + q1 + q2
            u = (q0 * uv[f, 0, 0] + q1 * uv[f, 1, 0] + q2 * uv[f, 2, 0]) / Q
            v = (q0 * uv[f, 0, 1] + q1 * uv[f, 1, 1] + q2 * uv[f, 2, 1]) / Q
            fx, fy, r0, r1, c0, c1 = _tex_coords(u, v, pad[f], Ht, Wt)
            s = slot[f]
            w = trans * occ
            for ch in range(3):
                col = ((1 - fx) * (1 - fy) * tex[s, r0, c0, ch] + fx * (1 - fy) * tex[s, r0, c1, ch]
                       + (1 - fx) * fy * tex[s, r1, c0, ch] + fx * fy * tex[s, r1, c1, ch])
                out_col[p, l, ch] = col
                out_rgb[p, ch] += w * col
            out_occ[p, l] = occ
            out_acc[p] += w
            trans *= 1.0 - occ


@njit(cache=True)
def shade_backward_kernel(face, inside, pxv, zv, faces, uv, slot, pad, falpha, tex, W, ndc2, sigma,
                          occ_s, col_s, g_rgb, g_acc, d_px, d_z, d_alpha, d_tex):
    """Adjoint of :func:`shade_kernel`; accumulates into the ``d_*`` buffers in pixel order."""
    P, L = face.shape
    Ht, Wt = tex.shape[1], tex.shape[2]
    T = np.empty(L)
    gO = np.empty(L)
    for p in range(P):
        n = 0
        while n < L and face[p, n] >= 0:
            n += 1
        if n == 0:
            continue
        gr0, gr1, gr2, ga = g_rgb[p, 0], g_rgb[p, 1], g_rgb[p, 2], g_acc[p]
        if gr0 == 0.0 and gr1 == 0.0 and gr2 == 0.0 and ga == 0.0:
            continue
        tr = 1.0
        for l in range(n):
            T[l] = tr
            tr *= 1.0 - occ_s[p, l]
        R = 0.0
        for l in range(n - 1, -1, -1):
            o = occ_s[p, l]
            val = gr0 * col_s[p, l, 0] + gr1 * col_s[p, l, 1] + gr2 * col_s[p, l, 2] + ga
            gO[l] = T[l] * (val - R)
            R = o * val + (1.0 - o) * R
        px = float(p % W)
        py = float(p // W)
        for l in range(n):
            f = face[p, l]
            wgt = T[l] * occ_s[p, l]
            gc0, gc1, gc2 = gr0 * wgt, gr1 * wgt, gr2 * wgt
            go = gO[l]
            i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
            ax, ay = pxv[i0, 0], pxv[i0, 1]
            bx, by = pxv[i1, 0], pxv[i1, 1]
            cx, cy = pxv[i2, 0], pxv[i2, 1]
            ins = inside[p, l]
            b0, b1, b2, d2, e, t = _bary(px, py, ax, ay, bx, by, cx, cy, ins)
            ex_ = math.exp(-d2 * ndc2 / sigma)
            d_alpha[f] += go * ex_
            g_d2 = go * falpha[f] * ex_ * (-ndc2 / sigma)
            z0, z1, z2 = zv[i0], zv[i1], zv[i2]
            q0, q1, q2 = b0 / z0, b1 / z1, b2 / z2
            Q = q0 + q1 + q2
            bp0, bp1, bp2 = q0 / Q, q1 / Q, q2 / Q
            u = bp0 * uv[f, 0, 0] + bp1 * uv[f, 1, 0] + bp2 * uv[f, 2, 0]
            v = bp0 * uv[f, 0, 1] + bp1 * uv[f, 1, 1] + bp2 * uv[f, 2, 1]
            pd = pad[f]
            fx, fy, r0, r1, c0, c1 = _tex_coords(u, v, pd, Ht, Wt)
            s = slot[f]
            gfx = 0.0
            gfy = 0.0
            for ch in range(3):
                gc = gc0 if ch == 0 else (gc1 if ch == 1 else gc2)
                if gc == 0.0:
                    continue
                t00, t01 = tex[s, r0, c0, ch], tex[s, r0, c1, ch]
                t10, t11 = tex[s, r1, c0, ch], tex[s, r1, c1, ch]
                d_tex[s, r0, c0, ch] += gc * (1 - fx) * (1 - fy)
                d_tex[s, r0, c1, ch] += gc * fx * (1 - fy)
                d_tex[s, r1, c0, ch] += gc * (1 - fx) * fy
                d_tex[s, r1, c1, ch] += gc * fx * fy
                gfx += gc * ((t01 - t00) * (1 - fy) + (t11 - t10) * fy)
                gfy += gc * ((t10 - t00) * (1 - fx) + (t11 - t01) * fx)
            gu = gfx * Wt * (1.0 + 2.0 * pd)
            gv = gfy * Ht
            gbp0 = gu * uv[f, 0, 0] + gv * uv[f, 0, 1]
            gbp1 = gu * uv[f, 1, 0] + gv * uv[f, 1, 1]
            gbp2 = gu * uv[f, 2, 0] + gv * uv[f, 2, 1]
            sdot = bp0 * gbp0 + bp1 * gbp1 + bp2 * gbp2
            gq0, gq1, gq2 = (gbp0 - sdot) / Q, (gbp1 - sdot) / Q, (gbp2 - sdot) / Q
            gb0, gb1, gb2 = gq0 / z0, gq1 / z1, gq2 / z2
            d_z[i0] -= gq0 * b0 / (z0 * z0)
            d_z[i1] -= gq1 * b1 / (z1 * z1)
            d_z[i2] -= gq2 * b2 / (z2 * z2)
            gax = gay = gbx = gby = gcx = gcy = 0.0
            if ins:
                area = _cross(bx - ax, by - ay, cx - ax, cy - ay)
                w0 = b0
                w1 = b1
                g0 = gb0 - gb2
                g1 = gb1 - gb2
                # w0 = E0 / A with E0 = cross(c - b, p - b)
                gE0 = g0 / area
                gbx += gE0 * (cy - py)
                gby += gE0 * (px - cx)
                gcx += gE0 * (py - by)
                gcy += gE0 * (bx - px)
                # w1 = E1 / A with E1 = cross(a - c, p - c)
                gE1 = g1 / area
                gcx += gE1 * (ay - py)
                gcy += gE1 * (px - ax)
                gax += gE1 * (py - cy)
                gay += gE1 * (cx - px)
                gA = -(g0 * w0 + g1 * w1) / area
                gax += gA * (by - cy)
                gay += gA * (cx - bx)
                gbx += gA * (cy - ay)
                gby += gA * (ax - cx)
                gcx += gA * (ay - by)
                gcy += gA * (bx - ax)
            else:
                if e == 0:
                    sx, sy, ox, oy = ax, ay, bx, by
                    gt = gb1 - gb0
                elif e == 1:
                    sx, sy, ox, oy = bx, by, cx, cy
                    gt = gb2 - gb1
                else:
                    sx, sy, ox, oy = cx, cy, ax, ay
                    gt = gb0 - gb2
                Ex, Ey = ox - sx, oy - sy
                nn = Ex * Ex + Ey * Ey + 1e-30
                rx, ry = px - sx, py - sy
                dvx, dvy = rx - t * Ex, ry - t * Ey
                gsx = -2.0 * (1.0 - t) * dvx * g_d2
                gsy = -2.0 * (1.0 - t) * dvy * g_d2
                gox = -2.0 * t * dvx * g_d2
                goy = -2.0 * t * dvy * g_d2
                if 0.0 < t < 1.0:
                    dEx = rx / nn - 2.0 * t * Ex / nn
                    dEy = ry / nn - 2.0 * t * Ey / nn
                    gsx += gt * (-Ex / nn - dEx)
                    gsy += gt * (-Ey / nn - dEy)
                    gox += gt * dEx
                    goy += gt * dEy
                if e == 0:
                    gax, gay, gbx, gby = gsx, gsy, gox, goy
                elif e == 1:
                    gbx, gby, gcx, gcy = gsx, gsy, gox, goy
                else:
                    gcx, gcy, gax, gay = gsx, gsy, gox, goy
            d_px[i0, 0] += gax
            d_px[i0, 1] += gay
            d_px[i1, 0] += gbx
            d_px[i1, 1] += gby
            d_px[i2, 0] += gcx
            d_px[i2, 1] += gcy
