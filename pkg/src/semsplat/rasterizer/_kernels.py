"""Compiled per-pixel loops.

All kernels are sequential per tile and pixel, so per-Gaussian accumulators
are updated in a fixed order and results are bit-reproducible.
"""

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def bin_tiles(order, mean2d, radius, width, height, tile):
    """Depth-ordered per-tile Gaussian lists.

    Returns ``(offsets, ids)``: the Gaussians touching tile ``t`` are
    ``ids[offsets[t]:offsets[t + 1]]``, front to back.
    """
    tx_n = (width + tile - 1) // tile
    ty_n = (height + tile - 1) // tile
    n_tiles = tx_n * ty_n
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    rects = np.empty((len(order), 4), dtype=np.int64)
    for k in range(len(order)):
        g = order[k]
        r = radius[g]
        # pixel-centre ranges inside the disc's bounding box
        x0 = max(0.0, math.ceil(mean2d[g, 0] - r))
        x1 = min(width - 1.0, math.floor(mean2d[g, 0] + r))
        y0 = max(0.0, math.ceil(mean2d[g, 1] - r))
        y1 = min(height - 1.0, math.floor(mean2d[g, 1] + r))
        if x0 > x1 or y0 > y1:
            rects[k, 0] = 1
            rects[k, 1] = 0
            rects[k, 2] = 1
            rects[k, 3] = 0
            continue
        rects[k, 0] = int(x0) // tile
        rects[k, 1] = int(x1) // tile
        rects[k, 2] = int(y0) // tile
        rects[k, 3] = int(y1) // tile
        for ty in range(rects[k, 2], rects[k, 3] + 1):
            for tx in range(rects[k, 0], rects[k, 1] + 1):
                counts[ty * tx_n + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for k in range(len(order)):
        for ty in range(rects[k, 2], rects[k, 3] + 1):
            for tx in range(rects[k, 0], rects[k, 1] + 1):
                t = ty * tx_n + tx
                ids[fill[t]] = order[k]
                fill[t] += 1
    return offsets, ids


@njit(**_JIT)
def _alpha(g, px, py, mean2d, conic, opac, amax):
    dx = px - mean2d[g, 0]
    dy = py - mean2d[g, 1]
    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
    a = opac[g] * math.exp(power)
    if a > amax:
        return amax
    return a


@njit(**_JIT)
def forward(offsets, ids, mean2d, conic, opac, color, depth, bg, width, height, tile,
            K, floor, amin, amax, n_gauss):
    tx_n = (width + tile - 1) // tile
    out_c = np.empty((height, width, 3))
    out_d = np.zeros((height, width))
    final_t = np.ones((height, width))
    n_last = np.zeros((height, width), dtype=np.int64)
    tk_idx = np.full((height, width, K), -1, dtype=np.int64)
    tk_w = np.zeros((height, width, K))
    tk_n = np.zeros((height, width), dtype=np.int64)
    contrib = np.zeros(n_gauss)
    for py in range(height):
        for px in range(width):
            t = (py // tile) * tx_n + px // tile
            start = offsets[t]
            end = offsets[t + 1]
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            dd = 0.0
            cnt = 0
            last = start
            for j in range(start, end):
                g = ids[j]
                a = _alpha(g, px, py, mean2d, conic, opac, amax)
                if a < amin:
                    continue
                w = a * T
                c0 += w * color[g, 0]
                c1 += w * color[g, 1]
                c2 += w * color[g, 2]
                dd += w * depth[g]
                if w > contrib[g]:
                    contrib[g] = w
                # insertion into the descending K-buffer; strict '>' keeps the
                # nearer Gaussian on ties
                if cnt < K or w > tk_w[py, px, K - 1]:
                    pos = cnt if cnt < K else K - 1
                    while pos > 0 and w > tk_w[py, px, pos - 1]:
                        if pos < K:
                            tk_w[py, px, pos] = tk_w[py, px, pos - 1]
                            tk_idx[py, px, pos] = tk_idx[py, px, pos - 1]
                        pos -= 1
                    tk_w[py, px, pos] = w
                    tk_idx[py, px, pos] = g
                    if cnt < K:
                        cnt += 1
                T *= 1.0 - a
                last = j + 1
                if T < floor:
                    break
            out_c[py, px, 0] = c0 + T * bg[0]
            out_c[py, px, 1] = c1 + T * bg[1]
            out_c[py, px, 2] = c2 + T * bg[2]
            out_d[py, px] = dd
            final_t[py, px] = T
            n_last[py, px] = last
            tk_n[py, px] = cnt
    return out_c, out_d, final_t, n_last, tk_idx, tk_w, tk_n, contrib


@njit(**_JIT)
def backward(offsets, ids, mean2d, conic, opac, color, depth, bg, width, height, tile,
             amin, amax, final_t, n_last, grad_c, grad_d, n_gauss):
    tx_n = (width + tile - 1) // tile
    g_color = np.zeros((n_gauss, 3))
    g_opac = np.zeros(n_gauss)
    g_mean = np.zeros((n_gauss, 2))
    g_conic = np.zeros((n_gauss, 3))
    g_depth = np.zeros(n_gauss)
    for py in range(height):
        for px in range(width):
            gc0 = grad_c[py, px, 0]
            gc1 = grad_c[py, px, 1]
            gc2 = grad_c[py, px, 2]
            gd = grad_d[py, px]
            if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0:
                continue
            t = (py // tile) * tx_n + px // tile
            start = offsets[t]
            T = final_t[py, px]
            # colour/depth of everything behind the current Gaussian,
            # normalised by the transmittance just past it
            r0 = bg[0]
            r1 = bg[1]
            r2 = bg[2]
            rd = 0.0
            for j in range(n_last[py, px] - 1, start - 1, -1):
                g = ids[j]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                G = math.exp(power)
                raw = opac[g] * G
                a = raw if raw < amax else amax
                if a < amin:
                    continue
                T = T / (1.0 - a)
                w = a * T
                g_color[g, 0] += w * gc0
                g_color[g, 1] += w * gc1
                g_color[g, 2] += w * gc2
                g_depth[g] += w * gd
                dl_da = T * ((color[g, 0] - r0) * gc0 + (color[g, 1] - r1) * gc1
                             + (color[g, 2] - r2) * gc2 + (depth[g] - rd) * gd)
                r0 = a * color[g, 0] + (1.0 - a) * r0
                r1 = a * color[g, 1] + (1.0 - a) * r1
                r2 = a * color[g, 2] + (1.0 - a) * r2
                rd = a * depth[g] + (1.0 - a) * rd
                if raw >= amax:
                    continue
                g_opac[g] += dl_da * G
                dl_dp = dl_da * a
                g_conic[g, 0] += -0.5 * dx * dx * dl_dp
                g_conic[g, 1] += -dx * dy * dl_dp
                g_conic[g, 2] += -0.5 * dy * dy * dl_dp
                g_mean[g, 0] += (conic[g, 0] * dx + conic[g, 1] * dy) * dl_dp
                g_mean[g, 1] += (conic[g, 2] * dy + conic[g, 1] * dx) * dl_dp
    return g_color, g_opac, g_mean, g_conic, g_depth


@njit(**_JIT)
def feature_topk(tk_idx, tk_w, tk_n, features, out):
    H, W, _ = tk_idx.shape
    D = features.shape[1]
    for py in range(H):
        for px in range(W):
            n = tk_n[py, px]
            if n == 0:
                for d in range(D):
                    out[py, px, d] = 0.0
                continue
            s = 0.0
            for k in range(n):
                s += tk_w[py, px, k]
            g = tk_idx[py, px, 0]
            wk = tk_w[py, px, 0] / s
            for d in range(D):
                out[py, px, d] = wk * features[g, d]
            for k in range(1, n):
                g = tk_idx[py, px, k]
                wk = tk_w[py, px, k] / s
                for d in range(D):
                    out[py, px, d] += wk * features[g, d]
    return out


@njit(**_JIT)
def feature_topk_backward(tk_idx, tk_w, tk_n, grad_f, n_gauss):
    H, W, _ = tk_idx.shape
    D = grad_f.shape[2]
    out = np.zeros((n_gauss, D))
    for py in range(H):
        for px in range(W):
            n = tk_n[py, px]
            if n == 0:
                continue
            s = 0.0
            for k in range(n):
                s += tk_w[py, px, k]
            for k in range(n):
                g = tk_idx[py, px, k]
                wk = tk_w[py, px, k] / s
                for d in range(D):
                    out[g, d] += wk * grad_f[py, px, d]
    return out


@njit(**_JIT)
def feature_full(offsets, ids, mean2d, conic, opac, features, width, height, tile,
                 floor, amin, amax):
    """Alpha-blended feature image ``sum_i w_i f_i`` and the weight sum ``sum_i w_i``."""
    tx_n = (width + tile - 1) // tile
    D = features.shape[1]
    out = np.zeros((height, width, D))
    wsum = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            t = (py // tile) * tx_n + px // tile
            T = 1.0
            for j in range(offsets[t], offsets[t + 1]):
                g = ids[j]
                a = _alpha(g, px, py, mean2d, conic, opac, amax)
                if a < amin:
                    continue
                w = a * T
                for d in range(D):
                    out[py, px, d] += w * features[g, d]
                wsum[py, px] += w
                T *= 1.0 - a
                if T < floor:
                    break
    return out, wsum
