"""Single-threaded compositing kernels.

Front-to-back alpha blending is inherently sequential per pixel; these
loops iterate splats in globally sorted order so each pixel sees its
contributors in ascending distance. Single-threaded with a fixed
iteration order, the outputs are bitwise reproducible.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, fastmath=False)
def composite_forward(
    bbox,
    offsets,
    mean_u,
    mean_v,
    con_a,
    con_b,
    con_c,
    rgb,
    sigma,
    dist,
    alpha_min,
    t_stop,
    max_mahal2,
    img,
    T,
    depth_accum,
    alpha_raw,
    applied,
):
    n_rec = bbox.shape[0]
    for m in range(n_rec):
        r0 = bbox[m, 0]
        r1 = bbox[m, 1]
        c0 = bbox[m, 2]
        c1 = bbox[m, 3]
        if r1 <= r0 or c1 <= c0:
            continue
        a = con_a[m]
        b = con_b[m]
        c = con_c[m]
        mu = mean_u[m]
        mv = mean_v[m]
        sg = sigma[m]
        base = offsets[m]
        ncols = c1 - c0
        for r in range(r0, r1):
            dy = (r + 0.5) - mv
            rowbase = base + (r - r0) * ncols
            for col in range(c0, c1):
                Tp = T[r, col]
                if Tp < t_stop:
                    continue
                dx = (col + 0.5) - mu
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > max_mahal2:
                    continue
                araw = sg * math.exp(-0.5 * q)
                if araw < alpha_min:
                    continue
                alpha = araw
                if alpha > 0.99:
                    alpha = 0.99
                idx = rowbase + (col - c0)
                alpha_raw[idx] = araw
                applied[idx] = np.uint8(1)
                wgt = alpha * Tp
                img[r, col, 0] += wgt * rgb[m, 0]
                img[r, col, 1] += wgt * rgb[m, 1]
                img[r, col, 2] += wgt * rgb[m, 2]
                depth_accum[r, col] += wgt * dist[m]
                T[r, col] = Tp * (1.0 - alpha)


@njit(cache=True, fastmath=False)
def composite_backward(
    bbox,
    offsets,
    mean_u,
    mean_v,
    con_a,
    con_b,
    con_c,
    rgb,
    sigma,
    alpha_raw,
    applied,
    dL_dimg,
    T_buf,
    S_buf,
    d_mean,
    d_conic,
    d_rgb,
    d_sigma,
):
    """Reverse sweep over the same records.

    T_buf enters holding the final per-pixel transmittance and is rolled
    back by dividing out each applied (1 - alpha); alpha is capped at
    0.99 in the forward pass precisely so this division stays finite.
    S_buf enters holding final_T * background and accumulates the suffix
    color sum needed for dL/d alpha.
    """
    n_rec = bbox.shape[0]
    for m in range(n_rec - 1, -1, -1):
        r0 = bbox[m, 0]
        r1 = bbox[m, 1]
        c0 = bbox[m, 2]
        c1 = bbox[m, 3]
        if r1 <= r0 or c1 <= c0:
            continue
        a = con_a[m]
        b = con_b[m]
        c = con_c[m]
        mu = mean_u[m]
        mv = mean_v[m]
        sg = sigma[m]
        base = offsets[m]
        ncols = c1 - c0
        for r in range(r0, r1):
            dy = (r + 0.5) - mv
            rowbase = base + (r - r0) * ncols
            for col in range(c0, c1):
                idx = rowbase + (col - c0)
                if applied[idx] == 0:
                    continue
                araw = alpha_raw[idx]
                alpha = araw
                if alpha > 0.99:
                    alpha = 0.99
                om = 1.0 - alpha
                Ti = T_buf[r, col] / om
                g0 = dL_dimg[r, col, 0]
                g1 = dL_dimg[r, col, 1]
                g2 = dL_dimg[r, col, 2]
                wgt = alpha * Ti
                d_rgb[m, 0] += wgt * g0
                d_rgb[m, 1] += wgt * g1
                d_rgb[m, 2] += wgt * g2
                dLa = Ti * (rgb[m, 0] * g0 + rgb[m, 1] * g1 + rgb[m, 2] * g2) - (
                    S_buf[r, col, 0] * g0
                    + S_buf[r, col, 1] * g1
                    + S_buf[r, col, 2] * g2
                ) / om
                S_buf[r, col, 0] += wgt * rgb[m, 0]
                S_buf[r, col, 1] += wgt * rgb[m, 1]
                S_buf[r, col, 2] += wgt * rgb[m, 2]
                T_buf[r, col] = Ti
                if araw > 0.99:
                    # clamped alpha: no gradient into the kernel
                    continue
                gval = araw / sg
                d_sigma[m] += dLa * gval
                comm = dLa * sg * gval
                dx = (col + 0.5) - mu
                d_conic[m, 0] += comm * (-0.5 * dx * dx)
                d_conic[m, 1] += comm * (-dx * dy)
                d_conic[m, 2] += comm * (-0.5 * dy * dy)
                d_mean[m, 0] += comm * (a * dx + b * dy)
                d_mean[m, 1] += comm * (b * dx + c * dy)
