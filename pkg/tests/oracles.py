"""Independent reference implementations used as test oracles.

These deliberately share no code with the package.
"""

import math

import numpy as np


def keys(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def tap_table(n_in, n_out, antialias):
    """For each output index, a dict {clamped input index: weight}."""
    ratio = n_out / n_in
    shrink = min(ratio, 1.0) if antialias else 1.0
    table = []
    for i in range(n_out):
        x = (i + 0.5) / ratio - 0.5
        raw = {}
        reach = int(math.ceil(2.0 / shrink)) + 1
        for j in range(int(math.floor(x)) - reach, int(math.floor(x)) + reach + 1):
            wt = shrink * keys((x - j) * shrink)
            if wt != 0.0:
                raw[j] = raw.get(j, 0.0) + wt
        total = sum(raw.values())
        entry = {}
        for j, wt in raw.items():
            jj = min(max(j, 0), n_in - 1)
            entry[jj] = entry.get(jj, 0.0) + wt / total
        table.append(entry)
    return table


def resize_direct(img, out_h, out_w, antialias=True):
    """Direct summation over every (output pixel, input pixel) pair."""
    c, h, w = img.shape
    ty = tap_table(h, out_h, antialias)
    tx = tap_table(w, out_w, antialias)
    out = np.zeros((c, out_h, out_w))
    for ch in range(c):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for p, wy in ty[i].items():
                    for q, wx in tx[j].items():
                        acc += wy * wx * img[ch, p, q]
                out[ch, i, j] = acc
    return out


def blur_direct(img, ker):
    """True convolution with edge replication, one pixel at a time."""
    c, h, w = img.shape
    k = ker.shape[0]
    half = k // 2
    out = np.zeros((c, h, w))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for u in range(k):
                    for v in range(k):
                        p = min(max(i - (u - half), 0), h - 1)
                        q = min(max(j - (v - half), 0), w - 1)
                        acc += ker[u, v] * img[ch, p, q]
                out[ch, i, j] = acc
    return out


def gaussian_density(u, v, sx, sy, theta):
    """Unnormalized rotated anisotropic Gaussian at horizontal offset u, vertical v."""
    c, s = math.cos(theta), math.sin(theta)
    # coordinates in the kernel's principal frame
    a = c * u + s * v
    b = -s * u + c * v
    return math.exp(-0.5 * (a * a / (sx * sx) + b * b / (sy * sy)))


def disk_area_mc(u, v, r, n=400):
    """Midpoint-rule area of the unit pixel centred at (u, v) inside radius r."""
    g = (np.arange(n) + 0.5) / n - 0.5
    uu, vv = np.meshgrid(u + g, v + g)
    return float(((uu ** 2 + vv ** 2) <= r * r).mean())
