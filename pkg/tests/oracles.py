"""Independent brute-force oracles the tests check the fast paths against.

Everything here is deliberately naive: nested python loops and direct
definitions, sharing no code with the implementations under test.
"""

import numpy as np


def conv2d_bruteforce(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """Direct sliding-window convolution, all loops explicit."""
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    sh = sw = stride
    ph = pw = padding
    dh = dw = dilation
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    per_group_out = cout // groups
    for ni in range(n):
        for co in range(cout):
            g = co // per_group_out
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        cin_abs = g * cin_g + ci
                        for i in range(kh):
                            ih = oh * sh + i * dh - ph
                            if not 0 <= ih < h:
                                continue
                            for j in range(kw):
                                iw = ow * sw + j * dw - pw
                                if 0 <= iw < wd:
                                    acc += float(x[ni, cin_abs, ih, iw]) * float(w[co, ci, i, j])
                    if b is not None:
                        acc += float(b[co])
                    out[ni, co, oh, ow] = acc
    return out


def axial_shift_oracle(x, axis, offsets):
    """Per-group translation by explicit index arithmetic; zero fill."""
    n, c, h, w = x.shape
    k = len(offsets)
    base, rem = divmod(c, k)
    sizes = [base + 1 if g < rem else base for g in range(k)]
    out = np.zeros_like(x)
    lo = 0
    for g, size in enumerate(sizes):
        off = offsets[g]
        for ci in range(lo, lo + size):
            for i in range(h):
                for j in range(w):
                    if axis == "width":
                        src = j - off
                        if 0 <= src < w:
                            out[:, ci, i, j] = x[:, ci, i, src]
                    else:
                        src = i - off
                        if 0 <= src < h:
                            out[:, ci, i, j] = x[:, ci, src, j]
        lo += size
    return out


def maxpool2_oracle(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[ni, ci, i, j] = max(
                        x[ni, ci, 2 * i, 2 * j], x[ni, ci, 2 * i, 2 * j + 1],
                        x[ni, ci, 2 * i + 1, 2 * j], x[ni, ci, 2 * i + 1, 2 * j + 1])
    return out


def bilinear_up2_oracle(x):
    """Hand per-pixel align-corners=false x2 interpolation."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=np.float64)
    for oi in range(2 * h):
        sy = (oi + 0.5) / 2.0 - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y1 = min(max(y0 + 1, 0), h - 1)
        y0 = min(max(y0, 0), h - 1)
        for oj in range(2 * w):
            sx = (oj + 0.5) / 2.0 - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x1 = min(max(x0 + 1, 0), w - 1)
            x0 = min(max(x0, 0), w - 1)
            out[:, :, oi, oj] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0]
                                 + (1 - fy) * fx * x[:, :, y0, x1]
                                 + fy * (1 - fx) * x[:, :, y1, x0]
                                 + fy * fx * x[:, :, y1, x1])
    return out


def counting_oracle(pred, gt):
    """Pixelwise confusion counts by explicit iteration."""
    tp = fp = fn = tn = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def miou_oracle(pred, gt):
    """Set-intersection definition over both classes."""
    pset = {tuple(i) for i in np.argwhere(pred)}
    gset = {tuple(i) for i in np.argwhere(gt)}
    union = pset | gset
    fg = 1.0 if not union else len(pset & gset) / len(union)
    all_px = {tuple(i) for i in np.ndindex(*pred.shape)}
    pneg, gneg = all_px - pset, all_px - gset
    union_bg = pneg | gneg
    bg = 1.0 if not union_bg else len(pneg & gneg) / len(union_bg)
    return 0.5 * (fg + bg)


def boundary_oracle(mask):
    """Foreground pixels 4-adjacent to background (border counts as bg)."""
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            on_border = i == 0 or j == 0 or i == h - 1 or j == w - 1
            if on_border or not (mask[i - 1, j] and mask[i + 1, j]
                                 and mask[i, j - 1] and mask[i, j + 1]):
                pts.append((i, j))
    return pts


def asd_bruteforce(pred, gt):
    """Symmetric mean nearest-boundary distance by exhaustive pair search."""
    bp = boundary_oracle(pred)
    bg = boundary_oracle(gt)
    def mean_nearest(src, dst):
        total = 0.0
        for (i, j) in src:
            total += min(np.hypot(i - a, j - b) for (a, b) in dst)
        return total / len(src)
    return 0.5 * (mean_nearest(bp, bg) + mean_nearest(bg, bp))


def quarter_turn_oracle(plane):
    """Exact 90-degree counter-clockwise rotation as an index permutation."""
    h, w = plane.shape
    out = np.zeros_like(plane)
    for i in range(h):
        for j in range(w):
            out[h - 1 - j, i] = plane[i, j]
    return out


def nearest_resize_oracle(plane, oh, ow):
    h, w = plane.shape
    out = np.zeros((oh, ow), dtype=plane.dtype)
    for i in range(oh):
        si = min(int(np.floor((i + 0.5) * h / oh)), h - 1)
        for j in range(ow):
            sj = min(int(np.floor((j + 0.5) * w / ow)), w - 1)
            out[i, j] = plane[si, sj]
    return out
