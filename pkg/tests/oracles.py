"""Naive reference implementations used as independent oracles.

Everything here is written with explicit Python loops over pixels so that it
shares no code path with the vectorised library implementations.
"""

import math


def count_iou(a, b):
    inter = union = 0
    for i in range(len(a)):
        for j in range(len(a[0])):
            x, y = bool(a[i][j]), bool(b[i][j])
            inter += x and y
            union += x or y
    return 1.0 if union == 0 else inter / union


def count_dice(a, b):
    inter = na = nb = 0
    for i in range(len(a)):
        for j in range(len(a[0])):
            x, y = bool(a[i][j]), bool(b[i][j])
            inter += x and y
            na += x
            nb += y
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def loop_ncc(a, b):
    h, w = len(a), len(a[0])
    n = h * w
    ma = sum(a[i][j] for i in range(h) for j in range(w)) / n
    mb = sum(b[i][j] for i in range(h) for j in range(w)) / n
    va = sum((a[i][j] - ma) ** 2 for i in range(h) for j in range(w)) / n
    vb = sum((b[i][j] - mb) ** 2 for i in range(h) for j in range(w)) / n
    sa, sb = math.sqrt(va), math.sqrt(vb)
    acc = 0.0
    for i in range(h):
        for j in range(w):
            acc += (a[i][j] - ma) / sa * (b[i][j] - mb) / sb
    return acc / n


def loop_nonres(x, ci, gt, literal=False):
    s_in = s_out = 0.0
    n_in = n_out = 0
    for i in range(len(x)):
        for j in range(len(x[0])):
            d = ci[i][j] - x[i][j]
            v = d if literal else abs(d)
            if gt[i][j]:
                s_in += v
                n_in += 1
            else:
                s_out += v
                n_out += 1
    lesion, normal = s_in / n_in, s_out / n_out
    if literal:
        lesion, normal = 1.0 - lesion, 1.0 - normal
    return lesion, normal, (lesion + normal) / 2.0


def loop_gaussian(size, sigma):
    c = (size - 1) / 2.0
    w = [[math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma * sigma)) for j in range(size)]
         for i in range(size)]
    s = sum(sum(r) for r in w)
    return [[v / s for v in r] for r in w]


def loop_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over every window position fully inside the image."""
    w = loop_gaussian(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    h, wd = len(a), len(a[0])
    vals = []
    for top in range(h - window + 1):
        for left in range(wd - window + 1):
            mu_a = mu_b = 0.0
            for i in range(window):
                for j in range(window):
                    mu_a += w[i][j] * a[top + i][left + j]
                    mu_b += w[i][j] * b[top + i][left + j]
            va = vb = cov = 0.0
            for i in range(window):
                for j in range(window):
                    da = a[top + i][left + j] - mu_a
                    db = b[top + i][left + j] - mu_b
                    va += w[i][j] * da * da
                    vb += w[i][j] * db * db
                    cov += w[i][j] * da * db
            vals.append((2 * mu_a * mu_b + c1) * (2 * cov + c2)
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def loop_masked_ssim(x, ci, gt, **kw):
    xm = [[0.0 if gt[i][j] else x[i][j] for j in range(len(x[0]))] for i in range(len(x))]
    cm = [[0.0 if gt[i][j] else ci[i][j] for j in range(len(x[0]))] for i in range(len(x))]
    return loop_ssim(xm, cm, **kw)


def foreground_count(img, floor):
    return sum(1 for row in img for v in row if v > floor)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)
