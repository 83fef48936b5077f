"""Independent slow reference implementations used by the tests."""
import itertools

import numpy as np


def naive_conv2d(x, w, stride=(1, 1), pad=(0, 0), groups=1):
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    opg = cout // groups
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            g = co // opg
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, g * cg + ci, y * sh + i, xx * sw + j] * w[co, ci, i, j]
                    out[b, co, y, xx] = acc
    return out


def conv_configs():
    """Twenty seeded conv shapes: regular, depthwise, pointwise and mixed."""
    rng = np.random.default_rng(7)
    out = []
    while len(out) < 20:
        groups = int(rng.choice([1, 1, 2, 3]))
        kind = len(out) % 4  # 0 regular, 1 depthwise, 2 pointwise, 3 random
        cg = int(rng.integers(1, 4))
        cin = cg * groups
        cout = groups * int(rng.integers(1, 4))
        kh, kw = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
        if kind == 1:
            cin = cout = groups = int(rng.integers(2, 6))
        if kind == 2:
            kh = kw = 1
        sh, sw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        ph, pw = int(rng.integers(0, kh)), int(rng.integers(0, kw))
        h, w = int(rng.integers(kh, 10)), int(rng.integers(kw, 10))
        out.append((int(rng.integers(1, 3)), cin, h, w, cout, groups, (kh, kw), (sh, sw), (ph, pw)))
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def recount(labels, preds):
    tp = fn = fp = tn = 0
    for y, p in zip(labels, preds):
        if y == 1 and p == 1:
            tp += 1
        elif y == 1:
            fn += 1
        elif p == 1:
            fp += 1
        else:
            tn += 1
    return tp, fn, fp, tn


def brute_force_matrices(acc, sens, ppv, per_class=221):
    """All (tp, fn, fp, tn) on a balanced split whose rounded percentages match."""
    hits = []
    for tp, fp in itertools.product(range(per_class + 1), repeat=2):
        if tp + fp == 0:
            continue
        fn, tn = per_class - tp, per_class - fp
        a = round(100 * (tp + tn) / (2 * per_class), 1)
        s = round(100 * tp / per_class, 1)
        p = round(100 * tp / (tp + fp), 1)
        if (a, s, p) == (acc, sens, ppv):
            hits.append((tp, fn, fp, tn))
    return hits


def dominates(a, b):
    """Tuples (accuracy, params, flops): higher accuracy, lower cost is better."""
    no_worse = a[0] >= b[0] and a[1] <= b[1] and a[2] <= b[2]
    better = a[0] > b[0] or a[1] < b[1] or a[2] < b[2]
    return no_worse and better
