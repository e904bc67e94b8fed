"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def conv_loops(x, w, b=None):
    """Valid, stride-1 cross-correlation written as nested loops.

    x: (C, H, W); w: (K, C, fh, fw); returns (K, H-fh+1, W-fw+1).
    """
    c, h, wd = x.shape
    k, _, fh, fw = w.shape
    out = np.zeros((k, h - fh + 1, wd - fw + 1))
    for f in range(k):
        for i in range(h - fh + 1):
            for j in range(wd - fw + 1):
                s = 0.0
                for ch in range(c):
                    for u in range(fh):
                        for v in range(fw):
                            s += x[ch, i + u, j + v] * w[f, ch, u, v]
                out[f, i, j] = s + (0.0 if b is None else b[f])
    return out


def maxpool_loops(x, ph, pw):
    c, h, w = x.shape
    out = np.empty((c, h // ph, w // pw))
    for ch in range(c):
        for i in range(h // ph):
            for j in range(w // pw):
                out[ch, i, j] = max(x[ch, i * ph + u, j * pw + v] for u in range(ph) for v in range(pw))
    return out


def shape_rules(input_dims, layers):
    """Shape chain from first principles.

    ``layers`` is a list of ("conv", fh, fw, k) / ("pool", ph, pw) /
    ("fc", units) tuples; activations are omitted since they keep shape.
    """
    c, h, w = input_dims
    chain = []
    flat = None
    for layer in layers:
        if layer[0] == "conv":
            _, fh, fw, k = layer
            c, h, w = k, h - fh + 1, w - fw + 1
            chain.append((c, h, w))
        elif layer[0] == "pool":
            _, ph, pw = layer
            h, w = h // ph, w // pw
            chain.append((c, h, w))
        else:
            if flat is None:
                flat = c * h * w
                chain.append(("flatten", flat))
            chain.append(layer[1])
    return chain


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return g


def stump_accuracy(x, y):
    """Best accuracy of "feature <= t" (either polarity) over features and cuts.

    Direct O(features * n^2) sweep; only for small inputs.
    """
    n = len(y)
    best = max(y.mean(), 1 - y.mean())
    for f in range(x.shape[1]):
        col = x[:, f]
        for t in np.unique(col):
            pred = (col <= t).astype(int)
            acc = (pred == y).mean()
            best = max(best, acc, 1 - acc)
    return best


def normal_pdf(z):
    return math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def branin(x1, x2):
    a, b, c, r, s, t = 1.0, 5.1 / (4 * math.pi ** 2), 5 / math.pi, 6.0, 10.0, 1 / (8 * math.pi)
    return a * (x2 - b * x1 ** 2 + c * x1 - r) ** 2 + s * (1 - t) * math.cos(x1) + s


BRANIN_MIN = 0.397887


def branin_unit(values, seed=0):
    """Branin on the unit square mapped to x1 in [-5, 10], x2 in [0, 15]."""
    return branin(-5 + 15 * values["x1"], 15 * values["x2"])
