"""Slow, loop-based reference implementations used as independent oracles."""
import math

import numpy as np


def central_diff(f, x, h=1e-6):
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def matmul_loops(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def patchify_loops(images, p):
    b, h, w, c = images.shape
    rows = []
    for n in range(b):
        patches = []
        for gy in range(h // p):
            for gx in range(w // p):
                vec = []
                for y in range(p):
                    for x in range(p):
                        for ch in range(c):
                            vec.append(images[n, gy * p + y, gx * p + x, ch])
                patches.append(vec)
        rows.append(patches)
    return np.array(rows, dtype=np.float64)


def _cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def integrate_tokenwise(tokens, adapters):
    """adapters: list of (w_down, w_up, tau) numpy triples, tasks in order."""
    out = np.zeros_like(tokens)
    for i in range(tokens.shape[0]):
        p = tokens[i]
        outs = [np.maximum(p @ wd, 0) @ wu for wd, wu, _ in adapters]
        s = [_cos(p, tau) for _, _, tau in adapters]
        if len(adapters) == 1:
            out[i] = s[0] * outs[0]
        else:
            z = [math.exp(v) for v in s]
            tot = sum(z)
            out[i] = sum((zi / tot) * o for zi, o in zip(z, outs))
    return out


def pfr_single(mu, cls_tokens, patch_tokens, beta, eps=1e-6):
    """Token-by-token reconstruction of one prototype."""
    deltas, pool = [], []
    for b in range(patch_tokens.shape[0]):
        for j in range(patch_tokens.shape[1]):
            p = patch_tokens[b, j]
            cm, cc = _cos(mu, p), _cos(cls_tokens[b], p)
            den = cm + cc
            if abs(den) < eps or den < 0:
                continue
            d = max(0.0, (cm - cc) / den)
            if d > 0:
                deltas.append(d)
                pool.append(p)
    if not deltas:
        return np.array(mu, dtype=float), []
    m = max(deltas)
    w = [math.exp(d - m) for d in deltas]
    tot = sum(w)
    w = [x / tot for x in w]
    mixed = sum(wi * p for wi, p in zip(w, pool))
    return beta * np.asarray(mu) + (1 - beta) * mixed, w
