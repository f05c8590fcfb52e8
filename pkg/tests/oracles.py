"""Naive reference implementations used as test oracles.

Everything here is written with explicit Python loops over scalars so that it
shares no code path with the vectorized library.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# ------------------------------------------------------------------ kernels

def conv2d_loop(x, k, b=None, stride=1, padding=0):
    cin, H, W = x.shape
    cout, _, kh, kw = k.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            y = i * stride + u - padding
                            z = j * stride + v - padding
                            if 0 <= y < H and 0 <= z < W:
                                acc += x[c, y, z] * k[o, c, u, v]
                out[o, i, j] = acc
    return out


def normalize_loop(x, mean, var, gamma, beta, eps):
    out = np.zeros_like(x)
    C, H, W = x.shape
    for c in range(C):
        s = 1.0 / math.sqrt(var[c] + eps)
        for i in range(H):
            for j in range(W):
                out[c, i, j] = gamma[c] * (x[c, i, j] - mean[c]) * s + beta[c]
    return out


def layer_norm_loop(x, gamma, beta, eps):
    out = np.zeros_like(x)
    for r in range(x.shape[0]):
        row = [float(v) for v in x[r]]
        mu = math.fsum(row) / len(row)
        var = math.fsum((v - mu) ** 2 for v in row) / len(row)
        for j, v in enumerate(row):
            out[r, j] = gamma[j] * (v - mu) / math.sqrt(var + eps) + beta[j]
    return out


def softmax_loop(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = math.fsum(e)
    return np.array([x / s for x in e])


def matmul_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = math.fsum(a[i, t] * b[t, j] for t in range(k))
    return out


def upsample_loop(x, out_h, out_w):
    """Half-pixel bilinear resampling, one output pixel at a time."""
    C, h, w = x.shape
    out = np.zeros((C, out_h, out_w))

    def taps(dst, n_in, n_out):
        src = (dst + 0.5) * n_in / n_out - 0.5
        src = max(src, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        return i0, i1, lam

    for c in range(C):
        for i in range(out_h):
            y0, y1, ly = taps(i, h, out_h)
            for j in range(out_w):
                x0, x1, lx = taps(j, w, out_w)
                out[c, i, j] = ((1 - ly) * ((1 - lx) * x[c, y0, x0] + lx * x[c, y0, x1])
                                + ly * ((1 - lx) * x[c, y1, x0] + lx * x[c, y1, x1]))
    return out


def gap_loop(x):
    C, H, W = x.shape
    return np.array([[[math.fsum(x[c].ravel()) / (H * W)]] for c in range(C)])


def sigmoid_scalar(v):
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


# ---------------------------------------------------------------- gradients

def finite_difference(f, arr, eps=1e-4, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (in place)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out


# ----------------------------------------------------------------- matching

def brute_force_assignment(cost):
    """Minimum total cost over all injective row -> column maps."""
    m, n = cost.shape
    best = math.inf
    for cols in itertools.permutations(range(n), m):
        total = sum(cost[r, c] for r, c in enumerate(cols))
        best = min(best, total)
    return 0.0 if m == 0 else best


# ----------------------------------------------------------------------- PQ

def brute_force_pq(pred_maps, gt_maps, thing_flags):
    """Panoptic quality by exhaustive pairwise IoU over raw (ids, classes).

    Each map is ``(ids, {segment_id: class_id})`` with 0 = void.  Every
    (gt, pred) pair with equal class is scored by pixel loops; GT-void
    pixels inside the prediction are removed from the union; a prediction
    is counted as a false positive only if at most half of it is GT-void.
    """
    K = len(thing_flags)
    iou_sum = [0.0] * K
    tp = [0] * K
    fp = [0] * K
    fn = [0] * K
    for (p_ids, p_cls), (g_ids, g_cls) in zip(pred_maps, gt_maps):
        H, W = g_ids.shape
        matched_g, matched_p = set(), set()
        for g, gc in g_cls.items():
            for p, pc in p_cls.items():
                if gc != pc:
                    continue
                inter = gp = gg = void_in_p = 0
                for i in range(H):
                    for j in range(W):
                        a = g_ids[i, j] == g
                        b = p_ids[i, j] == p
                        inter += a and b
                        gg += a
                        gp += b
                        void_in_p += b and g_ids[i, j] == 0
                union = gg + gp - inter - void_in_p
                if union and inter / union > 0.5:
                    tp[gc] += 1
                    iou_sum[gc] += inter / union
                    matched_g.add(g)
                    matched_p.add(p)
        for g, gc in g_cls.items():
            if g not in matched_g:
                fn[gc] += 1
        for p, pc in p_cls.items():
            if p in matched_p:
                continue
            area = int(np.sum(p_ids == p))
            void = int(np.sum((p_ids == p) & (g_ids == 0)))
            if area and void / area > 0.5:
                continue
            fp[pc] += 1
    pq = []
    thing_pq, stuff_pq = [], []
    for c in range(K):
        if tp[c] + fp[c] + fn[c] == 0:
            continue
        v = iou_sum[c] / (tp[c] + 0.5 * fp[c] + 0.5 * fn[c])
        pq.append(v)
        (thing_pq if thing_flags[c] else stuff_pq).append(v)

    def avg(xs):
        return sum(xs) / len(xs) if xs else 0.0

    return avg(pq), avg(thing_pq), avg(stuff_pq)


def random_panoptic_pair(rng, H=6, W=6, K=3, max_segments=4):
    """Random small (pred, gt) raw maps for the PQ oracle."""
    def one(void_p):
        n = int(rng.integers(1, max_segments + 1))
        ids = rng.integers(1, n + 1, size=(H, W))
        ids[rng.random((H, W)) < void_p] = 0
        present = sorted(set(np.unique(ids).tolist()) - {0})
        cls = {s: int(rng.integers(0, K)) for s in present}
        return ids, cls

    gt = one(0.15)
    # start from GT and perturb so that matches actually happen
    ids = gt[0].copy()
    flip = rng.random((H, W)) < rng.uniform(0.0, 0.5)
    ids[flip] = rng.integers(0, max_segments + 2, size=int(flip.sum()))
    present = sorted(set(np.unique(ids).tolist()) - {0})
    cls = {s: gt[1].get(s, int(rng.integers(0, K))) if rng.random() < 0.8
           else int(rng.integers(0, K)) for s in present}
    return (ids, cls), gt
