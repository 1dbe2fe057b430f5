"""Shared test oracles: naive nested-loop kernels and finite differences.

These stay deliberately dumb and independent of the library's vectorized
implementations; they are the reference side of every dual-route check.
"""

import numpy as np

from fmarobust import tensor as T


def loop_conv2d(x, w, b, stride=1, padding=0):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (w[fi, ci, ki, kj]
                                        * xp[ni, ci, oi * stride + ki,
                                             oj * stride + kj])
                    out[ni, fi, oi, oj] = acc + b[fi]
    return out


def loop_maxpool2(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for ni in range(n):
        for ci in range(c):
            for oi in range(h // 2):
                for oj in range(w // 2):
                    best = -np.inf
                    for ki in range(2):
                        for kj in range(2):
                            v = x[ni, ci, 2 * oi + ki, 2 * oj + kj]
                            if v > best:
                                best = v
                    out[ni, ci, oi, oj] = best
    return out


def loop_dense(x, w, b):
    n, d = x.shape
    _, k = w.shape
    out = np.zeros((n, k))
    for ni in range(n):
        for ki in range(k):
            acc = 0.0
            for di in range(d):
                acc += x[ni, di] * w[di, ki]
            out[ni, ki] = acc + b[ki]
    return out


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / scale)


def fd_gradient(loss_fn, tensor, h=1e-5):
    """Central finite differences of scalar loss_fn() w.r.t. every entry
    of `tensor` (a fmarobust Tensor mutated in place between evaluations)."""
    base = tensor.array.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + h
        tensor.update_(probe.reshape(base.shape))
        up = loss_fn()
        probe[i] = flat[i] - h
        tensor.update_(probe.reshape(base.shape))
        down = loss_fn()
        gflat[i] = (up - down) / (2.0 * h)
    tensor.update_(base)
    return grad


def analytic_gradients(loss_node, params):
    """Run backward once and collect fresh gradients for the given nodes."""
    for p in params.values():
        p.zero_grad()
    T.backward(loss_node)
    return {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy())
            for name, p in params.items()}
