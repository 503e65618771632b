"""Depthwise-convolution inner loops.

Two interchangeable backends: numba-compiled loops and a pure-numpy
tap-by-tap fallback.  Set ``QUADADAPT_NUMBA=0`` in the environment before
import to force the numpy path (also used automatically when numba is not
installed).  All arrays are 4-D ``(batch, channels, height, width)``
float64, kernels are ``(channels, kh, kw)`` with odd sides, and padding is
"same" with zeros.
"""
import os

import numpy as np

try:
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def decorator(func):
            return func
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorator

USE_NUMBA = _HAVE_NUMBA and os.environ.get("QUADADAPT_NUMBA", "1") != "0"


# ---------------------------------------------------------------- numba path

@njit(cache=True)
def _dw_forward_nb(x, k):
    nb, nc, h, w = x.shape
    kh, kw = k.shape[1], k.shape[2]
    ph, pw = kh // 2, kw // 2
    out = np.zeros((nb, nc, h, w))
    for b in range(nb):
        for c in range(nc):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for p in range(kh):
                        ii = i + p - ph
                        if ii < 0 or ii >= h:
                            continue
                        for q in range(kw):
                            jj = j + q - pw
                            if jj < 0 or jj >= w:
                                continue
                            acc += x[b, c, ii, jj] * k[c, p, q]
                    out[b, c, i, j] = acc
    return out


@njit(cache=True)
def _dw_grad_input_nb(g, k):
    nb, nc, h, w = g.shape
    kh, kw = k.shape[1], k.shape[2]
    ph, pw = kh // 2, kw // 2
    gx = np.zeros((nb, nc, h, w))
    for b in range(nb):
        for c in range(nc):
            for i in range(h):
                for j in range(w):
                    gij = g[b, c, i, j]
                    for p in range(kh):
                        ii = i + p - ph
                        if ii < 0 or ii >= h:
                            continue
                        for q in range(kw):
                            jj = j + q - pw
                            if jj < 0 or jj >= w:
                                continue
                            gx[b, c, ii, jj] += gij * k[c, p, q]
    return gx


@njit(cache=True)
def _dw_grad_kernel_nb(x, g, kh, kw):
    nb, nc, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    gk = np.zeros((nc, kh, kw))
    for c in range(nc):
        for p in range(kh):
            for q in range(kw):
                acc = 0.0
                for b in range(nb):
                    for i in range(h):
                        ii = i + p - ph
                        if ii < 0 or ii >= h:
                            continue
                        for j in range(w):
                            jj = j + q - pw
                            if jj < 0 or jj >= w:
                                continue
                            acc += g[b, c, i, j] * x[b, c, ii, jj]
                gk[c, p, q] = acc
    return gk


# ---------------------------------------------------------------- numpy path

def _pad(x, ph, pw):
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _dw_forward_np(x, k):
    nb, nc, h, w = x.shape
    kh, kw = k.shape[1], k.shape[2]
    xp = _pad(x, kh // 2, kw // 2)
    out = np.zeros((nb, nc, h, w))
    for p in range(kh):
        for q in range(kw):
            out += xp[:, :, p:p + h, q:q + w] * k[None, :, p, q, None, None]
    return out


def _dw_grad_input_np(g, k):
    nb, nc, h, w = g.shape
    kh, kw = k.shape[1], k.shape[2]
    ph, pw = kh // 2, kw // 2
    gp = np.zeros((nb, nc, h + 2 * ph, w + 2 * pw))
    for p in range(kh):
        for q in range(kw):
            gp[:, :, p:p + h, q:q + w] += g * k[None, :, p, q, None, None]
    return gp[:, :, ph:ph + h, pw:pw + w].copy()


def _dw_grad_kernel_np(x, g, kh, kw):
    nb, nc, h, w = x.shape
    xp = _pad(x, kh // 2, kw // 2)
    gk = np.empty((nc, kh, kw))
    for p in range(kh):
        for q in range(kw):
            gk[:, p, q] = np.einsum("bcij,bcij->c", g, xp[:, :, p:p + h, q:q + w])
    return gk


# ---------------------------------------------------------------- dispatch

def dw_forward(x, k, use_numba=None):
    fn = _dw_forward_nb if (USE_NUMBA if use_numba is None else use_numba) else _dw_forward_np
    return fn(np.ascontiguousarray(x), np.ascontiguousarray(k))


def dw_grad_input(g, k, use_numba=None):
    fn = _dw_grad_input_nb if (USE_NUMBA if use_numba is None else use_numba) else _dw_grad_input_np
    return fn(np.ascontiguousarray(g), np.ascontiguousarray(k))


def dw_grad_kernel(x, g, kh, kw, use_numba=None):
    fn = _dw_grad_kernel_nb if (USE_NUMBA if use_numba is None else use_numba) else _dw_grad_kernel_np
    return fn(np.ascontiguousarray(x), np.ascontiguousarray(g), kh, kw)
