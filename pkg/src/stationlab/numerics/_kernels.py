"""Compiled inner loops for 3D cross-correlation and its gradients.

All kernels take pre-padded inputs so the hot loops are branch-free, and walk
memory x-fastest. fastmath only changes compile-time vectorization; the
emitted code is fixed, so results are bitwise reproducible run to run.

The k=3 / stride 1 kernels are the hot path; the generic ones cover strided
and 1x1x1 convolutions.
"""

import numba
import numpy as np

_JIT = dict(cache=True, fastmath=True, nogil=True)


@numba.njit(**_JIT)
def conv_fwd_k3s1(xp, w, b, out):
    # xp: (Cin, Do+2, Ho+2, Wo+2), w: (Cout, Cin, 3, 3, 3), out: (Cout, Do, Ho, Wo)
    # output channels go in pairs so each input row is loaded once per pair
    cout, cin = w.shape[0], w.shape[1]
    do, ho, wo = out.shape[1], out.shape[2], out.shape[3]
    for cp in range(cout // 2):
        ca, cb = 2 * cp, 2 * cp + 1
        for zo in range(do):
            for yo in range(ho):
                orow_a = out[ca, zo, yo]
                orow_b = out[cb, zo, yo]
                ba = b[ca]
                bb = b[cb]
                for xo in range(wo):
                    orow_a[xo] = ba
                    orow_b[xo] = bb
                for ci in range(cin):
                    for kz in range(3):
                        for ky in range(3):
                            xrow = xp[ci, zo + kz, yo + ky]
                            a0 = w[ca, ci, kz, ky, 0]
                            a1 = w[ca, ci, kz, ky, 1]
                            a2 = w[ca, ci, kz, ky, 2]
                            b0 = w[cb, ci, kz, ky, 0]
                            b1 = w[cb, ci, kz, ky, 1]
                            b2 = w[cb, ci, kz, ky, 2]
                            for xo in range(wo):
                                x0 = xrow[xo]
                                x1 = xrow[xo + 1]
                                x2 = xrow[xo + 2]
                                orow_a[xo] += a0 * x0 + a1 * x1 + a2 * x2
                                orow_b[xo] += b0 * x0 + b1 * x1 + b2 * x2
    if cout % 2:
        co = cout - 1
        for zo in range(do):
            for yo in range(ho):
                orow = out[co, zo, yo]
                bval = b[co]
                for xo in range(wo):
                    orow[xo] = bval
                for ci in range(cin):
                    for kz in range(3):
                        for ky in range(3):
                            xrow = xp[ci, zo + kz, yo + ky]
                            w0 = w[co, ci, kz, ky, 0]
                            w1 = w[co, ci, kz, ky, 1]
                            w2 = w[co, ci, kz, ky, 2]
                            for xo in range(wo):
                                orow[xo] += w0 * xrow[xo] + w1 * xrow[xo + 1] + w2 * xrow[xo + 2]


@numba.njit(**_JIT)
def conv_fwd_any(xp, w, b, stride, out):
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    do, ho, wo = out.shape[1], out.shape[2], out.shape[3]
    for co in range(cout):
        for zo in range(do):
            for yo in range(ho):
                orow = out[co, zo, yo]
                bval = b[co]
                for xo in range(wo):
                    orow[xo] = bval
                for ci in range(cin):
                    for kz in range(k):
                        for ky in range(k):
                            xrow = xp[ci, zo * stride + kz, yo * stride + ky]
                            for kx in range(k):
                                wv = w[co, ci, kz, ky, kx]
                                for xo in range(wo):
                                    orow[xo] += wv * xrow[xo * stride + kx]


@numba.njit(**_JIT)
def conv_bwd_input_any(gout, w, stride, gxp):
    # scatter-add into the padded gradient buffer; crop happens in the caller
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    do, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3]
    for co in range(cout):
        for zo in range(do):
            for yo in range(ho):
                grow = gout[co, zo, yo]
                for ci in range(cin):
                    for kz in range(k):
                        for ky in range(k):
                            gxrow = gxp[ci, zo * stride + kz, yo * stride + ky]
                            for kx in range(k):
                                wv = w[co, ci, kz, ky, kx]
                                for xo in range(wo):
                                    gxrow[xo * stride + kx] += wv * grow[xo]


@numba.njit(**_JIT)
def conv_bwd_w_k3s1(xp, gout, gw):
    # output channels in pairs: one xrow load feeds both accumulator triples
    cout, cin = gw.shape[0], gw.shape[1]
    do, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3]
    zero = gw.dtype.type(0.0)
    for cp in range(cout // 2):
        ca, cb = 2 * cp, 2 * cp + 1
        for ci in range(cin):
            for kz in range(3):
                for ky in range(3):
                    a0 = zero
                    a1 = zero
                    a2 = zero
                    b0 = zero
                    b1 = zero
                    b2 = zero
                    for zo in range(do):
                        for yo in range(ho):
                            grow_a = gout[ca, zo, yo]
                            grow_b = gout[cb, zo, yo]
                            xrow = xp[ci, zo + kz, yo + ky]
                            for xo in range(wo):
                                x0 = xrow[xo]
                                x1 = xrow[xo + 1]
                                x2 = xrow[xo + 2]
                                ga = grow_a[xo]
                                gb = grow_b[xo]
                                a0 += ga * x0
                                a1 += ga * x1
                                a2 += ga * x2
                                b0 += gb * x0
                                b1 += gb * x1
                                b2 += gb * x2
                    gw[ca, ci, kz, ky, 0] = a0
                    gw[ca, ci, kz, ky, 1] = a1
                    gw[ca, ci, kz, ky, 2] = a2
                    gw[cb, ci, kz, ky, 0] = b0
                    gw[cb, ci, kz, ky, 1] = b1
                    gw[cb, ci, kz, ky, 2] = b2
    if cout % 2:
        co = cout - 1
        for ci in range(cin):
            for kz in range(3):
                for ky in range(3):
                    a0 = zero
                    a1 = zero
                    a2 = zero
                    for zo in range(do):
                        for yo in range(ho):
                            grow = gout[co, zo, yo]
                            xrow = xp[ci, zo + kz, yo + ky]
                            for xo in range(wo):
                                gv = grow[xo]
                                a0 += gv * xrow[xo]
                                a1 += gv * xrow[xo + 1]
                                a2 += gv * xrow[xo + 2]
                    gw[co, ci, kz, ky, 0] = a0
                    gw[co, ci, kz, ky, 1] = a1
                    gw[co, ci, kz, ky, 2] = a2


@numba.njit(**_JIT)
def leaky_fwd(x2, slope, y2, factor2):
    c, n = x2.shape
    one = x2.dtype.type(1.0)
    for j in range(c):
        xrow = x2[j]
        yrow = y2[j]
        frow = factor2[j]
        for i in range(n):
            v = xrow[i]
            if v > 0:
                yrow[i] = v
                frow[i] = one
            else:
                yrow[i] = v * slope
                frow[i] = slope


@numba.njit(**_JIT)
def norm_fwd(x2, eps, y2, inv):
    # per-row standardization; two-pass variance avoids cancellation
    c, n = x2.shape
    for j in range(c):
        xrow = x2[j]
        acc = x2.dtype.type(0.0)
        for i in range(n):
            acc += xrow[i]
        mean = acc / n
        var = x2.dtype.type(0.0)
        yrow = y2[j]
        for i in range(n):
            d = xrow[i] - mean
            yrow[i] = d
            var += d * d
        scale = x2.dtype.type(1.0) / np.sqrt(var / n + eps)
        inv[j] = scale
        for i in range(n):
            yrow[i] *= scale


@numba.njit(**_JIT)
def norm_bwd(g2, y2, inv, out2):
    c, n = g2.shape
    for j in range(c):
        grow = g2[j]
        yrow = y2[j]
        sum_g = g2.dtype.type(0.0)
        sum_gy = g2.dtype.type(0.0)
        for i in range(n):
            sum_g += grow[i]
            sum_gy += grow[i] * yrow[i]
        gm = sum_g / n
        gy = sum_gy / n
        scale = inv[j]
        orow = out2[j]
        for i in range(n):
            orow[i] = (grow[i] - gm - yrow[i] * gy) * scale


@numba.njit(**_JIT)
def conv_bwd_w_any(xp, gout, stride, gw):
    cout, cin, k = gw.shape[0], gw.shape[1], gw.shape[2]
    do, ho, wo = gout.shape[1], gout.shape[2], gout.shape[3]
    for co in range(cout):
        for ci in range(cin):
            for kz in range(k):
                for ky in range(k):
                    for kx in range(k):
                        acc = gw.dtype.type(0.0)
                        for zo in range(do):
                            for yo in range(ho):
                                grow = gout[co, zo, yo]
                                xrow = xp[ci, zo * stride + kz, yo * stride + ky]
                                for xo in range(wo):
                                    acc += grow[xo] * xrow[xo * stride + kx]
                        gw[co, ci, kz, ky, kx] = acc
