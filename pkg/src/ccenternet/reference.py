"""Slow loop-based forward passes used as test oracles.

Everything here works on single images laid out ``(C, H, W)`` as float64
numpy arrays and is written element by element on purpose.
"""

from __future__ import annotations

import math

import numpy as np


def sigmoid(v: float) -> float:
    return 1.0 / (1.0 + math.exp(-v))


def h_sigmoid_scalar(v: float) -> float:
    return min(max((v + 3.0) / 6.0, 0.0), 1.0)


def acon_c_scalar(v: float, p1: float, p2: float, beta: float) -> float:
    d = (p1 - p2) * v
    return d * sigmoid(beta * d) + p2 * v


def acon_c_reference(x, p1, p2, beta):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        for idx in np.ndindex(x.shape[1:]):
            out[(c, *idx)] = acon_c_scalar(x[(c, *idx)], p1[c], p2[c], beta[c])
    return out


def conv2d_reference(x, w, stride: int = 1, padding: int = 0, bias=None):
    """Dense cross-correlation, ``y(p0) = sum_n w(pn) x(p0 + pn)`` with zero padding."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c, h, wd = x.shape
    o, c_w, kh, kw = w.shape
    if c_w != c:
        raise ValueError(f"kernel expects {c_w} channels, input has {c}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ValueError("kernel larger than padded input")
    out = np.zeros((o, h_out, w_out))
    for oc in range(o):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0 if bias is None else float(bias[oc])
                for ic in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            yy = i * stride - padding + a
                            xx = j * stride - padding + b
                            if 0 <= yy < h and 0 <= xx < wd:
                                acc += w[oc, ic, a, b] * x[ic, yy, xx]
                out[oc, i, j] = acc
    return out


def bilinear_sample(img, y: float, x: float) -> float:
    """Bilinear read of a 2-D array; taps outside the array contribute zero."""
    h, w = img.shape
    y0, x0 = math.floor(y), math.floor(x)
    ly, lx = y - y0, x - x0
    total = 0.0
    for yy, xx, wt in ((y0, x0, (1 - ly) * (1 - lx)), (y0, x0 + 1, (1 - ly) * lx),
                       (y0 + 1, x0, ly * (1 - lx)), (y0 + 1, x0 + 1, ly * lx)):
        if 0 <= yy < h and 0 <= xx < w:
            total += wt * img[yy, xx]
    return total


def deform_conv2d_reference(x, w, offsets, stride: int = 1, padding: int = 1, bias=None):
    """``y(p0) = sum_n w(pn) x(p0 + pn + dpn)``; offsets ``(2K, H_out, W_out)`` as (dy, dx) per tap."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((o, h_out, w_out))
    for oc in range(o):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0 if bias is None else float(bias[oc])
                for a in range(kh):
                    for b in range(kw):
                        k = a * kw + b
                        yy = i * stride - padding + a + offsets[2 * k, i, j]
                        xx = j * stride - padding + b + offsets[2 * k + 1, i, j]
                        for ic in range(c):
                            acc += w[oc, ic, a, b] * bilinear_sample(x[ic], yy, xx)
                out[oc, i, j] = acc
    return out


def cbam_reference(x, fc1_w, fc1_b, fc2_w, fc2_b, sp_w, sp_b):
    """CBAM on one feature map. ``fc*_w`` are dense ``(out, in)`` matrices, ``sp_w`` is ``(2, k, k)``."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    hidden = fc1_w.shape[0]

    def mlp(v):
        z = [max(sum(fc1_w[j, i] * v[i] for i in range(c)) + fc1_b[j], 0.0) for j in range(hidden)]
        return [sum(fc2_w[i, j] * z[j] for j in range(hidden)) + fc2_b[i] for i in range(c)]

    avg = [sum(x[i, yy, xx] for yy in range(h) for xx in range(w)) / (h * w) for i in range(c)]
    mx = [max(x[i, yy, xx] for yy in range(h) for xx in range(w)) for i in range(c)]
    a, m = mlp(avg), mlp(mx)
    gate_c = [h_sigmoid_scalar(a[i] + m[i]) for i in range(c)]

    xc = np.empty_like(x)
    for i in range(c):
        for yy in range(h):
            for xx in range(w):
                xc[i, yy, xx] = x[i, yy, xx] * gate_c[i]

    pooled = np.zeros((2, h, w))
    for yy in range(h):
        for xx in range(w):
            vals = [xc[i, yy, xx] for i in range(c)]
            pooled[0, yy, xx] = sum(vals) / c
            pooled[1, yy, xx] = max(vals)
    k = sp_w.shape[-1]
    pad = k // 2
    out = np.empty_like(x)
    for yy in range(h):
        for xx in range(w):
            s = float(sp_b)
            for ch in range(2):
                for a in range(k):
                    for b in range(k):
                        sy, sx = yy - pad + a, xx - pad + b
                        if 0 <= sy < h and 0 <= sx < w:
                            s += sp_w[ch, a, b] * pooled[ch, sy, sx]
            g = h_sigmoid_scalar(s)
            for i in range(c):
                out[i, yy, xx] = xc[i, yy, xx] * g
    return out


def batchnorm_eval_reference(x, mean, var, gamma, beta, eps: float = 1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        scale = gamma[c] / math.sqrt(var[c] + eps)
        for idx in np.ndindex(x.shape[1:]):
            out[(c, *idx)] = (x[(c, *idx)] - mean[c]) * scale + beta[c]
    return out


def relu_reference(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        out[idx] = x[idx] if x[idx] > 0 else 0.0
    return out


def residual_block_reference(x, params: dict, spec, offsets=None):
    """Eval-mode bottleneck block built from the oracles above.

    ``params`` maps the torch state-dict names of a ``Bottleneck`` to numpy
    arrays. When the block is deformable and ``offsets`` is None they are
    computed from the offset predictor with the dense reference conv.
    """
    p = params

    def bn(v, name):
        return batchnorm_eval_reference(v, p[f"{name}.running_mean"], p[f"{name}.running_var"],
                                        p[f"{name}.weight"], p[f"{name}.bias"])

    y = relu_reference(bn(conv2d_reference(x, p["conv1.weight"]), "bn1"))
    if spec.dcn:
        if offsets is None:
            offsets = conv2d_reference(y, p["conv2.offset_conv.weight"], spec.stride, 1,
                                       bias=p["conv2.offset_conv.bias"])
        y = deform_conv2d_reference(y, p["conv2.weight"], offsets, spec.stride, 1)
    else:
        y = conv2d_reference(y, p["conv2.weight"], spec.stride, 1)
    y = bn(y, "bn2")
    if spec.acon:
        y = acon_c_reference(y, p["act2.p1"], p["act2.p2"], p["act2.beta"])
    else:
        y = relu_reference(y)
    y = bn(conv2d_reference(y, p["conv3.weight"]), "bn3")
    if spec.cbam:
        y = cbam_reference(
            y,
            p["cbam.channel.fc1.weight"][:, :, 0, 0], p["cbam.channel.fc1.bias"],
            p["cbam.channel.fc2.weight"][:, :, 0, 0], p["cbam.channel.fc2.bias"],
            p["cbam.spatial.conv.weight"][0], p["cbam.spatial.conv.bias"][0],
        )
    if spec.kind == "conv":
        sc = conv2d_reference(x, p["shortcut.0.weight"], spec.stride, 0)
        sc = batchnorm_eval_reference(sc, p["shortcut.1.running_mean"], p["shortcut.1.running_var"],
                                      p["shortcut.1.weight"], p["shortcut.1.bias"])
    else:
        sc = np.asarray(x, dtype=np.float64)
    return relu_reference(y + sc)
