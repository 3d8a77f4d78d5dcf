"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except for data containers, so each
oracle is a second, simpler derivation of the same quantity.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1):
    """Direct convolution sum with zero padding k//2."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    if b is not None:
        out += np.asarray(b)[None, :, None, None]
    return out


def gamma_points(gamma, n, t_max):
    return [t_max * (i / (n - 1)) ** gamma for i in range(n)]


def scaled_gamma_points(gamma, n, t_max, alpha):
    if gamma >= 1:
        lo, hi = 0.0, t_max + alpha * (gamma - 1)
    else:
        lo, hi = alpha * (1 - 1 / gamma), float(t_max)
    return [t_max * ((t_max * i / (n - 1) - lo) / (hi - lo)) ** gamma for i in range(n)]


def alpha_bars(T, b0=1e-4, b1=0.02):
    out, acc = [], 1.0
    for i in range(T):
        beta = b0 + (b1 - b0) * i / (T - 1)
        acc *= 1.0 - beta
        out.append(acc)
    return out


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for k, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
    return p


def unet_param_count(image_size, in_ch, cond_ch, out_ch, base, mults, blocks, temb):
    """Closed-form parameter count of the documented block layout, derived level by level."""
    ch = [base * m for m in mults]
    total = 2 * (temb * temb + temb)  # time MLP
    total += ch[0] * (in_ch + cond_ch) * 9 + ch[0]  # stem
    total += out_ch * ch[0] * 9 + out_ch  # output conv

    def block(cin, cout, skip):
        n = cout * cin * 9 + cout + cout * temb + cout + cout * cout * 9 + cout
        return n + (cout * cin + cout if skip else 0)

    prev = ch[0]
    for lvl, c in enumerate(ch):
        for b in range(blocks):
            strided = b == 0 and lvl > 0
            total += block(prev, c, prev != c or strided)
            prev = c
    total += block(ch[-1], ch[-1], False)  # middle
    for lvl in range(len(ch) - 1, -1, -1):
        for b in range(blocks - 1, -1, -1):
            # deeper input: the block above in decode order
            if lvl == len(ch) - 1 and b == blocks - 1:
                deep = ch[-1]
            elif b == blocks - 1:
                deep = ch[lvl + 1]
            else:
                deep = ch[lvl]
            total += block(deep + ch[lvl], ch[lvl], True)
    return total


def sobel_reference(lum):
    """Sobel magnitude with edge replication, written with explicit neighbour sums."""
    p = np.pad(lum, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def quadratic_distance(minimizer):
    return lambda g: (g - minimizer) ** 2


def _silu(v):
    return v / (1.0 + np.exp(-v))


def unet_reference(params, image_size, blocks, levels, temb_dim, x, c, t, depth=None):
    """Plain-numpy U-Net forward written from the documented name table and wiring.

    ``params`` maps names to arrays. Blocks deeper than ``depth`` are skipped
    and the decoder at ``depth`` is fed the cyclically repeated level skip.
    """
    d_max = blocks * levels + 1
    depth = d_max if depth is None else depth
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    half = temb_dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None]
    feat = np.broadcast_to(np.concatenate([np.sin(args), np.cos(args)], axis=1), (x.shape[0], temb_dim))
    emb = _silu(feat @ p["time.fc1.weight"].T + p["time.fc1.bias"])
    emb = _silu(emb @ p["time.fc2.weight"].T + p["time.fc2.bias"])

    def block(name, h, stride=1):
        y = conv2d_loops(_silu(h), p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], stride)
        y = y + (emb @ p[f"{name}.temb.weight"].T + p[f"{name}.temb.bias"])[:, :, None, None]
        y = conv2d_loops(_silu(y), p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"])
        if f"{name}.skip.weight" in p:
            h = conv2d_loops(h, p[f"{name}.skip.weight"], p[f"{name}.skip.bias"], stride)
        return h + y

    def where(d):
        return (d - 1) // blocks + 1, (d - 1) % blocks + 1

    h = conv2d_loops(np.concatenate([x, c], axis=1), p["stem.conv.weight"], p["stem.conv.bias"])
    skips = {}
    for d in range(1, min(depth, d_max - 1) + 1):
        lvl, b = where(d)
        h = block(f"enc.L{lvl}.B{b}", h, 2 if b == 1 and lvl > 1 else 1)
        skips[d] = h
    if depth == d_max:
        h = block("mid", h)
        start = d_max - 1
    else:
        lvl, b = where(depth)
        w = p[f"dec.L{lvl}.B{b}.conv1.weight"]
        need = w.shape[1] - w.shape[0]
        src = skips[depth]
        idx = [i % src.shape[1] for i in range(need)]
        h = src[:, idx]
        start = depth
    for d in range(start, 0, -1):
        lvl, b = where(d)
        if d != start and where(d + 1)[0] > lvl:
            h = h.repeat(2, axis=2).repeat(2, axis=3)
        h = block(f"dec.L{lvl}.B{b}", np.concatenate([h, skips[d]], axis=1))
    return conv2d_loops(_silu(h), p["out.conv.weight"], p["out.conv.bias"])
