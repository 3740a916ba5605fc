"""Brute-force reference implementations used to check the vectorized code.

Everything here is written as plain loops over scalars so it shares no code
path with the package.
"""

from __future__ import annotations

import math

import numpy as np


def psnr_loop(ref, test, data_range=1.0):
    L, S, B = ref.shape
    total = 0.0
    for i in range(L):
        for j in range(S):
            for k in range(B):
                d = float(ref[i, j, k]) - float(test[i, j, k])
                total += d * d
    mse = total / (L * S * B)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def ssim_loop(ref, test, data_range=1.0, window=7):
    H, W = ref.shape
    w = min(window, H, W)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    n = w * w
    vals = []
    for i in range(H - w + 1):
        for j in range(W - w + 1):
            xs = [float(ref[i + a, j + b]) for a in range(w) for b in range(w)]
            ys = [float(test[i + a, j + b]) for a in range(w) for b in range(w)]
            mx = sum(xs) / n
            my = sum(ys) / n
            vx = sum((x - mx) ** 2 for x in xs) / n
            vy = sum((y - my) ** 2 for y in ys) / n
            cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def sam_loop(ref, test):
    L, S, B = ref.shape
    angles = []
    for i in range(L):
        for j in range(S):
            dot = nr = nt = 0.0
            for k in range(B):
                r, t = float(ref[i, j, k]), float(test[i, j, k])
                dot += r * t
                nr += r * r
                nt += t * t
            if nr == 0 or nt == 0:
                continue
            c = dot / math.sqrt(nr * nt)
            angles.append(math.acos(max(-1.0, min(1.0, c))))
    return sum(angles) / len(angles)


def envi_bytes_loop(values, interleave):
    """Serialize a canonical (line, sample, band) cube by explicit loops."""
    L, S, B = values.shape
    out = []
    if interleave == "bsq":
        for k in range(B):
            for i in range(L):
                for j in range(S):
                    out.append(values[i, j, k])
    elif interleave == "bil":
        for i in range(L):
            for k in range(B):
                for j in range(S):
                    out.append(values[i, j, k])
    elif interleave == "bip":
        for i in range(L):
            for j in range(S):
                for k in range(B):
                    out.append(values[i, j, k])
    return np.array(out, dtype="<f4").tobytes()


def conv2d_reflect_loop(plane_stack, w2, bias):
    """2D cross-correlation with reflect padding.

    plane_stack: (c_in, H, W); w2: (m, n, c_in, c_out) -> (c_out, H, W)
    """
    c_in, H, W = plane_stack.shape
    m, n, _, c_out = w2.shape
    pm, pn = m // 2, n // 2
    padded = np.pad(plane_stack, ((0, 0), (pm, pm), (pn, pn)), mode="reflect")
    out = np.zeros((c_out, H, W))
    for o in range(c_out):
        for y in range(H):
            for x in range(W):
                acc = bias[o]
                for c in range(c_in):
                    for a in range(m):
                        for b in range(n):
                            acc += w2[a, b, c, o] * padded[c, y + a, x + b]
                out[o, y, x] = acc
    return out


def ddpm_posterior_mean(x0, xt, t, beta):
    """Posterior mean of q(x_{t-1} | x_t, x_0) from the betas alone."""
    ab = 1.0
    for s in range(t + 1):
        ab *= 1.0 - beta[s]
    ab_prev = ab / (1.0 - beta[t])
    alpha = 1.0 - beta[t]
    c0 = math.sqrt(ab_prev) * beta[t] / (1.0 - ab)
    ct = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * xt


def central_difference(f, tensors, h=1e-6):
    """Numerical gradient of scalar f(tensors) w.r.t. every entry of every tensor."""
    grads = {}
    for name, arr in tensors.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(tensors)
            flat[i] = orig - h
            fm = f(tensors)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads[name] = g
    return grads
