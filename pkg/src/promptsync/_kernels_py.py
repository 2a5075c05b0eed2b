"""Pure numpy implementations of the fused kernels.

Every function takes 2-D C-contiguous float64 arrays and works row-wise over
the last axis. They mirror ``_kernels.pyx`` exactly in signature.
"""
import numpy as np

_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_bwd(g, xhat, rstd, gamma):
    gx = g * gamma
    dx = rstd[:, None] * (
        gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True)
    )
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_fwd(x):
    t = np.tanh(_GELU_K * (x + _GELU_C * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(g, x, t):
    dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * (x * x))
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def softmax_fwd(x, inv_temp):
    z = x * inv_temp
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(g, y, inv_temp):
    return inv_temp * y * (g - (g * y).sum(axis=1, keepdims=True))
