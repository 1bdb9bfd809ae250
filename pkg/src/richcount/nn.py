"""Small numpy layer library with explicit backward passes.

Every layer is a pair of functions: ``*_forward`` returns the output and a
cache, ``*_backward`` takes the cache and the upstream gradient. Weights use
the ``(out_features, in_features)`` convention, so a linear layer computes
``x @ W.T + b``.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
NORM_EPS = 1e-12


def linear_forward(x, W, b=None):
    out = x @ W.T
    if b is not None:
        out = out + b
    return out, x


def linear_backward(cache, grad_out, W, has_bias=True):
    x = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    dW = g2.T @ x2
    db = g2.sum(axis=0) if has_bias else None
    dx = grad_out @ W
    return dx, dW, db


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(mask, grad_out):
    return np.where(mask, grad_out, 0.0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      train, momentum=0.1):
    """Batch normalization over the leading axis of a 2-D array.

    In training mode batch statistics are used and the running buffers are
    updated in place. In evaluation mode the running buffers are used and the
    layer is a fixed affine map.
    """
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch normalization needs at least 2 rows in training mode")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        n = x.shape[0]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma, train)


def batchnorm_backward(cache, grad_out):
    xhat, inv_std, gamma, train = cache
    dgamma = (grad_out * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbeta = grad_out.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = grad_out * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = xhat.shape[0]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def l2_normalize_forward(x):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, NORM_EPS)
    u = x / norm
    return u, (u, norm)


def l2_normalize_backward(cache, grad_out):
    u, norm = cache
    return (grad_out - u * (u * grad_out).sum(axis=-1, keepdims=True)) / norm


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(x, t, Wq, Wk, Wv, heads):
    """Multi-head cross-attention, queries from ``x`` and keys/values from ``t``.

    ``x`` is ``(B, N, d)`` and ``t`` is ``(B, K, d)``. Returns the concatenated
    head outputs ``(B, N, d)`` without residual and without output projection.
    """
    B, N, d = x.shape
    K = t.shape[1]
    if d % heads:
        raise ValueError(f"embedding dim {d} not divisible by {heads} heads")
    dh = d // heads
    q = (x @ Wq.T).reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
    k = (t @ Wk.T).reshape(B, K, heads, dh).transpose(0, 2, 1, 3)
    v = (t @ Wv.T).reshape(B, K, heads, dh).transpose(0, 2, 1, 3)
    scale = 1.0 / np.sqrt(dh)
    attn = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
    return out, (x, t, q, k, v, attn, scale, heads)


def attention_backward(cache, grad_out, Wq, Wk, Wv):
    x, t, q, k, v, attn, scale, heads = cache
    B, N, d = x.shape
    K = t.shape[1]
    dh = d // heads
    g = grad_out.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
    dattn = g @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ g
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = dscores @ k * scale
    dk = dscores.transpose(0, 1, 3, 2) @ q * scale
    dq = dq.transpose(0, 2, 1, 3).reshape(B, N, d)
    dk = dk.transpose(0, 2, 1, 3).reshape(B, K, d)
    dv = dv.transpose(0, 2, 1, 3).reshape(B, K, d)
    dWq = dq.reshape(-1, d).T @ x.reshape(-1, d)
    dWk = dk.reshape(-1, d).T @ t.reshape(-1, d)
    dWv = dv.reshape(-1, d).T @ t.reshape(-1, d)
    dx = dq @ Wq
    dt = dk @ Wk + dv @ Wv
    return dx, dt, dWq, dWk, dWv


def bilinear_matrix(n_out, n_in):
    """Interpolation matrix ``(n_out, n_in)`` using half-pixel centers.

    Rows sum to one, so applying it to a constant signal reproduces the
    constant. Matches the usual ``align_corners=False`` convention.
    """
    M = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        M[i, lo] += 1.0 - w
        M[i, hi] += w
    return M


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, lr=1e-3, momentum=0.9):
        self.lr = lr
        self.momentum = momentum

    def step(self, params, grads, state, prefix):
        for name, g in grads.items():
            key = f"{prefix}/{name}/velocity"
            vel = state.get(key)
            if vel is None:
                vel = state[key] = np.zeros_like(g)
            vel *= self.momentum
            vel += g
            params[name] -= self.lr * vel


class Adam:
    """Adam with bias correction; moments live in the caller's state dict."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params, grads, state, prefix):
        tkey = f"{prefix}/step"
        t = int(state.get(tkey, np.zeros(1))[0]) + 1
        state[tkey] = np.array([t], dtype=np.float64)
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, g in grads.items():
            mk, vk = f"{prefix}/{name}/m", f"{prefix}/{name}/v"
            if mk not in state:
                state[mk] = np.zeros_like(g)
                state[vk] = np.zeros_like(g)
            m, v = state[mk], state[vk]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, lr, momentum=0.9):
    if name == "sgd":
        return SGD(lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")
