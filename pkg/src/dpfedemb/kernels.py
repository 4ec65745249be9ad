"""Hot numeric kernels, jit-compiled with numba when available.

Each kernel is written in the subset of numpy that numba understands, so the
same source serves both paths. Setting ``DPFEDEMB_DISABLE_NUMBA=1`` before
import runs the interpreted numpy path instead; ``benchmarks/bench_kernels.py``
times the two against each other.

MLP parameter layout (the backbone): for each layer ``l`` a row-major
``(dims[l], dims[l+1])`` weight matrix followed, when ``has_bias``, by a
``dims[l+1]`` bias vector. Hidden layers use ``activation``; the last layer is
linear. The head is a row-major ``(num_classes, embed_dim)`` matrix.
"""

import math
import os

import numpy as np

ACT_RELU = 0
ACT_TANH = 1

_DISABLE_ENV = "DPFEDEMB_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_DISABLE_ENV, "").strip().lower() not in ("1", "true", "yes", "on")


try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"


def kernel(fn):
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


@kernel
def mlp_forward(theta, dims, has_bias, activation, x):
    """Return the list of layer outputs, ``acts[0] = x`` and ``acts[-1]`` the
    pre-normalization embedding."""
    acts = [x]
    h = x
    off = 0
    n_layers = dims.shape[0] - 1
    for layer in range(n_layers):
        din = dims[layer]
        dout = dims[layer + 1]
        w = theta[off:off + din * dout].reshape((din, dout))
        off += din * dout
        h = np.dot(h, w)
        if has_bias:
            h = h + theta[off:off + dout]
            off += dout
        if layer < n_layers - 1:
            if activation == ACT_RELU:
                h = np.maximum(h, 0.0)
            else:
                h = np.tanh(h)
        acts.append(h)
    return acts


@kernel
def row_norms(h):
    return np.sqrt((h * h).sum(axis=1))


@kernel
def normalize_rows(h):
    nrm = row_norms(h)
    safe = np.where(nrm > 0.0, nrm, 1.0)
    return h / safe.reshape((-1, 1)), safe


@kernel
def loss_and_grads(theta, omega, dims, has_bias, activation, normalize, x, y, g_theta, g_omega):
    """Mean softmax cross-entropy of ``<head, embed(x)>`` at labels ``y``.

    Gradients are written into ``g_theta`` and ``g_omega``; the loss is
    returned.
    """
    n = x.shape[0]
    d = dims[dims.shape[0] - 1]
    num_classes = omega.shape[0] // d
    head = omega.reshape((num_classes, d))

    acts = mlp_forward(theta, dims, has_bias, activation, x)
    h = acts[len(acts) - 1]
    if normalize:
        z, nrm = normalize_rows(h)
    else:
        z = h
        nrm = np.ones(n)

    logits = np.dot(z, head.T)
    loss = 0.0
    p = np.empty_like(logits)
    for i in range(n):
        m = logits[i].max()
        e = np.exp(logits[i] - m)
        s = e.sum()
        p[i] = e / s
        loss += m + math.log(s) - logits[i, y[i]]
    loss /= n

    dlogits = p
    for i in range(n):
        dlogits[i, y[i]] -= 1.0
    dlogits /= n

    g_omega[:] = np.dot(dlogits.T, z).reshape(-1)
    dh = np.dot(dlogits, head)
    if normalize:
        proj = (z * dh).sum(axis=1).reshape((-1, 1))
        dh = (dh - z * proj) / nrm.reshape((-1, 1))

    # Walk the layers backwards; offsets are recomputed from the front.
    n_layers = dims.shape[0] - 1
    offsets = np.zeros(n_layers + 1, dtype=np.int64)
    for layer in range(n_layers):
        size = dims[layer] * dims[layer + 1]
        if has_bias:
            size += dims[layer + 1]
        offsets[layer + 1] = offsets[layer] + size
    for layer in range(n_layers - 1, -1, -1):
        din = dims[layer]
        dout = dims[layer + 1]
        out = acts[layer + 1]
        if layer < n_layers - 1:
            if activation == ACT_RELU:
                dh = dh * (out > 0.0)
            else:
                dh = dh * (1.0 - out * out)
        off = offsets[layer]
        g_theta[off:off + din * dout] = np.dot(acts[layer].T, dh).reshape(-1)
        if has_bias:
            g_theta[off + din * dout:off + din * dout + dout] = dh.sum(axis=0)
        if layer > 0:
            w = theta[off:off + din * dout].reshape((din, dout))
            dh = np.dot(dh, w.T)
    return loss


@kernel
def local_sgd(theta, omega, x, y, batch_index, batch_offsets, dims, has_bias, activation,
              normalize, lr_theta, lr_omega, momentum, theta_weights):
    """Run ``len(batch_offsets) - 1`` momentum-SGD steps on (theta, omega).

    Minibatch ``k`` is ``x[batch_index[batch_offsets[k]:batch_offsets[k+1]]]``.
    ``theta_weights`` is 0 for frozen backbone entries. Velocity starts at zero.
    Returns the final parameters and the mean minibatch loss.
    """
    theta = theta.copy()
    omega = omega.copy()
    v_theta = np.zeros_like(theta)
    v_omega = np.zeros_like(omega)
    g_theta = np.zeros_like(theta)
    g_omega = np.zeros_like(omega)
    steps = batch_offsets.shape[0] - 1
    total = 0.0
    for k in range(steps):
        idx = batch_index[batch_offsets[k]:batch_offsets[k + 1]]
        xb = x[idx]
        yb = y[idx]
        total += loss_and_grads(theta, omega, dims, has_bias, activation, normalize,
                                xb, yb, g_theta, g_omega)
        g_theta *= theta_weights
        v_theta = momentum * v_theta + g_theta
        v_omega = momentum * v_omega + g_omega
        theta -= lr_theta * v_theta
        omega -= lr_omega * v_omega
    if steps > 0:
        total /= steps
    return theta, omega, total


@kernel
def _log_add(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    hi = max(a, b)
    lo = min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


@kernel
def log_a_int(q, sigma, alpha):
    """``log sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp(k(k-1)/(2 sigma^2))``
    for integer ``alpha`` and ``0 < q < 1``, accumulated in log space."""
    acc = -np.inf
    log_q = math.log(q)
    log_1mq = math.log1p(-q)
    lg_alpha = math.lgamma(alpha + 1.0)
    inv = 1.0 / (2.0 * sigma * sigma)
    for k in range(alpha + 1):
        log_binom = lg_alpha - math.lgamma(k + 1.0) - math.lgamma(alpha - k + 1.0)
        term = log_binom + k * log_q + (alpha - k) * log_1mq + (k * k - k) * inv
        acc = _log_add(acc, term)
    return acc
