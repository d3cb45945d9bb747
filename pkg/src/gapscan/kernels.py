"""Hot numeric kernels: MLP forward/backward passes and RBF kernel sums.

Everything here operates on flat float64 arrays and is compiled with
numba's ``@njit`` by default. Set ``GAPSCAN_NO_NUMBA=1`` before import to
run the same functions on the plain numpy interpreter path instead (handy
for debugging, and what ``benchmarks/kernel_bench.py`` compares against).
"""

import os

import numpy as np

JIT_ENABLED = os.environ.get("GAPSCAN_NO_NUMBA", "").strip().lower() not in (
    "1",
    "true",
    "yes",
)

if JIT_ENABLED:
    from numba import njit
else:

    def njit(*args, **kwargs):
        """Identity decorator standing in for numba.njit."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


@njit(cache=True, nogil=True)
def mlp_probs(x, w1, b1, w2, b2, w3, b3):
    """Softmax class probabilities of a two-hidden-layer tanh MLP, batched."""
    h1 = np.tanh(np.dot(x, w1) + b1)
    h2 = np.tanh(np.dot(h1, w2) + b2)
    z = np.dot(h2, w3) + b3
    out = np.empty_like(z)
    for i in range(z.shape[0]):
        m = z[i].max()
        e = np.exp(z[i] - m)
        out[i] = e / e.sum()
    return out


@njit(cache=True, nogil=True)
def mlp_scores(x, w1, b1, w2, b2, w3, b3):
    """Pre-softmax logits, batched."""
    h1 = np.tanh(np.dot(x, w1) + b1)
    h2 = np.tanh(np.dot(h1, w2) + b2)
    return np.dot(h2, w3) + b3


@njit(cache=True, nogil=True)
def argmax_rows(z):
    out = np.empty(z.shape[0], dtype=np.int64)
    for i in range(z.shape[0]):
        out[i] = np.argmax(z[i])
    return out


@njit(cache=True, nogil=True)
def mlp_epoch(
    x,
    y,
    order,
    batch_size,
    lr,
    momentum,
    w1,
    b1,
    w2,
    b2,
    w3,
    b3,
    v1,
    vb1,
    v2,
    vb2,
    v3,
    vb3,
):
    """One in-place SGD epoch over minibatches in ``order``.

    Updates weights and momentum buffers in place; returns the mean
    cross-entropy over the epoch.
    """
    n = order.shape[0]
    total = 0.0
    start = 0
    while start < n:
        stop = min(start + batch_size, n)
        idx = order[start:stop]
        xb = x[idx]
        yb = y[idx]
        b = stop - start

        h1 = np.tanh(np.dot(xb, w1) + b1)
        h2 = np.tanh(np.dot(h1, w2) + b2)
        z = np.dot(h2, w3) + b3
        p = np.empty_like(z)
        for i in range(b):
            m = z[i].max()
            e = np.exp(z[i] - m)
            p[i] = e / e.sum()
        for i in range(b):
            for j in range(yb.shape[1]):
                if yb[i, j] > 0.0:
                    total -= yb[i, j] * np.log(p[i, j] + 1e-12)

        d3 = (p - yb) / b
        g3 = np.dot(np.ascontiguousarray(h2.T), d3)
        gb3 = d3.sum(0)
        d2 = np.dot(d3, np.ascontiguousarray(w3.T)) * (1.0 - h2 * h2)
        g2 = np.dot(np.ascontiguousarray(h1.T), d2)
        gb2 = d2.sum(0)
        d1 = np.dot(d2, np.ascontiguousarray(w2.T)) * (1.0 - h1 * h1)
        g1 = np.dot(np.ascontiguousarray(xb.T), d1)
        gb1 = d1.sum(0)

        v1[:, :] = momentum * v1 - lr * g1
        vb1[:] = momentum * vb1 - lr * gb1
        v2[:, :] = momentum * v2 - lr * g2
        vb2[:] = momentum * vb2 - lr * gb2
        v3[:, :] = momentum * v3 - lr * g3
        vb3[:] = momentum * vb3 - lr * gb3
        w1 += v1
        b1 += vb1
        w2 += v2
        b2 += vb2
        w3 += v3
        b3 += vb3

        start = stop
    return total / n


@njit(cache=True, nogil=True)
def mlp_input_grad(x, t, w1, b1, w2, b2, w3, b3):
    """Gradient of the class-t softmax output w.r.t. a single flat input."""
    h1 = np.tanh(np.dot(x, w1) + b1)
    h2 = np.tanh(np.dot(h1, w2) + b2)
    z = np.dot(h2, w3) + b3
    m = z.max()
    e = np.exp(z - m)
    p = e / e.sum()
    dz = -p[t] * p
    dz[t] += p[t]
    dh2 = np.dot(w3, dz)
    da2 = dh2 * (1.0 - h2 * h2)
    dh1 = np.dot(w2, da2)
    da1 = dh1 * (1.0 - h1 * h1)
    return np.dot(w1, da1)


@njit(cache=True, nogil=True)
def rbf_probs(q, support, targets, gamma):
    """Kernel-regression class probabilities for a batch of flat queries.

    Squared distances go through the matmul identity ||s - q||^2 =
    ||s||^2 + ||q||^2 - 2 s.q so the heavy part is one BLAS call for the
    whole batch. Weights are exponentials of max-shifted log-kernels; the
    shift cancels in the ratio, so the sums stay finite for any
    gamma * distance**2.
    """
    m = q.shape[0]
    k = targets.shape[1]
    s2 = (support * support).sum(1)
    cross = np.dot(support, np.ascontiguousarray(q.T))
    out = np.empty((m, k))
    for i in range(m):
        q2 = (q[i] * q[i]).sum()
        logk = -gamma * (s2 + q2 - 2.0 * cross[:, i])
        w = np.exp(logk - logk.max())
        out[i] = np.dot(w, targets) / w.sum()
    return out


@njit(cache=True, nogil=True)
def rbf_grad_target(x, support, targets, gamma, t):
    """Gradient of the class-t kernel-regression probability at a flat point."""
    diff = x - support
    d2 = (diff * diff).sum(1)
    logk = -gamma * d2
    w = np.exp(logk - logk.max())
    den = w.sum()
    wy = w * targets[:, t]
    pt = wy.sum() / den
    a = np.dot(wy, diff)
    b = np.dot(w, diff)
    return (-2.0 * gamma / den) * (a - pt * b)
