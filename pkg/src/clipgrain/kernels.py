"""Hot loops: the xoshiro256** generator, per-example loss/gradient for each
model kind, ordered row accumulation, and Levenshtein distance.

Each kernel exists twice, a numba version (``*_nb``) and a numpy/pure-Python
version (``*_np``). The public names at the bottom bind to one of them
according to ``clipgrain._accel.USE_NUMBA``. The generator and distance
kernels are integer-exact on both paths; the model kernels agree to rounding
error, not bitwise, so a single process should stick to one of them (which
it does, since the choice is made at import time).

Parameter layouts (row-major, flat):

    linear    W[d], b
    logistic  W[d, K], b[K]
    mlp       W1[d, h], b1[h], W2[h, K], b2[K]
"""

import numpy as np

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _rotl_nb(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _xoshiro_next_nb(s):
    s0 = s[0]
    s1 = s[1]
    s2 = s[2]
    s3 = s[3]
    result = _rotl_nb(s1 * np.uint64(5), 7) * np.uint64(9)
    t = s1 << np.uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl_nb(s3, 45)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3
    return result


@njit(cache=True)
def fill_u64_nb(s, out):
    for i in range(out.shape[0]):
        out[i] = _xoshiro_next_nb(s)


@njit(cache=True)
def fill_below_nb(s, n, threshold, out):
    un = np.uint64(n)
    th = np.uint64(threshold)
    for i in range(out.shape[0]):
        x = _xoshiro_next_nb(s)
        while x < th:
            x = _xoshiro_next_nb(s)
        out[i] = np.int64(x % un)


@njit(cache=True)
def fill_random_nb(s, out):
    for i in range(out.shape[0]):
        out[i] = (_xoshiro_next_nb(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def linear_pe_nb(w, X, y, want_grad):
    n, d = X.shape
    losses = np.empty(n)
    G = np.empty((n if want_grad else 0, d + 1))
    for i in range(n):
        pred = w[d]
        for j in range(d):
            pred += w[j] * X[i, j]
        r = pred - y[i]
        losses[i] = 0.5 * r * r
        if want_grad:
            for j in range(d):
                G[i, j] = r * X[i, j]
            G[i, d] = r
    return losses, G


@njit(cache=True)
def logistic_pe_nb(w, X, labels, K, want_grad):
    n, d = X.shape
    p = d * K + K
    losses = np.empty(n)
    G = np.empty((n if want_grad else 0, p))
    z = np.empty(K)
    for i in range(n):
        for k in range(K):
            z[k] = w[d * K + k]
        for j in range(d):
            xj = X[i, j]
            base = j * K
            for k in range(K):
                z[k] += xj * w[base + k]
        m = z[0]
        for k in range(1, K):
            if z[k] > m:
                m = z[k]
        s = 0.0
        for k in range(K):
            s += np.exp(z[k] - m)
        lse = m + np.log(s)
        y = labels[i]
        losses[i] = lse - z[y]
        if want_grad:
            for k in range(K):
                z[k] = np.exp(z[k] - lse)
            z[y] -= 1.0
            for j in range(d):
                xj = X[i, j]
                base = j * K
                for k in range(K):
                    G[i, base + k] = xj * z[k]
            for k in range(K):
                G[i, d * K + k] = z[k]
    return losses, G


@njit(cache=True)
def mlp_pe_nb(w, X, labels, h, K, want_grad):
    n, d = X.shape
    o_b1 = d * h
    o_w2 = o_b1 + h
    o_b2 = o_w2 + h * K
    p = o_b2 + K
    losses = np.empty(n)
    G = np.empty((n if want_grad else 0, p))
    a = np.empty(h)
    z = np.empty(K)
    delta = np.empty(h)
    for i in range(n):
        for u in range(h):
            a[u] = w[o_b1 + u]
        for j in range(d):
            xj = X[i, j]
            base = j * h
            for u in range(h):
                a[u] += xj * w[base + u]
        for u in range(h):
            a[u] = np.tanh(a[u])
        for k in range(K):
            z[k] = w[o_b2 + k]
        for u in range(h):
            au = a[u]
            base = o_w2 + u * K
            for k in range(K):
                z[k] += au * w[base + k]
        m = z[0]
        for k in range(1, K):
            if z[k] > m:
                m = z[k]
        s = 0.0
        for k in range(K):
            s += np.exp(z[k] - m)
        lse = m + np.log(s)
        y = labels[i]
        losses[i] = lse - z[y]
        if want_grad:
            for k in range(K):
                z[k] = np.exp(z[k] - lse)
            z[y] -= 1.0
            for u in range(h):
                au = a[u]
                base = o_w2 + u * K
                back = 0.0
                for k in range(K):
                    G[i, base + k] = au * z[k]
                    back += w[base + k] * z[k]
                delta[u] = back * (1.0 - au * au)
            for k in range(K):
                G[i, o_b2 + k] = z[k]
            for j in range(d):
                xj = X[i, j]
                base = j * h
                for u in range(h):
                    G[i, base + u] = xj * delta[u]
            for u in range(h):
                G[i, o_b1 + u] = delta[u]
    return losses, G


@njit(cache=True)
def accumulate_rows_nb(G, order):
    acc = G[order[0]].copy()
    for t in range(1, order.shape[0]):
        row = G[order[t]]
        for j in range(acc.shape[0]):
            acc[j] += row[j]
    return acc


@njit(cache=True)
def edit_distance_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev, cur = cur, prev
    return prev[m]


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _xoshiro_next_py(st):
    s0, s1, s2, s3 = st
    result = ((((s1 * 5) & _MASK64) << 7 | ((s1 * 5) & _MASK64) >> 57) & _MASK64) * 9 & _MASK64
    t = (s1 << 17) & _MASK64
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
    st[0], st[1], st[2], st[3] = s0, s1, s2, s3
    return result


def _with_state(fn):
    def run(s, *args):
        st = [int(v) for v in s]
        out = fn(st, *args)
        s[:] = np.array(st, dtype=np.uint64)
        return out
    return run


@_with_state
def fill_u64_np(st, out):
    for i in range(out.shape[0]):
        out[i] = _xoshiro_next_py(st)


@_with_state
def fill_below_np(st, n, threshold, out):
    for i in range(out.shape[0]):
        x = _xoshiro_next_py(st)
        while x < threshold:
            x = _xoshiro_next_py(st)
        out[i] = x % n


@_with_state
def fill_random_np(st, out):
    for i in range(out.shape[0]):
        out[i] = (_xoshiro_next_py(st) >> 11) * (1.0 / 9007199254740992.0)


def _rowdot(X, W):
    """``X @ W`` computed so each output row depends only on its input row.

    BLAS picks different kernels for different batch sizes, which would make
    an example's gradient depend on what else is in the batch.
    """
    return (X[:, :, None] * W[None, :, :]).sum(axis=1)


# overflow shows up as inf/nan in the result, which the trainer turns into an
# abort; stay quiet like the compiled kernels do
_quiet = np.errstate(over="ignore", invalid="ignore")


def _softmax_ce(Z, labels):
    """Cross-entropy per row and its gradient w.r.t. the logits (softmax minus one-hot)."""
    n = Z.shape[0]
    m = Z.max(axis=1, keepdims=True)
    E = np.exp(Z - m)
    s = E.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(s[:, 0])
    rows = np.arange(n)
    losses = lse - Z[rows, labels]
    D = E / s
    D[rows, labels] -= 1.0
    return losses, D


@_quiet
def linear_pe_np(w, X, y, want_grad):
    n, d = X.shape
    r = _rowdot(X, w[:d].reshape(d, 1))[:, 0] + w[d] - y
    losses = 0.5 * r * r
    if not want_grad:
        return losses, np.empty((0, d + 1))
    G = np.empty((n, d + 1))
    G[:, :d] = r[:, None] * X
    G[:, d] = r
    return losses, G


@_quiet
def logistic_pe_np(w, X, labels, K, want_grad):
    n, d = X.shape
    W = w[: d * K].reshape(d, K)
    Z = _rowdot(X, W) + w[d * K:]
    losses, D = _softmax_ce(Z, labels)
    if not want_grad:
        return losses, np.empty((0, d * K + K))
    G = np.empty((n, d * K + K))
    G[:, : d * K] = (X[:, :, None] * D[:, None, :]).reshape(n, d * K)
    G[:, d * K:] = D
    return losses, G


@_quiet
def mlp_pe_np(w, X, labels, h, K, want_grad):
    n, d = X.shape
    o_b1 = d * h
    o_w2 = o_b1 + h
    o_b2 = o_w2 + h * K
    W1 = w[:o_b1].reshape(d, h)
    W2 = w[o_w2:o_b2].reshape(h, K)
    A = np.tanh(_rowdot(X, W1) + w[o_b1:o_w2])
    Z = _rowdot(A, W2) + w[o_b2:]
    losses, D = _softmax_ce(Z, labels)
    if not want_grad:
        return losses, np.empty((0, o_b2 + K))
    delta = _rowdot(D, W2.T) * (1.0 - A * A)
    G = np.empty((n, o_b2 + K))
    G[:, :o_b1] = (X[:, :, None] * delta[:, None, :]).reshape(n, d * h)
    G[:, o_b1:o_w2] = delta
    G[:, o_w2:o_b2] = (A[:, :, None] * D[:, None, :]).reshape(n, h * K)
    G[:, o_b2:] = D
    return losses, G


def accumulate_rows_np(G, order):
    acc = G[order[0]].copy()
    for idx in order[1:]:
        acc += G[idx]
    return acc


def edit_distance_np(a, b):
    m = len(b)
    prev = list(range(m + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != b[j - 1]))
        prev = cur
    return prev[m]


if USE_NUMBA:
    fill_u64 = fill_u64_nb
    fill_below = fill_below_nb
    fill_random = fill_random_nb
    linear_pe = linear_pe_nb
    logistic_pe = logistic_pe_nb
    mlp_pe = mlp_pe_nb
    accumulate_rows = accumulate_rows_nb
    edit_distance_kernel = edit_distance_nb
else:
    fill_u64 = fill_u64_np
    fill_below = fill_below_np
    fill_random = fill_random_np
    linear_pe = linear_pe_np
    logistic_pe = logistic_pe_np
    mlp_pe = mlp_pe_np
    accumulate_rows = accumulate_rows_np
    edit_distance_kernel = edit_distance_np
