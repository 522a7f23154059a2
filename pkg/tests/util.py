"""Shared test helpers: finite differences and naive reference loops."""

import numpy as np


def central_diff(f, theta: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. theta, in place."""
    g = np.zeros_like(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grad_close(analytic, fd, rtol=1e-4, atol=1e-8, name=""):
    np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=atol, err_msg=name)


def scalar_sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def scalar_gru_sequence(a, u, indices, h0):
    """Reference recurrence written with explicit per-element loops."""
    H = u.shape[1]
    T = a.shape[0]
    out = np.zeros((T, H))
    h = np.array(h0, dtype=float)
    for t in indices:
        uh = np.zeros(3 * H)
        for i in range(3 * H):
            for j in range(H):
                uh[i] += u[i, j] * h[j]
        z = np.array([scalar_sigmoid(a[t, i] + uh[i]) for i in range(H)])
        r = np.array([scalar_sigmoid(a[t, H + i] + uh[H + i]) for i in range(H)])
        c = np.array([np.tanh(a[t, 2 * H + i] + r[i] * uh[2 * H + i]) for i in range(H)])
        h = z * h + (1 - z) * c
        out[t] = h
    return out


def scalar_lc_bgru(x, w, b, u_fwd, u_bwd, c_w, c_s):
    """Independent reference for the chunked bidirectional layer."""
    T = x.shape[0]
    H = u_fwd.shape[1]
    a = np.zeros((T, 3 * H))
    for t in range(T):
        for i in range(3 * H):
            a[t, i] = b[i]
            for j in range(x.shape[1]):
                a[t, i] += w[i, j] * x[t, j]
    fwd = scalar_gru_sequence(a, u_fwd, range(T), np.zeros(H))
    bwd = np.zeros((T, H))
    p = 0
    while p < T:
        e = min(p + c_w, T)
        states = scalar_gru_sequence(a[p:e], u_bwd, range(e - p - 1, -1, -1), np.zeros(H))
        for t in range(p, min(p + c_s, e)):
            bwd[t] = states[t - p]
        p += c_s
    return np.concatenate([fwd, bwd], axis=1)
