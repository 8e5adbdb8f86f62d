"""Numeric kernels shared by the plant, controller and theory code.

Scalar kernels are written once and compiled with numba when available.
Each batch kernel has a loop form (compiled) and a vectorised numpy form;
the public name dispatches on the active backend and both forms stay
importable so they can be compared against each other.
"""
from __future__ import annotations

import numpy as np

from ._backend import HAVE_NUMBA, jit


@jit
def flow(x0, alpha, x0_clean, x0_c, R):
    """Deterministic outflow of the bottleneck for occupancy ``x0``."""
    if x0 <= x0_clean:
        return x0
    if x0 <= x0_c:
        return alpha * (x0 - x0_clean) + x0_clean
    return R


@jit
def noise_gain(x0, x0_clean, x0_c):
    """Fraction of the noise sample that reaches the outflow."""
    if x0 <= x0_clean:
        return 0.0
    if x0 <= x0_c:
        return (x0 - x0_clean) / (x0_c - x0_clean)
    return 1.0


@jit
def outflow(x0, eps, alpha, x0_clean, x0_c, R):
    """Noisy outflow clamped to ``[0, x0]``; second value flags a clamp."""
    F = flow(x0, alpha, x0_clean, x0_c, R) + noise_gain(x0, x0_clean, x0_c) * eps
    if F < 0.0:
        return 0.0, True
    if F > x0:
        return x0, True
    return F, False


@jit
def predict_into(x, alpha, x0_clean, xc, R, out):
    """Open-loop occupancy forecast from state ``x = [x0, x1..xs, q]``.

    ``out`` has length s+1 and receives the forecast for t..t+s.
    """
    s = out.shape[0] - 1
    p = x[0]
    out[0] = p
    for ell in range(s):
        p = p + x[ell + 1] - flow(p, alpha, x0_clean, xc, R)
        if p < 0.0:
            p = 0.0
        out[ell + 1] = p


@jit
def release_target(x0_set, pred_s, alpha, x0_clean, xc, R, A):
    """Unclamped release command that aims x0(t+s+1) at ``x0_set``."""
    return x0_set - pred_s + flow(pred_s, alpha, x0_clean, xc, R) - A


# --- closed-loop release rollouts ------------------------------------------


@jit
def _rollout_flow_means_loop(x_init, A, B, eps, true_p, est_p):
    n, M = A.shape
    size = x_init.shape[0]
    s = size - 2
    alpha, x0_clean, x0_c, R = true_p[0], true_p[1], true_p[2], true_p[3]
    a_h, c_h, xc_h, r_h = est_p[0], est_p[1], est_p[2], est_p[3]
    out = np.empty(n)
    x = np.empty(size)
    pred = np.empty(s + 1)
    for i in range(n):
        for j in range(size):
            x[j] = x_init[j]
        acc = 0.0
        for m in range(M):
            q = x[s + 1]
            predict_into(x, a_h, c_h, xc_h, r_h, pred)
            b = release_target(xc_h, pred[s], a_h, c_h, xc_h, r_h, A[i, m])
            if b < 0.0:
                b = 0.0
            cap = q + B[i, m]
            if b > cap:
                b = cap
            F, _ = outflow(x[0], eps[i, m], alpha, x0_clean, x0_c, R)
            x0_next = x[0] + x[1] - F
            for j in range(1, s):
                x[j] = x[j + 1]
            x[s] = A[i, m] + b
            x[s + 1] = q + B[i, m] - b
            x[0] = x0_next
            acc += flow(x0_next, alpha, x0_clean, x0_c, R)
        out[i] = acc / M
    return out


def _flow_vec(x0, alpha, x0_clean, x0_c, R):
    return np.where(
        x0 <= x0_clean,
        x0,
        np.where(x0 <= x0_c, alpha * (x0 - x0_clean) + x0_clean, R),
    )


def _gain_vec(x0, x0_clean, x0_c):
    return np.clip((x0 - x0_clean) / (x0_c - x0_clean), 0.0, 1.0)


def _rollout_flow_means_numpy(x_init, A, B, eps, true_p, est_p):
    n, M = A.shape
    s = x_init.shape[0] - 2
    alpha, x0_clean, x0_c, R = (float(v) for v in true_p)
    a_h, c_h, xc_h, r_h = (float(v) for v in est_p)
    x = np.tile(np.asarray(x_init, dtype=float), (n, 1))
    acc = np.zeros(n)
    for m in range(M):
        q = x[:, s + 1].copy()
        p = x[:, 0].copy()
        for ell in range(s):
            p = np.maximum(p + x[:, ell + 1] - _flow_vec(p, a_h, c_h, xc_h, r_h), 0.0)
        b = xc_h - p + _flow_vec(p, a_h, c_h, xc_h, r_h) - A[:, m]
        b = np.minimum(np.maximum(b, 0.0), q + B[:, m])
        x0 = x[:, 0]
        F = _flow_vec(x0, alpha, x0_clean, x0_c, R) + _gain_vec(x0, x0_clean, x0_c) * eps[:, m]
        F = np.clip(F, 0.0, x0)
        x0_next = x0 + x[:, 1] - F
        x[:, 1:s] = x[:, 2 : s + 1]
        x[:, s] = A[:, m] + b
        x[:, s + 1] = q + B[:, m] - b
        x[:, 0] = x0_next
        acc += _flow_vec(x0_next, alpha, x0_clean, x0_c, R)
    return acc / M


def rollout_flow_means_loop(x_init, A, B, eps, true_p, est_p) -> np.ndarray:
    return _rollout_flow_means_loop(
        np.ascontiguousarray(x_init, dtype=np.float64),
        np.ascontiguousarray(A, dtype=np.float64),
        np.ascontiguousarray(B, dtype=np.float64),
        np.ascontiguousarray(eps, dtype=np.float64),
        np.asarray(true_p, dtype=np.float64),
        np.asarray(est_p, dtype=np.float64),
    )


def rollout_flow_means_numpy(x_init, A, B, eps, true_p, est_p) -> np.ndarray:
    return _rollout_flow_means_numpy(
        np.asarray(x_init, dtype=float),
        np.asarray(A, dtype=float),
        np.asarray(B, dtype=float),
        np.asarray(eps, dtype=float),
        true_p,
        est_p,
    )


def rollout_flow_means(x_init, A, B, eps, true_p, est_p) -> np.ndarray:
    """Per-rollout mean of f(x0(m)), m = 1..M, under the release policy.

    ``A``, ``B`` and ``eps`` have shape (n_rollouts, M). ``true_p`` is
    (alpha, x0_clean, x0_c, R) of the plant and ``est_p`` the same tuple as
    seen by the controller, with the critical value in third position.
    """
    if HAVE_NUMBA:
        return rollout_flow_means_loop(x_init, A, B, eps, true_p, est_p)
    return rollout_flow_means_numpy(x_init, A, B, eps, true_p, est_p)


# --- uncoordinated plant ----------------------------------------------------


@jit
def _uncoordinated_l1_loop(x_init, A, B, eps, true_p):
    n, T = A.shape
    size = x_init.shape[0]
    s = size - 2
    alpha, x0_clean, x0_c, R = true_p[0], true_p[1], true_p[2], true_p[3]
    out = np.empty((n, T + 1))
    x = np.empty(size)
    for i in range(n):
        tot = 0.0
        for j in range(size):
            x[j] = x_init[j]
            tot += x[j]
        out[i, 0] = tot
        for t in range(T):
            F, _ = outflow(x[0], eps[i, t], alpha, x0_clean, x0_c, R)
            x0_next = x[0] + x[1] - F
            for j in range(1, s):
                x[j] = x[j + 1]
            x[s] = A[i, t] + B[i, t]
            x[0] = x0_next
            tot += A[i, t] + B[i, t] - F
            out[i, t + 1] = tot
    return out


def _uncoordinated_l1_numpy(x_init, A, B, eps, true_p):
    n, T = A.shape
    s = x_init.shape[0] - 2
    alpha, x0_clean, x0_c, R = (float(v) for v in true_p)
    x = np.tile(np.asarray(x_init, dtype=float), (n, 1))
    out = np.empty((n, T + 1))
    tot = x.sum(axis=1)
    out[:, 0] = tot
    for t in range(T):
        x0 = x[:, 0]
        F = _flow_vec(x0, alpha, x0_clean, x0_c, R) + _gain_vec(x0, x0_clean, x0_c) * eps[:, t]
        F = np.clip(F, 0.0, x0)
        x0_next = x0 + x[:, 1] - F
        x[:, 1:s] = x[:, 2 : s + 1]
        x[:, s] = A[:, t] + B[:, t]
        x[:, 0] = x0_next
        tot = tot + A[:, t] + B[:, t] - F
        out[:, t + 1] = tot
    return out


def uncoordinated_l1_loop(x_init, A, B, eps, true_p) -> np.ndarray:
    return _uncoordinated_l1_loop(
        np.ascontiguousarray(x_init, dtype=np.float64),
        np.ascontiguousarray(A, dtype=np.float64),
        np.ascontiguousarray(B, dtype=np.float64),
        np.ascontiguousarray(eps, dtype=np.float64),
        np.asarray(true_p, dtype=np.float64),
    )


def uncoordinated_l1_numpy(x_init, A, B, eps, true_p) -> np.ndarray:
    return _uncoordinated_l1_numpy(
        np.asarray(x_init, dtype=float),
        np.asarray(A, dtype=float),
        np.asarray(B, dtype=float),
        np.asarray(eps, dtype=float),
        true_p,
    )


def uncoordinated_l1(x_init, A, B, eps, true_p) -> np.ndarray:
    """l1-norm trajectories (n, T+1) when every CAV follows its own route choice.

    The controlled stream is passed straight through (b_s = B), so the
    virtual queue stays at its initial value.
    """
    if HAVE_NUMBA:
        return uncoordinated_l1_loop(x_init, A, B, eps, true_p)
    return uncoordinated_l1_numpy(x_init, A, B, eps, true_p)


# --- EWMA over rounds -------------------------------------------------------


@jit
def _ewma_rounds_loop(theta, lam, init):
    N, k = theta.shape
    out = np.empty(N)
    carry = (1.0 - lam) ** k
    est = init
    for n in range(N):
        acc = 0.0
        for j in range(k):
            acc += lam * (1.0 - lam) ** (k - 1 - j) * theta[n, j]
        est = acc + carry * est
        out[n] = est
    return out


def _ewma_rounds_numpy(theta, lam, init):
    from scipy.signal import lfilter

    theta = np.asarray(theta, dtype=float)
    k = theta.shape[1]
    w = lam * (1.0 - lam) ** (k - 1 - np.arange(k))
    drive = theta @ w
    carry = (1.0 - lam) ** k
    out, _ = lfilter([1.0], [1.0, -carry], drive, zi=[carry * init])
    return out


def ewma_rounds_loop(theta, lam, init) -> np.ndarray:
    return _ewma_rounds_loop(np.ascontiguousarray(theta, dtype=np.float64), float(lam), float(init))


def ewma_rounds_numpy(theta, lam, init) -> np.ndarray:
    return _ewma_rounds_numpy(theta, float(lam), float(init))


def ewma_rounds(theta, lam, init) -> np.ndarray:
    """Estimate after each round for an (N, k) array of per-round samples.

    Sample j of a round (0-based, in capture order) gets weight
    lam (1-lam)^(k-1-j); the previous estimate keeps (1-lam)^k.
    """
    if HAVE_NUMBA:
        return ewma_rounds_loop(theta, lam, init)
    return ewma_rounds_numpy(theta, lam, init)
