"""Digamma and the stick-breaking expectations used by the variational updates.

All functions accept scalars or numpy arrays. The ``*_all`` helpers work on
stacked stick parameters of shape ``(..., K)`` and are what the training
engine calls; the scalar-facing functions are thin wrappers around them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.57721566490153286061

# Bernoulli-number coefficients B_2n / (2n) of the asymptotic series.
_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_SHIFT = 6

# Positive root of digamma split into hi + lo parts, and the Taylor
# coefficients (-1)^(n+1) zeta(n+1, root) of the expansion around it. Used
# where the shifted series would lose relative accuracy to cancellation.
_ROOT_HI = 1.4616321449683622
_ROOT_LO = 9.549995429965697e-17
_ROOT_RADIUS = 0.2
_ROOT_TAYLOR = (
    0.9676722454476212,
    -0.4427631689835921,
    0.258499760955651,
    -0.16394270544240652,
    0.10782405069126237,
    -0.07219956125645471,
    0.04880428816414311,
    -0.03316112647484736,
    0.022597648232218104,
    -0.01542476590494896,
    0.010538791616612175,
    -0.007204534386356869,
    0.004926781395729853,
    -0.003369801655439328,
    0.002305126326734928,
    -0.0015769367714301972,
    0.0010788252019162967,
    -0.0007380709389960052,
)


def _check_positive(x, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or not np.all(x > 0):
        raise ValueError(f"{name} must be finite and strictly positive")
    return x


def digamma(x):
    """Digamma function for positive arguments.

    Every argument is shifted up by six with the recurrence
    psi(x) = psi(x + 1) - 1/x before the asymptotic series is applied; a
    fixed shift keeps the evaluation branch-free. Close to the positive root
    a Taylor expansion replaces the shifted series.
    """
    x = _check_positive(x)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    shift = 1.0 / x
    for i in range(1, _SHIFT):
        shift += 1.0 / (x + i)
    y = x + _SHIFT
    inv2 = 1.0 / (y * y)
    series = np.zeros_like(y)
    for coef in reversed(_ASYMPTOTIC):
        series = (series + coef) * inv2
    out = np.log(y) - 0.5 / y - series - shift
    h = (x - _ROOT_HI) - _ROOT_LO
    near_root = np.abs(h) < _ROOT_RADIUS
    if near_root.any():
        hr = h[near_root]
        taylor = np.zeros_like(hr)
        for coef in reversed(_ROOT_TAYLOR):
            taylor = (taylor + coef) * hr
        out[near_root] = taylor
    return float(out[0]) if scalar else out


def expected_log_v(tau1, tau2):
    """E[log v] for v ~ Beta(tau1, tau2)."""
    tau1 = _check_positive(tau1, "tau1")
    tau2 = _check_positive(tau2, "tau2")
    return digamma(tau1) - digamma(tau1 + tau2)


def expected_log_1mv(tau1, tau2):
    """E[log(1 - v)] for v ~ Beta(tau1, tau2)."""
    tau1 = _check_positive(tau1, "tau1")
    tau2 = _check_positive(tau2, "tau2")
    return digamma(tau2) - digamma(tau1 + tau2)


def _as_tau(tau):
    tau = np.asarray(tau, dtype=np.float64)
    if tau.ndim < 2 or tau.shape[-1] != 2:
        raise ValueError("tau must have shape (..., K, 2)")
    _check_positive(tau, "tau")
    return tau


def stick_log_active_all(tau, literal=False):
    """Cumulative E[log prod_{t<=k} v_t] for every k along the last stick axis.

    ``tau`` has shape ``(..., K, 2)``. With ``literal=True`` each summand is
    psi(tau_t1) - psi(tau_t2) instead of the Beta log-expectation.
    """
    tau = _as_tau(tau)
    psi1 = digamma(tau[..., 0])
    if literal:
        terms = psi1 - digamma(tau[..., 1])
    else:
        terms = psi1 - digamma(tau[..., 0] + tau[..., 1])
    return np.cumsum(terms, axis=-1)


def stick_log_active(tau, k, literal=False):
    """Sum over the first ``k`` sticks of E[log v_t] (``k`` is 1-based)."""
    tau = _as_tau(tau)
    if tau.ndim != 2:
        raise ValueError("tau must have shape (K, 2)")
    if not 1 <= k <= tau.shape[0]:
        raise ValueError(f"k={k} out of range 1..{tau.shape[0]}")
    return float(stick_log_active_all(tau[:k], literal=literal)[-1])


def stick_raw_scores(tau):
    """Unnormalized log weights of the multinomial bound, shape ``(..., K)``.

    raw_s = psi(tau_s2) + sum_{t<s} psi(tau_t1) - sum_{t<=s} psi(tau_t1 + tau_t2).
    These do not depend on the truncation level m; q_m. is their softmax
    over the first m entries.
    """
    tau = _as_tau(tau)
    psi1 = digamma(tau[..., 0])
    psi2 = digamma(tau[..., 1])
    psi12 = digamma(tau[..., 0] + tau[..., 1])
    before = np.cumsum(psi1, axis=-1) - psi1
    return psi2 + before - np.cumsum(psi12, axis=-1)


def stick_bounds_all(tau):
    """Bound values and q weights for every level m = 1..K at once.

    Returns ``(values, q)`` where ``values[..., m-1]`` lower-bounds
    E[log(1 - prod_{t<=m} v_t)] and ``q[..., m-1, s-1]`` is q_ms (zero for
    s > m). At the optimal q the bound equals a running log-sum-exp of the
    raw scores.
    """
    raw = stick_raw_scores(tau)
    values = np.logaddexp.accumulate(raw, axis=-1)
    k = raw.shape[-1]
    logq = raw[..., None, :] - values[..., :, None]
    # Entries s > m are outside the support; mask before exponentiating so
    # large raw scores there cannot overflow.
    q = np.exp(np.where(np.tri(k, k, dtype=bool), logq, -np.inf))
    return values, q


@dataclass(frozen=True)
class StickBound:
    q: np.ndarray
    value: float

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        if q.ndim != 1 or q.size == 0:
            raise ValueError("q must be a non-empty vector")
        if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-12:
            raise ValueError("q must be a probability vector")
        if not self.value <= 0.0:
            raise ValueError("bound value must be non-positive")


def stick_bound(tau, m):
    """Multinomial lower bound on E[log(1 - prod_{t<=m} v_t)].

    The bound is evaluated term by term from the optimal q rather than via
    the log-sum-exp shortcut, so it doubles as a check on ``stick_bounds_all``.
    """
    tau = _as_tau(tau)
    if tau.ndim != 2:
        raise ValueError("tau must have shape (K, 2)")
    if not 1 <= m <= tau.shape[0]:
        raise ValueError(f"m={m} out of range 1..{tau.shape[0]}")
    tau = tau[:m]
    raw = stick_raw_scores(tau)
    logq = raw - raw.max()
    q = np.exp(logq)
    q /= q.sum()

    psi1 = digamma(tau[:, 0])
    psi2 = digamma(tau[:, 1])
    psi12 = digamma(tau[:, 0] + tau[:, 1])
    # tail[t] = sum_{s >= t} q_s
    tail = np.cumsum(q[::-1])[::-1]
    value = np.dot(q, psi2)
    value += np.dot(tail[1:], psi1[:-1])
    value -= np.dot(tail, psi12)
    nz = q > 0
    value -= np.dot(q[nz], np.log(q[nz]))
    # Exact at m=1 but rounding may push it a hair above zero for huge tau.
    return StickBound(q=q, value=min(float(value), 0.0))
