"""Truncated mean-field coordinate ascent for the weakly supervised stacked IBP.

All images are stacked into one patch matrix so every update is a handful of
vectorized numpy operations: per sweep the cost is O(M N D K_max) for the
appearance and assignment passes plus O(M K_max) for the sticks.

The assignment pass updates one factor at a time across all patches. Patches
do not interact in that pass (each eta depends only on its own row of nu and
residual), so this is the same Gauss-Seidel order as looping patch by patch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import betaln, expit

from .data import FactorLayout, Hyperparams, ImageBag, Model, ValidationError
from .special import digamma

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class VariationalState:
    """Variational parameters over a stacked corpus.

    Patches of image ``i`` occupy rows ``offsets[i]:offsets[i+1]`` of ``x``,
    ``nu`` and ``resid``. ``labels`` is the effective (M, K) mask, already 1
    on background factors. ``active`` selects which images the stick and
    assignment updates touch; frozen images keep their values.
    """

    x: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray
    tau: np.ndarray
    nu: np.ndarray
    phi: np.ndarray
    phi_var: np.ndarray
    resid: np.ndarray
    layout: FactorLayout
    hyper: Hyperparams
    eta_literal: bool = False
    active: Optional[np.ndarray] = None
    objective_trace: list = field(default_factory=list)

    def __post_init__(self):
        self.image_of = np.repeat(np.arange(self.n_images), np.diff(self.offsets))
        self.n_per_image = np.diff(self.offsets).astype(np.float64)
        self.patch_labels = self.labels[self.image_of]
        self.unmasked = bool(np.all(self.labels == 1))
        self._stick_cache = None
        if self.active is None:
            self.active = np.ones(self.n_images, dtype=bool)

    @property
    def n_images(self) -> int:
        return len(self.offsets) - 1

    @property
    def k_max(self) -> int:
        return self.layout.k_max

    def image_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def stick_terms(self) -> "StickTerms":
        """Stick terms for the current tau, cached until tau changes."""
        cached = self._stick_cache
        if cached is None or not np.array_equal(cached[0], self.tau):
            cached = (self.tau.copy(), stick_terms(self.tau))
            self._stick_cache = cached
        return cached[1]

    def counts(self) -> np.ndarray:
        """Per-image expected activation counts sum_j nu_jk, shape (M, K)."""
        return np.add.reduceat(self.nu, self.offsets[:-1], axis=0)

    def recompute_residuals(self) -> np.ndarray:
        return self.x - self.nu @ self.phi

    def copy(self) -> "VariationalState":
        return VariationalState(
            x=self.x,
            offsets=self.offsets,
            labels=self.labels,
            tau=self.tau.copy(),
            nu=self.nu.copy(),
            phi=self.phi.copy(),
            phi_var=self.phi_var.copy(),
            resid=self.resid.copy(),
            layout=self.layout,
            hyper=self.hyper,
            eta_literal=self.eta_literal,
            active=self.active.copy(),
            objective_trace=list(self.objective_trace),
        )

    def to_model(self) -> Model:
        return Model(layout=self.layout, phi=self.phi.copy(), phi_var=self.phi_var.copy(), hyper=self.hyper)


def _stack(bags: Sequence[ImageBag], layout: FactorLayout):
    for bag in bags:
        bag.check_layout(layout)
    sizes = [bag.n_patches for bag in bags]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    x = np.concatenate([bag.patches for bag in bags], axis=0)
    return x, offsets


def init_state(
    bags: Sequence[ImageBag],
    layout: FactorLayout,
    hyper: Hyperparams,
    eta_literal: bool = False,
) -> VariationalState:
    """Training initialization: sticks at the prior, nu ~ 0.1 with seeded
    jitter under the label mask, small random appearances."""
    if not bags:
        raise ValidationError("training set is empty")
    for bag in bags:
        if bag.labels is None:
            raise ValidationError(f"bag {bag.id!r} has no labels; training needs labeled bags")
    x, offsets = _stack(bags, layout)
    labels = np.stack([layout.effective_labels(bag.labels) for bag in bags])
    k = layout.k_max
    rng = np.random.default_rng(hyper.seed)
    image_of = np.repeat(np.arange(len(bags)), np.diff(offsets))
    nu = labels[image_of] * rng.uniform(0.05, 0.15, size=(x.shape[0], k))
    phi = rng.normal(0.0, 0.1 * hyper.sigma_a, size=(k, layout.d))
    tau = np.empty((len(bags), k, 2))
    tau[..., 0] = hyper.alpha
    tau[..., 1] = 1.0
    return VariationalState(
        x=x,
        offsets=offsets,
        labels=labels,
        tau=tau,
        nu=nu,
        phi=phi,
        phi_var=np.full(k, hyper.sigma_a**2),
        resid=x - nu @ phi,
        layout=layout,
        hyper=hyper,
        eta_literal=eta_literal,
    )


def update_appearance(state: VariationalState, k: int) -> None:
    """Closed-form Gaussian update of phi_k and phi_var_k; keeps the residual cache in sync."""
    h = state.hyper
    nu_k = state.nu[:, k]
    phi_k = state.phi[k]
    precision = 1.0 / h.sigma_a**2 + nu_k.sum() / h.sigma**2
    var = 1.0 / precision
    # sum_j nu_jk (X_j - sum_{l != k} nu_jl phi_l)
    target = nu_k @ state.resid + (nu_k @ nu_k) * phi_k
    new_phi = target * (var / h.sigma**2)
    state.resid -= np.outer(nu_k, new_phi - phi_k)
    state.phi[k] = new_phi
    state.phi_var[k] = var


class StickTerms(NamedTuple):
    """Digamma-derived quantities of stacked sticks, each shape (M, K)."""

    psi1: np.ndarray
    psi2: np.ndarray
    psi12: np.ndarray
    raw: np.ndarray  # unnormalized log q weights
    bound: np.ndarray  # multinomial bound on E[log(1 - prod_{t<=m} v_t)]

    @property
    def log_active(self) -> np.ndarray:
        """E[log prod_{t<=k} v_t]."""
        return np.cumsum(self.psi1 - self.psi12, axis=1)


def stick_terms(tau: np.ndarray) -> StickTerms:
    """Evaluate ``StickTerms`` for ``tau`` of shape (M, K, 2)."""
    psi = digamma(np.stack([tau[..., 0], tau[..., 1], tau[..., 0] + tau[..., 1]]))
    psi1, psi2, psi12 = psi
    raw = psi2 + (np.cumsum(psi1, axis=1) - psi1) - np.cumsum(psi12, axis=1)
    return StickTerms(psi1, psi2, psi12, raw, np.logaddexp.accumulate(raw, axis=1))


def _suffix_sum(a: np.ndarray) -> np.ndarray:
    return np.cumsum(a[:, ::-1], axis=1)[:, ::-1]


def stick_updates(
    tau: np.ndarray,
    counts: np.ndarray,
    n_patches: np.ndarray,
    alpha: float,
    terms: Optional[StickTerms] = None,
) -> np.ndarray:
    """New stick parameters for stacked images from the current ones.

    ``tau`` (M, K, 2), ``counts`` (M, K) = sum_j nu_jm, ``n_patches`` (M,).
    Every q_m. is taken from the incoming ``tau``. Because q_ms =
    exp(raw_s - bound_m), the double sums reduce to suffix sums:
    sum_{s=k+1}^{m} q_ms = 1 - exp(bound_k - bound_m), giving O(K) per image.
    The suffix sums of w_m exp(-bound_m) are kept in the log domain so every
    exponent stays below log(sum_m w_m).
    """
    if terms is None:
        terms = stick_terms(tau)
    raw, bound = terms.raw, terms.bound
    spare = n_patches[:, None] - counts  # w_m = N_i - sum_j nu_jm
    with np.errstate(divide="ignore"):
        log_scaled = np.log(np.maximum(spare, 0.0)) - bound
    # log sum_{m >= k} w_m exp(-bound_m)
    log_from_k = np.logaddexp.accumulate(log_scaled[:, ::-1], axis=1)[:, ::-1]
    log_after_k = np.empty_like(log_from_k)
    log_after_k[:, :-1] = log_from_k[:, 1:]
    log_after_k[:, -1] = -np.inf
    spare_after = _suffix_sum(spare) - spare
    out = np.empty_like(tau)
    covered = np.maximum(spare_after - np.exp(bound + log_after_k), 0.0)
    out[..., 0] = alpha + _suffix_sum(counts) + covered
    out[..., 1] = 1.0 + np.exp(raw + log_from_k)
    return out


def update_sticks(state: VariationalState, i: Optional[int] = None) -> StickTerms:
    """Update tau for image ``i``, or for every active image when ``i`` is None.

    Returns the stick terms of the updated tau.
    """
    new = stick_updates(state.tau, state.counts(), state.n_per_image, state.hyper.alpha, state.stick_terms())
    if i is None:
        state.tau[state.active] = new[state.active]
    else:
        state.tau[i] = new[i]
    return state.stick_terms()


def assignment_prior(state: VariationalState, terms: Optional[StickTerms] = None) -> np.ndarray:
    """Stick part of eta for every (image, factor), shape (M, K)."""
    if terms is None:
        terms = state.stick_terms()
    if state.eta_literal:
        active = np.cumsum(terms.psi1 - terms.psi2, axis=1)
    else:
        active = terms.log_active
    return active - terms.bound


def _assignment_eta(state: VariationalState, k: int, rows, prior_rows) -> np.ndarray:
    inv = 1.0 / state.hyper.sigma**2
    phi_k = state.phi[k]
    sq = phi_k @ phi_k
    # phi_k . (X_j - sum_{l != k} nu_jl phi_l), the residual cache holds the full sum
    eta = state.resid[rows] @ phi_k
    eta += state.nu[rows, k] * sq
    eta *= inv
    eta += prior_rows - 0.5 * inv * (state.layout.d * state.phi_var[k] + sq)
    return eta


def update_assignments(state: VariationalState, k: int, prior: Optional[np.ndarray] = None) -> None:
    """Update nu_{.k} for every patch of every active image.

    ``prior`` is the (M, K) output of ``assignment_prior``; computed when omitted.
    """
    if prior is None:
        prior = assignment_prior(state)
    if state.active.all():
        rows, img = slice(None), state.image_of
    else:
        rows = state.active[state.image_of]
        img = state.image_of[rows]
    eta = _assignment_eta(state, k, rows, prior[:, k][img])
    new = expit(eta)
    if not state.unmasked:
        new *= state.patch_labels[rows, k]
    delta = new - state.nu[rows, k]
    state.nu[rows, k] = new
    state.resid[rows] -= np.outer(delta, state.phi[k])


def update_assignment(state: VariationalState, i: int, j: int, k: int) -> float:
    """Update a single nu_jk of image ``i`` (patch ``j`` local to the image)."""
    row = int(state.offsets[i]) + j
    if not state.offsets[i] <= row < state.offsets[i + 1]:
        raise IndexError(f"patch {j} out of range for image {i}")
    prior = assignment_prior(state)
    eta = _assignment_eta(state, k, slice(row, row + 1), prior[i, k])
    new = float(state.labels[i, k] * expit(eta[0]))
    delta = new - state.nu[row, k]
    state.nu[row, k] = new
    state.resid[row] -= delta * state.phi[k]
    return new


def bernoulli_entropy(p: np.ndarray) -> np.ndarray:
    """Elementwise entropy of Bernoulli(p), 0 at p in {0, 1}."""
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
        log_q = np.log1p(-p)
    log_p[p == 0.0] = 0.0
    log_q[p == 1.0] = 0.0
    return -(p * log_p + (1.0 - p) * log_q)


def image_objectives(state: VariationalState, terms: Optional[StickTerms] = None) -> np.ndarray:
    """Per-image part of the surrogate objective (stick, assignment and
    likelihood terms plus the stick and assignment entropies), shape (M,)."""
    h = state.hyper
    d = state.layout.d
    if terms is None:
        terms = state.stick_terms()
    tau1, tau2 = state.tau[..., 0], state.tau[..., 1]
    psi1, psi2, psi12 = terms.psi1, terms.psi2, terms.psi12
    counts = state.counts()
    spare = state.n_per_image[:, None] - counts

    log_p_v = math.log(h.alpha) + (h.alpha - 1.0) * (psi1 - psi12)
    log_p_z = counts * terms.log_active + spare * terms.bound
    entropy_v = betaln(tau1, tau2) - (tau1 - 1.0) * psi1 - (tau2 - 1.0) * psi2 + (tau1 + tau2 - 2.0) * psi12
    per_image = (log_p_v + log_p_z + entropy_v).sum(axis=1)

    nu = state.nu
    sq = (state.phi**2).sum(axis=1)
    expected_sq = (
        (state.resid**2).sum(axis=1)
        + (nu * (1.0 - nu)) @ sq
        + d * (nu @ state.phi_var)
    )
    log_p_x = -0.5 * d * (_LOG_2PI + 2.0 * math.log(h.sigma)) - expected_sq / (2.0 * h.sigma**2)
    entropy_z = bernoulli_entropy(nu).sum(axis=1)
    per_patch = log_p_x + entropy_z
    return per_image + np.add.reduceat(per_patch, state.offsets[:-1])


def appearance_objective(state: VariationalState) -> float:
    """E[log p(A)] + H[q(A)]."""
    h = state.hyper
    d = state.layout.d
    sq = (state.phi**2).sum(axis=1)
    log_p_a = -0.5 * d * (_LOG_2PI + 2.0 * math.log(h.sigma_a)) - (d * state.phi_var + sq) / (2.0 * h.sigma_a**2)
    entropy_a = 0.5 * d * (_LOG_2PI + 1.0 + np.log(state.phi_var))
    return float((log_p_a + entropy_a).sum())


def surrogate_objective(state: VariationalState, terms: Optional[StickTerms] = None) -> float:
    """Evidence lower bound with the multinomial stick bound substituted in."""
    return float(image_objectives(state, terms).sum()) + appearance_objective(state)


def local_sweep(state: VariationalState) -> StickTerms:
    """Stick then assignment updates for every active image (appearance frozen)."""
    terms = update_sticks(state)
    prior = assignment_prior(state, terms)
    for k in range(state.k_max):
        update_assignments(state, k, prior)
    return terms


def sweep(state: VariationalState) -> float:
    """One Gauss-Seidel sweep: appearances, then sticks, then assignments.

    Appends the new objective to ``state.objective_trace`` and returns it.
    """
    for k in range(state.k_max):
        update_appearance(state, k)
    terms = local_sweep(state)
    value = surrogate_objective(state, terms)
    state.objective_trace.append(value)
    return value


def _converged(prev: float, cur: float, tol: float) -> bool:
    if math.isinf(tol):
        return True
    return abs(cur - prev) <= tol * max(abs(prev), 1e-300)


def fit(
    bags: Sequence[ImageBag],
    layout: FactorLayout,
    hyper: Hyperparams,
    eta_literal: bool = False,
    callback: Optional[Callable[[int, float], None]] = None,
) -> VariationalState:
    """Like ``train`` but returns the full variational state."""
    state = init_state(bags, layout, hyper, eta_literal=eta_literal)
    state.objective_trace.append(surrogate_objective(state))
    for it in range(1, hyper.max_sweeps + 1):
        prev = state.objective_trace[-1]
        cur = sweep(state)
        log.info("sweep %d objective %.10g", it, cur)
        if callback is not None:
            callback(it, cur)
        if _converged(prev, cur, hyper.tol):
            break
    return state


def train(
    bags: Sequence[ImageBag],
    layout: FactorLayout,
    hyper: Hyperparams,
    eta_literal: bool = False,
    callback: Optional[Callable[[int, float], None]] = None,
) -> tuple[Model, list]:
    """Run sweeps until the relative objective change drops below ``hyper.tol``
    or ``hyper.max_sweeps`` is reached.

    The returned trace starts with the objective at initialization, followed
    by one value per sweep.
    """
    state = fit(bags, layout, hyper, eta_literal=eta_literal, callback=callback)
    return state.to_model(), list(state.objective_trace)
