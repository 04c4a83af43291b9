"""Posterior inference for unlabeled bags with frozen appearances.

Test bags run the stick and assignment updates only, with every factor
allowed (effective labels all 1). Bags are stacked and updated together; a
bag stops updating once its own objective has converged, so a bag's result
does not depend on which other bags share the batch.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .data import Hyperparams, ImageBag, Model, PosteriorSummary, ValidationError
from .engine import VariationalState, _stack, image_objectives, local_sweep

DEFAULT_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 100
INIT_NU = 0.1


def init_test_state(
    model: Model,
    bags: Sequence[ImageBag],
    hyper: Optional[Hyperparams] = None,
    seed: Optional[int] = None,
    eta_literal: bool = False,
) -> VariationalState:
    """Stacked state for ``bags`` with the model's appearances copied in.

    nu starts at 0.1 everywhere, or at seeded Uniform(0.05, 0.15) jitter when
    ``seed`` is given.
    """
    if not bags:
        raise ValidationError("no bags to infer")
    hyper = hyper or model.hyper
    layout = model.layout
    x, offsets = _stack(bags, layout)
    k = layout.k_max
    if seed is None:
        nu = np.full((x.shape[0], k), INIT_NU)
    else:
        nu = np.random.default_rng(seed).uniform(0.05, 0.15, size=(x.shape[0], k))
    tau = np.empty((len(bags), k, 2))
    tau[..., 0] = hyper.alpha
    tau[..., 1] = 1.0
    phi = model.phi.copy()
    return VariationalState(
        x=x,
        offsets=offsets,
        labels=np.ones((len(bags), k)),
        tau=tau,
        nu=nu,
        phi=phi,
        phi_var=model.phi_var.copy(),
        resid=x - nu @ phi,
        layout=layout,
        hyper=hyper,
        eta_literal=eta_literal,
    )


def run_inference(
    state: VariationalState,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> VariationalState:
    """Sweep until every bag's objective changes by less than ``tol`` relative.

    ``state.objective_trace`` receives one (M,) array of per-bag objectives
    at initialization and after every sweep.
    """
    prev = image_objectives(state)
    state.objective_trace.append(prev)
    for _ in range(max_sweeps):
        if not state.active.any():
            break
        terms = local_sweep(state)
        cur = image_objectives(state, terms)
        state.objective_trace.append(cur)
        done = np.abs(cur - prev) <= tol * np.abs(prev)
        state.active &= ~done
        prev = cur
    return state


def summaries(state: VariationalState, bags: Sequence[ImageBag]) -> list[PosteriorSummary]:
    return [
        PosteriorSummary(tau=state.tau[i].copy(), nu=state.nu[state.image_slice(i)].copy(), id=bag.id)
        for i, bag in enumerate(bags)
    ]


def _infer_chunk(model, bags, hyper, tol, max_sweeps, seed, eta_literal):
    state = init_test_state(model, bags, hyper, seed=seed, eta_literal=eta_literal)
    run_inference(state, tol=tol, max_sweeps=max_sweeps)
    return summaries(state, bags)


def resolve_threads(threads: Optional[int]) -> int:
    if threads is None:
        threads = int(os.environ.get("SIBP_THREADS", "1"))
    return max(1, threads)


def infer_batch(
    model: Model,
    bags: Sequence[ImageBag],
    hyper: Optional[Hyperparams] = None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    seed: Optional[int] = None,
    eta_literal: bool = False,
    threads: Optional[int] = 1,
) -> list[PosteriorSummary]:
    """Infer posteriors for many bags; labels on the bags are ignored.

    With ``threads > 1`` the bags are split into contiguous chunks inferred
    concurrently. Without a seed the result per bag is the same for any
    chunking.
    """
    if not bags:
        return []
    threads = resolve_threads(threads)
    if threads == 1 or len(bags) < 2:
        return _infer_chunk(model, bags, hyper, tol, max_sweeps, seed, eta_literal)
    chunks = [list(c) for c in np.array_split(np.arange(len(bags)), min(threads, len(bags)))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(
            lambda idx: _infer_chunk(model, [bags[i] for i in idx], hyper, tol, max_sweeps, seed, eta_literal),
            chunks,
        )
        return [post for part in parts for post in part]


def infer(
    model: Model,
    bag: ImageBag,
    hyper: Optional[Hyperparams] = None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    seed: Optional[int] = None,
    eta_literal: bool = False,
) -> PosteriorSummary:
    """Posterior summary for a single bag."""
    return _infer_chunk(model, [bag], hyper, tol, max_sweeps, seed, eta_literal)[0]
