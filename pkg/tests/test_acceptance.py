"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line (shown in the "acceptance criteria"
section of the pytest summary) and then asserts the criterion at its stated
tolerance.
"""

import math
import time

import numpy as np
import pytest

from wssibp.data import FactorLayout, Hyperparams
from wssibp.engine import (
    appearance_objective,
    fit,
    image_objectives,
    init_state,
    stick_updates,
    sweep,
    update_appearance,
)
from wssibp.infer import infer, infer_batch
from wssibp.metrics import ap_at_t, mar, pr_map
from wssibp.sampler import SamplerParams, bag_from_factors, sample_dataset, sample_well_separated
from wssibp.special import digamma, stick_bound
from wssibp.tasks import annotate_given_names, query

from conftest import PRESET_LAYOUT, PRESET_PARAMS, record_criterion
from test_engine import make_state
from test_metrics import naive_ap, naive_ap_at_t, naive_average_recall

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def preset_run():
    """100 sweeps on the standard preset (seed 7), timed."""
    bags, truth = sample_dataset(PRESET_LAYOUT, PRESET_PARAMS, seed=7)
    start = time.perf_counter()
    state = fit(bags, PRESET_LAYOUT, Hyperparams(max_sweeps=100, tol=0.0, seed=7))
    return state, time.perf_counter() - start


@pytest.fixture(scope="module")
def converged_preset():
    bags, _ = sample_dataset(PRESET_LAYOUT, PRESET_PARAMS, seed=7)
    return fit(bags, PRESET_LAYOUT, Hyperparams(max_sweeps=1000, tol=1e-13, seed=7))


def test_criterion_01_monotone_ascent(preset_run):
    state, seconds = preset_run
    trace = np.array(state.objective_trace)
    rel_steps = np.diff(trace) / np.abs(trace[:-1])
    ok = len(trace) == 101 and rel_steps.min() >= -1e-8 and seconds < 60.0
    record_criterion(
        1, ok, f"100 sweeps, worst relative step {rel_steps.min():.3e} (>= -1e-8), runtime {seconds:.1f} s (< 60 s)"
    )
    assert ok


def test_criterion_02_stick_bound_validity():
    rng = np.random.default_rng(2024)
    draws = 1_000_000
    worst_margin, worst_norm, worst_exact = -math.inf, 0.0, 0.0
    failures = 0
    for _ in range(100):
        m = int(rng.integers(1, 21))
        tau = rng.uniform(0.2, 10.0, size=(m, 2))
        sb = stick_bound(tau, m)
        log_prod = np.zeros(draws)
        for t1, t2 in tau:
            log_prod += np.log(rng.beta(t1, t2, size=draws))
        samples = np.log(-np.expm1(log_prod))
        mean, se = samples.mean(), samples.std(ddof=1) / math.sqrt(draws)
        margin = sb.value - (mean + 3 * se)
        worst_margin = max(worst_margin, margin)
        failures += margin > 0
        worst_norm = max(worst_norm, abs(sb.q.sum() - 1.0))
        exact = digamma(tau[0, 1]) - digamma(tau[0].sum())
        worst_exact = max(worst_exact, abs(stick_bound(tau, 1).value - exact))
    ok = failures == 0 and worst_norm < 1e-12 and worst_exact < 1e-12
    record_criterion(
        2,
        ok,
        f"{failures}/100 bound violations (worst bound - (MC + 3SE) = {worst_margin:.3e}), "
        f"max |sum q - 1| {worst_norm:.1e}, max m=1 error {worst_exact:.1e}",
    )
    assert ok


def test_criterion_03_closed_form_parity():
    new = stick_updates(np.array([[[1.0, 1.0]]]), np.array([[0.4]]), np.array([1.0]), alpha=1.5)
    layout = FactorLayout(k_o=1, k_a=0, k_max=2, d=1)
    state = make_state(
        [np.array([[2.0]])], [np.array([[1.0, 0.0]])], [[0.0], [0.0]], [1.0, 1.0],
        [[[1.0, 1.0], [1.0, 1.0]]], [[1.0, 1.0]], layout, Hyperparams(sigma=1.0, sigma_a=1.0),
    )
    update_appearance(state, 0)
    errors = [
        abs(new[0, 0, 0] - 1.9),
        abs(new[0, 0, 1] - 1.6),
        abs(state.phi[0, 0] - 1.0),
        abs(state.phi_var[0] - 0.5),
    ]
    ok = max(errors) < 1e-12
    record_criterion(
        3,
        ok,
        f"tau = ({new[0, 0, 0]:.15g}, {new[0, 0, 1]:.15g}), phi = {state.phi[0, 0]:.15g}, "
        f"Phi = {state.phi_var[0]:.15g}; max error {max(errors):.1e}",
    )
    assert ok


def test_criterion_04_factor_recovery():
    counts = []
    for seed in (1, 2, 3, 4, 5):
        bags, truth = sample_well_separated(PRESET_LAYOUT, PRESET_PARAMS, seed=seed)
        state = fit(bags, PRESET_LAYOUT, Hyperparams(seed=seed))
        lay = PRESET_LAYOUT
        phi, planted = state.phi[: lay.k_oa], truth.a_true[: lay.k_oa]
        cos = np.sum(phi * planted, axis=1) / (np.linalg.norm(phi, axis=1) * np.linalg.norm(planted, axis=1))
        counts.append(int(np.sum(cos >= 0.9)))
    ok = all(c >= 9 for c in counts)
    record_criterion(4, ok, f"annotated factors with cosine >= 0.9 per seed: {counts} (need >= 9 of 10 each)")
    assert ok


def test_criterion_05_association_disambiguation():
    bags, truth = sample_well_separated(PRESET_LAYOUT, PRESET_PARAMS, seed=7)
    model = fit(bags, PRESET_LAYOUT, Hyperparams(seed=7)).to_model()
    rng = np.random.default_rng(55)
    test_bags, plants = [], []
    for b in range(100):
        o1, o2 = (int(v) for v in rng.choice(4, 2, replace=False))
        a1, a2 = (int(v) for v in rng.choice(np.arange(4, 10), 2, replace=False))
        background = [[10 + int(v)] for v in rng.integers(3, size=2)]
        bag, _ = bag_from_factors(truth.a_true, [[o1, a1], [o2, a2], *background], PRESET_PARAMS.sigma, rng, f"t{b}")
        test_bags.append(bag)
        plants.append((o1, a1, o2, a2))
    correct = 0
    for post, (o1, a1, o2, a2) in zip(infer_batch(model, test_bags), plants):
        first = annotate_given_names(post, PRESET_LAYOUT, o1).attributes[0][0]
        second = annotate_given_names(post, PRESET_LAYOUT, o2).attributes[0][0]
        correct += first == a1 and second == a2
    ok = correct >= 85
    record_criterion(5, ok, f"{correct}/100 bags with both object-attribute pairs correct (need >= 85)")
    assert ok


def test_criterion_06_label_masking(preset_run):
    state, _ = preset_run
    masked = state.patch_labels == 0
    violations = int(np.count_nonzero(state.nu[masked]))
    ok = violations == 0 and masked.sum() > 0
    record_criterion(6, ok, f"{violations} violations over {int(masked.sum())} masked (patch, factor) entries")
    assert ok


def _sweep_seconds(configs, rounds=30, warmup=3):
    """Minimum per-sweep wall time of each config, with sweeps interleaved across configs."""
    states = []
    for layout, params in configs:
        bags, _ = sample_dataset(layout, params, seed=7)
        state = init_state(bags, layout, Hyperparams(seed=7))
        for _ in range(warmup):
            sweep(state)
        states.append(state)
    best = [math.inf] * len(states)
    for _ in range(rounds):
        for n, state in enumerate(states):
            start = time.perf_counter()
            sweep(state)
            best[n] = min(best[n], time.perf_counter() - start)
    return best


def test_criterion_07_complexity_contract():
    lay, par = PRESET_LAYOUT, PRESET_PARAMS
    configs = {
        "base": (lay, par),
        "M": (lay, SamplerParams(m=2 * par.m, n=par.n, k_bg=par.k_bg, label_rate=par.label_rate)),
        "N": (lay, SamplerParams(m=par.m, n=2 * par.n, k_bg=par.k_bg, label_rate=par.label_rate)),
        "D": (FactorLayout(lay.k_o, lay.k_a, lay.k_max, 2 * lay.d), par),
        "K_max": (FactorLayout(lay.k_o, lay.k_a, 2 * lay.k_max, lay.d), par),
    }
    times = dict(zip(configs, _sweep_seconds(list(configs.values()))))
    ratios = {name: times[name] / times["base"] for name in ("M", "N", "D", "K_max")}
    ok = all(1.6 <= r <= 2.6 for r in ratios.values())
    detail = ", ".join(f"{name} x{r:.2f}" for name, r in ratios.items())
    record_criterion(7, ok, f"per-sweep time ratios under doubling: {detail} (need each in [1.6, 2.6]); base sweep {1e3 * times['base']:.1f} ms")
    assert ok, detail


def test_criterion_08_retrieval_sanity():
    model_mar, random_mar = [], []
    for seed in range(5):
        bags, truth = sample_dataset(
            PRESET_LAYOUT, SamplerParams(m=700, n=10, k_bg=3, label_rate=0.5), seed=100 + seed
        )
        model = fit(bags[:200], PRESET_LAYOUT, Hyperparams(seed=seed)).to_model()
        corpus_bags = bags[200:]
        corpus = [(b.id, p) for b, p in zip(corpus_bags, infer_batch(model, corpus_bags))]
        index = {image_id: n for n, image_id in enumerate(truth.ids)}
        rng = np.random.default_rng([seed, 8])
        ranked, shuffled = [], []
        for _ in range(300):
            obj, attr = int(rng.integers(PRESET_LAYOUT.k_o)), int(rng.integers(PRESET_LAYOUT.k_o, PRESET_LAYOUT.k_oa))
            flags = [int(truth.colocated(index[i], obj, [attr])) for i, _ in query(corpus, PRESET_LAYOUT, obj, [attr])]
            ranked.append(flags)
            shuffled.append(list(rng.permutation(flags)))
        model_mar.append(mar(ranked))
        random_mar.append(mar(shuffled))
    avg_model, avg_random = float(np.mean(model_mar)), float(np.mean(random_mar))
    ok = avg_model >= 2 * avg_random
    record_criterion(8, ok, f"MAR {avg_model:.4f} vs random {avg_random:.4f} (ratio {avg_model / avg_random:.1f}, need >= 2)")
    assert ok


def test_criterion_09_metric_oracles():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 40))
        scores = rng.integers(0, 6, size=n) / 5.0
        truth = rng.integers(0, 2, size=n)
        truth[rng.integers(n)] = 1
        worst = max(worst, abs(pr_map(scores, truth) - naive_ap(list(scores), list(truth))))

        t = int(rng.integers(1, 6))
        preds = [(int(rng.integers(3)), [int(a) for a in rng.permutation(np.arange(4, 10))[: int(rng.integers(1, 7))]]) for _ in range(5)]
        gold = [(int(rng.integers(3)), {int(a) for a in rng.choice(np.arange(4, 10), int(rng.integers(0, 4)), replace=False)}) for _ in range(5)]
        worst = max(worst, abs(ap_at_t(preds, gold, t) - naive_ap_at_t(preds, gold, t)))

        rankings = [list(rng.integers(0, 2, size=int(rng.integers(1, 25)))) for _ in range(3)]
        grid = np.arange(1, 11) / 10.0
        expect = float(np.mean([naive_average_recall(r, grid) for r in rankings]))
        worst = max(worst, abs(mar(rankings, grid) - expect))
    hand = pr_map([0.9, 0.5, 0.2], [1, 0, 1])
    ok = worst < 1e-12 and hand == (1.0 + 2.0 / 3.0) / 2.0 and round(hand, 4) == 0.8333
    record_criterion(9, ok, f"max deviation from naive oracles {worst:.1e} over 3 x 100 instances; AP(+,-,+) = {hand:.4f}")
    assert ok


def test_criterion_10_local_optimality(converged_preset):
    state = converged_preset
    state.resid = state.recompute_residuals()
    rng = np.random.default_rng(10)
    base_images = image_objectives(state)

    # Entries with L_k = 0 are pinned to zero by the label constraint, so the
    # perturbations are drawn from the feasible (unmasked) entries.
    free = np.argwhere(state.patch_labels == 1)
    nu_gain = -math.inf
    for row, k in free[rng.choice(len(free), size=100, replace=False)]:
        i = state.image_of[row]
        for step in (-1e-3, 1e-3):
            trial = state.copy()
            trial.nu[row, k] = np.clip(trial.nu[row, k] + step, 0.0, 1.0)
            trial.resid = trial.recompute_residuals()
            nu_gain = max(nu_gain, image_objectives(trial)[i] - base_images[i])

    def total(s):
        return math.fsum(image_objectives(s)) + appearance_objective(s)

    base = total(state)
    phi_gain = -math.inf
    for _ in range(10):
        k, c = int(rng.integers(state.k_max)), int(rng.integers(state.layout.d))
        for step in (-1e-3, 1e-3):
            trial = state.copy()
            trial.phi[k, c] += step
            trial.resid = trial.recompute_residuals()
            phi_gain = max(phi_gain, total(trial) - base)
    ok = nu_gain <= 1e-10 and phi_gain <= 1e-10
    record_criterion(
        10, ok, f"max objective gain: nu {nu_gain:.2e}, phi {phi_gain:.2e} (limit 1e-10) after {len(state.objective_trace) - 1} sweeps"
    )
    assert ok
