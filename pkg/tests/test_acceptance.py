"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run directly (``python tests/test_acceptance.py``) or through pytest; the
pytest terminal summary repeats every line.
"""

import functools
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from acceptance_log import record
from olrsim.cli import main as cli_main
from olrsim.core import (
    INFEASIBLE,
    PolicyParams,
    action_probs,
    generate_dataset,
    log_prob_grad,
)
from olrsim.grpo import UpdateConfig, group_advantages, make_batch, prompt_gradients, surrogate_objective
from olrsim.olr import MajorityTrajectory, TrajectoryEntry, slope
from olrsim.runner import (
    EVENTS_HEADER,
    METRICS_HEADER,
    RunConfig,
    collapse_threshold,
    emit_outputs,
    phase_summary,
    run_experiment,
    sweep_phase_diagram,
)
from olrsim.theory import concentration_probe, critical_ratio_kl, drift_split, effective_critical_ratio

SEEDS = range(20)
FD_STEP = 1e-5

# criteria 5, 7, 8, 9: active dynamic noise at rho = 0.5 on the default task
LIFT_CFG = RunConfig(eta=40.0, epochs=10, rho=0.5, coupling_alpha=0.5, n_prompts=200,
                     answers_per_prompt=5, K=8, warmup_T=5)
# criterion 6: fixed noisy labels, horizon equal to the warmup
PHASE_CFG = RunConfig(active_mode="static", eta=40.0, epochs=5, beta=0.0, rho=0.5)
# criterion 11: start and reference both tilted toward the correct answers
KL_CFG = RunConfig(active_mode="static", eta=40.0, epochs=5, init_bias=2.0, ref_bias=1.0)
KL_BETA = 0.5
RHO_GRID = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]


def _median(xs):
    return float(np.median(list(xs)))


# -- 1 ---------------------------------------------------------------------------

def _fd(f, x, h=FD_STEP):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def _surrogate_instance(rng):
    """Random small problem whose ratios stay clear of the clip kinks."""
    while True:
        d, m, n = int(rng.integers(2, 17)), int(rng.integers(2, 7)), int(rng.integers(1, 4))
        dataset, fm = generate_dataset(n, m, 1, float(rng.random()), d, int(rng.integers(1 << 30)))
        old = PolicyParams(rng.normal(size=d))
        theta = old.theta + 0.15 * rng.normal(size=d)
        ref = PolicyParams(rng.normal(size=d))
        cfg = UpdateConfig(eta=1.0, beta=float(rng.choice([0.0, 0.3])), clip_eps=0.2)
        batches = []
        for p in dataset:
            K = int(rng.integers(2, 9))
            answers = rng.integers(m, size=K).tolist()
            rewards = rng.integers(2, size=K).tolist()
            rewards[0], rewards[-1] = 1, 0
            batches.append(make_batch(p.prompt_id, 1, answers, INFEASIBLE, cfg.adv_eps, rewards))
        logit = fm.phi @ theta
        logit_old = fm.phi @ old.theta
        ratios = []
        for b in batches:
            r = fm.row(b.prompt_id)
            lp = logit[r] - np.logaddexp.reduce(logit[r])
            lo = logit_old[r] - np.logaddexp.reduce(logit_old[r])
            ratios.extend(np.exp(lp[list(b.answers)] - lo[list(b.answers)]))
        ratios = np.array(ratios)
        if np.min(np.abs(ratios - 0.8)) > 1e-3 and np.min(np.abs(ratios - 1.2)) > 1e-3:
            return fm, dataset, theta, old, ref, cfg, batches, ratios


def test_01_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_lp, worst_sur, clipped = 0.0, 0.0, 0
    for _ in range(100):
        d, m = int(rng.integers(2, 17)), int(rng.integers(2, 7))
        dataset, fm = generate_dataset(1, m, 1, float(rng.random()), d, int(rng.integers(1 << 30)))
        space = dataset[0].space
        theta = rng.normal(size=d)
        a = int(rng.integers(m))
        fd = _fd(lambda t: math.log(action_probs(PolicyParams(t), fm, space)[a]), theta)
        worst_lp = max(worst_lp, _rel(log_prob_grad(PolicyParams(theta), fm, space, a), fd))

        fm, dataset, theta, old, ref, cfg, batches, ratios = _surrogate_instance(rng)
        ent = float(rng.choice([0.0, 0.1]))
        analytic = prompt_gradients(PolicyParams(theta), old, ref, fm, batches, cfg,
                                    entropy_coef=ent).sum(axis=0)
        fd = _fd(lambda t: surrogate_objective(t, old, ref, fm, batches, cfg, entropy_coef=ent), theta)
        worst_sur = max(worst_sur, _rel(analytic, fd))
        clipped += int(np.any(np.abs(ratios - 1.0) > 0.2))
    elapsed = time.perf_counter() - start
    ok = worst_lp < 1e-4 and worst_sur < 1e-4 and elapsed < 10
    record(1, "gradient oracle", ok,
           f"max rel err log-prob {worst_lp:.2e}, surrogate {worst_sur:.2e} "
           f"({clipped} instances with clipped ratios), {elapsed:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def _scalar_advantages(rewards, eps):
    n = len(rewards)
    mu = sum(rewards) / n
    var = sum((r - mu) ** 2 for r in rewards) / n
    if var == 0:
        return [0.0] * n
    sd = math.sqrt(var)
    return [(r - mu) / (sd + eps) for r in rewards]


def test_02_advantage_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    worst, zero_ok, n_zero = 0.0, True, 0
    for i in range(1000):
        K = int(rng.integers(1, 17))
        if i % 4 == 0:
            rewards = [float(rng.integers(2))] * K
        elif i % 2:
            rewards = rng.integers(2, size=K).astype(float).tolist()
        else:
            rewards = rng.random(K).tolist()
        got = group_advantages(rewards, 1e-6)
        want = _scalar_advantages(rewards, 1e-6)
        worst = max(worst, float(np.max(np.abs(got - np.array(want)))))
        if len(set(rewards)) == 1:
            n_zero += 1
            zero_ok &= bool(np.all(got == 0.0))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and zero_ok and elapsed < 1
    record(2, "advantage oracle", ok,
           f"max abs err {worst:.1e}, {n_zero} zero-variance groups exact, {elapsed:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def _ols_oracle(t, p):
    t, p = np.asarray(t, float), np.asarray(p, float)
    tc = t - t.mean()
    return float(np.dot(tc, p - p.mean()) / np.dot(tc, tc))


def _traj(epochs, rates):
    return MajorityTrajectory(0, tuple(TrajectoryEntry(int(e), 0, float(r)) for e, r in zip(epochs, rates)))


def test_03_slope_oracle():
    rng = np.random.default_rng(303)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 40))
        epochs = np.cumsum(rng.integers(1, 4, size=n))
        if i % 10 == 0:
            rates = np.full(n, rng.integers(1, 9) / 8)
            want = 0.0
        elif i % 10 == 1:
            b, a = rng.normal() * 0.05, rng.random()
            rates = a + b * epochs
            want = b
        else:
            K = int(rng.integers(1, 17))
            rates = rng.integers(1, K + 1, size=n) / K
            want = _ols_oracle(epochs, rates)
        got = slope(_traj(epochs, rates))
        worst = max(worst, abs(got - want))
    const_exact = slope(_traj([1, 2, 3], [0.5, 0.5, 0.5])) == 0.0
    ok = worst <= 1e-10 and const_exact
    record(3, "slope oracle", ok, f"max abs err {worst:.1e} over 1000 trajectories")
    assert ok


# -- 4 ---------------------------------------------------------------------------

def test_04_inactive_noise_neutrality():
    cfg = RunConfig(noise_type="inactive", rho=0.5, beta=0.0, eta=40.0, epochs=50, seed=4)
    worst, checked, epochs_seen = 0.0, 0, []

    def hook(state):
        nonlocal worst, checked
        epochs_seen.append(state.epoch)
        for row, pid in zip(state.prompt_grads, state.grad_prompt_ids):
            if pid in state.noisy_ids:
                worst = max(worst, float(np.linalg.norm(row)))
                checked += 1

    run_experiment(cfg, on_epoch=hook)
    ok = worst == 0.0 and epochs_seen == list(range(1, 51)) and checked == 50 * 100
    record(4, "inactive-noise neutrality", ok,
           f"{checked} noisy prompt-epochs, max gradient norm {worst:g}")
    assert ok


# -- 5, 7, 8, 9 ------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _lift_runs():
    start = time.perf_counter()
    grpo = [run_experiment(LIFT_CFG.replace(seed=s, strategy="grpo")) for s in SEEDS]
    olr = [run_experiment(LIFT_CFG.replace(seed=s, strategy="olr")) for s in SEEDS]
    return grpo, olr, time.perf_counter() - start


def test_05_early_correctness_coherence():
    grpo, _, elapsed = _lift_runs()
    T = LIFT_CFG.warmup_T
    # row 0 is scored before any update; row T after T updates (end of warmup)
    start = _median(r.metrics[0]["noisy_majority_acc"] for r in grpo)
    end = _median(r.metrics[T]["noisy_majority_acc"] for r in grpo)
    gain = _median(r.metrics[T]["noisy_majority_acc"] - r.metrics[0]["noisy_majority_acc"] for r in grpo)
    ok = end - start >= 0.05 and gain >= 0.05 and elapsed < 120
    record(5, "early correctness coherence", ok,
           f"noisy majority acc {start:.3f} -> {end:.3f} (median paired gain {gain:+.3f}), "
           f"{len(grpo)} seeds, {elapsed:.1f}s")
    assert ok


def test_07_olr_lift():
    grpo, olr, _ = _lift_runs()
    g = [r.metrics[-1]["noisy_majority_acc"] for r in grpo]
    o = [r.metrics[-1]["noisy_majority_acc"] for r in olr]
    lift = _median(b - a for a, b in zip(g, o))
    ok = lift >= 0.10 and _median(o) - _median(g) >= 0.10
    record(7, "OLR lift", ok,
           f"final noisy acc GRPO {_median(g):.3f}, OLR {_median(o):.3f}, median paired lift {lift:+.3f}")
    assert ok


def test_08_selection_precision():
    _, olr, _ = _lift_runs()
    T = LIFT_CFG.warmup_T
    hits = total = 0
    for res in olr:
        truth = {p["prompt_id"]: p["true_answer"] for p in res.manifest["dataset"]["prompts"]}
        for epoch, pid, _, _, _, _, selected, label, _ in res.events:
            if epoch > T and selected:
                total += 1
                hits += label == truth[pid]
    precision = hits / total if total else math.nan
    ok = total > 0 and precision >= 0.90
    record(8, "selection precision", ok, f"{hits}/{total} replacement labels correct ({precision:.3f})")
    assert ok


def test_09_noise_reduction():
    _, olr, _ = _lift_runs()
    final = [r.metrics[-1]["realized_noise"] / r.metrics[-1]["initial_noise"] for r in olr]
    worst = 0.0
    for res in olr:
        for row in res.metrics:
            want = row["initial_noise"] * (1.0 - row["selection_ratio_noisy"])
            worst = max(worst, abs(row["rho_eff"] - want))
    ok = _median(final) <= 0.8 and worst <= 1e-12
    record(9, "noise reduction", ok,
           f"median final realized/initial noise {_median(final):.3f}, rho_eff max err {worst:.1e}")
    assert ok


# -- 6 ---------------------------------------------------------------------------

def _effective_boundary(cfg, seeds):
    """Boundary implied by the measured clean/noisy pushes on the log-ratio."""
    out = []
    for s in seeds:
        parts = []
        run_experiment(cfg.replace(seed=s), on_epoch=lambda st: parts.append(drift_split(
            st.prompt_grads, st.grad_prompt_ids, st.feature_map, st.dataset, st.noisy_ids)))
        d_c, d_n = np.nanmean(np.array(parts), axis=0)
        out.append(effective_critical_ratio(d_c, d_n))
    return _median(out)


def test_06_phase_boundary():
    start = time.perf_counter()
    rho_c = _median(run_experiment(PHASE_CFG.replace(seed=s)).warmup_rho_c() for s in SEEDS)
    lo, hi = 0.7 * rho_c, min(1.0, 1.3 * rho_c)
    rows = sweep_phase_diagram(PHASE_CFG, [lo, hi], list(SEEDS))
    summary = {round(s["rho"], 12): s["median_dL"] for s in phase_summary(rows)}
    d_lo, d_hi = summary[round(lo, 12)], summary[round(hi, 12)]
    elapsed = time.perf_counter() - start
    empirical = collapse_threshold(phase_summary(sweep_phase_diagram(PHASE_CFG, RHO_GRID, list(SEEDS)[:10])))
    effective = _effective_boundary(PHASE_CFG, range(5))
    ok = d_lo > 0 and d_hi < 0 and elapsed < 300
    record(6, "phase boundary", ok,
           f"rho_c_hat {rho_c:.3f}; median dL {d_lo:+.3f} at {lo:.3f}, {d_hi:+.3f} at {hi:.3f}; "
           f"simulated collapse near {empirical:.2f}, drift-split boundary {effective:.2f}")
    assert ok


# -- 10 --------------------------------------------------------------------------

def test_10_concentration_scaling():
    start = time.perf_counter()
    dataset, fm = generate_dataset(1, 2, 1, 0.5, 4, 10)
    prompt = dataset[0]
    params = PolicyParams.zeros(4)
    stds = concentration_probe(params, fm, prompt, [4, 16, 64], 10_000, np.random.default_rng(10))
    r4, r16 = stds[4] / stds[16], stds[16] / stds[64]
    elapsed = time.perf_counter() - start
    ok = 1.6 <= r4 <= 2.4 and 1.6 <= r16 <= 2.4 and elapsed < 30
    record(10, "concentration scaling", ok,
           f"std ratio K=4: {r4:.3f}, K=16: {r16:.3f}, {elapsed:.1f}s")
    assert ok


# -- 11 --------------------------------------------------------------------------

def _kl_drift(gamma, rho, G_c, G_n, beta, delta_ref):
    return gamma * (1 - rho) * G_c - rho * G_n - beta * delta_ref


def test_11_kl_shift():
    rng = np.random.default_rng(11)
    exact = True
    for _ in range(1000):
        g, gc, gn, b, dr = (Fraction(int(x), 97) for x in rng.integers(1, 200, size=5))
        dr = dr - 1
        raw = critical_ratio_kl(g, gc, gn, b, dr)
        clamped = critical_ratio_kl(g, gc, gn, b, dr, clamp=True)
        exact &= _kl_drift(g, raw, gc, gn, b, dr) == 0
        exact &= clamped == min(Fraction(1), max(Fraction(0), raw))

    def threshold(beta):
        rows = sweep_phase_diagram(KL_CFG.replace(beta=beta), RHO_GRID, list(SEEDS))
        return collapse_threshold(phase_summary(rows))

    th0, thk = threshold(0.0), threshold(KL_BETA)
    delta_ref = run_experiment(KL_CFG.replace(beta=KL_BETA, rho=0.5)).metrics[0]["delta_ref"]
    ok = exact and delta_ref > 0 and thk < th0
    record(11, "KL shift", ok,
           f"algebra exact on 1000 inputs: {exact}; delta_ref {delta_ref:.3f}; "
           f"collapse threshold beta=0: {th0:.3f}, beta={KL_BETA}: {thk:.3f}")
    assert ok


# -- 12 --------------------------------------------------------------------------

GOLDEN_METRICS = (
    "epoch,clean_majority_acc,noisy_majority_acc,selection_ratio_clean,selection_ratio_noisy,"
    "selected_majority_acc,unselected_majority_acc,realized_noise,initial_noise,mean_slope,"
    "mean_L_t,mean_reward,gamma,G_c,G_n,rho_c,rho_c_kl,rho_c_kl_clamped,delta_ref,drift,"
    "rho_eff,rho_c_olr"
)
GOLDEN_EVENTS = "epoch,prompt_id,majority,pass_rate,slope,consistent,selected,effective_label,noise_class"
GOLDEN_MANIFEST_KEYS = [
    "config", "dataset", "epochs_completed", "final_labels", "library", "noise", "status",
    "strategy", "theta_final", "theta_initial", "trajectories",
]


def test_12_determinism_and_schema(tmp_path):
    ok = True
    for i, strategy in enumerate(["olr", "small_loss", "ttrl"]):
        cfg = RunConfig(n_prompts=40, epochs=8, eta=40.0, seed=12 + i, strategy=strategy,
                        selection_fraction=0.5 if strategy == "small_loss" else None)
        first, second = tmp_path / f"a{i}", tmp_path / f"b{i}"
        emit_outputs(run_experiment(cfg), first)
        code = cli_main(["replay", str(first / "manifest.json"), "--out-dir", str(second)])
        ok &= code == 0
        for name in ("metrics.csv", "events.csv", "manifest.json"):
            ok &= (first / name).read_bytes() == (second / name).read_bytes()
        ok &= (first / "metrics.csv").read_text().splitlines()[0] == GOLDEN_METRICS
        ok &= (first / "events.csv").read_text().splitlines()[0] == GOLDEN_EVENTS
        ok &= sorted(json.loads((first / "manifest.json").read_text())) == GOLDEN_MANIFEST_KEYS
    ok &= METRICS_HEADER == GOLDEN_METRICS and EVENTS_HEADER == GOLDEN_EVENTS
    record(12, "determinism and schema", bool(ok), "replay byte-identical for 3 strategies; headers match")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
