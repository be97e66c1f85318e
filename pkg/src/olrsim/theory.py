"""Phase-boundary quantities measured from the tabular policy.

Coupling, advantage magnitudes, critical noise ratios (plain, KL-shifted and
with label refinement), the log-ratio drift, and a Monte-Carlo check of how
the advantage estimation error shrinks with the group size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import (
    INFEASIBLE,
    FeatureMap,
    LabeledPrompt,
    NoiseClass,
    PolicyParams,
    action_probs,
    policy_table,
    sample_positions,
)
from .errors import DomainError, UndefinedRatioError
from .grpo import RolloutBatch, group_advantages


@dataclass
class TheoryReport:
    gamma: float
    G_c: float
    G_n: float
    rho_c: float
    rho_c_kl: float
    rho_c_kl_clamped: float
    delta_ref: float
    drift: float
    rho_eff: float
    rho_c_olr: float
    L_t: dict[int, float] = field(default_factory=dict)

    @property
    def mean_L_t(self) -> float:
        return float(np.mean(list(self.L_t.values()))) if self.L_t else math.nan


def log_ratio(params: PolicyParams, fm: FeatureMap, prompt: LabeledPrompt) -> float:
    """``log p(y*) / p(label)`` for an active noisy prompt."""
    if prompt.noise_class is NoiseClass.INACTIVE or prompt.train_label == INFEASIBLE:
        raise UndefinedRatioError(
            f"prompt {prompt.prompt_id}: inactive label has zero probability"
        )
    z = fm.vectors(prompt.prompt_id) @ params.theta
    space = prompt.space
    return float(z[space.true_position] - z[space.position(prompt.train_label)])


def log_ratios(params: PolicyParams, fm: FeatureMap, prompts: Iterable[LabeledPrompt]) -> dict[int, float]:
    return {
        p.prompt_id: log_ratio(params, fm, p)
        for p in prompts
        if p.noise_class is NoiseClass.ACTIVE
    }


def correct_grads(params: PolicyParams, fm: FeatureMap, prompts: Sequence[LabeledPrompt]) -> np.ndarray:
    """Rows of ``grad log pi(y*|x)`` for ``prompts`` (vectorized)."""
    probs = policy_table(params, fm)
    rows = np.array([fm.row(p.prompt_id) for p in prompts], dtype=int)
    pos = np.array([p.space.true_position for p in prompts], dtype=int)
    mean_feat = np.einsum("nm,nmd->nd", probs[rows], fm.phi[rows])
    return fm.phi[rows, pos] - mean_feat


def measure_coupling(
    params: PolicyParams,
    fm: FeatureMap,
    clean_prompts: Sequence[LabeledPrompt],
    noisy_prompts: Sequence[LabeledPrompt],
    n_pairs: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean inner product of correct-answer score gradients across clean/noisy pairs.

    ``n_pairs=None`` averages over every pair exactly (the mean of the
    products equals the product of the means); otherwise pairs are sampled.
    """
    if not clean_prompts or not noisy_prompts:
        raise DomainError("coupling needs at least one clean and one noisy prompt")
    gc = correct_grads(params, fm, clean_prompts)
    gn = correct_grads(params, fm, noisy_prompts)
    if n_pairs is None:
        return float(gc.mean(axis=0) @ gn.mean(axis=0))
    if rng is None:
        raise DomainError("sampled coupling needs an rng")
    i = rng.integers(len(clean_prompts), size=n_pairs)
    j = rng.integers(len(noisy_prompts), size=n_pairs)
    return float(np.mean(np.einsum("kd,kd->k", gc[i], gn[j])))


def advantage_magnitudes(
    batches: Iterable[RolloutBatch], dataset: Sequence[LabeledPrompt],
    noisy_ids: Iterable[int] | None = None,
) -> tuple[float, float]:
    """Mean over clean / noisy prompts of the per-batch mean ``|A|``.

    ``noisy_ids`` overrides which prompts count as noisy (useful once labels
    have been refined); by default the prompt's noise class decides.
    """
    if noisy_ids is None:
        noisy = {p.prompt_id for p in dataset if p.noise_class is not NoiseClass.CLEAN}
    else:
        noisy = set(noisy_ids)
    clean_vals, noisy_vals = [], []
    for b in batches:
        mag = float(np.mean(np.abs(b.advantages)))
        (noisy_vals if b.prompt_id in noisy else clean_vals).append(mag)
    G_c = float(np.mean(clean_vals)) if clean_vals else 0.0
    G_n = float(np.mean(noisy_vals)) if noisy_vals else 0.0
    return G_c, G_n


def critical_ratio(gamma: float, G_c: float, G_n: float) -> float:
    den = gamma * G_c + G_n
    if den == 0:
        raise DomainError("critical ratio undefined: gamma*G_c + G_n = 0")
    return gamma * G_c / den


def critical_ratio_kl(
    gamma: float, G_c: float, G_n: float, beta: float, delta_ref: float,
    clamp: bool = False,
) -> float:
    """KL-shifted boundary ``(gamma G_c - beta delta_ref) / (G_n + gamma G_c)``.

    The raw value can leave [0, 1]; ``clamp=True`` gives the clipped companion.
    """
    den = G_n + gamma * G_c
    if den <= 0:
        raise DomainError("KL critical ratio needs a positive denominator")
    raw = (gamma * G_c - beta * delta_ref) / den
    return min(1.0, max(0.0, raw)) if clamp else raw


def drift(gamma: float, rho: float, G_c: float, G_n: float) -> float:
    return gamma * (1.0 - rho) * G_c - rho * G_n


def tolerance_report(rho: float, delta_hat: float, rho_c: float) -> tuple[float, float]:
    """Residual noise ``rho (1 - delta)`` and the raised threshold ``rho_c / (1 - delta)``."""
    if not 0.0 <= delta_hat <= 1.0:
        raise DomainError(f"replacement probability {delta_hat} outside [0, 1]")
    rho_eff = rho * (1.0 - delta_hat)
    rho_c_olr = math.inf if delta_hat == 1.0 else rho_c / (1.0 - delta_hat)
    return rho_eff, rho_c_olr


def reference_gap(
    ref_params: PolicyParams, fm: FeatureMap, prompts: Iterable[LabeledPrompt]
) -> float:
    """Mean ``log p_ref(y*) / p_ref(label)`` over active noisy prompts (nan if none)."""
    vals = list(log_ratios(ref_params, fm, prompts).values())
    return float(np.mean(vals)) if vals else math.nan


def drift_split(
    prompt_grads: np.ndarray,
    grad_ids: Sequence[int],
    fm: FeatureMap,
    dataset: Sequence[LabeledPrompt],
    noisy_ids: Iterable[int],
) -> tuple[float, float]:
    """Per-prompt push of clean and of noisy gradients on the noisy log-ratios.

    Each gradient row is projected on ``phi(y*) - phi(label)`` of every active
    noisy prompt. Returns the mean projection per clean and per noisy prompt,
    scaled by the number of rows so the batch mean is undone.
    """
    noisy_ids = set(noisy_ids)
    by_id = {p.prompt_id: p for p in dataset}
    dirs = []
    for pid in sorted(noisy_ids):
        p = by_id[pid]
        if p.noise_class is not NoiseClass.ACTIVE:
            continue
        f = fm.vectors(pid)
        dirs.append(f[p.space.true_position] - f[p.space.position(p.train_label)])
    if not dirs or len(grad_ids) == 0:
        return math.nan, math.nan
    proj = np.asarray(prompt_grads) @ np.array(dirs).T * len(grad_ids)
    is_noisy = np.array([pid in noisy_ids for pid in grad_ids])
    d_c = float(proj[~is_noisy].mean()) if (~is_noisy).any() else math.nan
    d_n = float(proj[is_noisy].mean()) if is_noisy.any() else math.nan
    return d_c, d_n


def effective_critical_ratio(d_c: float, d_n: float) -> float:
    """Noise ratio at which ``(1 - rho) d_c + rho d_n`` changes sign."""
    if not (d_c > 0 and d_n < 0):
        return math.nan
    return d_c / (d_c - d_n)


def concentration_probe(
    params: PolicyParams,
    fm: FeatureMap,
    prompt: LabeledPrompt,
    K_values: Sequence[int],
    trials: int,
    rng: np.random.Generator,
    adv_eps: float = 1e-6,
) -> dict[int, float]:
    """Std of (group-estimated advantage - exact advantage) per group size.

    The exact advantage uses the true pass rate ``p`` of the prompt's label:
    ``(r - p) / (sqrt(p (1 - p)) + adv_eps)``. All rollouts of every trial are
    pooled.
    """
    if trials < 100:
        raise DomainError("concentration probe needs at least 100 trials")
    space = prompt.space
    probs = action_probs(params, fm, space)
    label = prompt.train_label
    p = 0.0 if label == INFEASIBLE else float(probs[space.position(label)])
    sigma = math.sqrt(max(p * (1.0 - p), 0.0))
    label_pos = None if label == INFEASIBLE else space.position(label)

    out = {}
    for K in K_values:
        errors = np.empty((trials, K))
        for t in range(trials):
            pos = sample_positions(probs, K, rng)
            r = (pos == label_pos).astype(float)
            est = group_advantages(r, adv_eps)
            exact = (r - p) / (sigma + adv_eps)
            errors[t] = est - exact
        out[int(K)] = float(errors.std())
    return out


def build_report(
    params: PolicyParams,
    ref_params: PolicyParams,
    fm: FeatureMap,
    dataset: Sequence[LabeledPrompt],
    batches: Sequence[RolloutBatch],
    noisy_ids: Iterable[int],
    rho: float,
    beta: float,
    delta_hat: float,
) -> TheoryReport:
    """Assemble one epoch's report; undefined quantities come out as nan."""
    noisy_ids = set(noisy_ids)
    clean = [p for p in dataset if p.prompt_id not in noisy_ids]
    noisy = [p for p in dataset if p.prompt_id in noisy_ids]
    gamma = measure_coupling(params, fm, clean, noisy) if clean and noisy else math.nan
    G_c, G_n = advantage_magnitudes(batches, dataset, noisy_ids)

    def safe(fn, *args, **kw):
        try:
            v = fn(*args, **kw)
        except DomainError:
            return math.nan
        return v

    rho_c = safe(critical_ratio, gamma, G_c, G_n) if not math.isnan(gamma) else math.nan
    delta_ref = reference_gap(ref_params, fm, noisy)
    shift_ref = 0.0 if beta == 0 else delta_ref
    if math.isnan(gamma) or math.isnan(shift_ref):
        rho_c_kl = rho_c_kl_clamped = math.nan
    else:
        rho_c_kl = safe(critical_ratio_kl, gamma, G_c, G_n, beta, shift_ref)
        rho_c_kl_clamped = safe(critical_ratio_kl, gamma, G_c, G_n, beta, shift_ref, clamp=True)
    dr = drift(gamma, rho, G_c, G_n) if not math.isnan(gamma) else math.nan
    if math.isnan(delta_hat):
        rho_eff, rho_c_olr = math.nan, math.nan
    else:
        rho_eff, rho_c_olr = tolerance_report(rho, delta_hat, rho_c)
    return TheoryReport(
        gamma=gamma, G_c=G_c, G_n=G_n, rho_c=rho_c, rho_c_kl=rho_c_kl,
        rho_c_kl_clamped=rho_c_kl_clamped, delta_ref=delta_ref, drift=dr,
        rho_eff=rho_eff, rho_c_olr=rho_c_olr, L_t=log_ratios(params, fm, noisy),
    )
