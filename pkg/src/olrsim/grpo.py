"""Verifier reward, group-normalized advantages and the clipped GRPO step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import INFEASIBLE, AnswerSpace, FeatureMap, PolicyParams, softmax
from .errors import ConfigError, UpdateError


@dataclass(frozen=True)
class RolloutBatch:
    prompt_id: int
    epoch: int
    answers: tuple[int, ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.answers) == len(self.rewards) == len(self.advantages)):
            raise ConfigError(f"prompt {self.prompt_id}: ragged rollout batch")
        if not self.answers:
            raise ConfigError(f"prompt {self.prompt_id}: empty rollout batch")

    @property
    def K(self) -> int:
        return len(self.answers)


@dataclass(frozen=True)
class UpdateConfig:
    eta: float = 0.5
    beta: float = 0.0
    clip_eps: float = 0.2
    adv_eps: float = 1e-6

    def __post_init__(self):
        if self.eta <= 0:
            raise ConfigError("eta must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be > 0")
        if self.adv_eps <= 0:
            raise ConfigError("adv_eps must be > 0")


def verify_reward(answer_id: int, effective_label: int) -> int:
    if effective_label == INFEASIBLE:
        return 0
    return int(answer_id == effective_label)


def group_advantages(rewards: Sequence[float], adv_eps: float) -> np.ndarray:
    """``(r - mean) / (std + adv_eps)`` with population statistics.

    A group whose rewards are all equal gets exact zeros.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ConfigError("empty reward group")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    mu = r.mean()
    sigma = np.sqrt(np.mean((r - mu) ** 2))
    return (r - mu) / (sigma + adv_eps)


def make_batch(
    prompt_id: int, epoch: int, answers: Sequence[int], label: int, adv_eps: float,
    rewards: Sequence[float] | None = None,
) -> RolloutBatch:
    """Score ``answers`` against ``label`` (unless ``rewards`` is given) and attach advantages."""
    if rewards is None:
        rewards = [verify_reward(a, label) for a in answers]
    adv = group_advantages(rewards, adv_eps)
    return RolloutBatch(
        prompt_id, epoch, tuple(int(a) for a in answers),
        tuple(float(r) for r in rewards), tuple(adv.tolist()),
    )


def kl_to_reference(
    params: PolicyParams, ref_params: PolicyParams, fm: FeatureMap, space: AnswerSpace
) -> float:
    feats = fm.vectors(space.prompt_id)
    logp = _log_softmax(feats @ params.theta)
    logq = _log_softmax(feats @ ref_params.theta)
    return float(np.sum(np.exp(logp) * (logp - logq)))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _Stack:
    """Features, positions and probabilities for a list of batches."""

    def __init__(self, fm: FeatureMap, spaces: dict[int, AnswerSpace], batches):
        rows = [fm.row(b.prompt_id) for b in batches]
        self.phi = fm.phi[rows]
        self.positions = []
        for b in batches:
            space = spaces.get(b.prompt_id)
            if space is None:
                self.positions.append(np.asarray(b.answers, dtype=int))
            else:
                self.positions.append(np.array([space.position(a) for a in b.answers]))
        self.advantages = [np.asarray(b.advantages, dtype=float) for b in batches]
        self.weights = np.array([b.K for b in batches], dtype=float)

    def logp(self, theta: np.ndarray) -> np.ndarray:
        return _log_softmax(self.phi @ theta)


def _spaces(spaces) -> dict[int, AnswerSpace]:
    if spaces is None:
        return {}
    if isinstance(spaces, dict):
        return spaces
    return {s.prompt_id: s for s in spaces}


def surrogate_objective(
    theta: np.ndarray,
    old_params: PolicyParams,
    ref_params: PolicyParams,
    fm: FeatureMap,
    batches: Sequence[RolloutBatch],
    cfg: UpdateConfig,
    spaces=None,
    entropy_coef: float = 0.0,
) -> float:
    """Value of the clipped, KL-penalized objective at ``theta`` (for checks)."""
    st = _Stack(fm, _spaces(spaces), batches)
    logp = st.logp(np.asarray(theta, dtype=float))
    logp_old = st.logp(old_params.theta)
    total = st.weights.sum()
    value = 0.0
    for i, (pos, adv) in enumerate(zip(st.positions, st.advantages)):
        ratio = np.exp(logp[i, pos] - logp_old[i, pos])
        clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
        value += np.minimum(adv * ratio, adv * clipped).sum()
    value /= total
    probs = np.exp(logp)
    if cfg.beta:
        logq = st.logp(ref_params.theta)
        kl = np.sum(probs * (logp - logq), axis=1)
        value -= cfg.beta * np.dot(st.weights, kl) / total
    if entropy_coef:
        ent = -np.sum(probs * logp, axis=1)
        value += entropy_coef * np.dot(st.weights, ent) / total
    return float(value)


def prompt_gradients(
    params: PolicyParams,
    old_params: PolicyParams,
    ref_params: PolicyParams,
    fm: FeatureMap,
    batches: Sequence[RolloutBatch],
    cfg: UpdateConfig,
    spaces=None,
    entropy_coef: float = 0.0,
) -> np.ndarray:
    """Per-batch contributions to the objective gradient, shape ``(len(batches), d)``.

    Their sum is the full gradient. Each softmax gradient is written as a
    coefficient per answer, ``grad = sum_y c_y (phi_y - phi_bar)``.
    """
    st = _Stack(fm, _spaces(spaces), batches)
    logp = st.logp(params.theta)
    probs = np.exp(logp)
    total = st.weights.sum()
    n, m = probs.shape

    coef = np.zeros((n, m))
    same_old = old_params is params or np.array_equal(old_params.theta, params.theta)
    logp_old = logp if same_old else st.logp(old_params.theta)
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    for i, (pos, adv) in enumerate(zip(st.positions, st.advantages)):
        if not adv.any():
            continue
        ratio = np.exp(logp[i, pos] - logp_old[i, pos])
        # gradient vanishes where the clipped branch is the active minimum
        live = ~(((adv > 0) & (ratio > hi)) | ((adv < 0) & (ratio < lo)))
        coef[i] = np.bincount(pos, weights=adv * ratio * live, minlength=m)
    coef /= total
    w = (st.weights / total)[:, None]
    # non-finite values are reported below, per prompt
    with np.errstate(invalid="ignore", over="ignore"):
        # d/dtheta of sum_y c_y log pi_y  ->  coefficients c_y - (sum c) pi_y
        coef = coef - coef.sum(axis=1, keepdims=True) * probs
        if cfg.beta:
            logq = st.logp(ref_params.theta)
            ell = logp - logq
            kl = np.sum(probs * ell, axis=1, keepdims=True)
            coef -= cfg.beta * w * probs * (ell - kl)
        if entropy_coef:
            ent = -np.sum(probs * logp, axis=1, keepdims=True)
            coef -= entropy_coef * w * probs * (logp + ent)
        grads = np.einsum("nm,nmd->nd", coef, st.phi)
    bad = ~np.isfinite(grads).all(axis=1)
    if bad.any():
        pid = batches[int(np.flatnonzero(bad)[0])].prompt_id
        raise UpdateError(f"non-finite gradient from prompt {pid}", prompt_id=pid)
    return grads


def grpo_step(
    params: PolicyParams,
    old_params: PolicyParams,
    ref_params: PolicyParams,
    fm: FeatureMap,
    batches: Sequence[RolloutBatch],
    cfg: UpdateConfig,
    spaces=None,
    entropy_coef: float = 0.0,
) -> tuple[PolicyParams, np.ndarray, list[int]]:
    """Like ``grpo_update`` but also returns per-prompt gradient rows and their prompt ids."""
    if not batches:
        raise ConfigError("grpo_update needs at least one batch")
    batches = sorted(batches, key=lambda b: b.prompt_id)
    grads = prompt_gradients(
        params, old_params, ref_params, fm, batches, cfg, spaces, entropy_coef
    )
    theta = params.theta + cfg.eta * grads.sum(axis=0)
    if not np.isfinite(theta).all():
        raise UpdateError("update produced non-finite parameters")
    return PolicyParams(theta), grads, [b.prompt_id for b in batches]


def grpo_update(
    params: PolicyParams,
    old_params: PolicyParams,
    ref_params: PolicyParams,
    fm: FeatureMap,
    batches: Sequence[RolloutBatch],
    cfg: UpdateConfig,
    spaces=None,
    entropy_coef: float = 0.0,
) -> PolicyParams:
    """One gradient-ascent step of size ``cfg.eta``; inputs are left untouched.

    Contributions are summed in prompt-id order so the result does not depend
    on batch order.
    """
    return grpo_step(
        params, old_params, ref_params, fm, batches, cfg, spaces, entropy_coef
    )[0]


def entropy(params: PolicyParams, fm: FeatureMap, space: AnswerSpace) -> float:
    p = softmax(fm.vectors(space.prompt_id) @ params.theta)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))
