"""Inactive / active label corruption and feasibility-based classification."""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    INFEASIBLE,
    AnswerSpace,
    FeatureMap,
    LabeledPrompt,
    NoiseClass,
    PolicyParams,
    action_probs,
)
from .errors import ConfigError


class ActiveMode(str, enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


def noisy_count(rho: float, n: int) -> int:
    """Round ``rho * n`` half-up to an integer count."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho={rho} outside [0, 1]")
    return min(n, int(math.floor(rho * n + 0.5)))


def designate_noisy(dataset: Sequence[LabeledPrompt], rho: float, rng) -> list[int]:
    """Choose which prompts get corrupted, uniformly without replacement."""
    k = noisy_count(rho, len(dataset))
    picks = rng.choice(len(dataset), size=k, replace=False) if k else []
    return sorted(dataset[int(i)].prompt_id for i in picks)


def _require_clean(dataset):
    if any(p.noise_class is not NoiseClass.CLEAN for p in dataset):
        raise ConfigError("noise injection expects an all-clean dataset")


def inject_inactive_noise(
    dataset: Sequence[LabeledPrompt], rho: float, rng
) -> list[LabeledPrompt]:
    _require_clean(dataset)
    chosen = set(designate_noisy(dataset, rho, rng))
    return [
        replace(p, train_label=INFEASIBLE, noise_class=NoiseClass.INACTIVE)
        if p.prompt_id in chosen else p
        for p in dataset
    ]


def _sample_wrong(params, fm, space: AnswerSpace, rng) -> int:
    wrong = space.wrong_answers()
    if not wrong:
        raise ConfigError(f"prompt {space.prompt_id} has no wrong answer to host active noise")
    probs = action_probs(params, fm, space)
    w = np.array([probs[space.position(a)] for a in wrong])
    total = w.sum()
    w = w / total if total > 0 else np.full(len(wrong), 1.0 / len(wrong))
    cdf = np.cumsum(w)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return wrong[min(i, len(wrong) - 1)]


def most_frequent_wrong(rollouts: Iterable[int], space: AnswerSpace) -> int | None:
    """Mode of the wrong answers in ``rollouts`` (smallest id on ties), or None."""
    counts = Counter(a for a in rollouts if a != space.true_answer)
    if not counts:
        return None
    top = max(counts.values())
    return min(a for a, c in counts.items() if c == top)


def inject_active_noise(
    dataset: Sequence[LabeledPrompt],
    params: PolicyParams,
    fm: FeatureMap,
    rng,
    mode: ActiveMode | str = ActiveMode.DYNAMIC,
    current_rollouts: Mapping[int, Sequence[int]] | None = None,
    noisy_ids: Iterable[int] | None = None,
) -> list[LabeledPrompt]:
    """Give each noisy-designated prompt an in-space wrong label.

    ``noisy_ids`` defaults to the prompts that are already Active.

    STATIC draws the label once from the policy restricted to wrong answers.
    DYNAMIC sets it to the most frequent wrong answer among this epoch's
    rollouts; when every rollout is correct the previous active label is kept
    (a prompt that has none yet falls back to the STATIC draw).
    """
    mode = ActiveMode(mode)
    if noisy_ids is None:
        noisy = {p.prompt_id for p in dataset if p.noise_class is NoiseClass.ACTIVE}
    else:
        noisy = set(noisy_ids)
    if mode is ActiveMode.DYNAMIC and current_rollouts is None:
        raise ConfigError("dynamic active noise needs the current epoch's rollouts")

    out = []
    for p in dataset:
        if p.prompt_id not in noisy:
            out.append(p)
            continue
        if len(p.space.wrong_answers()) < 1:
            raise ConfigError(f"prompt {p.prompt_id} cannot host active noise")
        label = None
        if mode is ActiveMode.DYNAMIC:
            label = most_frequent_wrong(current_rollouts.get(p.prompt_id, ()), p.space)
            if label is None and p.noise_class is NoiseClass.ACTIVE:
                label = p.train_label
        if label is None:
            label = _sample_wrong(params, fm, p.space, rng)
        out.append(replace(p, train_label=label, noise_class=NoiseClass.ACTIVE))
    return out


def classify_label(
    params: PolicyParams, fm: FeatureMap, space: AnswerSpace, label: int
) -> NoiseClass:
    if label == space.true_answer:
        return NoiseClass.CLEAN
    if label == INFEASIBLE or label not in space.answers:
        # zero probability under the policy by construction
        return NoiseClass.INACTIVE
    return NoiseClass.ACTIVE


def measure_realized_noise(
    dataset: Sequence[LabeledPrompt], effective_labels: Mapping[int, int]
) -> float:
    if not dataset:
        return 0.0
    wrong = sum(effective_labels[p.prompt_id] != p.true_answer for p in dataset)
    return wrong / len(dataset)
