"""Answer-distribution analogs of the comparison methods.

The token-level regularizers of the original methods have no counterpart in a
finite answer space, so they are approximated here over the answer
distribution and tagged as analogs in run metadata.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import FeatureMap, LabeledPrompt, PolicyParams, action_probs
from .errors import ConfigError
from .grpo import RolloutBatch
from .olr import majority_answer


class Strategy(str, enum.Enum):
    GRPO = "grpo"
    OLR = "olr"
    TTRL = "ttrl"
    RANDOM_SELECT = "random_select"
    SMALL_LOSS = "small_loss"
    CONF_PENALTY = "conf_penalty"
    LABEL_SMOOTH = "label_smooth"


# strategies whose behaviour only approximates the token-level original
ANALOG_STRATEGIES = frozenset({Strategy.CONF_PENALTY, Strategy.LABEL_SMOOTH, Strategy.SMALL_LOSS})


def ttrl_label(batch) -> int:
    """Majority answer of the rollouts; the training label is ignored."""
    answers = getattr(batch, "answers", batch)
    return majority_answer(answers)[0]


def _selection_size(fraction: float, n: int) -> int:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"selection fraction {fraction} outside (0, 1]")
    return max(1, min(n, int(math.floor(fraction * n + 0.5))))


def random_select(dataset: Sequence[LabeledPrompt], fraction: float, rng) -> list[int]:
    k = _selection_size(fraction, len(dataset))
    picks = rng.choice(len(dataset), size=k, replace=False)
    return sorted(dataset[int(i)].prompt_id for i in picks)


def surrogate_loss(batch: RolloutBatch, params: PolicyParams, fm: FeatureMap, space) -> float:
    """Policy-gradient loss ``-mean_k A_k log pi(y_k)``; zero for zero-variance groups.

    The clipped surrogate itself equals ``mean(A) = 0`` at ratio 1 for every
    group, so it cannot rank prompts.
    """
    adv = np.asarray(batch.advantages, dtype=float)
    if not adv.any():
        return 0.0
    probs = action_probs(params, fm, space)
    logp = np.log([probs[space.position(a)] for a in batch.answers])
    return float(-np.mean(adv * logp))


def small_loss_select(losses: Mapping[int, float], fraction: float) -> list[int]:
    """Keep the prompts with the smallest ``|loss|`` (prompt id breaks ties)."""
    k = _selection_size(fraction, len(losses))
    ranked = sorted(losses, key=lambda pid: (abs(losses[pid]), pid))
    return sorted(ranked[:k])


@dataclass(frozen=True)
class Regularizer:
    """What a strategy adds on top of plain GRPO."""

    entropy_coef: float = 0.0
    reward_smoothing: float = 0.0
    analog: bool = False


def entropy_regularizers(strategy: Strategy | str, coef: float) -> Regularizer:
    strategy = Strategy(strategy)
    if coef < 0:
        raise ConfigError("regularizer coefficient must be >= 0")
    if strategy is Strategy.CONF_PENALTY:
        return Regularizer(entropy_coef=coef, analog=True)
    if strategy is Strategy.LABEL_SMOOTH:
        if coef > 1:
            raise ConfigError("label smoothing coefficient must be <= 1")
        return Regularizer(reward_smoothing=coef, analog=True)
    return Regularizer()


def smooth_rewards(rewards: Sequence[float], lam: float, n_answers: int) -> list[float]:
    return [(1.0 - lam) * r + lam / n_answers for r in rewards]
