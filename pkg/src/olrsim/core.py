"""Synthetic prompt family and the shared-parameter linear-softmax policy.

Every prompt owns a small finite answer space. The policy scores an answer by
``theta . phi(prompt, answer)`` and normalizes with a softmax, so all prompts
share one parameter vector. Cross-prompt coupling comes from the features:
correct answers of prompts that share a skill all contain a common unit
direction ``u_skill`` with weight ``sqrt(alpha)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError

# Outside every answer space; a label equal to this can never be sampled.
INFEASIBLE = -1


class NoiseClass(str, enum.Enum):
    CLEAN = "clean"
    INACTIVE = "inactive"
    ACTIVE = "active"


@dataclass(frozen=True)
class AnswerSpace:
    prompt_id: int
    answers: tuple[int, ...]
    true_answer: int

    def __post_init__(self):
        answers = tuple(int(a) for a in self.answers)
        object.__setattr__(self, "answers", answers)
        if len(answers) < 2:
            raise ConfigError(f"prompt {self.prompt_id}: need at least 2 answers")
        if len(set(answers)) != len(answers):
            raise ConfigError(f"prompt {self.prompt_id}: duplicate answer ids")
        if any(a < 0 for a in answers):
            raise ConfigError(f"prompt {self.prompt_id}: answer ids must be non-negative")
        if self.true_answer not in answers:
            raise ConfigError(f"prompt {self.prompt_id}: true answer not in answer space")

    def __len__(self):
        return len(self.answers)

    def position(self, answer_id: int) -> int:
        try:
            return self.answers.index(answer_id)
        except ValueError:
            raise DomainError(
                f"answer {answer_id} not in space of prompt {self.prompt_id}"
            ) from None

    @property
    def true_position(self) -> int:
        return self.answers.index(self.true_answer)

    def wrong_answers(self) -> tuple[int, ...]:
        return tuple(a for a in self.answers if a != self.true_answer)


@dataclass(frozen=True)
class LabeledPrompt:
    prompt_id: int
    space: AnswerSpace
    train_label: int
    noise_class: NoiseClass

    def __post_init__(self):
        label, space = self.train_label, self.space
        if label == INFEASIBLE:
            expected = NoiseClass.INACTIVE
        elif label == space.true_answer:
            expected = NoiseClass.CLEAN
        elif label in space.answers:
            expected = NoiseClass.ACTIVE
        else:
            raise ConfigError(
                f"prompt {self.prompt_id}: label {label} is neither an answer nor INFEASIBLE"
            )
        if NoiseClass(self.noise_class) is not expected:
            raise ConfigError(
                f"prompt {self.prompt_id}: label {label} implies {expected.value}, "
                f"got {NoiseClass(self.noise_class).value}"
            )
        object.__setattr__(self, "noise_class", expected)

    @property
    def true_answer(self) -> int:
        return self.space.true_answer


@dataclass
class PolicyParams:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.ndim != 1:
            raise ConfigError("theta must be a vector")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy())

    @classmethod
    def zeros(cls, dim: int) -> "PolicyParams":
        return cls(np.zeros(dim))


@dataclass
class FeatureMap:
    """Frozen features, stored densely as ``phi[row, answer_position, :]``.

    Row order follows ``prompt_ids``; answer positions follow each prompt's
    ``AnswerSpace.answers``.
    """

    dim: int
    prompt_ids: tuple[int, ...]
    phi: np.ndarray
    skill_of: dict[int, int]
    coupling_alpha: float
    skill_dirs: np.ndarray
    seed: int | None = None
    _row: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.ndim != 3 or self.phi.shape[2] != self.dim:
            raise ConfigError("phi must have shape (n_prompts, n_answers, dim)")
        if self.phi.shape[0] != len(self.prompt_ids):
            raise ConfigError("phi rows do not match prompt ids")
        self._row = {pid: i for i, pid in enumerate(self.prompt_ids)}

    def row(self, prompt_id: int) -> int:
        try:
            return self._row[prompt_id]
        except KeyError:
            raise DomainError(f"no features for prompt {prompt_id}") from None

    def vectors(self, prompt_id: int) -> np.ndarray:
        return self.phi[self.row(prompt_id)]

    def vector(self, space: AnswerSpace, answer_id: int) -> np.ndarray:
        return self.phi[self.row(space.prompt_id), space.position(answer_id)]

    def skill_vector(self, weights: Sequence[float] | None = None) -> np.ndarray:
        """Sum of skill directions, optionally weighted."""
        if weights is None:
            return self.skill_dirs.sum(axis=0)
        return np.asarray(weights, dtype=float) @ self.skill_dirs


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_dataset(
    n_prompts: int,
    answers_per_prompt: int,
    n_skills: int,
    coupling_alpha: float,
    dim: int,
    rng_seed: int,
) -> tuple[list[LabeledPrompt], FeatureMap]:
    """Build an all-clean prompt set and its feature map.

    Correct answer of prompt x: ``normalize(sqrt(a) u_s + sqrt(1-a) g)``; wrong
    answers get independent random unit vectors ``g``. Answer ids are
    ``0..m-1`` with the true answer placed uniformly at random.
    """
    if n_prompts < 1:
        raise ConfigError("n_prompts must be >= 1")
    if answers_per_prompt < 2:
        raise ConfigError("answers_per_prompt must be >= 2")
    if not 1 <= n_skills <= n_prompts:
        raise ConfigError("need 1 <= n_skills <= n_prompts")
    if not 0.0 <= coupling_alpha <= 1.0:
        raise ConfigError("coupling_alpha must lie in [0, 1]")
    if dim < n_skills + 1:
        raise ConfigError(
            f"dim={dim} cannot host {n_skills} orthonormal skill directions plus noise"
        )

    rng = np.random.default_rng(rng_seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_skills)))
    skill_dirs = q.T.copy()
    skills = rng.integers(n_skills, size=n_prompts)
    true_pos = rng.integers(answers_per_prompt, size=n_prompts)
    g = _unit_rows(rng.standard_normal((n_prompts, answers_per_prompt, dim)))

    phi = g.copy()
    a = float(coupling_alpha)
    rows = np.arange(n_prompts)
    correct = math.sqrt(a) * skill_dirs[skills] + math.sqrt(1.0 - a) * g[rows, true_pos]
    phi[rows, true_pos] = _unit_rows(correct)

    answers = tuple(range(answers_per_prompt))
    dataset = [
        LabeledPrompt(
            prompt_id=i,
            space=AnswerSpace(i, answers, int(true_pos[i])),
            train_label=int(true_pos[i]),
            noise_class=NoiseClass.CLEAN,
        )
        for i in range(n_prompts)
    ]
    fm = FeatureMap(
        dim=dim,
        prompt_ids=tuple(range(n_prompts)),
        phi=phi,
        skill_of={i: int(skills[i]) for i in range(n_prompts)},
        coupling_alpha=a,
        skill_dirs=skill_dirs,
        seed=int(rng_seed),
    )
    return dataset, fm


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def action_probs(params: PolicyParams, fm: FeatureMap, space: AnswerSpace) -> np.ndarray:
    return softmax(fm.vectors(space.prompt_id) @ params.theta)


def policy_table(params: PolicyParams, fm: FeatureMap) -> np.ndarray:
    """Action probabilities for every prompt at once, shape ``(n_prompts, m)``."""
    return softmax(fm.phi @ params.theta)


def sample_positions(probs: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    if K < 1:
        raise ConfigError("K must be >= 1")
    cdf = np.cumsum(probs)
    idx = np.searchsorted(cdf, rng.random(K) * cdf[-1], side="right")
    return np.minimum(idx, len(probs) - 1)


def sample_rollouts(
    params: PolicyParams,
    fm: FeatureMap,
    space: AnswerSpace,
    K: int,
    rng: np.random.Generator,
    probs: np.ndarray | None = None,
) -> list[int]:
    """K i.i.d. answers from the policy. ``probs`` skips recomputing the softmax."""
    if probs is None:
        probs = action_probs(params, fm, space)
    return [space.answers[i] for i in sample_positions(probs, K, rng)]


def log_prob_grad(
    params: PolicyParams, fm: FeatureMap, space: AnswerSpace, answer_id: int
) -> np.ndarray:
    pos = space.position(answer_id)
    feats = fm.vectors(space.prompt_id)
    probs = softmax(feats @ params.theta)
    return feats[pos] - probs @ feats


def log_prob_grads_at(
    params: PolicyParams, fm: FeatureMap, positions: Iterable[int]
) -> np.ndarray:
    """Score-function gradients for one chosen answer position per prompt row."""
    probs = policy_table(params, fm)
    pos = np.asarray(list(positions))
    rows = np.arange(len(pos))
    mean_feat = np.einsum("nm,nmd->nd", probs, fm.phi)
    return fm.phi[rows, pos] - mean_feat


# -- serialization -----------------------------------------------------------

def label_to_json(label: int):
    return "INFEASIBLE" if label == INFEASIBLE else int(label)


def label_from_json(value) -> int:
    return INFEASIBLE if value == "INFEASIBLE" else int(value)


def dataset_to_json(dataset: Sequence[LabeledPrompt], fm: FeatureMap) -> dict:
    prompts = []
    for p in dataset:
        prompts.append(
            {
                "prompt_id": p.prompt_id,
                "answers": list(p.space.answers),
                "true_answer": p.space.true_answer,
                "train_label": label_to_json(p.train_label),
                "noise_class": p.noise_class.value,
                "skill": fm.skill_of[p.prompt_id],
                "features": fm.vectors(p.prompt_id).tolist(),
            }
        )
    return {
        "seed": fm.seed,
        "coupling_alpha": fm.coupling_alpha,
        "dim": fm.dim,
        "skill_dirs": fm.skill_dirs.tolist(),
        "prompts": prompts,
    }


def dataset_from_json(doc: dict) -> tuple[list[LabeledPrompt], FeatureMap]:
    dataset, feats, skill_of = [], [], {}
    for item in doc["prompts"]:
        pid = int(item["prompt_id"])
        space = AnswerSpace(pid, tuple(item["answers"]), int(item["true_answer"]))
        dataset.append(
            LabeledPrompt(
                pid, space, label_from_json(item["train_label"]), NoiseClass(item["noise_class"])
            )
        )
        feats.append(item["features"])
        skill_of[pid] = int(item["skill"])
    fm = FeatureMap(
        dim=int(doc["dim"]),
        prompt_ids=tuple(p.prompt_id for p in dataset),
        phi=np.array(feats, dtype=float),
        skill_of=skill_of,
        coupling_alpha=float(doc["coupling_alpha"]),
        skill_dirs=np.array(doc["skill_dirs"], dtype=float),
        seed=doc.get("seed"),
    )
    return dataset, fm
