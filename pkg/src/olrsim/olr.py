"""Online label refinement: majority trajectories and the replacement rule."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from .errors import ConfigError, StateError

# Returned by ``slope`` when fewer than two points exist; callers treat it as
# "criterion not met".
NOT_READY = None


class TrajectoryEntry(NamedTuple):
    epoch: int
    majority: int
    pass_rate: float


@dataclass(frozen=True)
class MajorityTrajectory:
    prompt_id: int
    entries: tuple[TrajectoryEntry, ...] = ()
    window: int | None = None

    def __post_init__(self):
        if self.window is not None and self.window < 2:
            raise ConfigError("trajectory window must be >= 2")
        epochs = [e.epoch for e in self.entries]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise StateError(f"prompt {self.prompt_id}: epochs not strictly increasing")

    def __len__(self):
        return len(self.entries)

    @property
    def latest(self) -> TrajectoryEntry:
        if not self.entries:
            raise StateError(f"prompt {self.prompt_id}: empty trajectory")
        return self.entries[-1]


@dataclass(frozen=True)
class OlrConfig:
    delta_slope: float = 0.05
    warmup_T: int = 5

    def __post_init__(self):
        if self.warmup_T < 2:
            raise ConfigError("warmup_T must be >= 2 so the slope is defined")


class OlrDecision(NamedTuple):
    label: int
    selected: bool
    slope: float | None
    consistent: bool


def majority_answer(batch: Sequence[int]) -> tuple[int, float]:
    """Most frequent answer and its share; ties go to the smallest id."""
    if len(batch) == 0:
        raise ConfigError("majority of an empty batch")
    counts = Counter(int(a) for a in batch)
    top = max(counts.values())
    winner = min(a for a, c in counts.items() if c == top)
    return winner, top / len(batch)


def slope(traj: MajorityTrajectory) -> float | None:
    """Least-squares slope of pass rate against epoch (two-pass form)."""
    n = len(traj.entries)
    if n < 2:
        return NOT_READY
    t = [float(e.epoch) for e in traj.entries]
    p = [e.pass_rate for e in traj.entries]
    t_bar = sum(t) / n
    p_bar = sum(p) / n
    num = 0.0
    den = 0.0
    for ti, pi in zip(t, p):
        dt = ti - t_bar
        num += dt * (pi - p_bar)
        den += dt * dt
    return num / den


def historical_majority(traj: MajorityTrajectory) -> int:
    """Answer that was the majority most often.

    Ties prefer the latest entry's majority, then the smallest id.
    """
    if not traj.entries:
        raise StateError(f"prompt {traj.prompt_id}: empty trajectory")
    counts = Counter(e.majority for e in traj.entries)
    top = max(counts.values())
    tied = [a for a, c in counts.items() if c == top]
    latest = traj.entries[-1].majority
    if latest in tied:
        return latest
    return min(tied)


def consistency(traj: MajorityTrajectory) -> bool:
    return traj.latest.majority == historical_majority(traj)


def decide(
    traj: MajorityTrajectory, train_label: int, epoch: int, cfg: OlrConfig
) -> OlrDecision:
    """Effective label plus the diagnostics behind it."""
    s = slope(traj)
    consistent = consistency(traj) if traj.entries else False
    if epoch <= cfg.warmup_T or s is NOT_READY:
        return OlrDecision(train_label, False, s, consistent)
    if s > cfg.delta_slope and consistent:
        return OlrDecision(traj.latest.majority, True, s, consistent)
    return OlrDecision(train_label, False, s, consistent)


def effective_label(
    traj: MajorityTrajectory, train_label: int, epoch: int, cfg: OlrConfig
) -> int:
    return decide(traj, train_label, epoch, cfg).label


def update_trajectory(traj: MajorityTrajectory, epoch: int, batch) -> MajorityTrajectory:
    """Append this epoch's majority and pass rate; ``batch`` is answer ids or a RolloutBatch."""
    answers = getattr(batch, "answers", batch)
    if traj.entries and epoch <= traj.entries[-1].epoch:
        raise StateError(
            f"prompt {traj.prompt_id}: epoch {epoch} after {traj.entries[-1].epoch}"
        )
    maj, rate = majority_answer(answers)
    entries = traj.entries + (TrajectoryEntry(int(epoch), maj, rate),)
    if traj.window is not None and len(entries) > traj.window:
        entries = entries[-traj.window:]
    return MajorityTrajectory(traj.prompt_id, entries, traj.window)


def trajectory_to_json(traj: MajorityTrajectory) -> list[list]:
    return [[e.epoch, e.majority, e.pass_rate] for e in traj.entries]
