"""End-to-end training loop, output files and noise-ratio sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .baselines import (
    ANALOG_STRATEGIES,
    Strategy,
    entropy_regularizers,
    random_select,
    small_loss_select,
    smooth_rewards,
    surrogate_loss,
    ttrl_label,
)
from .core import (
    INFEASIBLE,
    LabeledPrompt,
    NoiseClass,
    PolicyParams,
    dataset_to_json,
    generate_dataset,
    label_to_json,
    policy_table,
    sample_rollouts,
)
from .errors import ConfigError, OlrSimError, OutputError
from .grpo import UpdateConfig, grpo_step, make_batch, verify_reward
from .noise import (
    ActiveMode,
    designate_noisy,
    inject_active_noise,
    inject_inactive_noise,
    measure_realized_noise,
)
from .olr import MajorityTrajectory, OlrConfig, decide, trajectory_to_json, update_trajectory
from .theory import TheoryReport, build_report, log_ratios

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch",
    "clean_majority_acc",
    "noisy_majority_acc",
    "selection_ratio_clean",
    "selection_ratio_noisy",
    "selected_majority_acc",
    "unselected_majority_acc",
    "realized_noise",
    "initial_noise",
    "mean_slope",
    "mean_L_t",
    "mean_reward",
    "gamma",
    "G_c",
    "G_n",
    "rho_c",
    "rho_c_kl",
    "rho_c_kl_clamped",
    "delta_ref",
    "drift",
    "rho_eff",
    "rho_c_olr",
)
EVENT_COLUMNS = (
    "epoch",
    "prompt_id",
    "majority",
    "pass_rate",
    "slope",
    "consistent",
    "selected",
    "effective_label",
    "noise_class",
)
METRICS_HEADER = ",".join(METRIC_COLUMNS)
EVENTS_HEADER = ",".join(EVENT_COLUMNS)
PHASE_COLUMNS = ("rho", "seed", "L_0", "L_T", "L_sign", "noisy_majority_acc", "rho_c_hat")

SELECT_STRATEGIES = (Strategy.RANDOM_SELECT, Strategy.SMALL_LOSS)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_prompts: int = 200
    answers_per_prompt: int = 5
    n_skills: int = 4
    coupling_alpha: float = 0.5
    dim: int = 64
    K: int = 8
    epochs: int = 20
    noise_type: str = "active"
    active_mode: str = "dynamic"
    rho: float = 0.5
    strategy: str = "grpo"
    eta: float = 0.5
    beta: float = 0.0
    clip_eps: float = 0.2
    adv_eps: float = 1e-6
    delta_slope: float = 0.05
    warmup_T: int = 5
    selection_fraction: float | None = None
    reg_coef: float = 0.1
    init_bias: float = 0.0
    ref_bias: float | None = None
    history_window: int | None = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.noise_type not in ("inactive", "active"):
            raise ConfigError(f"noise_type must be inactive or active, got {self.noise_type!r}")
        try:
            ActiveMode(self.active_mode)
            Strategy(self.strategy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if Strategy(self.strategy) in SELECT_STRATEGIES:
            f = self.selection_fraction
            if f is None or not 0.0 < f <= 1.0:
                raise ConfigError(f"strategy {self.strategy} needs selection_fraction in (0, 1]")
        if self.history_window is not None and self.history_window < 2:
            raise ConfigError("history_window must be >= 2")
        # delegate remaining range checks to the owning modules
        self.update_config()
        self.olr_config()
        entropy_regularizers(self.strategy, self.reg_coef)

    def update_config(self) -> UpdateConfig:
        return UpdateConfig(self.eta, self.beta, self.clip_eps, self.adv_eps)

    def olr_config(self) -> OlrConfig:
        return OlrConfig(self.delta_slope, self.warmup_T)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from strings or native values; unknown keys are rejected."""
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            kwargs[key] = _coerce(key, known[key].type, raw)
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_mapping({**dataclasses.asdict(self), **changes})


def _coerce(key: str, type_name: str, raw):
    optional = "None" in str(type_name)
    if optional and (raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none"))):
        return None
    base = str(type_name).split("|")[0].strip()
    try:
        if base == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if base == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key}: cannot read {raw!r} as {base}") from None


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key}")
        values[key] = value
    return values


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(overrides or {})
    return RunConfig.from_mapping(values)


# -- seeding -------------------------------------------------------------------

def stream_seed(seed: int, tag: str, prompt_id: int | None = None) -> np.random.SeedSequence:
    """Master seed + component tag (+ prompt id) -> independent stream."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())]
    if prompt_id is not None:
        key.append(int(prompt_id) + 1)
    return np.random.SeedSequence(key)


def stream(seed: int, tag: str, prompt_id: int | None = None) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, tag, prompt_id))


# -- run -----------------------------------------------------------------------

@dataclass
class EpochState:
    """Handed to the ``on_epoch`` hook after each update (read-only view)."""

    epoch: int
    dataset: list[LabeledPrompt]
    noisy_ids: frozenset[int]
    batches: list
    grad_prompt_ids: list[int]
    prompt_grads: np.ndarray
    params_before: PolicyParams
    params_after: PolicyParams
    effective_labels: dict[int, int]
    selected: dict[int, bool]
    feature_map: object = None


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[dict] = field(default_factory=list)
    theory: list[TheoryReport] = field(default_factory=list)
    events: list[tuple] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    initial_L: float = math.nan
    final_L: float = math.nan
    final_params: PolicyParams | None = None
    status: str = "completed"

    def warmup_rho_c(self) -> float:
        """Mean of the per-epoch critical ratio over the warmup epochs."""
        vals = [r.rho_c for r in self.theory[: self.config.warmup_T]]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


class RunAborted(OlrSimError):
    """A module error interrupted the run; ``partial`` holds everything up to it."""

    def __init__(self, cause: OlrSimError, epoch: int, partial: RunResult):
        pid = getattr(cause, "prompt_id", None)
        where = f"epoch {epoch}" + (f", prompt {pid}" if pid is not None else "")
        super().__init__(f"run aborted at {where}: {cause}")
        self.cause = cause
        self.epoch = epoch
        self.partial = partial
        self.exit_code = cause.exit_code


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan


def _rate(flags) -> float:
    flags = list(flags)
    return sum(flags) / len(flags) if flags else math.nan


def initial_params(cfg: RunConfig, fm) -> tuple[PolicyParams, PolicyParams]:
    """Starting policy and KL reference.

    ``init_bias`` tilts the start along the sum of skill directions, so correct
    answers start ahead; ``ref_bias`` does the same for the reference and
    defaults to the start itself.
    """
    skills = fm.skill_vector()
    theta0 = cfg.init_bias * skills
    ref_bias = cfg.init_bias if cfg.ref_bias is None else cfg.ref_bias
    return PolicyParams(theta0), PolicyParams(ref_bias * skills)


def _mean_log_ratio(params, fm, prompts) -> float:
    """Mean noisy log-ratio; 0 when there is no active noisy prompt, so a clean run reads as flat."""
    vals = list(log_ratios(params, fm, prompts).values())
    return float(np.mean(vals)) if vals else 0.0


def _median(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.median(vals)) if vals else math.nan


def run_experiment(
    cfg: RunConfig, on_epoch: Callable[[EpochState], None] | None = None
) -> RunResult:
    """Dataset -> noise -> epochs of (rollouts, label refresh, refinement, update)."""
    strategy = Strategy(cfg.strategy)
    ucfg, ocfg = cfg.update_config(), cfg.olr_config()
    reg = entropy_regularizers(strategy, cfg.reg_coef)

    data_seed = int(stream_seed(cfg.seed, "dataset").generate_state(1)[0])
    dataset, fm = generate_dataset(
        cfg.n_prompts, cfg.answers_per_prompt, cfg.n_skills, cfg.coupling_alpha, cfg.dim, data_seed
    )
    params, ref = initial_params(cfg, fm)
    noise_rng = stream(cfg.seed, "noise")
    if cfg.noise_type == "inactive":
        dataset = inject_inactive_noise(dataset, cfg.rho, noise_rng)
        noisy_ids = frozenset(p.prompt_id for p in dataset if p.noise_class is NoiseClass.INACTIVE)
    else:
        ids = designate_noisy(dataset, cfg.rho, noise_rng)
        dataset = inject_active_noise(
            dataset, params, fm, noise_rng, ActiveMode.STATIC, noisy_ids=ids
        )
        noisy_ids = frozenset(ids)
    dynamic = cfg.noise_type == "active" and ActiveMode(cfg.active_mode) is ActiveMode.DYNAMIC
    n = len(dataset)
    initial_noise = len(noisy_ids) / n
    initial_dataset = list(dataset)
    spaces = {p.prompt_id: p.space for p in dataset}
    rows = {p.prompt_id: fm.row(p.prompt_id) for p in dataset}

    rollout_rngs = {p.prompt_id: stream(cfg.seed, "rollout", p.prompt_id) for p in dataset}
    select_rng = stream(cfg.seed, "select")
    trajs = {p.prompt_id: MajorityTrajectory(p.prompt_id, window=cfg.history_window) for p in dataset}
    label_history = {pid: [] for pid in sorted(noisy_ids)}

    result = RunResult(cfg)
    result.initial_L = _mean_log_ratio(params, fm, dataset)

    def finish(status: str):
        result.status = status
        result.final_params = params
        result.final_L = _mean_log_ratio(params, fm, dataset)
        result.manifest = build_manifest(
            cfg, initial_dataset, dataset, fm, noisy_ids, label_history, trajs,
            initial_params(cfg, fm)[0], params, len(result.metrics), status,
            analog=reg.analog or strategy in ANALOG_STRATEGIES,
        )

    epoch = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            table = policy_table(params, fm)
            rollouts = {
                p.prompt_id: sample_rollouts(
                    params, fm, p.space, cfg.K, rollout_rngs[p.prompt_id],
                    probs=table[rows[p.prompt_id]],
                )
                for p in dataset
            }
            if dynamic:
                dataset = inject_active_noise(
                    dataset, params, fm, noise_rng, ActiveMode.DYNAMIC, rollouts, noisy_ids
                )
            for pid in label_history:
                label_history[pid].append(dataset[rows[pid]].train_label)

            effective, selected, diag = {}, {}, {}
            for p in dataset:
                pid = p.prompt_id
                trajs[pid] = update_trajectory(trajs[pid], epoch, rollouts[pid])
                d = decide(trajs[pid], p.train_label, epoch, ocfg)
                diag[pid] = d
                if strategy is Strategy.OLR:
                    effective[pid], selected[pid] = d.label, d.selected
                elif strategy is Strategy.TTRL:
                    effective[pid], selected[pid] = ttrl_label(rollouts[pid]), True
                else:
                    effective[pid], selected[pid] = p.train_label, False

            batches = {}
            raw_rewards = []
            for p in dataset:
                pid = p.prompt_id
                rewards = [verify_reward(a, effective[pid]) for a in rollouts[pid]]
                raw_rewards.extend(rewards)
                if reg.reward_smoothing:
                    rewards = smooth_rewards(rewards, reg.reward_smoothing, len(p.space))
                batches[pid] = make_batch(pid, epoch, rollouts[pid], effective[pid], cfg.adv_eps, rewards)

            if strategy is Strategy.RANDOM_SELECT:
                keep = set(random_select(dataset, cfg.selection_fraction, select_rng))
                selected = {pid: pid in keep for pid in selected}
            elif strategy is Strategy.SMALL_LOSS:
                losses = {
                    p.prompt_id: surrogate_loss(batches[p.prompt_id], params, fm, p.space)
                    for p in dataset
                }
                keep = set(small_loss_select(losses, cfg.selection_fraction))
                selected = {pid: pid in keep for pid in selected}
            train = [
                batches[pid] for pid in sorted(batches)
                if strategy not in SELECT_STRATEGIES or selected[pid]
            ]

            majority_ok = {
                p.prompt_id: trajs[p.prompt_id].latest.majority == p.true_answer for p in dataset
            }
            clean_ids = [p.prompt_id for p in dataset if p.prompt_id not in noisy_ids]
            noisy_list = sorted(noisy_ids)
            sel_ids = [pid for pid in selected if selected[pid]]
            unsel_ids = [pid for pid in selected if not selected[pid]]
            row = {
                "epoch": epoch,
                "clean_majority_acc": _rate(majority_ok[i] for i in clean_ids),
                "noisy_majority_acc": _rate(majority_ok[i] for i in noisy_list),
                "selection_ratio_clean": _rate(selected[i] for i in clean_ids),
                "selection_ratio_noisy": _rate(selected[i] for i in noisy_list),
                "selected_majority_acc": _rate(majority_ok[i] for i in sel_ids),
                "unselected_majority_acc": _rate(majority_ok[i] for i in unsel_ids),
                "realized_noise": measure_realized_noise(dataset, effective),
                "initial_noise": initial_noise,
                "mean_slope": _mean(d.slope for d in diag.values() if d.slope is not None),
                "mean_reward": _mean(raw_rewards),
            }
            delta_hat = 0.0
            if strategy in (Strategy.OLR, Strategy.TTRL) and noisy_list:
                delta_hat = row["selection_ratio_noisy"]
            report = build_report(
                params, ref, fm, dataset, list(batches.values()), noisy_ids,
                initial_noise, cfg.beta, delta_hat,
            )
            row["mean_L_t"] = report.mean_L_t
            for key in ("gamma", "G_c", "G_n", "rho_c", "rho_c_kl", "rho_c_kl_clamped",
                        "delta_ref", "drift", "rho_eff", "rho_c_olr"):
                row[key] = getattr(report, key)

            for p in dataset:
                pid = p.prompt_id
                d = diag[pid]
                entry = trajs[pid].latest
                result.events.append((
                    epoch, pid, entry.majority, entry.pass_rate, d.slope,
                    int(d.consistent), int(selected[pid]), effective[pid], p.noise_class.value,
                ))

            new_params, grads, grad_ids = grpo_step(
                params, params, ref, fm, train, ucfg, spaces, reg.entropy_coef
            )
            result.metrics.append(row)
            result.theory.append(report)
            if on_epoch is not None:
                on_epoch(EpochState(
                    epoch, list(dataset), noisy_ids, train, grad_ids, grads,
                    params, new_params, dict(effective), dict(selected), fm,
                ))
            params = new_params
    except OlrSimError as exc:
        finish("aborted")
        raise RunAborted(exc, epoch, result) from exc

    finish("completed")
    return result


# -- outputs -------------------------------------------------------------------

def build_manifest(
    cfg, initial_dataset, dataset, fm, noisy_ids, label_history, trajs,
    theta_initial, theta_final, epochs_done, status, analog,
) -> dict:
    noise = []
    for p in initial_dataset:
        if p.prompt_id in noisy_ids:
            noise.append({
                "prompt_id": p.prompt_id,
                "noise_class": p.noise_class.value,
                "label_history": [label_to_json(x) for x in label_history.get(p.prompt_id, [])],
            })
    return {
        "library": {"name": "olrsim", "version": __version__},
        "config": dataclasses.asdict(cfg),
        "strategy": {"name": cfg.strategy, "analog": bool(analog)},
        "status": status,
        "epochs_completed": epochs_done,
        "dataset": dataset_to_json(initial_dataset, fm),
        "final_labels": {str(p.prompt_id): label_to_json(p.train_label) for p in dataset},
        "noise": noise,
        "trajectories": {str(pid): trajectory_to_json(t) for pid, t in sorted(trajs.items())},
        "theta_initial": theta_initial.theta.tolist(),
        "theta_final": theta_final.theta.tolist(),
    }


def fmt(value) -> str:
    """Decimal, 9 significant digits; blank for missing values."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    v = float(value)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".9g")


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def metrics_csv(result: RunResult) -> str:
    return _csv_text(METRIC_COLUMNS, ([m[c] for c in METRIC_COLUMNS] for m in result.metrics))


def events_csv(result: RunResult) -> str:
    def rows():
        for ev in result.events:
            ev = list(ev)
            ev[7] = "INFEASIBLE" if ev[7] == INFEASIBLE else ev[7]
            yield ev
    return _csv_text(EVENT_COLUMNS, rows())


def _check_writable(out_dir: Path):
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".olrsim-write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"cannot write to {out_dir}: {exc}") from None


def emit_outputs(result: RunResult, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write metrics.csv, events.csv and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    _check_writable(out)
    files = {
        "metrics.csv": metrics_csv(result),
        "events.csv": events_csv(result),
        "manifest.json": json.dumps(result.manifest, indent=1, sort_keys=True) + "\n",
    }
    paths = {}
    for name, text in files.items():
        path = out / name
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(text)
        paths[name] = path
    return paths


def config_from_manifest(manifest: dict) -> RunConfig:
    return RunConfig.from_mapping(manifest["config"])


# -- sweeps --------------------------------------------------------------------

def sweep_phase_diagram(
    base_cfg: RunConfig, rho_values: Sequence[float], seeds: Sequence[int]
) -> list[dict]:
    """One row per (rho, seed): log-ratio start/end, noisy accuracy, measured rho_c."""
    if not rho_values or not seeds:
        raise ConfigError("sweep needs at least one rho and one seed")
    rows = []
    for rho in rho_values:
        for seed in seeds:
            res = run_experiment(base_cfg.replace(rho=rho, seed=seed))
            L0, LT = res.initial_L, res.final_L
            sign = math.nan if math.isnan(L0) or math.isnan(LT) else float(np.sign(LT - L0))
            acc = res.metrics[-1]["noisy_majority_acc"] if res.metrics else math.nan
            rows.append({
                "rho": float(rho), "seed": int(seed), "L_0": L0, "L_T": LT,
                "L_sign": sign, "noisy_majority_acc": acc, "rho_c_hat": res.warmup_rho_c(),
            })
    return rows


def phase_summary(rows: Sequence[dict]) -> list[dict]:
    """Median per rho of ``L_T - L_0``, noisy accuracy and measured rho_c."""
    out = []
    for rho in sorted({r["rho"] for r in rows}):
        sub = [r for r in rows if r["rho"] == rho]
        out.append({
            "rho": rho,
            "median_dL": _median(r["L_T"] - r["L_0"] for r in sub),
            "median_noisy_acc": _median(r["noisy_majority_acc"] for r in sub),
            "median_rho_c_hat": _median(r["rho_c_hat"] for r in sub),
        })
    return out


def collapse_threshold(summary: Sequence[dict]) -> float:
    """Smallest rho where the median log-ratio change turns negative.

    Linear interpolation between the last non-negative and first negative
    grid point; nan if it never turns negative.
    """
    prev = None
    for row in summary:
        if row["median_dL"] < 0:
            if prev is None:
                return row["rho"]
            r0, d0 = prev["rho"], prev["median_dL"]
            r1, d1 = row["rho"], row["median_dL"]
            return r0 + (r1 - r0) * d0 / (d0 - d1)
        prev = row
    return math.nan


def phase_csv(rows: Sequence[dict]) -> str:
    return _csv_text(PHASE_COLUMNS, ([r[c] for c in PHASE_COLUMNS] for r in rows))
