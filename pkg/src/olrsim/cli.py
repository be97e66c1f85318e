"""Command line entry point: ``olrsim {run,sweep,probe,replay}``.

Exit codes follow the error class (see ``errors``); ``OLRSIM_OUT_DIR``
overrides the output directory of every subcommand.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import LabeledPrompt, PolicyParams, dataset_from_json, label_from_json, sample_rollouts
from .errors import ConfigError, OlrSimError, OutputError
from .grpo import make_batch
from .noise import classify_label
from .runner import (
    RunAborted,
    RunConfig,
    collapse_threshold,
    config_from_manifest,
    emit_outputs,
    fmt,
    initial_params,
    load_config,
    phase_csv,
    phase_summary,
    run_experiment,
    stream,
    sweep_phase_diagram,
    _check_writable,
)
from .theory import build_report

log = logging.getLogger("olrsim")

OUT_DIR_ENV = "OLRSIM_OUT_DIR"


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key = value config file")
    group = parser.add_argument_group("run config (overrides the file)")
    for f in dataclasses.fields(RunConfig):
        group.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar=f.name.upper())


def _overrides(args) -> dict:
    return {
        key[4:]: value
        for key, value in vars(args).items()
        if key.startswith("cfg_") and value is not None
    }


def _out_dir(default: str) -> str:
    return os.environ.get(OUT_DIR_ENV) or default


def _config(args) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise ConfigError(f"config file not found: {args.config}")
    return load_config(args.config, _overrides(args))


def _read_manifest(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None


def _execute(cfg: RunConfig, out_dir: str) -> int:
    out = Path(out_dir)
    _check_writable(out)
    try:
        result = run_experiment(cfg)
    except RunAborted as exc:
        emit_outputs(exc.partial, out)
        log.error("%s (partial outputs in %s)", exc, out)
        return exc.exit_code
    emit_outputs(result, out)
    last = result.metrics[-1] if result.metrics else {}
    print(f"wrote {out}  epochs={len(result.metrics)}  "
          f"noisy_majority_acc={fmt(last.get('noisy_majority_acc'))}  "
          f"realized_noise={fmt(last.get('realized_noise'))}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    return _execute(cfg, _out_dir(cfg.out_dir))


def cmd_replay(args) -> int:
    cfg = config_from_manifest(_read_manifest(args.manifest))
    return _execute(cfg, _out_dir(args.out_dir or cfg.out_dir))


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as a comma-separated list of numbers") from None


def _seed_list(text: str) -> list[int]:
    """``0-19`` or ``1,5,9``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(x) for x in text.split("-", 1))
            return list(range(lo, hi + 1))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot read seeds {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(_out_dir(cfg.out_dir))
    _check_writable(out)
    rows = sweep_phase_diagram(cfg, _float_list(args.rho_values), _seed_list(args.seeds))
    summary = phase_summary(rows)
    threshold = collapse_threshold(summary)
    (out / "phase.csv").write_text(phase_csv(rows))
    doc = {
        "config": dataclasses.asdict(cfg),
        "summary": summary,
        "collapse_threshold": None if math.isnan(threshold) else threshold,
    }
    (out / "phase_summary.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    for s in summary:
        print(f"rho={fmt(s['rho'])}  median_dL={fmt(s['median_dL'])}  "
              f"noisy_acc={fmt(s['median_noisy_acc'])}  rho_c_hat={fmt(s['median_rho_c_hat'])}")
    print(f"collapse_threshold={fmt(threshold)}")
    return 0


def probe_manifest(manifest: dict, K: int | None = None) -> dict:
    """Theory quantities at the manifest's final policy and final labels.

    Rollouts for the advantage magnitudes are drawn from a dedicated
    ``probe`` stream of the run seed, so the result is reproducible.
    """
    cfg = config_from_manifest(manifest)
    K = cfg.K if K is None else K
    initial, fm = dataset_from_json(manifest["dataset"])
    theta = PolicyParams(np.array(manifest["theta_final"], dtype=float))
    _, ref = initial_params(cfg, fm)
    finals = manifest["final_labels"]
    dataset = []
    for p in initial:
        label = label_from_json(finals[str(p.prompt_id)])
        dataset.append(LabeledPrompt(
            p.prompt_id, p.space, label, classify_label(theta, fm, p.space, label)))
    noisy_ids = {item["prompt_id"] for item in manifest["noise"]}
    batches = []
    for p in dataset:
        answers = sample_rollouts(theta, fm, p.space, K, stream(cfg.seed, "probe", p.prompt_id))
        batches.append(make_batch(p.prompt_id, 0, answers, p.train_label, cfg.adv_eps))
    rho = len(noisy_ids) / len(dataset) if dataset else 0.0
    report = build_report(theta, ref, fm, dataset, batches, noisy_ids, rho, cfg.beta, 0.0)
    out = {k: v for k, v in dataclasses.asdict(report).items() if k != "L_t"}
    out["mean_L_t"] = report.mean_L_t
    out["K"] = K
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in out.items()}


def cmd_probe(args) -> int:
    manifest = _read_manifest(args.manifest)
    doc = probe_manifest(manifest, args.K)
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    out_dir = os.environ.get(OUT_DIR_ENV) or args.out_dir
    if out_dir:
        out = Path(out_dir)
        _check_writable(out)
        (out / "probe.json").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="olrsim", description="Tabular GRPO simulator with noisy labels and online label refinement.")
    parser.add_argument("--version", action="version", version=f"olrsim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="rho x seed phase grid")
    _add_config_flags(p)
    p.add_argument("--rho-values", required=True, help="comma-separated noise ratios")
    p.add_argument("--seeds", default="0-19", help="range a-b or comma list (default 0-19)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="theory quantities from a finished run's manifest")
    p.add_argument("manifest")
    p.add_argument("--K", type=int, default=None, help="rollouts per prompt (default: run's K)")
    p.add_argument("--out-dir", default=None, help="also write probe.json here")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("replay", help="re-run the configuration stored in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except OlrSimError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return OutputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
