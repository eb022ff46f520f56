"""Command line pipeline: collect, pretrain, train, eval and ood stages.

Usage::

    agnocomm collect|pretrain|train|eval|ood --config <path> [--seed N] [--out DIR]

Exit codes: 0 success, 1 configuration or runtime error, 2 out-of-distribution
detected (``ood`` only).

Run directory layout::

    config.snapshot  manifest.json  checkpoints/  metrics/  eval/
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, checkpoint
from .config import RunConfig, load_config
from .errors import AgnocommError, ConfigurationError
from .ood import OodCalibration, assess, fit_threshold, verdict_line
from .pisa import SetAutoencoder
from .ppo import ArmId, IterationMetrics, PolicyParams, evaluate_policy, summarize_seeds, train_arm
from .pretrain import (
    RANDOM_POLICY,
    PretrainDataset,
    collect_random_observations,
    collect_random_policy,
    pretrain,
    save_report,
)

log = logging.getLogger("agnocomm")

METRICS_HEADER = ("iteration", "env_steps", "mean_return", "return_p2.5", "return_p97.5",
                  "recon_rmse_mean", "kl", "entropy", "recon_loss_mean")
OOD_COLUMNS = ("window_recon_loss", "threshold", "ood_flag")
AGGREGATE_HEADER = ("iteration", "env_steps", "mean_return", "return_p2.5", "return_p97.5", "n_seeds")

EXIT_OK, EXIT_ERROR, EXIT_OOD = 0, 1, 2

REQUIRED = {
    "collect": ("collect.mode", "collect.samples", "collect.agent_counts"),
    "pretrain": ("run.dataset",),
    "train": ("run.arm", "run.task"),
    "eval": (),
    "ood": (),
}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunDir:
    """Run directory with a manifest recording every completed stage."""

    def __init__(self, root: str | Path, config: RunConfig):
        self.root = Path(root)
        self.config = config
        self.manifest_path = self.root / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"version": __version__, "stages": {}}

    def check_rerun(self, stage: str) -> bool:
        """True when ``stage`` already completed with this config (no-op).

        Raises when it completed with a different config or lost artifacts.
        """
        entry = self.manifest()["stages"].get(stage)
        if entry is None:
            return False
        if entry["config_hash"] != self.config.digest():
            raise ConfigurationError(
                f"{self.root} already holds a '{stage}' run with a different config; refusing to overwrite"
            )
        missing = [p for p in entry["artifacts"] if not (self.root / p).exists()]
        if missing:
            raise ConfigurationError(f"{self.root}: completed '{stage}' run is missing {missing[0]}")
        return True

    def begin(self) -> str:
        self.root.mkdir(parents=True, exist_ok=True)
        snap = self.root / "config.snapshot"
        if not snap.exists():
            snap.write_text(self.config.snapshot())
        return _now()

    def finish(self, stage: str, started: str, artifacts: Sequence[Path]) -> None:
        manifest = self.manifest()
        manifest["version"] = __version__
        manifest["stages"][stage] = {
            "config_hash": self.config.digest(),
            "started": started,
            "finished": _now(),
            "artifacts": sorted(str(Path(p).relative_to(self.root)) for p in artifacts),
        }
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# metrics files

def write_metrics(path: Path, metrics: Sequence[IterationMetrics],
                  verdicts: Sequence[tuple[float, float, str]] | None = None) -> None:
    header = METRICS_HEADER + (OOD_COLUMNS if verdicts is not None else ())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, m in enumerate(metrics):
            row = [m.iteration, m.env_steps, m.mean_return, m.return_p2_5, m.return_p97_5,
                   m.recon_rmse_mean, m.kl, m.entropy, m.recon_loss_mean]
            if verdicts is not None:
                row.extend(verdicts[i])
            writer.writerow([_fmt(v) for v in row])


def read_metrics(path: Path) -> dict[str, list]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = tuple(reader.fieldnames or ())
    if header[: len(METRICS_HEADER)] != METRICS_HEADER:
        raise ConfigurationError(f"unexpected metrics header in {path}")
    return {k: [r[k] for r in rows] for k in header}


def aggregate_rows(per_seed: Sequence[dict[str, list]]) -> list[tuple]:
    """Per iteration: mean and 2.5/97.5 percentiles of mean_return across seeds."""
    n_iter = min(len(m["iteration"]) for m in per_seed)
    rows = []
    for i in range(n_iter):
        vals = np.array([float(m["mean_return"][i]) for m in per_seed])
        rows.append((i, int(per_seed[0]["env_steps"][i]), float(vals.mean()), float(np.percentile(vals, 2.5)),
                     float(np.percentile(vals, 97.5)), len(vals)))
    return rows


def write_aggregate(path: Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_HEADER)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def ood_verdicts(losses: Sequence[float], cal: OodCalibration, window: int) -> list[tuple[float, float, str]]:
    out = []
    for i in range(len(losses)):
        tail = [x for x in losses[max(0, i + 1 - window): i + 1] if not math.isnan(x)]
        if not tail:
            out.append((float("nan"), cal.threshold, ""))
            continue
        v = assess(tail, cal)
        out.append((v.window_mean_loss, v.threshold, v.flag))
    return out


# --------------------------------------------------------------------------
# subcommands

def cmd_collect(config: RunConfig, out: Path) -> int:
    run = RunDir(out, config)
    if run.check_rerun("collect"):
        log.info("collect already complete in %s", out)
        return EXIT_OK
    started = run.begin()
    c = config.collect
    if c.mode == RANDOM_POLICY:
        ds = collect_random_policy(config.env, c.samples, c.agent_counts, task=config.run.task, seed=c.seed,
                                   n_envs=c.n_envs)
    else:
        ds = collect_random_observations(config.env, c.samples, c.agent_counts, seed=c.seed)
    path = ds.save(out / "dataset.agno")
    run.finish("collect", started, [path, out / "config.snapshot"])
    log.info("wrote %d sets to %s", len(ds), path)
    return EXIT_OK


def cmd_pretrain(config: RunConfig, out: Path) -> int:
    run = RunDir(out, config)
    if run.check_rerun("pretrain"):
        log.info("pretrain already complete in %s", out)
        return EXIT_OK
    dataset_path = Path(config.run.dataset)
    if not dataset_path.exists():
        raise ConfigurationError(f"dataset not found: {dataset_path}")
    started = run.begin()
    ds = PretrainDataset.load(dataset_path)
    report = pretrain(ds, config.ae, d_obs=config.env.obs_dim)
    paths = save_report(report, out / "metrics")
    ckpt = out / "checkpoints" / "autoencoder.agno"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    Path(paths.pop("checkpoint")).replace(ckpt)
    cal = fit_threshold(report)
    cal_path = out / "calibration.json"
    cal.save(cal_path)
    run.finish("pretrain", started, [ckpt, cal_path, out / "config.snapshot", *paths.values()])
    log.info("pretrain done: loss mean %.3g std %.3g threshold %.3g", cal.loss_mean, cal.loss_std, cal.threshold)
    return EXIT_OK


def _load_encoder(config: RunConfig) -> SetAutoencoder | None:
    arm = ArmId(config.run.arm)
    if arm is ArmId.NO_COMMS:
        return None
    if not config.run.encoder:
        raise ConfigurationError(f"arm {arm.value} requires run.encoder (an autoencoder checkpoint)")
    return SetAutoencoder.from_tensors(checkpoint.load(config.run.encoder))


def _load_calibration(config: RunConfig) -> OodCalibration | None:
    if not config.run.calibration:
        return None
    path = Path(config.run.calibration)
    if not path.exists():
        raise ConfigurationError(f"calibration not found: {path}")
    return OodCalibration.load(path)


def _train_seed(config: RunConfig, seed: int, encoder: SetAutoencoder | None, callback=None):
    noise = config.run.noise_agent if config.run.noise_agent >= 0 else None
    return train_arm(config.env, config.run.task, config.run.arm, config.train, seed, autoencoder=encoder,
                     d_z=config.ae.d_z, epsilon=config.comm.epsilon, train_encoder=config.run.train_encoder,
                     noise_agent=noise, callback=callback)


def cmd_train(config: RunConfig, out: Path) -> int:
    run = RunDir(out, config)
    if run.check_rerun("train"):
        log.info("train already complete in %s", out)
        return EXIT_OK
    encoder = _load_encoder(config)
    cal = _load_calibration(config)
    started = run.begin()
    metrics_dir = out / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    artifacts: list[Path] = [out / "config.snapshot"]
    per_seed = []
    for seed in config.seeds:
        log.info("training %s on %s, seed %d", config.run.arm, config.run.task, seed)
        result = _train_seed(config, seed, encoder)
        if encoder is not None and not config.run.train_encoder:
            if result.encoder_checksum_before != result.encoder_checksum_after:
                raise AgnocommError("frozen encoder changed during training")
        ckpt_dir = out / "checkpoints" / f"seed_{seed}"
        artifacts.append(checkpoint.save(ckpt_dir / "policy.agno", result.params.tensors()))
        if config.run.train_encoder:
            artifacts.append(checkpoint.save(ckpt_dir / "encoder.agno", result.encoder.tensors()))
        verdicts = None
        if cal is not None:
            verdicts = ood_verdicts([m.recon_loss_mean for m in result.metrics], cal, config.run.ood_window)
        mpath = metrics_dir / f"seed_{seed}.csv"
        write_metrics(mpath, result.metrics, verdicts)
        artifacts.append(mpath)
        per_seed.append(read_metrics(mpath))
    agg = metrics_dir / "aggregate.csv"
    write_aggregate(agg, aggregate_rows(per_seed))
    artifacts.append(agg)
    run.finish("train", started, artifacts)
    return EXIT_OK


def _snapshot_config(out: Path) -> RunConfig:
    snap = out / "config.snapshot"
    if not snap.exists():
        raise ConfigurationError(f"{out} is not a run directory (no config.snapshot)")
    return load_config(snap)


def cmd_eval(out: Path, episodes: int | None) -> int:
    config = _snapshot_config(out)
    if episodes is not None:
        config = replace(config, run=replace(config.run, eval_episodes=episodes))
    run = RunDir(out, config)
    if run.check_rerun("eval"):
        log.info("evaluation already complete in %s", out)
        return EXIT_OK
    encoder = _load_encoder(config)
    per_seed = {}
    for seed in config.seeds:
        ckpt_dir = out / "checkpoints" / f"seed_{seed}"
        params = PolicyParams.from_tensors(checkpoint.load(ckpt_dir / "policy.agno"))
        enc = encoder
        if config.run.train_encoder:
            enc = SetAutoencoder.from_tensors(checkpoint.load(ckpt_dir / "encoder.agno"))
        per_seed[seed] = evaluate_policy(params, config.env, config.run.task, config.run.arm,
                                         config.run.eval_episodes, seed, enc, d_z=config.ae.d_z)
    started = run.begin()
    summary = summarize_seeds(list(per_seed.values()))
    body = {
        "episodes": config.run.eval_episodes,
        "per_seed": {str(k): v for k, v in per_seed.items()},
        "mean_return": summary.mean,
        "return_p2.5": summary.p2_5,
        "return_p97.5": summary.p97_5,
    }
    path = out / "eval" / "summary.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    run.finish("eval", started, [path])
    print(json.dumps(body, sort_keys=True))
    return EXIT_OK


def cmd_ood(config: RunConfig | None, out: Path, live: bool) -> int:
    """Print ``iteration,loss,threshold,flag`` lines; exit 2 if the last verdict is OOD."""
    if live:
        if config is None:
            raise ConfigurationError("--live needs --config")
        cal = _load_calibration(config)
        if cal is None:
            raise ConfigurationError("ood needs run.calibration")
        encoder = _load_encoder(config)
        if encoder is None:
            raise ConfigurationError("ood needs an encoder (arm task_agnostic or task_specific)")
        window: list[float] = []
        last = [None]

        def on_iteration(m: IterationMetrics):
            window.append(m.recon_loss_mean)
            del window[:-config.run.ood_window]
            v = assess(window, cal)
            last[0] = v
            print(verdict_line(m.iteration, v), flush=True)

        _train_seed(config, config.seeds[0], encoder, callback=on_iteration)
        return EXIT_OOD if last[0] is not None and last[0].is_ood else EXIT_OK

    snap_config = _snapshot_config(out)
    cal = _load_calibration(config if config is not None and config.run.calibration else snap_config)
    if cal is None:
        raise ConfigurationError("ood needs run.calibration")
    window_len = snap_config.run.ood_window
    any_ood = False
    for seed in snap_config.seeds:
        path = out / "metrics" / f"seed_{seed}.csv"
        if not path.exists():
            raise ConfigurationError(f"missing metrics file {path}")
        losses = [float(x) for x in read_metrics(path)["recon_loss_mean"]]
        verdicts = ood_verdicts(losses, cal, window_len)
        for i, (loss, thr, flag) in enumerate(verdicts):
            print(f"{i},{loss!r},{thr!r},{flag}")
        if verdicts and verdicts[-1][2] == "out_of_distribution":
            any_ood = True
    return EXIT_OOD if any_ood else EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agnocomm", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("command", choices=["collect", "pretrain", "train", "eval", "ood"])
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=Path("runs/default"))
    parser.add_argument("--episodes", type=int, default=None, help="eval: episodes per seed")
    parser.add_argument("--live", action="store_true", help="ood: train under the config and stream verdicts")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_seed(config: RunConfig, command: str, seed: int | None) -> RunConfig:
    if seed is None:
        return config
    if command == "collect":
        return replace(config, collect=replace(config.collect, seed=seed))
    if command == "pretrain":
        return replace(config, ae=replace(config.ae, seed=seed))
    return replace(config, train=replace(config.train, seeds=(seed,)))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "eval":
            return cmd_eval(args.out, args.episodes)
        if args.command == "ood":
            config = load_config(args.config) if args.config is not None else None
            if config is not None:
                config = _apply_seed(config, "ood", args.seed)
            return cmd_ood(config, args.out, args.live)
        config = _apply_seed(load_config(args.config, REQUIRED[args.command]), args.command, args.seed)
        if args.command == "collect":
            return cmd_collect(config, args.out)
        if args.command == "pretrain":
            return cmd_pretrain(config, args.out)
        return cmd_train(config, args.out)
    except (AgnocommError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
