"""``softq-lab`` command line.

Every subcommand takes ``--config FILE``, ``--seed N`` and repeatable
``--set section.key=value``. Artifacts live in one directory per seed::

    <output>/seed_<N>/
        config.ini                  effective config of the last command
        dataset.csv (+ .stats.json)
        surrogate.npz  surrogate_validation.csv
        mbrl/ pt/ mfrl/             config.ini episodes.csv checkpoint.npz
        eval/<policy>/              report.csv trace.csv feet.csv

The output root comes from ``run.output_dir``, then ``$SOFTQ_LAB_OUTPUT``,
then ``./runs``. Exit codes: 0 success, 1 usage error or missing artifact,
2 runtime or numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from . import dataset as ds
from .config import ConfigError, parse_config
from .kinematics import export_gait_csv
from .metrics import REPORT_FIELDS, AgentPolicy, EvalReport, ExpertPolicy, ConstantPolicy, evaluate
from .pipeline import TrainingRun, run_mbrl, run_mfrl, run_post_training
from .plant import ReferencePlant
from .sac import SACAgent
from .surrogate import SurrogateDynamics, train_surrogate, validate

log = logging.getLogger("softq_lab")

POLICIES = ("expert", "zero", "mbrl", "pt", "mfrl")
# which training stage each method's wall-clock and plant steps come from
METHOD_STAGES = {"mbrl": ("mbrl",), "pt": ("mbrl", "pt"), "mfrl": ("mfrl",)}


class UsageError(Exception):
    pass


class MissingArtifactError(UsageError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- run directory -----------------------------------------------------------

class RunDir:
    def __init__(self, cfg, seed):
        self.cfg = cfg
        self.seed = seed
        self.root = os.path.join(cfg.output_dir, f"seed_{seed}")

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def dataset(self):
        return self.path("dataset.csv")

    @property
    def surrogate(self):
        return self.path("surrogate.npz")

    def stage(self, name):
        return self.path(name.lower())

    def checkpoint(self, stage):
        return self.path(stage.lower(), "checkpoint.npz")

    def snapshot(self, *where):
        d = self.path(*where)
        os.makedirs(d, exist_ok=True)
        self.cfg.save(os.path.join(d, "config.ini"))

    def require(self, path, hint):
        if not os.path.exists(path):
            raise MissingArtifactError(f"missing {path}; run `softq-lab {hint}` first")
        return path


# --- subcommands -------------------------------------------------------------

def cmd_collect(rd: RunDir, args):
    c = rd.cfg.dataset
    plant = ReferencePlant(rd.cfg.plant_config(), rd.seed, noise=c.noise)
    data = ds.collect(plant, n_sequences=c.n_sequences, steps_per_sequence=c.steps_per_sequence,
                      expert_fraction=c.expert_fraction, seed=rd.seed, ou_tau=c.ou_tau, ou_std=c.ou_std,
                      ou_mean_spread=c.ou_mean_spread, oscillation_fraction=c.oscillation_fraction,
                      hold_fraction=c.hold_fraction, gait=rd.cfg.gait, n_jobs=c.n_jobs)
    rd.snapshot()
    ds.save(data, rd.dataset)
    print(f"collected {len(data)} sequences, {data.n_transitions} transitions -> {rd.dataset}")


def _split(rd):
    data = ds.load(rd.require(rd.dataset, "collect"))
    return ds.split(data, rd.cfg.dataset.val_ratio, seed=rd.seed)


def cmd_train_surrogate(rd: RunDir, args):
    train, val = _split(rd)
    s = rd.cfg.surrogate
    model = train_surrogate(train, epochs=s.epochs, batch_size=s.batch_size, lr=s.lr, seed=rd.seed,
                            val_set=val, patience=s.patience, input_noise=s.input_noise)
    rd.snapshot()
    model.save(rd.surrogate)
    print(f"surrogate trained for {model.n_epochs_} epochs -> {rd.surrogate}")


def cmd_validate_surrogate(rd: RunDir, args):
    _, val = _split(rd)
    model = SurrogateDynamics.load(rd.require(rd.surrogate, "train-surrogate"))
    report = validate(model, val, T_max=rd.cfg.surrogate.T_max)
    out = args.out or rd.path("surrogate_validation.csv")
    report.to_csv(out)
    summary = report.summary()
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    print(f"horizon table -> {out}")


def _train_stage(rd: RunDir, mode, resume):
    cfg = rd.cfg
    pconf = cfg.pipeline_config(mode, rd.seed)
    out = rd.stage(mode)
    if mode == "MBRL":
        model = SurrogateDynamics.load(rd.require(rd.surrogate, "train-surrogate"))
        rd.snapshot(mode.lower())
        run = run_mbrl(model, pconf, cfg.plant_config(), run_dir=out, resume=resume)
    elif mode == "PT":
        ck = rd.require(rd.checkpoint("MBRL"), "train mbrl")
        rd.snapshot(mode.lower())
        plant = ReferencePlant(cfg.plant_config(), rd.seed, noise=pconf.noise)
        run = run_post_training(ck, plant, pconf, run_dir=out, resume=resume)
    else:
        rd.snapshot(mode.lower())
        plant = ReferencePlant(cfg.plant_config(), rd.seed, noise=pconf.noise)
        run = run_mfrl(plant, pconf, run_dir=out, resume=resume)
    conv = "not converged" if run.converged_episode is None else f"converged at episode {run.converged_episode}"
    print(f"{mode}: {run.n_episodes} episodes, {run.total_plant_steps} plant steps, "
          f"{run.total_surrogate_steps} surrogate steps, {conv} -> {out}")
    return run


def cmd_train(rd: RunDir, args):
    _train_stage(rd, args.mode.upper(), args.resume)


def cmd_post_train(rd: RunDir, args):
    _train_stage(rd, "PT", args.resume)


def _policy(rd: RunDir, name):
    cfg = rd.cfg
    if name == "expert":
        return ExpertPolicy(cfg.gait, cfg.limits)
    if name == "zero":
        return ConstantPolicy(np.zeros(4))
    hint = {"mbrl": "train mbrl", "pt": "post-train", "mfrl": "train mfrl"}[name]
    return AgentPolicy(SACAgent.load(rd.require(rd.checkpoint(name), hint)))


def cmd_evaluate(rd: RunDir, args):
    report = _evaluate(rd, args.policy)
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in report.to_dict().items()))


def _evaluate(rd: RunDir, name) -> EvalReport:
    cfg = rd.cfg
    e = cfg.eval
    plant = ReferencePlant(cfg.plant_config(), e.seed, noise=e.noise)
    report = evaluate(_policy(rd, name), plant, duration=e.duration, seed=e.seed,
                      expert_prefix=e.expert_prefix, gait=cfg.gait)
    out = rd.path("eval", name)
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.ini"))
    report.to_csv(os.path.join(out, "report.csv"))
    report.trace.to_csv(os.path.join(out, "trace.csv"))
    report.trace.feet_to_csv(os.path.join(out, "feet.csv"))
    return report


def cmd_export_gait(rd: RunDir, args):
    cfg = rd.cfg
    out = args.out or rd.path("gait.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    export_gait_csv(out, args.duration, T_s=cfg.plant.T_s, spec=cfg.gait, limits=cfg.limits)
    print(f"gait schedule -> {out}")


def cmd_pipeline(rd: RunDir, args):
    """collect -> surrogate -> MBRL -> PT (and MFRL unless skipped) -> evaluations."""
    cmd_collect(rd, args)
    cmd_train_surrogate(rd, args)
    cmd_validate_surrogate(rd, argparse.Namespace(out=None))
    _train_stage(rd, "MBRL", False)
    _train_stage(rd, "PT", False)
    policies = ["expert", "mbrl", "pt"]
    if not args.skip_mfrl:
        _train_stage(rd, "MFRL", False)
        policies.append("mfrl")
    for name in policies:
        r = _evaluate(rd, name)
        print(f"eval {name}: avg_vx={r.avg_vx:.4f} cot={r.cot:.4g} stability={r.stability:.4f}")


# --- report ------------------------------------------------------------------

REPORT_COLUMNS = ("method", "seed", "train_hours", "plant_steps", "converged", *REPORT_FIELDS)


def _training_cost(rd: RunDir, method):
    hours, steps, converged = 0.0, 0, True
    for stage in METHOD_STAGES[method]:
        path = rd.path(stage, "episodes.csv")
        if not os.path.exists(path):
            return math.nan, math.nan, False
        run = TrainingRun.from_csv(path, stage.upper(), rd.seed)
        hours += run.total_wall_clock / 3600.0
        steps += run.total_plant_steps
        rule = rd.cfg.pipeline_config(stage.upper(), rd.seed).convergence
        converged = converged and rule.converged_at(run.rewards) is not None
    return hours, steps, converged


def report_rows(cfg, seeds, methods=("mbrl", "pt", "mfrl", "expert")):
    """Per-seed rows, then a ``[min,max]`` row and an ``avg`` row per method."""
    rows = []
    for method in methods:
        per_seed = []
        for seed in seeds:
            rd = RunDir(cfg, seed)
            path = rd.path("eval", method, "report.csv")
            if not os.path.exists(path):
                continue
            metrics = EvalReport.read_csv(path)
            if method in METHOD_STAGES:
                hours, steps, conv = _training_cost(rd, method)
            else:
                hours, steps, conv = 0.0, 0, True
            per_seed.append({"method": method, "seed": seed, "train_hours": hours, "plant_steps": steps,
                             "converged": conv, **metrics})
        if not per_seed:
            continue
        rows.extend(per_seed)
        numeric = [k for k in REPORT_COLUMNS[2:]]
        lo = {k: min(float(r[k]) for r in per_seed) for k in numeric}
        hi = {k: max(float(r[k]) for r in per_seed) for k in numeric}
        rows.append({"method": method, "seed": "[min,max]",
                     **{k: f"[{_num(lo[k])},{_num(hi[k])}]" for k in numeric}})
        rows.append({"method": method, "seed": "avg",
                     **{k: float(np.mean([float(r[k]) for r in per_seed])) for k in numeric}})
    return rows


def _num(v):
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_report(rd: RunDir, args):
    cfg = rd.cfg
    seeds = args.seeds if args.seeds else cfg.run.seeds
    rows = report_rows(cfg, seeds)
    if not rows:
        raise MissingArtifactError(f"no evaluation reports under {cfg.output_dir}; run `softq-lab evaluate` first")
    out = args.out or os.path.join(cfg.output_dir, "report.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_num(r[k]) for k in REPORT_COLUMNS])
    for r in rows:
        print("  ".join(f"{_num(r[k]):>12}" for k in REPORT_COLUMNS))
    print(f"report -> {out}")


# --- entry point -------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file layered over the defaults")
    common.add_argument("--seed", type=int, help="seed; overrides run.seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="softq-lab", description="Surrogate-model SAC pipeline for a soft quadruped.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    sub.add_parser("collect", parents=[common], help="roll the plant and write the transition dataset")
    sub.add_parser("train-surrogate", parents=[common], help="fit the dynamics network")
    v = sub.add_parser("validate-surrogate", parents=[common], help="horizon-indexed R^T / NRMSE^T table")
    v.add_argument("--out")
    t = sub.add_parser("train", parents=[common], help="SAC in the surrogate (mbrl) or on the plant (mfrl)")
    t.add_argument("mode", choices=("mbrl", "mfrl"))
    t.add_argument("--resume", action="store_true")
    pt = sub.add_parser("post-train", parents=[common], help="refine the MBRL agent on the plant")
    pt.add_argument("--resume", action="store_true")
    e = sub.add_parser("evaluate", parents=[common], help="deterministic plant rollout and metrics")
    e.add_argument("--policy", choices=POLICIES, default="pt")
    g = sub.add_parser("export-gait", parents=[common], help="write the expert gait schedule")
    g.add_argument("--duration", type=float, default=5.0)
    g.add_argument("--out")
    r = sub.add_parser("report", parents=[common], help="aggregate evaluations over seeds")
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--out")
    c = sub.add_parser("pipeline", parents=[common], help="run every stage for one seed")
    c.add_argument("--skip-mfrl", action="store_true")
    return p


COMMANDS = {
    "collect": cmd_collect,
    "train-surrogate": cmd_train_surrogate,
    "validate-surrogate": cmd_validate_surrogate,
    "train": cmd_train,
    "post-train": cmd_post_train,
    "evaluate": cmd_evaluate,
    "export-gait": cmd_export_gait,
    "report": cmd_report,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = parse_config(args.config, args.overrides)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        COMMANDS[args.command](RunDir(cfg, cfg.seed), args)
    except SystemExit as exc:           # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"softq-lab: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"softq-lab: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:            # numeric or runtime failure inside a stage
        log.debug("stage failed", exc_info=True)
        print(f"softq-lab: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
