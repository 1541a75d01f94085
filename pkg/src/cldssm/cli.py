"""Command-line entry point: ``cldssm train | eval | synth``.

Exit codes: 0 success, 1 user/config/data error (one ``error: ...`` line on
stderr), 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import continual as cl
from .continual import Kind
from .data import (SeriesSpec, Series, TaskDataset, Standardizer, default_spec, load_csv,
                   partition_tasks, regime_series, synth_lgssm, synth_regimes, write_csv)
from .enkf import EmissionModel
from .errors import CLDSSMError, IncompatibleCheckpoint
from .nets import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, mse, predict_task, run_sequence

SEED_ENV = "CLDSSM_SEED"

SCHEMA = {
    "data": {"source", "path", "observations", "controls", "timestamp", "delimiter", "header",
             "n_tasks", "n_windows", "window", "train_len", "test_len", "partition_seed", "d_x", "seed",
             "angles"},
    "model": {"d_z", "hidden", "recog_hidden", "ensemble", "r_var"},
    "train": {"lr", "epochs", "seeds", "kinds", "gamma", "si_eps", "lambda_ewc_online",
              "lambda_ewc_vanilla", "lambda_mas", "lambda_si", "lambda_lwf"},
    "output": {"dir"},
}


class ConfigError(CLDSSMError, ValueError):
    pass


@dataclass
class ExperimentConfig:
    data: dict
    model: ModelConfig
    ensemble: int
    train: dict
    kinds: list
    seeds: list
    out_dir: Path
    lambdas: dict = field(default_factory=dict)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.train["lr"], epochs=self.train["epochs"],
                           ensemble=self.ensemble, seed=seed, lambdas=self.lambdas,
                           gamma=self.train["gamma"], si_eps=self.train["si_eps"],
                           model=self.model)


def _ints(text):
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def parse_config(path, env=None) -> ExperimentConfig:
    """Read and validate an INI experiment file; unknown sections or keys are errors."""
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser[section]) - SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    get = lambda s, k, d=None: parser.get(s, k, fallback=d)  # noqa: E731
    try:
        data = {
            "source": get("data", "source", "synthetic"),
            "path": get("data", "path"),
            "observations": _names(get("data", "observations", "")),
            "controls": _names(get("data", "controls", "")),
            "timestamp": get("data", "timestamp"),
            "delimiter": get("data", "delimiter", ","),
            "header": parser.getboolean("data", "header", fallback=True),
            "n_tasks": int(get("data", "n_tasks", 2)),
            "n_windows": int(get("data", "n_windows", 4)),
            "window": int(get("data", "window", 50)),
            "train_len": int(get("data", "train_len")) if get("data", "train_len") else None,
            "test_len": int(get("data", "test_len", 50)),
            "partition_seed": int(get("data", "partition_seed", 0)),
            "d_x": int(get("data", "d_x", 2)),
            "seed": int(get("data", "seed", 0)),
            "angles": [float(a) for a in _names(get("data", "angles", ""))] or None,
        }
        model = ModelConfig(d_z=int(get("model", "d_z", 8)),
                            hidden=tuple(_ints(get("model", "hidden", "32"))),
                            recog_hidden=int(get("model", "recog_hidden", 32)),
                            r_var=float(get("model", "r_var", 0.01)))
        ensemble = int(get("model", "ensemble", 100))
        train = {"lr": float(get("train", "lr", 0.005)),
                 "epochs": int(get("train", "epochs", 400)),
                 "gamma": float(get("train", "gamma", 1.0)),
                 "si_eps": float(get("train", "si_eps", cl.SI_DAMPING))}
        kinds = [Kind.parse(k) for k in _names(get("train", "kinds", "none,ewc_online,mas,si,lwf"))]
        seeds = _ints(get("train", "seeds", "0"))
        if env.get(SEED_ENV):
            seeds = _ints(env[SEED_ENV])
        lambdas = {}
        for kind in Kind:
            key = f"lambda_{kind.value}"
            if kind is not Kind.NONE and parser.has_option("train", key):
                lambdas[kind] = float(parser.get("train", key))
        for kind, lam in lambdas.items():
            cl.Regularizer(kind, lam, train["gamma"], train["si_eps"])
    except ValueError as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    if data["source"] not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be 'synthetic' or 'csv', got {data['source']!r}")
    if data["source"] == "csv" and (not data["path"] or not data["observations"]):
        raise ConfigError("csv data needs data.path and data.observations")
    if not seeds or not kinds:
        raise ConfigError("at least one seed and one kind are required")
    if ensemble < 2 or train["epochs"] < 1 or train["lr"] <= 0:
        raise ConfigError("model.ensemble must be >= 2, train.epochs >= 1, train.lr > 0")
    if data["n_tasks"] < 1:
        raise ConfigError("data.n_tasks must be >= 1")
    out_dir = Path(get("output", "dir", "cldssm_out"))
    if not out_dir.is_absolute():
        out_dir = Path(path).resolve().parent / out_dir
    cfg = ExperimentConfig(data, model, ensemble, train, kinds, seeds, out_dir, lambdas)
    cfg.train_config(seeds[0])
    return cfg


def load_tasks(data: dict) -> list[TaskDataset]:
    if data["source"] == "synthetic":
        return synth_regimes(max(data["n_tasks"], 2), d_x=data["d_x"], seed=data["seed"],
                             n_windows=data["n_windows"], T=data["window"],
                             test_len=data["test_len"], angles=data["angles"])[:data["n_tasks"]]
    spec = SeriesSpec(data["observations"], data["controls"], data["timestamp"],
                      data["delimiter"], data["header"])
    series = load_csv(data["path"], spec)
    return partition_tasks(series, data["n_tasks"], data["window"], data["n_windows"],
                           data["test_len"], data["partition_seed"], data["train_len"])


def _run_job(args):
    cfg, kind, seed, tasks = args
    return kind, seed, run_sequence(tasks, kind, cfg.train_config(seed))


def _write_task_csv(path, task: TaskDataset):
    """Last training window followed by the test segment, in original units."""
    x, u = task.windows[-1]
    both = np.vstack([np.hstack([x, u]), np.hstack([task.test_x, task.test_u])])
    raw = task.standardizer.invert(both) if task.standardizer is not None else both
    write_csv(path, Series(raw[:, :task.d_x], raw[:, task.d_x:]))


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    tasks = load_tasks(cfg.data)
    jobs = [(cfg, kind, seed, tasks) for kind in cfg.kinds for seed in cfg.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    task_dir = out / "tasks"
    task_dir.mkdir(exist_ok=True)
    for j, task in enumerate(tasks):
        _write_task_csv(task_dir / f"task_{j + 1}.csv", task)
    std = tasks[0].standardizer
    d_x, d_u = tasks[0].d_x, tasks[0].d_u
    for kind, seed, report in results:
        run_dir = out / f"{kind.value}_seed{seed}"
        run_dir.mkdir(exist_ok=True)
        (run_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        save_checkpoint(run_dir / "model.ckpt", Checkpoint(
            cfg.model, d_x, d_u, cfg.ensemble, report.theta, report.phis,
            None if std is None else std.mean, None if std is None else std.std))
        cl.save_state(run_dir / "state.bin", report.regularizer, report.state)
    n_stages = len(tasks)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind"] + [f"stage{j + 1}_{s}" for j in range(n_stages) for s in ("mean", "std")])
        for kind in cfg.kinds:
            avgs = np.array([r.averaged for k, _, r in results if k is kind])
            row = [kind.value]
            for j in range(n_stages):
                row += [f"{avgs[:, j].mean():.10g}", f"{avgs[:, j].std():.10g}"]
            w.writerow(row)
    print(f"wrote {out / 'summary.csv'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _, state = cl.load_state(args.state)
    model = ckpt.build_model()
    if state.P != model.theta.size:
        raise IncompatibleCheckpoint(
            f"importance state has {state.P} parameters, checkpoint has {model.theta.size}")
    if not ckpt.phis:
        raise IncompatibleCheckpoint("checkpoint holds no recognition parameters")
    task_idx = len(ckpt.phis) if args.task is None else args.task
    if not 1 <= task_idx <= len(ckpt.phis):
        raise IncompatibleCheckpoint(f"checkpoint has {len(ckpt.phis)} tasks, asked for {task_idx}")
    model.phi.assign(ckpt.phis[task_idx - 1])
    series = load_csv(args.data, default_spec(ckpt.d_x, ckpt.d_u))
    values = series.values
    if ckpt.std_mean is not None:
        values = Standardizer(ckpt.std_mean, ckpt.std_scale).apply(values)
    horizon = args.horizon
    if len(values) <= horizon:
        raise CLDSSMError(f"data has {len(values)} rows, need more than horizon={horizon}")
    cond, test = values[:-horizon], values[-horizon:]
    task = TaskDataset(task_idx, [(cond[:, :ckpt.d_x], cond[:, ckpt.d_x:])],
                       test[:, :ckpt.d_x], test[:, ckpt.d_x:])
    em = EmissionModel.selector(ckpt.d_x, ckpt.model_config.d_z, ckpt.model_config.r_var)
    pred = predict_task(task, model, em, ckpt.ensemble, args.seed)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"truth_{i + 1}" for i in range(ckpt.d_x)]
                   + [f"pred_{i + 1}" for i in range(ckpt.d_x)])
        for t in range(horizon):
            w.writerow([t + 1] + [repr(float(v)) for v in test[t, :ckpt.d_x]]
                       + [repr(float(v)) for v in pred[t]])
    print(f"mse={mse(pred, task.test_x):.12g}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "lgssm":
        A, Q, R = np.atleast_2d(args.A), np.atleast_2d(args.Q), np.atleast_2d(args.R)
        H = np.atleast_2d(1.0)
        res = synth_lgssm(A, H, Q, R, args.T_total, args.seed)
        write_csv(out / "lgssm.csv", res.series)
        sidecar = {"kind": "lgssm", "A": res.A.tolist(), "H": res.H.tolist(), "Q": res.Q.tolist(),
                   "R": res.R.tolist(), "m0": res.m0.tolist(), "P0": res.P0.tolist(),
                   "T_total": args.T_total, "seed": args.seed, "log_evidence": res.loglik}
        (out / "lgssm.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    else:
        from .data import regime_angles

        angles = regime_angles(args.n_tasks)
        for j, series in enumerate(regime_series(args.n_tasks, d_x=args.d_x, seed=args.seed,
                                                 length=args.T_total)):
            write_csv(out / f"regime_task{j + 1}.csv", series)
        sidecar = {"kind": "regimes", "n_tasks": args.n_tasks, "d_x": args.d_x,
                   "angles": angles, "T_total": args.T_total, "seed": args.seed}
        (out / "regimes.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cldssm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run every (kind, seed) job of an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="forecast a task CSV from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--task", type=int, default=None, help="1-based task whose phi to use (default: last)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="forecast.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write synthetic series as CSV plus a JSON sidecar")
    p.add_argument("--kind", choices=("lgssm", "regimes"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T-total", dest="T_total", type=int, default=250)
    p.add_argument("--A", type=float, default=0.9)
    p.add_argument("--Q", type=float, default=0.1)
    p.add_argument("--R", type=float, default=0.1)
    p.add_argument("--n-tasks", dest="n_tasks", type=int, default=4)
    p.add_argument("--d-x", dest="d_x", type=int, default=2)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLDSSMError, OSError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"error: InternalInvariant: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
