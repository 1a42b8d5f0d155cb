"""Command-line entry point: ``mskpinn <command> ...`` or ``python -m mskpinn``.

Commands
--------
synth   generate synthetic gait cycles (trajectory CSVs)
so      static-optimization reference labels for trajectory CSVs
train   train a network on a data directory
eval    metrics, predictions and latency for a checkpoint
ablate  loss-term and backbone ablations
report  SVG plots for an evaluation or ablation directory
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dat
from . import train as tr
from .defaults import default_limb_model, default_muscle_set
from .dynamics import load_limb_model
from .muscle import load_muscle_set
from .oracle import CONDITIONS, so_trajectory, synth_cycles

log = logging.getLogger("mskpinn")

LABEL_SUFFIX = "_labels.csv"
GENERATOR_SUFFIX = "_generator.csv"


# -- shared helpers ---------------------------------------------------------------

def _models(args):
    model = load_limb_model(args.limb) if args.limb else default_limb_model()
    if bool(args.muscles) != bool(args.geometry):
        raise SystemExit("--muscles and --geometry must be given together")
    muscles = load_muscle_set(args.muscles, args.geometry) if args.muscles else default_muscle_set()
    return model, muscles


def _trajectory_files(data_dir: Path):
    files = sorted(p for p in Path(data_dir).glob("*.csv")
                   if not p.name.endswith((LABEL_SUFFIX, GENERATOR_SUFFIX)) and p.name != "metrics.csv")
    if not files:
        raise SystemExit(f"no trajectory CSVs in {data_dir}")
    return files


def load_trials(data_dir, need_labels=True) -> list[tr.Trial]:
    """Trajectories in ``data_dir`` with their ``*_labels.csv`` references."""
    trials = []
    for path in _trajectory_files(Path(data_dir)):
        traj = dat.read_trajectory_csv(path)
        lab = path.with_name(path.stem + LABEL_SUFFIX)
        acts = forces = None
        if lab.exists():
            _, acts, forces, _ = dat.read_labels_csv(lab)
        elif need_labels:
            raise SystemExit(f"{path.name} has no reference labels; run `mskpinn so` first")
        trials.append(tr.Trial(traj, acts, forces, path.stem))
    return trials


def _read_config_file(path) -> dict:
    """``key = value`` lines, optionally under a ``[train]`` section."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text if text.lstrip().startswith("[") else "[train]\n" + text)
    return dict(parser["train"]) if parser.has_section("train") else {}


def _coerce(field: dataclasses.Field, raw):
    kind = type(field.default)
    if isinstance(raw, str):
        raw = raw.strip()
        if kind is bool:
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise SystemExit(f"{field.name}: expected a boolean, got {raw!r}")
            return raw.lower() in ("1", "true", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
    return kind(raw) if kind in (int, float, str) else raw


def _add_train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training options (mirror TrainConfig)")
    for f in dataclasses.fields(tr.TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            g.add_argument(flag, dest=f.name, default=None, choices=("true", "false"))
        else:
            g.add_argument(flag, dest=f.name, default=None, help=f"default {f.default!r}")
    p.add_argument("--config", help="text file of key = value training options")
    p.add_argument("--profile", choices=tuple(tr.PROFILES), help="preset epoch count")


def train_config_from_args(args) -> tr.TrainConfig:
    """Defaults, then profile, then config file, then explicit flags."""
    fields = {f.name: f for f in dataclasses.fields(tr.TrainConfig)}
    values = {}
    if getattr(args, "profile", None):
        values["epochs"] = tr.PROFILES[args.profile]["epochs"]
    if getattr(args, "config", None):
        for k, v in _read_config_file(args.config).items():
            if k not in fields:
                raise SystemExit(f"unknown option {k!r} in {args.config}")
            values[k] = _coerce(fields[k], v)
    for name, f in fields.items():
        raw = getattr(args, name, None)
        if raw is not None:
            values[name] = _coerce(f, raw)
    try:
        return tr.TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise SystemExit(f"invalid training options: {exc}")


def _split(trials, cfg):
    train_idx, test_idx = dat.split_trials([t.condition for t in trials], cfg.split)
    return [trials[i] for i in train_idx], [trials[i] for i in test_idx]


# -- commands ---------------------------------------------------------------------

def cmd_synth(args):
    model, muscles = _models(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.cycles if args.cycles is not None else tr.PROFILES[args.profile]["cycles"]
    for cond in args.conditions:
        if cond not in CONDITIONS:
            raise SystemExit(f"unknown condition {cond!r}; choose from {sorted(CONDITIONS)}")
        for res in synth_cycles(model, muscles, n, condition=cond, seed=args.seed):
            stem = f"cycle_{cond.replace('.', 'p')}_{int(res.trajectory.metadata['cycle']):03d}"
            dat.write_trajectory_csv(res.trajectory, out / f"{stem}.csv")
            dat.write_labels_csv(out / f"{stem}{GENERATOR_SUFFIX}", res.trajectory.time, res.activations,
                                 res.forces, muscles.names)
            print(f"{stem}: {len(res.trajectory.time)} frames, "
                  f"{int(np.sum(~res.tracking_feasible))} frames with saturated tracking")
    return 0


def cmd_so(args):
    model, muscles = _models(args)
    paths = [Path(args.input)] if Path(args.input).is_file() else _trajectory_files(Path(args.input))
    for path in paths:
        traj = dat.read_trajectory_csv(path)
        res = so_trajectory(model, muscles, traj)
        dest = path.with_name(path.stem + LABEL_SUFFIX)
        dat.write_labels_csv(dest, traj.time, res.activations, res.forces, muscles.names)
        print(f"{path.name}: {res.n_infeasible} infeasible of {len(traj.time)} frames, "
              f"max KKT residual {np.max(res.kkt_residual):.2e}")
    return 0


def _progress(epoch, loss):
    if epoch == 1 or epoch % 10 == 0:
        print(f"epoch {epoch}: loss {loss:.6g}", flush=True)


def cmd_train(args):
    model, muscles = _models(args)
    cfg = train_config_from_args(args)
    trials = load_trials(args.data, need_labels=cfg.mode == "supervised")
    train, test = _split(trials, cfg)
    prep = [tr.prepare_trial(model, muscles, t, cfg.window, cfg.stride) for t in train]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps(
        {"train": [t.name for t in train], "test": [t.name for t in test]}, indent=1))
    try:
        res = tr.train_run(cfg, prep, out, resume=args.resume, stop_epoch=args.stop_epoch, progress=_progress)
    except tr.TrainingDivergedError as exc:
        print(f"training diverged: {exc}; last good state in {exc.checkpoint}", file=sys.stderr)
        return 2
    print(f"final checkpoint: {res.final_checkpoint}")
    return 0


def _test_names(checkpoint: Path, trials, use_all: bool):
    split_file = checkpoint.parent / "split.json"
    if use_all or not split_file.exists():
        return {t.name for t in trials}
    return set(json.loads(split_file.read_text())["test"])


def cmd_eval(args):
    model, muscles = _models(args)
    ckpt = Path(args.checkpoint)
    net_cfg, params, stats, meta = tr.load_model(ckpt)
    window = meta.get("train_config", {}).get("window", dat.WINDOW)
    stride = meta.get("train_config", {}).get("stride", dat.STRIDE)
    trials = load_trials(args.data)
    names = _test_names(ckpt, trials, args.all)
    chosen = [t for t in trials if t.name in names]
    if not chosen:
        raise SystemExit("no evaluation trials found")
    prep = [tr.prepare_trial(model, muscles, t, window, stride) for t in chosen]
    rep = tr.evaluate(net_cfg, params, stats, prep, muscles.names, latency_repeats=args.latency_repeats)
    out = Path(args.out) if args.out else ckpt.parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    tr.write_eval_outputs(out, prep, rep, muscles.names)
    (out / "latency.json").write_text(json.dumps(rep.latency, indent=1))
    for k, v in rep.summary().items():
        print(f"{k}: {v:.4f}")
    if rep.latency:
        lat = rep.latency
        verdict = "within" if lat["within_budget"] else "OVER"
        print(f"latency per window: median {lat['median_ms']:.2f} ms, p95 {lat['p95_ms']:.2f} ms "
              f"({verdict} the {lat['budget_ms']:.0f} ms budget)")
    return 0


def cmd_ablate(args):
    model, muscles = _models(args)
    cfg = train_config_from_args(args)
    trials = load_trials(args.data)
    train, test = _split(trials, cfg)
    prep_train = [tr.prepare_trial(model, muscles, t, cfg.window, cfg.stride) for t in train]
    prep_test = [tr.prepare_trial(model, muscles, t, cfg.window, cfg.stride) for t in test]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = tr.ablation_suite(cfg, prep_train, prep_test, muscles.names, variants=args.variants,
                             backbones=args.backbones, out_dir=out, progress=lambda s: print("run", s, flush=True))
    tr.write_ablation_csv(rows, out / "ablation.csv")
    for r in rows:
        print(f"{r['variant']:>6} {r['backbone']:>10}  R2 {r['activation_r2']:.3f}  "
              f"NRMSE {r['activation_nrmse']:.3f}  mean a {r['mean_activation']:.3f}")
    return 0


def cmd_report(args):
    from . import report

    written = report.write_report(Path(args.input), Path(args.out) if args.out else None)
    for p in written:
        print(p)
    return 0 if written else 1


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mskpinn", description="label-free muscle activation estimation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_models(sp):
        sp.add_argument("--limb", help="limb model config (default: packaged)")
        sp.add_argument("--muscles", help="muscle parameter CSV (default: packaged)")
        sp.add_argument("--geometry", help="muscle geometry config (default: packaged)")
        return sp

    s = with_models(sub.add_parser("synth", help="generate synthetic gait cycles"))
    s.add_argument("--out", required=True)
    s.add_argument("--cycles", type=int, help="cycles per condition (default from --profile)")
    s.add_argument("--profile", choices=tuple(tr.PROFILES), default="full")
    s.add_argument("--conditions", nargs="+", default=["1.3"])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = with_models(sub.add_parser("so", help="static-optimization reference labels"))
    s.add_argument("input", help="trajectory CSV or directory of them")
    s.set_defaults(func=cmd_so)

    s = with_models(sub.add_parser("train", help="train a network"))
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--stop-epoch", type=int, help="stop early; the schedule still spans --epochs")
    _add_train_flags(s)
    s.set_defaults(func=cmd_train)

    s = with_models(sub.add_parser("eval", help="evaluate a checkpoint"))
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.add_argument("--all", action="store_true", help="ignore split.json and evaluate every trial")
    s.add_argument("--latency-repeats", type=int, default=50)
    s.set_defaults(func=cmd_eval)

    s = with_models(sub.add_parser("ablate", help="loss and backbone ablations"))
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variants", nargs="+", default=list(tr.LOSS_VARIANTS), choices=tuple(tr.LOSS_VARIANTS))
    s.add_argument("--backbones", nargs="+", default=["mjca", "bigru_only", "cnn"],
                   choices=("mjca", "bigru_only", "cnn"))
    _add_train_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="SVG plots")
    s.add_argument("input", help="run, evaluation or ablation directory")
    s.add_argument("--out", help="output directory (default: the input directory)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
