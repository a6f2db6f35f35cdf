"""Command-line entry point.

    modelab generate CONFIG
    modelab train CONFIG [--regime R] [--seeds 0,1,2] [--run-dir DIR] [--init-only]
    modelab eval RUN_DIR [--split test|dev]
    modelab sweep-experts CONFIG [--experts 1,2,4,8,10,16] [--parallel N] [--out CSV]
    modelab ablate CONFIG [--temperatures 0.5,1,2] [--parallel N] [--out CSV]
    modelab report RUN_DIR... [--out CSV]

Every written file is announced on stdout as a JSON line
``{"artifact": kind, "path": ...}``. Failures print one JSON error record on
stderr. Output paths resolve under the config's ``output_dir`` unless the
``MODELAB_OUTPUT_ROOT`` environment variable is set.

Exit codes: 0 success, 1 unexpected failure, 2 invalid config or usage,
3 missing dataset, run directory or file, 4 numerical or domain error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import training as tr
from .calibration import EvalReport, Predictions, evaluate, per_task_accuracy
from .checkpoint import load_checkpoint
from .errors import ConfigurationError, DomainError, SingularityError
from .experiment import (ExperimentConfig, RunDir, ensure_dataset, load_config, parse_config,
                         record_result)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4


def announce(kind: str, path: Path) -> None:
    print(json.dumps({"artifact": kind, "path": str(path)}), flush=True)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _with_train(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, train=replace(cfg.train, **changes))


def _snapshot_config(run_dir: Path) -> tuple[ExperimentConfig, dict]:
    path = run_dir / "config.json"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir} is not a run directory (no config.json)")
    snap = json.loads(path.read_text())
    raw = {k: v for k, v in snap.items() if k not in ("dataset_hash", "config_hash")}
    return parse_config(raw), snap


# commands

def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    ds, path = ensure_dataset(cfg, create=True)
    announce("dataset", path / "manifest.json")
    announce("dataset", path / "records.npz")
    return EXIT_OK


def _init_only(cfg: ExperimentConfig, ds) -> tr.RunResult:
    """Score freshly initialized models without any optimization step."""
    regime = cfg.train.regime
    if regime not in ("joint", "joint_mode"):
        raise ConfigurationError("--init-only supports the joint and joint_mode regimes")
    use = regime == "joint_mode"
    runs = []
    for seed in cfg.train.seeds:
        model = tr.build_model(cfg.backbone, cfg.train, seed, use)
        test = tr.predict(model, ds, ds.indices("test"), None, cfg.train.eval_batch_size)
        runs.append(tr.SeedRun(seed, [], [], [], -1, per_task_accuracy(test.predictions), test,
                               tr.snapshot(model)))
    return tr.RunResult(regime, list(range(ds.n_tasks)), runs, regime)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.regime:
        cfg = _with_train(cfg, regime=args.regime)
    if args.seeds:
        cfg = _with_train(cfg, seeds=tuple(args.seeds))
    ds, _ = ensure_dataset(cfg)
    regime = cfg.train.regime
    seeds = "-".join(str(s) for s in cfg.train.seeds)
    run_dir = Path(args.run_dir) if args.run_dir else \
        cfg.output_root() / "runs" / f"{regime}-{cfg.synthdata.digest()[:8]}-s{seeds}"
    rd = RunDir(run_dir, announce)
    rd.create(cfg, ds.fingerprint(), regime)
    per_task = None
    if args.init_only:
        result = _init_only(cfg, ds)
    elif regime == "separate":
        per_task = tr.train_separate(cfg.train, ds, cfg.backbone)
        result = tr.merge_separate(per_task)
    else:
        result = tr.train(cfg.train, ds, cfg.backbone)
    summary = record_result(rd, cfg, result, per_task)
    print(json.dumps({"regime": regime, "average_accuracy": summary["average_accuracy"]}),
          flush=True)
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    cfg, snap = _snapshot_config(run_dir)
    ds, _ = ensure_dataset(cfg)
    if ds.fingerprint() != snap["dataset_hash"]:
        raise ConfigurationError("dataset contents differ from the one this run was trained on")
    ckpts = sorted((run_dir / "checkpoints").glob("*.npz"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {run_dir / 'checkpoints'}")
    by_seed: dict[int, list] = {}
    for path in ckpts:
        model, header = load_checkpoint(path)
        task = header["extra"].get("task")
        idx = ds.indices(args.split, task)
        scored = tr.predict(model, ds, idx, None, cfg.train.eval_batch_size)
        by_seed.setdefault(header["seed"], []).append(scored)
    out_dir = run_dir / "eval" / args.split
    reports = {}
    for seed in sorted(by_seed):
        parts = by_seed[seed]
        preds = Predictions.concat([p.predictions for p in parts])
        routing = [p.routing for p in parts if p.routing is not None]
        report = evaluate(preds, cfg.eval.n_bins, cfg.eval.rejection_rates,
                          preds.task_id if routing else None,
                          np.concatenate(routing) if routing else None, ds.n_tasks)
        for kind, p in report.write(out_dir, prefix=f"seed{seed}").items():
            announce(kind, p)
        reports[seed] = report
    summary = {"split": args.split, "seeds": sorted(reports)}
    for key in ("average_accuracy", *EvalReport.METRICS):
        vals = [getattr(r, key) for r in reports.values()]
        m, s = tr.mean_stderr(vals)
        summary[key] = {"mean": m, "stderr": s, "per_seed": vals}
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    announce("eval_summary", path)
    return EXIT_OK


def _run_point(raw: dict, changes: dict) -> dict:
    """Train one joint MoDE configuration; top-level so worker processes can run it."""
    cfg = _with_train(parse_config(raw), regime="joint_mode", **changes)
    ds, _ = ensure_dataset(cfg)
    res = tr.train_joint(cfg.train, ds, True, cfg.backbone)
    return {
        "values": [r.average_accuracy for r in res.runs],
        "dev": float(np.mean([r.dev_accuracy[r.selected_epoch] for r in res.runs])),
        "entropy": res.final_entropy(),
    }


def _run_points(raw: dict, points: list[dict], parallel: int) -> list[dict]:
    if parallel > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_point, [raw] * len(points), points))
    return [_run_point(raw, p) for p in points]


def _table_path(cfg: ExperimentConfig, args, name: str) -> Path:
    path = Path(args.out) if args.out else cfg.output_root() / "tables" / \
        f"{name}-{cfg.synthdata.digest()[:8]}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    announce("table", path)


def cmd_sweep_experts(args) -> int:
    cfg = load_config(args.config)
    if args.seeds:
        cfg = _with_train(cfg, seeds=tuple(args.seeds))
    ensure_dataset(cfg)
    experts = sorted(set(args.experts))
    if not experts or min(experts) < 1:
        raise ConfigurationError("--experts needs positive integers", key="--experts")
    raw = cfg.to_dict()
    results = _run_points(raw, [{"n_experts": e} for e in experts], args.parallel)
    rows = []
    for e, res in zip(experts, results):
        m, s = tr.mean_stderr(res["values"])
        rows.append([e, m, s, *res["values"]])
    seeds = [f"seed{s}" for s in cfg.train.seeds]
    _write_table(_table_path(cfg, args, "experts"), ["n_experts", "mean", "stderr", *seeds], rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seeds:
        cfg = _with_train(cfg, seeds=tuple(args.seeds))
    ensure_dataset(cfg)
    raw = cfg.to_dict()
    grid = args.temperatures or [cfg.train.temperature]
    full = _run_points(raw, [{"temperature": t} for t in grid], args.parallel)
    best = max(range(len(grid)), key=lambda i: (full[i]["dev"], -i))
    chosen = grid[best]
    points, names = [{"temperature": chosen, "lambda_lb": 0.0}], ["-load_balancing"]
    if chosen != 1.0:
        points.insert(0, {"temperature": 1.0})
        names.insert(0, "-temperature_scaling")
    rest = dict(zip(names, _run_points(raw, points, args.parallel)))
    rest.setdefault("-temperature_scaling", full[best])
    rows = []
    for name, res, t in (("mode", full[best], chosen),
                         ("-temperature_scaling", rest["-temperature_scaling"], 1.0),
                         ("-load_balancing", rest["-load_balancing"], chosen)):
        m, s = tr.mean_stderr(res["values"])
        ent = float(np.mean(res["entropy"])) if res["entropy"] else float("nan")
        rows.append([name, m, s, t, ent, *res["values"]])
    seeds = [f"seed{s}" for s in cfg.train.seeds]
    _write_table(_table_path(cfg, args, "ablation"),
                 ["row", "mean", "stderr", "temperature", "final_entropy", *seeds], rows)
    return EXIT_OK


def cmd_report(args) -> int:
    columns = []
    for d in args.run_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"{d} has no summary.json; train it first")
        columns.append(json.loads(path.read_text()))
    tasks = sorted({int(t) for c in columns for t in c["task_accuracy"]})
    header = ["task"]
    for c in columns:
        header += [f"{c['regime']}_mean", f"{c['regime']}_stderr"]
    rows = []
    for t in tasks:
        row = [t]
        for c in columns:
            cell = c["task_accuracy"].get(str(t))
            row += [cell["mean"], cell["stderr"]] if cell else ["", ""]
        rows.append(row)
    avg = ["average"]
    for c in columns:
        avg += [c["average_accuracy"]["mean"], c["average_accuracy"]["stderr"]]
    rows.append(avg)
    out = Path(args.out) if args.out else Path(args.run_dirs[0]).parent / "report.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_table(out, header, rows)
    for row in rows:
        cells = [f"{row[i]:.3f}±{row[i + 1]:.3f}" if row[i] != "" else "-"
                 for i in range(1, len(row), 2)]
        print(f"# {str(row[0]):>8} " + " ".join(f"{c:>14}" for c in cells))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modelab", description=__doc__.split("\n\n")[0].strip(),
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="exit codes: 0 ok, 1 failure, 2 config/usage, "
                                       "3 missing input, 4 numerical error")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the synthetic dataset")
    g.add_argument("config", nargs="?")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train one regime over the configured seeds")
    t.add_argument("config", nargs="?")
    t.add_argument("--regime", choices=tr.REGIMES)
    t.add_argument("--seeds", type=_ints)
    t.add_argument("--run-dir")
    t.add_argument("--init-only", action="store_true", help="score untrained models")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run's checkpoints")
    e.add_argument("run_dir")
    e.add_argument("--split", choices=("dev", "test"), default="test")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep-experts", help="joint MoDE accuracy against expert count")
    s.add_argument("config", nargs="?")
    s.add_argument("--experts", type=_ints, default=[1, 2, 4, 8, 10, 16])
    s.add_argument("--seeds", type=_ints)
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep_experts)

    a = sub.add_parser("ablate", help="full MoDE against its ablations")
    a.add_argument("config", nargs="?")
    a.add_argument("--temperatures", type=_floats,
                   help="grid for the full row's temperature, chosen by dev accuracy")
    a.add_argument("--seeds", type=_ints)
    a.add_argument("--parallel", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("report", help="regimes x tasks accuracy table from run directories")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return p


def _fail(code: int, exc: BaseException, key: str | None = None) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if key:
        record["key"] = key
    print(json.dumps(record), file=sys.stderr, flush=True)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        return _fail(EXIT_CONFIG, exc, exc.key)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, exc)
    except (DomainError, SingularityError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except Exception as exc:  # noqa: BLE001 - last-resort record for harnesses
        return _fail(EXIT_FAILURE, exc)


if __name__ == "__main__":
    sys.exit(main())
