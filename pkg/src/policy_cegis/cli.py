"""Command-line driver.

    policy-cegis learn CONFIG        exit 0 success, 2 no candidate, 3 bound exceeded
    policy-cegis falsify POLICY CONFIG   exit 0 likely correct, 2 counterexample
    policy-cegis demo-check CONFIG   exit 0 clean, 2 decrease violations
    policy-cegis baseline CONFIG     regression comparison report
    policy-cegis export RUN_DIR      iteration and trace CSVs
    policy-cegis presets             list bundled configs

CONFIG is a YAML/JSON path or the name of a bundled preset. Errors exit 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import run_baseline
from .cegis import FrameworkError, run
from .config import Built, ConfigError, load_config, parse_config, preset_names, run_root
from .dynamics import simulate_closed_loop
from .falsifier import Counterexample, falsify, write_counterexample
from .learner import MveError
from .mpc import DemonstratorError, demo_check
from .policy import PolicyParams

log = logging.getLogger("policy_cegis")

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE, EXIT_BOUND = 0, 1, 2, 3


def _built(source, seed=None) -> Built:
    cfg = load_config(source)
    if seed is not None:
        cfg = cfg.model_copy(update={"seeds": cfg.seeds.model_copy(update={"run": seed})})
    return Built(cfg)


def _snapshot(b: Built, fals) -> dict:
    snap = b.cfg.model_dump()
    snap["falsifier"]["max_steps"] = fals.max_steps    # freeze a measured time budget
    if b.time_budget_note:
        snap["time_budget"] = b.time_budget_note
    return snap


def new_run_dir(name: str, seed: int, root=None) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(root) if root is not None else run_root()
    d = base / f"{name}_{stamp}_s{seed}"
    k = 1
    while d.exists():
        k += 1
        d = base / f"{name}_{stamp}_s{seed}-{k}"
    return d


def cmd_learn(args) -> int:
    b = _built(args.config, args.seed)
    fals = b.falsifier(args.workers)
    run_dir = Path(args.run_dir) if args.run_dir else new_run_dir(b.cfg.name, b.seed)
    print(f"run directory: {run_dir}")
    outcome = run(b.model, b.basis, b.mpc, fals, b.learner, b.seed, run_dir,
                  config_snapshot=_snapshot(b, fals))
    print(f"outcome: {outcome.kind} after {outcome.iterations} iterations, "
          f"{outcome.demonstrations} demonstrations ({outcome.wall_time:.1f} s)")
    if outcome.reason:
        print(f"reason: {outcome.reason}")
    if outcome.kind == "success":
        print(f"policy: {run_dir / 'policy.json'}")
    return outcome.exit_code


def cmd_falsify(args) -> int:
    b = _built(args.config, args.seed)
    policy = PolicyParams.load(args.policy)
    if policy.basis.K != b.basis.K or policy.basis.input_dim != b.model.input_dim:
        raise ConfigError([("policy", f"policy has K={policy.basis.K}, config basis has K={b.basis.K}")])
    if policy.input_box is None:
        policy = PolicyParams(policy.theta, policy.basis, b.model.input_box, plant=policy.plant,
                              provenance=policy.provenance)
    fals = b.falsifier(args.workers)
    verdict = falsify(fals, b.model, policy, b.mpc)
    if isinstance(verdict, Counterexample):
        print(f"counterexample ({verdict.phase}): x0 = {verdict.x0.tolist()}")
        if args.out:
            write_counterexample(verdict, args.out, policy)
            print(f"trace written to {args.out}.csv")
        return EXIT_NEGATIVE
    s = verdict.stats
    print(f"likely correct: no counterexample in {s['random_sims']} random and "
          f"{s['adversarial_steps']} adversarial steps (time budget {s['time_budget']:.2f} s)")
    return EXIT_OK


def cmd_demo_check(args) -> int:
    b = _built(args.config, args.seed)
    samples = args.samples if args.samples is not None else b.learner.demo_check_samples or 20
    rng = np.random.default_rng(np.random.SeedSequence([b.seed, 3]))
    report = demo_check(b.mpc, b.model, rng, samples, b.learner.demo_check_steps)
    print(report.summary())
    if args.verbose:
        for d in report.details:
            print(json.dumps(d, default=float))
    return EXIT_NEGATIVE if report.violations or report.reached < report.samples else EXIT_OK


def cmd_baseline(args) -> int:
    b = _built(args.config, args.seed)
    fals = b.falsifier(args.workers)
    bl = b.cfg.baseline
    Ms = args.M or bl.M
    mode = args.mode or bl.mode
    out = Path(args.out) if args.out else new_run_dir(f"{b.cfg.name}_baseline", b.seed)
    out.mkdir(parents=True, exist_ok=True)
    cegis = None
    if args.cegis_run:
        with open(Path(args.cegis_run) / "outcome.json") as fh:
            cegis = json.load(fh)
    report = run_baseline(b.model, b.basis, b.mpc, fals, Ms, b.seed, b.learner.delta,
                          bl.max_steps, mode, out, cegis)
    with open(out / "baseline_report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    with open(out / "baseline_report.txt", "w") as fh:
        fh.write(report.table() + "\n")
    print(report.table())
    print(f"report: {out / 'baseline_report.json'}")
    return EXIT_OK


ITERATION_COLUMNS = ("iteration", "samples", "rows", "mve", "log_volume", "min_axis",
                     "chebyshev_radius", "verdict", "witness_residual", "wall_time_s")


def _read_jsonl(path: Path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_export(args) -> int:
    rd = Path(args.run_dir)
    if not (rd / "config.json").is_file():
        raise FileNotFoundError(f"{rd}: not a run directory (no config.json)")
    out = Path(args.out) if args.out else rd / "export"
    out.mkdir(parents=True, exist_ok=True)
    records = _read_jsonl(rd / "iterations.jsonl") if (rd / "iterations.jsonl").exists() else []
    with open(out / "iterations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ITERATION_COLUMNS)
        for r in records:
            w.writerow([r.get(c, "") for c in ITERATION_COLUMNS])
    print(f"{len(records)} iterations -> {out / 'iterations.csv'}")

    pol_path = next((rd / f for f in ("policy.json", "last_candidate.json") if (rd / f).exists()), None)
    if pol_path is None:
        print("no policy in run directory; trace export skipped")
        return EXIT_OK
    with open(rd / "config.json") as fh:
        snap = json.load(fh)
    snap.pop("time_budget", None)
    seed = snap.pop("seed", 0)
    b = Built(parse_config(snap))
    fals = b.falsifier()
    policy = PolicyParams.load(pol_path)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    x0s = b.model.initial_box.sample(rng, args.traces)
    names = list(b.model.state_names) + list(b.model.input_names)
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trace", "t"] + names)
        for i, x0 in enumerate(x0s):
            tr, _ = simulate_closed_loop(b.model, policy, x0, fals.dt, fals.max_steps, fals.envelope)
            for k, x in enumerate(tr.states):
                u = tr.inputs[k] if k < len(tr.inputs) else [float("nan")] * b.model.input_dim
                w.writerow([i, repr(k * tr.dt)] + [repr(float(v)) for v in (*x, *u)])
    print(f"{args.traces} closed-loop traces of {pol_path.name} -> {out / 'trace.csv'}")
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in preset_names():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="policy-cegis", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workers=True):
        sp.add_argument("--seed", type=int, default=None, help="override seeds.run")
        if workers:
            sp.add_argument("--workers", type=int, default=None, help="falsifier worker processes")

    sp = sub.add_parser("learn", help="run the learning loop")
    sp.add_argument("config")
    sp.add_argument("--run-dir", default=None)
    common(sp)
    sp.set_defaults(func=cmd_learn)

    sp = sub.add_parser("falsify", help="falsify a stored policy")
    sp.add_argument("policy")
    sp.add_argument("config")
    sp.add_argument("--out", default=None, help="path stem for a counterexample trace")
    common(sp)
    sp.set_defaults(func=cmd_falsify)

    sp = sub.add_parser("demo-check", help="check V* decrease along demonstrator traces")
    sp.add_argument("config")
    sp.add_argument("--samples", type=int, default=None)
    common(sp, workers=False)
    sp.set_defaults(func=cmd_demo_check)

    sp = sub.add_parser("baseline", help="least-squares regression comparison")
    sp.add_argument("config")
    sp.add_argument("--M", type=int, nargs="+", default=None, help="dataset sizes")
    sp.add_argument("--mode", choices=("uniform", "aggressive"), default=None)
    sp.add_argument("--cegis-run", default=None, help="learn run directory to compare against")
    sp.add_argument("--out", default=None)
    common(sp)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("export", help="CSV export of a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", default=None)
    sp.add_argument("--traces", type=int, default=5, help="closed-loop traces of the final policy")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("presets", help="list bundled configs")
    sp.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for path, msg in exc.errors:
            print(f"  {path}: {msg}", file=sys.stderr)
        return EXIT_ERROR
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (DemonstratorError, FrameworkError, MveError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
