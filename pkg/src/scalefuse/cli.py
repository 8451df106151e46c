"""Command line: ``simulate``, ``fuse``, ``eval`` and ``report`` over a run directory."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, io, sim
from .fuse import MODES, fuse, world_trajectory

log = logging.getLogger("scalefuse")

DT = 0.1  # seconds between consecutive rows of the exported trajectories


class CliError(Exception):
    pass


def _out_dir(args, manifest):
    out = args.out or (manifest.output if manifest else None)
    if not out:
        raise CliError("no output directory: pass --out or set 'output' in the manifest")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(args, required=True):
    if args.manifest is None:
        if required:
            raise CliError("--manifest is required")
        return None
    if not Path(args.manifest).is_file():
        raise CliError(f"manifest not found: {args.manifest}")
    return io.load_manifest(args.manifest)


def _stamps(n):
    return [round(DT * k, 6) for k in range(n)]


def cmd_simulate(args):
    manifest = _manifest(args)
    config = manifest.world_config(seed=args.seed)
    out = _out_dir(args, manifest)
    gt, sessions, candidates = sim.generate_world(config)
    io.write_packets(out / "packets.jsonl", sim.export_packets(sessions))
    io.write_loops(out / "loops.jsonl", [c.edge for c in candidates])
    io.write_kitti_poses(out / "groundtruth.kitti", gt.poses)
    io.write_tum_poses(out / "groundtruth.tum", _stamps(len(gt.poses)), gt.poses)
    truth = {
        "session_scales": [io._round(s.scale) for s in sessions],
        "session_starts": gt.session_starts,
        "loops": [{"edge": c.edge.label(), "false_positive": bool(c.is_false_positive)}
                  for c in candidates],
    }
    io.write_json(out / "truth.json", truth)
    resolved = manifest.to_dict()
    resolved["world"] = config.to_dict()
    resolved["seed"] = config.rng_seed
    io.write_json(out / "manifest.json", resolved)
    print(f"simulated {len(gt.poses)} keyframes in {len(sessions)} sessions, "
          f"{len(candidates)} loop candidates -> {out}")
    return 0


def _run_inputs(args, out):
    packets = Path(args.packets) if args.packets else out / "packets.jsonl"
    loops = Path(args.loops) if args.loops else out / "loops.jsonl"
    for p in (packets, loops):
        if not p.is_file():
            raise CliError(f"input not found: {p}")
    return packets, loops


def cmd_fuse(args):
    manifest = _manifest(args, required=False)
    out = _out_dir(args, manifest)
    packets, loops = _run_inputs(args, out)
    alarm = None if args.alarm is None else args.alarm == "on"
    if manifest is not None:
        cfg = manifest.fuse_config(mode=args.mode, alarm=alarm)
        alarm_cfg, opt_cfg = manifest.alarm_config(), manifest.optimizer_config()
    else:
        from .alarm import AlarmConfig
        from .fuse import FuseConfig
        from .optimizer import OptimizeConfig
        cfg = FuseConfig(**{k: v for k, v in (("mode", args.mode), ("alarm", alarm))
                            if v is not None})
        alarm_cfg, opt_cfg = AlarmConfig(), OptimizeConfig()
    result = fuse(io.read_packets(packets), io.read_loops(loops), alarm_cfg, opt_cfg, cfg)
    graph = result.graph
    poses = world_trajectory(graph)
    io.write_tum_poses(out / "estimate.tum", _stamps(len(poses)), poses)
    io.write_kitti_poses(out / "estimate.kitti", poses)
    io.write_csv(out / "verdicts.csv", ["edge", "decision", "delta_s", "tau"],
                 [(v.label, v.decision.value, float(v.delta_s), float(v.tau))
                  for v in result.verdicts])
    io.write_csv(out / "scale_trajectory.csv", ["session", "index", "scale"],
                 [(s, i, float(x)) for s in graph.sessions
                  for i, x in evaluation.scale_trajectory(graph, s)])
    report = {
        "mode": cfg.mode, "alarm": cfg.alarm, "anchor_init": cfg.anchor_init,
        "final_chi2": io._round(result.final_chi2),
        "stages": [{k: (io._round(v) if isinstance(v, float) else v)
                    for k, v in r.to_dict().items()} for r in result.reports],
        "accepted": sum(v.accepted for v in result.verdicts),
        "rejected": sum(not v.accepted for v in result.verdicts),
        "rollback_exact": all(result.rollback_exact),
        "errors": [v.error for v in result.verdicts if v.error],
    }
    io.write_json(out / "fuse_report.json", report)
    print(f"fused {graph.num_keyframes()} keyframes, {report['accepted']} loops accepted, "
          f"{report['rejected']} rejected, chi2 {result.final_chi2:.6g} -> {out}")
    return 0


def _read_trajectory(path):
    path = Path(path)
    if not path.is_file():
        raise CliError(f"trajectory not found: {path}")
    if path.suffix == ".kitti" or path.suffix == ".txt":
        poses = io.read_kitti_poses(path)
        return None, poses
    return io.read_tum_poses(path)


def _associate(est, ref):
    (ts_e, pe), (ts_r, pr) = est, ref
    if ts_e is None or ts_r is None:
        if len(pe) != len(pr):
            raise CliError(f"trajectory lengths differ: {len(pe)} vs {len(pr)}")
        return pe, pr
    lookup = {round(t, 6): p for t, p in zip(ts_r, pr)}
    pairs = [(p, lookup[round(t, 6)]) for t, p in zip(ts_e, pe) if round(t, 6) in lookup]
    if len(pairs) < 3:
        raise CliError("fewer than 3 matching timestamps between trajectories")
    return [a for a, _ in pairs], [b for _, b in pairs]


def _ate(estimate, reference):
    est, ref = _associate(_read_trajectory(estimate), _read_trajectory(reference))
    return evaluation.ate_rmse(est, ref)


def _ate_rows(label, rep):
    r = rep.row(label)
    return [(r["label"], r["rmse"], r["mean"], r["median"], r["max"], r["n"])]


ATE_HEADER = ["label", "rmse", "mean", "median", "max", "n"]


def cmd_eval(args):
    manifest = _manifest(args, required=False)
    out = _out_dir(args, manifest) if (args.out or manifest) else None
    if out is not None:
        estimate = Path(args.estimate) if args.estimate else out / "estimate.tum"
        reference = Path(args.reference) if args.reference else out / "groundtruth.tum"
    else:
        if not (args.estimate and args.reference):
            raise CliError("pass --estimate and --reference, or --out with a run directory")
        estimate, reference = Path(args.estimate), Path(args.reference)
    rep = _ate(estimate, reference)
    if out is not None:
        io.write_csv(out / "ate.csv", ATE_HEADER, _ate_rows(args.label, rep))
    print(f"ATE rmse {io.fmt(rep.rmse)} m over {rep.num_poses} poses")
    return 0


def cmd_report(args):
    manifest = _manifest(args, required=False)
    run = _out_dir(args, manifest)
    dest = run / "report"
    dest.mkdir(exist_ok=True)
    needed = ["estimate.tum", "groundtruth.tum", "scale_trajectory.csv", "verdicts.csv"]
    missing = [n for n in needed if not (run / n).is_file()]
    if missing:
        raise CliError(f"run directory {run} lacks {missing}; run simulate and fuse first")
    rep = _ate(run / "estimate.tum", run / "groundtruth.tum")
    io.write_csv(dest / "ate.csv", ATE_HEADER, _ate_rows("estimate", rep))
    scales = io.read_csv(run / "scale_trajectory.csv")
    io.write_csv(dest / "scale_trajectory.csv", ["session", "index", "scale"],
                 [(r["session"], r["index"], r["scale"]) for r in scales])
    per_session = {}
    for r in scales:
        per_session.setdefault(int(r["session"]), []).append(float(r["scale"]))
    io.write_csv(dest / "session_scales.csv", ["session", "mean_scale", "min_scale", "max_scale"],
                 [(s, float(np.mean(v)), float(np.min(v)), float(np.max(v)))
                  for s, v in sorted(per_session.items())])
    verdicts = io.read_csv(run / "verdicts.csv")
    labels = {}
    if (run / "truth.json").is_file():
        truth = json.loads((run / "truth.json").read_text(encoding="utf-8"))
        labels = {d["edge"]: d["false_positive"] for d in truth.get("loops", [])}
    io.write_csv(dest / "verdicts.csv", ["edge", "decision", "delta_s", "tau", "false_positive"],
                 [(v["edge"], v["decision"], v["delta_s"], v["tau"],
                   {True: "true", False: "false"}.get(labels.get(v["edge"]), ""))
                  for v in verdicts])
    print(f"report written to {dest}")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", metavar="PATH", help="run manifest (JSON)")
    common.add_argument("--out", metavar="DIR", help="run directory (overrides the manifest)")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="scalefuse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic scenario")
    s.add_argument("--seed", type=int, help="overrides the manifest seed")
    s.set_defaults(func=cmd_simulate)
    f = sub.add_parser("fuse", parents=[common], help="fuse packets and loops")
    f.add_argument("--packets", metavar="PATH")
    f.add_argument("--loops", metavar="PATH")
    f.add_argument("--mode", choices=MODES)
    f.add_argument("--alarm", choices=("on", "off"))
    f.add_argument("--seed", type=int, help="accepted for symmetry; fusion is deterministic")
    f.set_defaults(func=cmd_fuse)
    e = sub.add_parser("eval", parents=[common], help="ATE of an estimate against a reference")
    e.add_argument("--estimate", metavar="PATH")
    e.add_argument("--reference", metavar="PATH")
    e.add_argument("--label", default="estimate")
    e.set_defaults(func=cmd_eval)
    r = sub.add_parser("report", parents=[common], help="CSV bundle for a run directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, KeyError) as exc:
        print(f"scalefuse {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
