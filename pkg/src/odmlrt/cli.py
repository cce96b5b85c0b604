"""Command line front end: run scenarios, compare runs, build reports.

Three subcommands:

* ``simulate`` runs a scenario file through the coupled solver and
  writes snapshots, metrics and a summary into an output directory.
* ``compare`` measures relative differences between the snapshot sets
  of two finished runs and emits an error-series CSV plus a summary.
* ``report`` turns a run's metrics series into SVG line charts and a
  plain-text summary table; given a second (conventional) run it also
  plots the per-step chemistry speedup.

Exit codes: 0 on success, 2 on bad usage, 1 on runtime failure.  Plots
are written by a small built-in SVG writer so the CSV series remain the
authoritative artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys

import numpy as np

from .coupling import Scenario, run_simulation
from .fields import (
    FieldKind,
    GridField,
    StructuredMesh,
    compare_fields,
    read_snapshot_csv,
)

log = logging.getLogger("odmlrt")

_SNAPSHOT_RE = re.compile(r"^(?P<name>.+)-step(?P<step>\d{6})\.csv$")

DEFAULT_EPSILON = 0.001


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="run a scenario file")
    p.add_argument("--config", required=True, help="scenario TOML file")
    p.add_argument("--mode", choices=("conventional", "odml"))
    p.add_argument("--epsilon", type=float,
                   help="acceptance tolerance (odml mode only)")
    p.add_argument("--output", default="out", help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    p.set_defaults(func=cmd_simulate)


def _add_compare(sub):
    p = sub.add_parser("compare", help="compare two run directories")
    p.add_argument("run_a", help="reference run directory")
    p.add_argument("run_b", help="other run directory")
    p.add_argument("--output", default="comparison.csv",
                   help="error-series CSV path")
    p.set_defaults(func=cmd_compare)


def _add_report(sub):
    p = sub.add_parser("report", help="plots and summary for a run")
    p.add_argument("run", help="run directory with metrics.csv")
    p.add_argument("--baseline",
                   help="conventional run directory for speedup series")
    p.add_argument("--output", help="report directory (default <run>/report)")
    p.set_defaults(func=cmd_report)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="odmlrt",
        description="reactive transport with on-demand learned equilibrium",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_simulate(sub)
    _add_compare(sub)
    _add_report(sub)
    return parser


def cmd_simulate(parser, args):
    overrides = {}
    if args.mode is not None:
        overrides["run.mode"] = args.mode
    if args.threads is not None:
        overrides["run.threads"] = args.threads
    if args.snapshot_every is not None:
        overrides["run.snapshot_every"] = args.snapshot_every
    if args.epsilon is not None:
        if args.mode == "conventional":
            parser.error("--epsilon applies to --mode odml only")
        overrides["run.epsilon"] = args.epsilon
    elif args.mode == "odml":
        log.info("no --epsilon given; using the default tolerance %g",
                 DEFAULT_EPSILON)
        overrides["run.epsilon"] = DEFAULT_EPSILON
    seed = os.environ.get("ODMLRT_SEED")
    if seed is not None:
        overrides["flow.permeability.seed"] = int(seed)
        log.info("permeability seed overridden to %s from ODMLRT_SEED", seed)

    scenario = Scenario.from_file(args.config, overrides)
    log.info("running %s mode, %d steps, %dx%d cells -> %s",
             scenario.mode, scenario.steps, scenario.nx, scenario.ny,
             args.output)

    def progress(m):
        if m.step % 50 == 0 or m.step == scenario.steps:
            log.info("step %d/%d  chemistry %.2fs  learnings %d",
                     m.step, scenario.steps, m.t_chemistry, m.learnings)

    summary = run_simulation(scenario, args.output, progress=progress)
    log.info("finished in %.1f s; summary written to %s",
             summary["wall_time_s"], os.path.join(args.output, "summary.json"))
    return 0


def _discover_snapshots(directory):
    """Map (field name, step) -> CSV path for one run directory."""
    found = {}
    try:
        entries = os.listdir(directory)
    except OSError as exc:
        raise RuntimeError("cannot read run directory: %s" % exc) from exc
    for entry in entries:
        m = _SNAPSHOT_RE.match(entry)
        if m:
            found[(m.group("name"), int(m.group("step")))] = os.path.join(
                directory, entry)
    return found


def _mesh_from_csv(path):
    """Rebuild the structured mesh from a nodal snapshot's coordinates."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.ndim == 1:
        data = data[None, :]
    xs = np.unique(data[:, 0])
    ys = np.unique(data[:, 1])
    if len(xs) < 2 or len(ys) < 2 or len(xs) * len(ys) != len(data):
        raise RuntimeError("snapshot %s is not a full structured grid" % path)
    return StructuredMesh(len(xs) - 1, len(ys) - 1, float(xs[-1]),
                          float(ys[-1]))


def cmd_compare(parser, args):
    snaps_a = _discover_snapshots(args.run_a)
    snaps_b = _discover_snapshots(args.run_b)
    common = sorted(set(snaps_a) & set(snaps_b), key=lambda k: (k[1], k[0]))
    if not common:
        raise RuntimeError("no snapshot CSVs common to both run directories")
    only_a = set(snaps_a) - set(snaps_b)
    only_b = set(snaps_b) - set(snaps_a)
    if only_a or only_b:
        log.warning("skipping %d snapshots present in only one run",
                    len(only_a) + len(only_b))

    mesh = _mesh_from_csv(snaps_a[common[0]])
    if mesh != _mesh_from_csv(snaps_b[common[0]]):
        raise RuntimeError("runs use different meshes; nothing to compare")

    rows = []
    worst = (0.0, None)
    for name, step in common:
        va = read_snapshot_csv(snaps_a[(name, step)])
        vb = read_snapshot_csv(snaps_b[(name, step)])
        if va.shape != vb.shape or len(va) != mesh.n_nodes:
            raise RuntimeError(
                "snapshot %s-step%06d differs in shape between runs"
                % (name, step))
        fa = GridField(mesh, FieldKind.NODAL_SCALAR, va, name)
        fb = GridField(mesh, FieldKind.NODAL_SCALAR, vb, name)
        err = compare_fields(fa, fb)
        rows.append((step, name, err["linf_field"], err["l2_rel"],
                     err["linf_rel"]))
        if err["linf_field"] > worst[0]:
            worst = (err["linf_field"], (name, step))

    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "field", "linf_rel_to_field_max", "l2_rel",
                         "linf_rel_per_node"])
        writer.writerows(rows)

    print("compared %d snapshots over %d fields"
          % (len(rows), len({name for name, _ in common})))
    if worst[1] is not None:
        print("max linf error (relative to field max): %.6e at %s step %d"
              % (worst[0], worst[1][0], worst[1][1]))
    else:
        print("max linf error (relative to field max): 0")
    print("error series written to %s" % args.output)
    return 0


def _read_metrics(directory):
    path = os.path.join(directory, "metrics.csv")
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise RuntimeError("missing metrics series: %s" % exc) from exc
    if not rows:
        raise RuntimeError("metrics series in %s is empty" % directory)
    out = {key: np.array([float(r[key]) for r in rows])
           for key in rows[0]}
    return out


def _read_summary(directory):
    path = os.path.join(directory, "summary.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError:
        return {}


def _svg_line_chart(path, series, title, ylabel):
    """Write a minimal SVG line chart.

    ``series`` is a list of (label, x, y) tuples sharing one axis box.
    """
    width, height = 720, 420
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = np.concatenate([np.asarray(x, dtype=float) for _, x, _ in series])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, _, y in series])
    x0, x1 = float(np.min(xs)), float(np.max(xs))
    y0, y1 = float(np.min(ys)), float(np.max(ys))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    y0, y1 = y0 - 0.05 * (y1 - y0), y1 + 0.05 * (y1 - y0)

    def px(x):
        return ml + pw * (x - x0) / (x1 - x0)

    def py(y):
        return mt + ph * (1.0 - (y - y0) / (y1 - y0))

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    parts = [
        '<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
        'font-family="sans-serif" font-size="13">' % (width, height),
        '<rect width="100%" height="100%" fill="white"/>',
        '<text x="%d" y="24" text-anchor="middle" font-size="16">%s</text>'
        % (width // 2, title),
        '<rect x="%d" y="%d" width="%d" height="%d" fill="none" '
        'stroke="black"/>' % (ml, mt, pw, ph),
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x0 + frac * (x1 - x0)
        yv = y0 + frac * (y1 - y0)
        parts.append(
            '<text x="%.1f" y="%d" text-anchor="middle">%g</text>'
            % (px(xv), height - mb + 18, round(xv, 6)))
        parts.append(
            '<text x="%d" y="%.1f" text-anchor="end">%.3g</text>'
            % (ml - 6, py(yv) + 4, yv))
        if 0.0 < frac < 1.0:
            parts.append(
                '<line x1="%d" y1="%.1f" x2="%d" y2="%.1f" stroke="#ddd"/>'
                % (ml, py(yv), ml + pw, py(yv)))
    parts.append(
        '<text x="%d" y="%d" text-anchor="middle">step</text>'
        % (ml + pw // 2, height - 12))
    parts.append(
        '<text x="16" y="%d" text-anchor="middle" '
        'transform="rotate(-90 16 %d)">%s</text>'
        % (mt + ph // 2, mt + ph // 2, ylabel))
    for k, (label, x, y) in enumerate(series):
        pts = " ".join("%.1f,%.1f" % (px(xi), py(yi))
                       for xi, yi in zip(x, y))
        color = colors[k % len(colors)]
        parts.append('<polyline points="%s" fill="none" stroke="%s" '
                     'stroke-width="1.5"/>' % (pts, color))
        parts.append('<text x="%d" y="%d" fill="%s">%s</text>'
                     % (ml + 10, mt + 18 + 16 * k, color, label))
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def cmd_report(parser, args):
    out_dir = args.output or os.path.join(args.run, "report")
    os.makedirs(out_dir, exist_ok=True)
    metrics = _read_metrics(args.run)
    summary = _read_summary(args.run)
    steps = metrics["step"]
    written = []

    is_odml = summary.get("mode") == "odml" or np.any(
        metrics["learnings"] > 0)
    if is_odml:
        p = os.path.join(out_dir, "learnings-per-step.svg")
        _svg_line_chart(p, [("learnings", steps, metrics["learnings"])],
                        "On-demand learnings per step", "learnings")
        written.append(p)

    cpu_series = [("chemistry", steps, metrics["t_chemistry_s"])]
    base = None
    if args.baseline:
        base = _read_metrics(args.baseline)
        if len(base["step"]) != len(steps):
            raise RuntimeError(
                "baseline run has a different number of steps")
        cpu_series.insert(0, ("baseline chemistry", base["step"],
                              base["t_chemistry_s"]))
    p = os.path.join(out_dir, "cpu-per-step.svg")
    _svg_line_chart(p, cpu_series, "Chemistry CPU time per step", "seconds")
    written.append(p)

    lines = ["run: %s" % args.run,
             "mode: %s" % summary.get("mode", "unknown"),
             "steps: %d" % len(steps)]
    if is_odml:
        learn = int(np.sum(metrics["learnings"]))
        pred = int(np.sum(metrics["predictions"]))
        pct = 100.0 * pred / max(1, pred + learn)
        lines += ["total learnings: %d" % learn,
                  "total predictions: %d" % pred,
                  "prediction percentage: %.3f%%" % pct]
    if base is not None:
        speedup = base["t_chemistry_s"] / np.maximum(
            metrics["t_chemistry_s"], 1e-12)
        p = os.path.join(out_dir, "speedup-per-step.svg")
        _svg_line_chart(p, [("speedup", steps, speedup)],
                        "Chemistry speedup per step",
                        "conventional / smart")
        written.append(p)
        overall = (float(np.sum(base["t_chemistry_s"]))
                   / max(float(np.sum(metrics["t_chemistry_s"])), 1e-12))
        lines += ["speedup range: %.2fx to %.2fx"
                  % (float(np.min(speedup)), float(np.max(speedup))),
                  "overall speedup: %.2fx" % overall]

    table = "\n".join(lines)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    print("report written to %s (%d plots)" % (out_dir, len(written)))
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(parser, args)
    except SystemExit:
        raise
    except Exception as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
