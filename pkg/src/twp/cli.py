"""Command-line entry point: ``twp <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (corrupt log, CSV or
config), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, clustering, distfit, simnet
from .coordinator import DEFAULT_MAX_UPLOADS, CoordinatorError
from .peer import DEFAULT_PENDING_EXPIRY_MS, DEFAULT_PROBE_INTERVAL_MS, DEFAULT_ROTATION_S
from .wire import CodecError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("twp")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(args, randomized: bool = True) -> Optional[int]:
    if args.seed is None and randomized and os.environ.get("CI") == "1":
        raise UsageError("--seed is required when CI=1")
    return args.seed


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# -- coord / peer --------------------------------------------------------------


def cmd_coord(args) -> int:
    from .net import CoordinatorServer

    async def go():
        srv = CoordinatorServer(args.out_dir, args.interval_ms, args.max_uploads,
                                args.nodes, args.register_s)
        await srv.listen(args.listen)
        log.info("coordinator listening on port %d", srv.port)
        roster = await srv.run(args.duration, args.finish_timeout)
        print(f"{len(roster)} nodes; logs in {args.out_dir}")

    asyncio.run(go())
    return EXIT_OK


def cmd_peer(args) -> int:
    from .net import PeerRuntime

    rt = PeerRuntime(args.coordinator, args.listen, args.log_dir, args.rotate_s,
                     args.pending_expiry_ms)
    asyncio.run(rt.run())
    if rt.roster is not None and args.interval_ms and rt.roster.interval_ms != args.interval_ms:
        log.warning("coordinator interval %d ms overrode --interval-ms %d",
                    rt.roster.interval_ms, args.interval_ms)
    c = rt.peer.counters
    print(f"node {rt.peer.id}: sent={c.sent} received={c.received} late={c.late} "
          f"unsolicited={c.unsolicited} duplicate={c.duplicate} expired={c.expired}")
    return EXIT_OK


# -- sim / analyze ------------------------------------------------------------


def cmd_sim(args) -> int:
    cfg = simnet.load_config(args.config)
    seed = _seed(args)
    if seed is not None:
        cfg.seed = seed
    if args.ticks is not None:
        cfg.ticks = args.ticks
    result = simnet.run_scenario(cfg)
    result.write(args.out_dir)
    return EXIT_OK


def cmd_analyze(args) -> int:
    roster_path = Path(args.roster) if args.roster else Path(args.logs) / "roster.txt"
    roster = analysis.read_roster(roster_path)
    logs = analysis.load_logs(args.logs)
    unknown = [n for n in logs if not 0 <= n < len(roster)]
    if unknown:
        raise DataError(f"log directories {unknown} are not in the roster")
    mesh = analysis.analyze(logs, len(roster))
    stats = analysis.write_outputs(mesh, args.out, args.trim_q)
    if args.export_rtt:
        rows = []
        for link, series in sorted(mesh.links.items()):
            rows.extend((link[0], link[1], w, r) for w, r in zip(series.rtt_wall, series.rtt))
        analysis.write_csv(Path(args.out) / "rtt.csv", ["src", "dst", "wall_ms", "rtt_ms"], rows)
    print(f"{len(stats)} links analyzed; outputs in {args.out}")
    return EXIT_OK


# -- fit / synth ---------------------------------------------------------------


def read_values(path) -> np.ndarray:
    """One value per line, or a CSV whose ``rtt_ms`` (else first) column holds them."""
    vals = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        col = 0
        for lineno, row in enumerate(reader, start=1):
            if not row or not row[0].strip() or row[0].startswith("#"):
                continue
            try:
                vals.append(float(row[col]))
            except ValueError:
                if lineno == 1 and not vals:
                    col = row.index("rtt_ms") if "rtt_ms" in row else 0
                    continue
                raise DataError(f"{path}:{lineno}: not a number: {row[col]!r}") from None
            except IndexError:
                raise DataError(f"{path}:{lineno}: missing column {col}") from None
    if not vals:
        raise DataError(f"{path}: no values")
    return np.asarray(vals)


FIT_HEADER = ["rank", "family", "label", "n_params", "ad_stat", "n",
              "loc", "shape", "scale", "threshold", "mean", "status"]


def _families(text: str) -> list[distfit.Family]:
    if text.strip().lower() == "all":
        return list(distfit.ALL_FAMILIES)
    try:
        return [distfit.Family.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_fit(args) -> int:
    families = _families(args.families)
    data = read_values(args.input)
    seed = _seed(args, randomized=args.subsample < 1)
    if args.subsample < 1:
        data = distfit.subsample(data, args.subsample, np.random.default_rng(seed))
    ranking = distfit.rank_fits(data, families)
    rows = []
    for i, r in enumerate(ranking.fits, start=1):
        p = r.params
        rows.append([i, p.family.value, p.family.label, p.family.n_params, r.ad_stat, r.n,
                     p.loc, p.shape, p.scale, p.threshold, p.mean(), "ok"])
    for fam, why in ranking.skipped.items():
        rows.append(["", fam.value, fam.label, fam.n_params, "", data.size,
                     "", "", "", "", "", f"skipped: {why}"])
    out = Path(args.out) if args.out else None
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(FIT_HEADER)
        w.writerows([analysis.fmt(v) if not isinstance(v, str) else v for v in row]
                    for row in rows)
    else:
        _write_rows(out, FIT_HEADER, rows)
    if args.plot_data:
        prows = []
        for r in ranking.fits:
            emp, mod = distfit.probability_plot_data(data, r.params, args.plot_points)
            prows.extend((r.family.value, e, m) for e, m in zip(emp, mod))
        _write_rows(Path(args.plot_data), ["family", "empirical", "model"], prows)
    return EXIT_OK


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else analysis.fmt(v) for v in row])


def cmd_synth(args) -> int:
    fam = _families(args.family)
    if len(fam) != 1:
        raise UsageError("--family takes exactly one family")
    try:
        params = distfit.DistParams(fam[0], args.scale, shape=args.shape, loc=args.loc,
                                    threshold=args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    values = distfit.sample(params, np.random.default_rng(_seed(args)), args.n)
    text = "".join(f"{analysis.fmt(v)}\n" for v in values)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- cluster -------------------------------------------------------------------


def cmd_cluster(args) -> int:
    outs = [p for p in args.out.split(",") if p]
    if len(outs) != 2:
        raise UsageError("--out takes two paths: clusters.csv,crosstab.csv")
    stats = analysis.read_link_stats(args.stats)
    feats = clustering.build_features(stats, args.min_samples)
    for link, why in feats.skipped.items():
        log.warning("link %d->%d skipped: %s", link[0], link[1], why)
    rng = np.random.default_rng(_seed(args))
    model = clustering.em_fit(feats.matrix, args.k, args.restarts, rng)
    labels = clustering.assign_all(model, feats)
    order = clustering.component_order(model, labels, stats)
    rank = {c: i for i, c in enumerate(order)}
    labels = {l: rank[c] for l, c in labels.items()}
    resp = clustering.responsibilities(model, feats.matrix)[:, order]
    rows = [[l[0], l[1], f"c{labels[l] + 1}", *resp[i]] for i, l in enumerate(feats.links)]
    _write_rows(Path(outs[0]), ["src", "dst", "cluster"] + [f"resp_c{j + 1}" for j in range(model.k)],
                rows)

    complete = {l: c for l, c in labels.items() if (l[1], l[0]) in labels}
    if len(complete) < len(labels):
        log.warning("%d links lack their reverse direction; left out of the cross-tab",
                    len(labels) - len(complete))
    table = clustering.direction_crosstab(complete, model.k)
    Path(outs[1]).parent.mkdir(parents=True, exist_ok=True)
    with open(outs[1], "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(table.rows())

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["cluster", "links", "percent", "mean_rtt_ms", "cv", "loss_percent"])
    for r in clustering.cluster_summary(labels, stats, model.k):
        w.writerow([r.cluster, r.links] + [analysis.fmt(v) for v in
                                           (r.percent, r.mean_rtt_ms, r.cv, r.loss_percent)])
    return EXIT_OK


# -- report --------------------------------------------------------------------


def _read_dicts(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(text) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return math.nan


def build_report(analysis_dir, fit_csv=None, crosstab_csv=None) -> str:
    d = Path(analysis_dir)
    stats = analysis.read_link_stats(d / "link_stats.csv")
    if not stats:
        raise DataError(f"{d / 'link_stats.csv'}: no links")
    sent = sum(s.messages_sent for s in stats)
    lost = sum(s.messages_lost for s in stats)
    total = sum(s.count for s in stats)
    mean = sum(s.mean_ms * s.count for s in stats) / max(1, total)
    out = ["# Experiment summary", "",
           f"- directed links: {len(stats)}",
           f"- RTT samples: {total}",
           f"- sample-weighted mean RTT: {mean:.1f} ms",
           f"- messages lost: {lost} of {sent}"
           + (f" ({100.0 * lost / sent:.2f}%)" if sent else ""), ""]
    asym = d / "asymmetry.csv"
    if asym.exists():
        rows = [r for r in _read_dicts(asym) if r["initiator"] == "all"]
        if rows:
            r = rows[0]
            out += ["## One-way delay asymmetry (all pairs)", "",
                    "| count | mean | sd | median | q90 | q99 | trimmed mean |",
                    "|---|---|---|---|---|---|---|",
                    "| {} | {:.3f} | {:.3f} | {:.3f} | {:.3f} | {:.3f} | {:.3f} |".format(
                        r["count"], *(_num(r[k]) for k in
                                      ("mean", "sd", "median", "q90", "q99", "trimmed_mean"))),
                    ""]
    if fit_csv:
        out += ["## Distribution fits (ascending A²)", "",
                "| rank | family | A² | mean |", "|---|---|---|---|"]
        for r in _read_dicts(fit_csv):
            if r["status"] == "ok":
                out.append(f"| {r['rank']} | {r['label']} | {_num(r['ad_stat']):.2f} "
                           f"| {_num(r['mean']):.2f} |")
            else:
                out.append(f"| - | {r['label']} | {r['status']} | |")
        out.append("")
    if crosstab_csv:
        with open(crosstab_csv, newline="") as fh:
            rows = list(csv.reader(fh))
        out += ["## Cluster membership of the two directions", "",
                "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        out += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        out.append("")
    return "\n".join(out)


def cmd_report(args) -> int:
    text = build_report(args.analysis, args.fit, args.crosstab)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twp", description="Three-Way Ping measurement and analysis suite.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("coord", help="run the coordinator")
    c.add_argument("--listen", required=True, help="host:port for the control server")
    c.add_argument("--max-uploads", type=_positive_int, default=DEFAULT_MAX_UPLOADS)
    c.add_argument("--duration", type=float, required=True,
                   help="measurement duration in seconds after START")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--interval-ms", type=_positive_int, default=DEFAULT_PROBE_INTERVAL_MS)
    c.add_argument("--nodes", type=_positive_int,
                   help="start as soon as this many peers have registered")
    c.add_argument("--register-s", type=float, default=30.0,
                   help="registration window in seconds")
    c.add_argument("--finish-timeout", type=float, default=120.0)
    c.set_defaults(func=cmd_coord)

    c = sub.add_parser("peer", help="run one measurement peer")
    c.add_argument("--coordinator", required=True, help="coordinator host:port")
    c.add_argument("--listen", required=True, help="host:port for UDP probes")
    c.add_argument("--interval-ms", type=_positive_int, default=None,
                   help="expected probe interval; the coordinator's roster wins")
    c.add_argument("--log-dir", required=True)
    c.add_argument("--rotate-s", type=float, default=DEFAULT_ROTATION_S)
    c.add_argument("--pending-expiry-ms", type=_positive_int, default=DEFAULT_PENDING_EXPIRY_MS)
    c.set_defaults(func=cmd_peer)

    c = sub.add_parser("sim", help="run a simulated mesh")
    c.add_argument("--config", required=True)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--seed", type=_u64, help="overrides the config file seed")
    c.add_argument("--ticks", type=int, help="overrides the config file tick count")
    c.set_defaults(func=cmd_sim)

    c = sub.add_parser("analyze", help="turn logs into link statistics")
    c.add_argument("--logs", required=True, help="directory of <node>/<segment>.twplog")
    c.add_argument("--roster", help="roster file (default: <logs>/roster.txt)")
    c.add_argument("--out", required=True)
    c.add_argument("--trim-q", type=float, help="drop per-link RTT samples above this quantile")
    c.add_argument("--export-rtt", action="store_true", help="also write rtt.csv")
    c.set_defaults(func=cmd_analyze)

    c = sub.add_parser("fit", help="fit and rank delay distributions")
    c.add_argument("--input", required=True)
    c.add_argument("--families", default="all")
    c.add_argument("--subsample", type=float, default=1.0)
    c.add_argument("--seed", type=_u64)
    c.add_argument("--out", help="CSV path (default: stdout)")
    c.add_argument("--plot-data", help="write probability-plot pairs to this CSV")
    c.add_argument("--plot-points", type=_positive_int, default=1000)
    c.set_defaults(func=cmd_fit)

    c = sub.add_parser("synth", help="draw synthetic delays, one per line")
    c.add_argument("--family", required=True)
    c.add_argument("--shape", type=float)
    c.add_argument("--scale", type=float, required=True)
    c.add_argument("--loc", type=float)
    c.add_argument("--threshold", type=float, default=0.0)
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--seed", type=_u64)
    c.add_argument("--out")
    c.set_defaults(func=cmd_synth)

    c = sub.add_parser("cluster", help="EM clustering of directed links")
    c.add_argument("--stats", required=True, help="link_stats.csv from analyze")
    c.add_argument("--k", type=_positive_int, default=clustering.DEFAULT_K)
    c.add_argument("--restarts", type=_positive_int, default=clustering.DEFAULT_RESTARTS)
    c.add_argument("--seed", type=_u64)
    c.add_argument("--min-samples", type=int, default=clustering.MIN_LINK_SAMPLES)
    c.add_argument("--out", default="clusters.csv,crosstab.csv",
                   help="comma-separated paths for assignments and cross-tab")
    c.set_defaults(func=cmd_cluster)

    c = sub.add_parser("report", help="one-file experiment summary (markdown)")
    c.add_argument("--analysis", required=True, help="directory written by analyze")
    c.add_argument("--fit", help="fit.csv")
    c.add_argument("--crosstab", help="crosstab.csv")
    c.add_argument("--out")
    c.set_defaults(func=cmd_report)
    return p


_DATA_ERRORS = (CodecError, analysis.AnalysisError, distfit.DistError, simnet.ConfigError,
                clustering.ClusteringError, DataError, csv.Error, UnicodeDecodeError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"twp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"twp: error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"twp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CoordinatorError, OSError, RuntimeError, ValueError) as exc:
        print(f"twp: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
