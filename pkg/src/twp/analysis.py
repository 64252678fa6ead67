"""Log merging and delay analysis.

Terminology: for a pair the *initiator* A sends PING and ACK, the
*responder* B sends PING-ACK. A directed link ``(src, dst)`` is the
measurement channel whose RTT is taken on ``src``'s clock and whose
first message travels ``src -> dst``:

* ``A -> B``: rtt_ab = PING-ACK recv@A - PING send@A; one-way samples
  are the PING and ACK transits.
* ``B -> A``: rtt_ba = ACK recv@B - PING-ACK send@B; one-way samples are
  the PING-ACK transits.
"""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .coordinator import CoordinatorError, Roster
from .peer import initiator_of
from .wire import SEQ_HALF, SEQ_MOD, CorruptLog, LogRecord, MessageType, iter_log

QUANTILES = (0.25, 0.50, 0.75, 0.90, 0.95, 0.99)
Z99 = 2.576
DAY_MS = 86_400_000
TRIM_FRACTION = 0.05
CDF_METRICS = ("mean", "q99", "cv", "loss", "min", "max", "asymmetry")


class AnalysisError(ValueError):
    pass


class EmptyInput(AnalysisError):
    pass


class NonPositiveDelay(AnalysisError):
    pass


# -- rounds ------------------------------------------------------------------


@dataclass
class TwpRound:
    initiator: int
    responder: int
    seq: int
    ping_sent: Optional[int] = None
    ping_recv: Optional[int] = None
    pingack_sent: Optional[int] = None
    pingack_recv: Optional[int] = None
    ack_sent: Optional[int] = None
    ack_recv: Optional[int] = None

    @property
    def wall_time(self) -> Optional[int]:
        for t in (self.ping_sent, self.pingack_recv, self.ack_sent,
                  self.ping_recv, self.pingack_sent, self.ack_recv):
            if t is not None:
                return t
        return None

    @property
    def complete(self) -> bool:
        return None not in (self.ping_sent, self.ping_recv, self.pingack_sent,
                            self.pingack_recv, self.ack_sent, self.ack_recv)


@dataclass(frozen=True)
class LossEvent:
    src: int
    dst: int
    seq: int
    kind: MessageType
    wall_time: int


@dataclass
class LinkSample:
    rtt_ab_ms: Optional[int]
    rtt_ba_ms: Optional[int]
    fwd_delay_ms: Optional[int]
    rev_delay_ms: Optional[int]
    fwd_check_ms: Optional[int]
    wall_time: Optional[int]


# (kind, received) -> TwpRound attribute
_SLOT = {
    (MessageType.PING, False): "ping_sent",
    (MessageType.PING, True): "ping_recv",
    (MessageType.PING_ACK, False): "pingack_sent",
    (MessageType.PING_ACK, True): "pingack_recv",
    (MessageType.ACK, False): "ack_sent",
    (MessageType.ACK, True): "ack_recv",
}
# send slot -> matching receive slot
_PAIRED = {"ping_sent": "ping_recv", "pingack_sent": "pingack_recv", "ack_sent": "ack_recv"}
_SENDER_IS_INITIATOR = {"ping_sent": True, "pingack_sent": False, "ack_sent": True}
_KIND_OF = {"ping_sent": MessageType.PING, "pingack_sent": MessageType.PING_ACK,
            "ack_sent": MessageType.ACK}


def unwrap_seqs(seqs: Iterable[int]) -> list[int]:
    """Map 32-bit serial numbers to a monotone-comparable line, in arrival order."""
    out, base, prev = [], 0, None
    for s in seqs:
        if prev is None:
            base = s
        else:
            d = (s - prev) % SEQ_MOD
            base += d - SEQ_MOD if d >= SEQ_HALF else d
        out.append(base)
        prev = s
    return out


def _pair_events(log: Iterable[LogRecord], me: int, other: int):
    for r in log:
        if r.owner == me and {r.src, r.dst} == {me, other}:
            yield r


def match_rounds(log_a: Sequence[LogRecord], log_b: Sequence[LogRecord],
                 a: int, b: int, n: int) -> tuple[list[TwpRound], list[LossEvent]]:
    """Join the two nodes' events for pair {a, b} on (seq, type, direction).

    A send with no receive in the counterpart's log is a loss event.
    Rounds come back in serial-number order, unwrapped across 2**32.
    """
    init = initiator_of(a, b, n)
    resp = b if init == a else a
    log_i, log_r = (log_a, log_b) if init == a else (log_b, log_a)

    rounds: dict[int, TwpRound] = {}
    first_seen: list[int] = []

    def get(seq):
        rnd = rounds.get(seq)
        if rnd is None:
            rnd = rounds[seq] = TwpRound(init, resp, seq)
            first_seen.append(seq)
        return rnd

    for owner, other, log in ((init, resp, log_i), (resp, init, log_r)):
        for r in _pair_events(log, owner, other):
            slot = _SLOT[(r.kind, r.received)]
            # PING and ACK travel initiator -> responder, PING-ACK the other way;
            # events contradicting the pair's roles are foreign and skipped
            if (r.src == init) != (r.kind != MessageType.PING_ACK):
                continue
            rnd = get(r.seq)
            if getattr(rnd, slot) is None:
                setattr(rnd, slot, r.timestamp_ms)

    order = {s: u for s, u in zip(first_seen, unwrap_seqs(first_seen))}
    ordered = sorted(rounds.values(), key=lambda r: order[r.seq])
    losses = []
    for rnd in ordered:
        for send, recv in _PAIRED.items():
            sent_at = getattr(rnd, send)
            if sent_at is not None and getattr(rnd, recv) is None:
                src, dst = (init, resp) if _SENDER_IS_INITIATOR[send] else (resp, init)
                losses.append(LossEvent(src, dst, rnd.seq, _KIND_OF[send], sent_at))
    return ordered, losses


def _diff(later: Optional[int], earlier: Optional[int]) -> Optional[int]:
    if later is None or earlier is None:
        return None
    return later - earlier


def compute_rtt(rnd: TwpRound) -> tuple[Optional[int], Optional[int]]:
    """(rtt_ab, rtt_ba), each from a single node's clock."""
    return _diff(rnd.pingack_recv, rnd.ping_sent), _diff(rnd.ack_recv, rnd.pingack_sent)


def compute_oneway(rnd: TwpRound) -> tuple[Optional[int], Optional[int], Optional[int]]:
    """(fwd, rev, fwd_check); signed, meaningful only with synchronized clocks."""
    return (_diff(rnd.ping_recv, rnd.ping_sent),
            _diff(rnd.pingack_recv, rnd.pingack_sent),
            _diff(rnd.ack_recv, rnd.ack_sent))


def link_sample(rnd: TwpRound) -> LinkSample:
    ab, ba = compute_rtt(rnd)
    fwd, rev, chk = compute_oneway(rnd)
    return LinkSample(ab, ba, fwd, rev, chk, rnd.wall_time)


def relative_asymmetry(fwd: float, rev: float) -> float:
    """|fwd - rev| normalized by the smaller one-way delay."""
    if not (fwd > 0 and rev > 0):
        raise NonPositiveDelay(f"one-way delays must be positive, got {fwd} and {rev}")
    return abs(fwd - rev) / min(fwd, rev)


# -- descriptive statistics ----------------------------------------------------


@dataclass
class LinkStats:
    src: int
    dst: int
    count: int
    mean_ms: float
    sd_ms: float
    cv: float
    min_ms: float
    max_ms: float
    q25: float
    q50: float
    q75: float
    q90: float
    q95: float
    q99: float
    loss_fraction: float = math.nan
    messages_sent: int = 0
    messages_lost: int = 0
    owd_count: int = 0
    owd_mean_ms: float = math.nan
    owd_nonpositive: int = 0

    @property
    def link(self) -> tuple[int, int]:
        return self.src, self.dst


def _cv(mean: float, sd: float) -> float:
    if mean > 0:
        return sd / mean
    return 0.0 if sd == 0 else math.nan


def descriptive_stats(samples, link: tuple[int, int] = (-1, -1),
                      loss_fraction: float = math.nan) -> LinkStats:
    """Mean, sample sd (n-1), CV and type-7 quantiles of one link's samples."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptyInput("no samples")
    mean = float(x.mean())
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    qs = np.quantile(x, QUANTILES)  # numpy "linear" is the type-7 rule
    return LinkStats(link[0], link[1], int(x.size), mean, sd, _cv(mean, sd),
                     float(x.min()), float(x.max()), *map(float, qs),
                     loss_fraction=loss_fraction)


@dataclass
class AsymmetrySummary:
    count: int
    mean: float
    sd: float
    cv: float
    q25: float
    median: float
    q75: float
    q90: float
    q95: float
    q99: float
    trimmed_mean: float


def asymmetry_summary(values) -> AsymmetrySummary:
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise EmptyInput("no asymmetry values")
    mean = float(x.mean())
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    q = np.quantile(x, (0.25, 0.5, 0.75, 0.9, 0.95, 0.99))
    keep = x.size - int(math.floor(TRIM_FRACTION * x.size))
    return AsymmetrySummary(int(x.size), mean, sd, _cv(mean, sd), *map(float, q),
                            trimmed_mean=float(x[:keep].mean()))


# -- mesh-level assembly -------------------------------------------------------


@dataclass
class LinkSeries:
    """Everything observed on one directed link, in wall-clock order."""

    src: int
    dst: int
    rtt_wall: list = field(default_factory=list)
    rtt: list = field(default_factory=list)
    owd: list = field(default_factory=list)
    msg_wall: list = field(default_factory=list)
    msg_lost: list = field(default_factory=list)

    @property
    def sent(self) -> int:
        return len(self.msg_lost)

    @property
    def lost(self) -> int:
        return int(sum(self.msg_lost))

    @property
    def loss_fraction(self) -> float:
        return self.lost / self.sent if self.sent else math.nan


@dataclass
class PairResult:
    initiator: int
    responder: int
    rounds: list[TwpRound]
    losses: list[LossEvent]
    asymmetry: list[float]
    asymmetry_excluded: int


@dataclass
class MeshAnalysis:
    n: int
    pairs: dict[tuple[int, int], PairResult]
    links: dict[tuple[int, int], LinkSeries]

    def link_stats(self, min_count: int = 1, trim_q: Optional[float] = None) -> list[LinkStats]:
        out = []
        for key in sorted(self.links):
            ls = self.links[key]
            if len(ls.rtt) < min_count:
                continue
            rtt = np.asarray(ls.rtt, dtype=float)
            if trim_q is not None and rtt.size:
                rtt = rtt[rtt <= np.quantile(rtt, trim_q)]
            st = descriptive_stats(rtt, key, ls.loss_fraction)
            st.messages_sent, st.messages_lost = ls.sent, ls.lost
            owd = np.asarray(ls.owd, dtype=float)
            st.owd_count = int(owd.size)
            st.owd_mean_ms = float(owd.mean()) if owd.size else math.nan
            st.owd_nonpositive = int(np.sum(owd <= 0))
            out.append(st)
        return out

    def all_asymmetry(self) -> list[float]:
        vals = []
        for key in sorted(self.pairs):
            vals.extend(self.pairs[key].asymmetry)
        return vals

    def all_rtts(self) -> np.ndarray:
        parts = [np.asarray(self.links[k].rtt, dtype=float) for k in sorted(self.links)]
        return np.concatenate(parts) if parts else np.empty(0)


def analyze(logs: dict[int, Sequence[LogRecord]], n: int) -> MeshAnalysis:
    """Match every pair's logs and collect per-link series."""
    logs = {i: list(logs.get(i, ())) for i in range(n)}
    # pre-split each node's log by counterpart so per-pair joins stay linear
    by_pair: dict[tuple[int, int], list[LogRecord]] = defaultdict(list)
    for node, recs in logs.items():
        for r in recs:
            if r.owner != node or r.src >= n or r.dst >= n:
                continue
            other = r.dst if r.src == node else r.src
            by_pair[(node, other)].append(r)

    links = {(a, b): LinkSeries(a, b) for a in range(n) for b in range(n) if a != b}
    pairs = {}
    for a in range(n):
        for b in range(a + 1, n):
            rounds, losses = match_rounds(by_pair.get((a, b), []), by_pair.get((b, a), []),
                                          a, b, n)
            if not rounds:
                continue
            init = rounds[0].initiator
            resp = rounds[0].responder
            fwd_link, rev_link = links[(init, resp)], links[(resp, init)]
            asym, excluded = [], 0
            for rnd in rounds:
                ab, ba = compute_rtt(rnd)
                fwd, rev, chk = compute_oneway(rnd)
                if ab is not None:
                    fwd_link.rtt.append(ab)
                    fwd_link.rtt_wall.append(rnd.ping_sent)
                if ba is not None:
                    rev_link.rtt.append(ba)
                    rev_link.rtt_wall.append(rnd.pingack_sent)
                for v in (fwd, chk):
                    if v is not None:
                        fwd_link.owd.append(v)
                if rev is not None:
                    rev_link.owd.append(rev)
                for sent, recv, link in ((rnd.ping_sent, rnd.ping_recv, fwd_link),
                                         (rnd.ack_sent, rnd.ack_recv, fwd_link),
                                         (rnd.pingack_sent, rnd.pingack_recv, rev_link)):
                    if sent is not None:
                        link.msg_wall.append(sent)
                        link.msg_lost.append(recv is None)
                if fwd is not None and rev is not None:
                    if fwd > 0 and rev > 0:
                        asym.append(relative_asymmetry(fwd, rev))
                    else:
                        excluded += 1
            pairs[(init, resp)] = PairResult(init, resp, rounds, losses, asym, excluded)
    return MeshAnalysis(n, pairs, links)


# -- daily aggregation ---------------------------------------------------------


@dataclass
class DailyStats:
    day: int
    n_links: int
    mean_rtt: float
    mean_rtt_hw: float
    median_rtt: float
    median_rtt_hw: float
    mean_cv: float
    mean_cv_hw: float
    mean_loss: float
    mean_loss_hw: float


def _mean_hw(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(Z99 * v.std(ddof=1) / math.sqrt(v.size))


def daily_aggregate(links: dict[tuple[int, int], LinkSeries]) -> list[DailyStats]:
    """Per UTC day: means across links of per-link daily values, with 99% normal CIs."""
    per_day: dict[int, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for key in sorted(links):
        ls = links[key]
        rtt_by_day: dict[int, list] = defaultdict(list)
        for w, v in zip(ls.rtt_wall, ls.rtt):
            rtt_by_day[w // DAY_MS].append(v)
        for day, vals in rtt_by_day.items():
            x = np.asarray(vals, dtype=float)
            mean = float(x.mean())
            sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
            per_day[day]["mean"].append(mean)
            per_day[day]["median"].append(float(np.median(x)))
            per_day[day]["cv"].append(_cv(mean, sd))
        sent: dict[int, int] = defaultdict(int)
        lost: dict[int, int] = defaultdict(int)
        for w, is_lost in zip(ls.msg_wall, ls.msg_lost):
            sent[w // DAY_MS] += 1
            lost[w // DAY_MS] += int(is_lost)
        for day in sent:
            per_day[day]["loss"].append(lost[day] / sent[day])
    out = []
    for day in sorted(per_day):
        d = per_day[day]
        out.append(DailyStats(day, len(d["mean"]), *_mean_hw(d["mean"]), *_mean_hw(d["median"]),
                              *_mean_hw(d["cv"]), *_mean_hw(d["loss"])))
    return out


# -- CDF export ------------------------------------------------------------------


def cdf_export(values) -> list[tuple[float, float]]:
    """Empirical CDF rows, ascending; tied values share the higher fraction."""
    x = np.sort(np.asarray([v for v in values if not math.isnan(v)], dtype=float))
    n = x.size
    if n == 0:
        raise EmptyInput("no values for CDF")
    upper = np.searchsorted(x, x, side="right")
    return [(float(v), float(k) / n) for v, k in zip(x, upper)]


def link_metric(mesh: MeshAnalysis, stats: list[LinkStats], metric: str) -> list[float]:
    if metric not in CDF_METRICS:
        raise AnalysisError(f"unknown metric {metric!r}; choose from {', '.join(CDF_METRICS)}")
    if metric == "asymmetry":
        return [float(np.median(p.asymmetry)) for _, p in sorted(mesh.pairs.items())
                if p.asymmetry]
    attr = {"mean": "mean_ms", "q99": "q99", "cv": "cv", "loss": "loss_fraction",
            "min": "min_ms", "max": "max_ms"}[metric]
    return [getattr(s, attr) for s in stats]


# -- files -----------------------------------------------------------------------


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return format(float(v), ".10g")


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


LINK_STATS_HEADER = ["src", "dst", "count", "mean_ms", "sd_ms", "cv", "min_ms", "max_ms",
                     "q25", "q50", "q75", "q90", "q95", "q99", "loss_fraction",
                     "messages_sent", "messages_lost", "owd_count", "owd_mean_ms",
                     "owd_nonpositive"]


def write_link_stats(path, stats: Iterable[LinkStats]) -> None:
    write_csv(path, LINK_STATS_HEADER,
              ([getattr(s, h) for h in LINK_STATS_HEADER] for s in stats))


def read_link_stats(path) -> list[LinkStats]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LINK_STATS_HEADER[:15]) - set(reader.fieldnames or ())
        if missing:
            raise AnalysisError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                kw = {}
                for h in LINK_STATS_HEADER:
                    if h not in row:
                        continue
                    v = row[h]
                    kw[h] = int(v) if h in ("src", "dst", "count", "messages_sent",
                                            "messages_lost", "owd_count",
                                            "owd_nonpositive") else float(v)
                out.append(LinkStats(**kw))
            except (TypeError, ValueError) as exc:
                raise AnalysisError(f"{path}:{lineno}: {exc}") from None
    return out


def load_node_log(paths: Sequence[Path]) -> list[LogRecord]:
    recs = []
    for p in paths:
        data = Path(p).read_bytes()
        try:
            recs.extend(iter_log(data))
        except CorruptLog as exc:
            raise CorruptLog(exc.offset, f"{p}: {exc.reason}") from None
    return recs


def find_logs(log_dir) -> dict[int, list[Path]]:
    """Locate ``<id>/<segment>.twplog`` (upload layout) or ``<id>.twplog`` files."""
    root = Path(log_dir)
    if not root.is_dir():
        raise AnalysisError(f"{root} is not a directory")
    found: dict[int, list[Path]] = {}
    for child in root.iterdir():
        if child.is_dir() and child.name.isdigit():
            segs = [p for p in child.glob("*.twplog") if p.stem.isdigit()]
            found[int(child.name)] = sorted(segs, key=lambda p: int(p.stem))
        elif child.suffix == ".twplog" and re.fullmatch(r"\d+", child.stem):
            found.setdefault(int(child.stem), []).append(child)
    return found


def load_logs(log_dir) -> dict[int, list[LogRecord]]:
    return {node: load_node_log(paths) for node, paths in sorted(find_logs(log_dir).items())}


def read_roster(path) -> Roster:
    text = Path(path).read_text().strip()
    line = next((ln for ln in text.splitlines() if ln.startswith("ROSTER")), None)
    if line is None:
        raise AnalysisError(f"{path}: no ROSTER line")
    try:
        return Roster.decode(line)
    except (CoordinatorError, ValueError) as exc:
        raise AnalysisError(f"{path}: {exc}") from None


def write_outputs(mesh: MeshAnalysis, out_dir, trim_q: Optional[float] = None) -> list[LinkStats]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = mesh.link_stats(trim_q=trim_q)
    write_link_stats(out / "link_stats.csv", stats)
    write_csv(out / "daily.csv", list(DailyStats.__dataclass_fields__),
              (list(asdict(d).values()) for d in daily_aggregate(mesh.links)))
    for metric in CDF_METRICS:
        vals = link_metric(mesh, stats, metric)
        rows = cdf_export(vals) if any(not math.isnan(v) for v in vals) else []
        write_csv(out / f"cdf_{metric}.csv", ["value", "cumulative_fraction"], rows)
    asym_header = ["initiator", "responder"] + list(AsymmetrySummary.__dataclass_fields__) + [
        "excluded_nonpositive"]
    rows = []
    for (a, b), pr in sorted(mesh.pairs.items()):
        if pr.asymmetry:
            rows.append([a, b, *asdict(asymmetry_summary(pr.asymmetry)).values(),
                         pr.asymmetry_excluded])
    everything = mesh.all_asymmetry()
    if everything:
        excluded = sum(p.asymmetry_excluded for p in mesh.pairs.values())
        rows.append(["all", "all", *asdict(asymmetry_summary(everything)).values(), excluded])
    with open(out / "asymmetry.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(asym_header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return stats
