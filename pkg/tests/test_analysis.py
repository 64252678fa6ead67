import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twp import distfit
from twp.analysis import (
    CDF_METRICS,
    DAY_MS,
    EmptyInput,
    LinkSeries,
    NonPositiveDelay,
    TwpRound,
    analyze,
    asymmetry_summary,
    cdf_export,
    compute_oneway,
    compute_rtt,
    daily_aggregate,
    descriptive_stats,
    load_logs,
    match_rounds,
    read_link_stats,
    relative_asymmetry,
    unwrap_seqs,
    write_link_stats,
    write_outputs,
)
from twp.simnet import Constant, LinkModel, SimConfig, run_scenario
from twp.wire import CorruptLog, LogRecord, MessageType, decode_log, encode_log

PING, PACK, ACK = MessageType.PING, MessageType.PING_ACK, MessageType.ACK


def _round_records(seq, t0, fwd, rev, a=0, b=1, drop=()):
    """Event records of one round between initiator a and responder b."""
    la, lb = [], []
    la.append(LogRecord(t0, seq, PING, False, a, b))
    if "ping" not in drop:
        lb.append(LogRecord(t0 + fwd, seq, PING, True, a, b))
        lb.append(LogRecord(t0 + fwd, seq, PACK, False, b, a))
        if "pingack" not in drop:
            la.append(LogRecord(t0 + fwd + rev, seq, PACK, True, b, a))
            la.append(LogRecord(t0 + fwd + rev, seq, ACK, False, a, b))
            if "ack" not in drop:
                lb.append(LogRecord(t0 + 2 * fwd + rev, seq, ACK, True, a, b))
    return la, lb


def test_worked_example():
    rnd = TwpRound(0, 1, 7, ping_sent=100, ping_recv=160, pingack_sent=160, pingack_recv=250)
    assert compute_rtt(rnd) == (150, None)
    fwd, rev, chk = compute_oneway(rnd)
    assert (fwd, rev, chk) == (60, 90, None)
    assert relative_asymmetry(60, 90) == 0.5


def test_relative_asymmetry_examples():
    assert relative_asymmetry(75, 75) == 0
    assert relative_asymmetry(100, 250) == 1.5
    for bad in ((0, 5), (5, -1)):
        with pytest.raises(NonPositiveDelay):
            relative_asymmetry(*bad)


@given(st.floats(1e-3, 1e6), st.floats(1e-3, 1e6))
def test_relative_asymmetry_symmetric_nonnegative(a, b):
    v = relative_asymmetry(a, b)
    assert v == relative_asymmetry(b, a)
    assert v >= 0
    assert (v == 0) == (a == b)


def test_complete_round_has_six_timestamps():
    la, lb = _round_records(3, 1000, 20, 30)
    rounds, losses = match_rounds(la, lb, 0, 1, 2)
    assert len(rounds) == 1 and rounds[0].complete and losses == []
    assert compute_rtt(rounds[0]) == (50, 50)
    fwd, rev, chk = compute_oneway(rounds[0])
    assert fwd + rev == compute_rtt(rounds[0])[0]
    assert chk == 20


def test_missing_ping_receive_is_one_loss():
    la, lb = [], []
    for s in range(1, 11):
        a, b = _round_records(s, 1000 * s, 10, 10, drop=("ping",) if s == 10 else ())
        la += a
        lb += b
    rounds, losses = match_rounds(la, lb, 0, 1, 2)
    assert len(rounds) == 10
    assert [(l.seq, l.kind, l.src, l.dst) for l in losses] == [(10, PING, 0, 1)]


def test_lost_ack_keeps_rtt_ab_only():
    la, lb = _round_records(0, 0, 25, 25, drop=("ack",))
    (rnd,), losses = match_rounds(la, lb, 0, 1, 2)
    assert compute_rtt(rnd) == (50, None)
    assert [l.kind for l in losses] == [ACK]


def test_match_is_argument_order_independent():
    # n=3: pair (0, 2) is initiated by 2
    la, lb = _round_records(5, 0, 11, 13, a=2, b=0)
    r1, _ = match_rounds(lb, la, 0, 2, 3)
    r2, _ = match_rounds(la, lb, 2, 0, 3)
    assert r1 == r2
    assert r1[0].initiator == 2


def test_rounds_across_seq_wrap_stay_ordered():
    la, lb = [], []
    seqs = [2 ** 32 - 2, 2 ** 32 - 1, 0, 1]
    for i, s in enumerate(seqs):
        a, b = _round_records(s, 1000 * i, 5, 5)
        la += a
        lb += b
    rounds, _ = match_rounds(la, lb, 0, 1, 2)
    assert [r.seq for r in rounds] == seqs
    assert unwrap_seqs(seqs) == [2 ** 32 - 2, 2 ** 32 - 1, 2 ** 32, 2 ** 32 + 1]


def test_descriptive_stats_examples():
    s = descriptive_stats([2, 4, 6])
    assert (s.mean_ms, s.sd_ms, s.cv, s.q50) == (4, 2, 0.5, 4)
    s = descriptive_stats([1, 1, 1, 1])
    assert s.cv == 0
    assert {s.q25, s.q50, s.q75, s.q90, s.q95, s.q99} == {1}
    assert descriptive_stats([1, 2, 3, 4]).q75 == 3.25
    with pytest.raises(EmptyInput):
        descriptive_stats([])


def _type7(x, p):
    """Hand-rolled h = (n-1)p + 1 interpolation."""
    x = sorted(x)
    h = (len(x) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(x) - 1)
    return x[lo] + (h - lo) * (x[hi] - x[lo])


@given(st.lists(st.floats(0.1, 1e5), min_size=1, max_size=200))
def test_quantiles_match_reference_and_are_monotone(xs):
    s = descriptive_stats(xs)
    qs = [s.q25, s.q50, s.q75, s.q90, s.q95, s.q99]
    for got, p in zip(qs, (0.25, 0.5, 0.75, 0.9, 0.95, 0.99)):
        assert got == pytest.approx(_type7(xs, p), rel=1e-12, abs=1e-9)
    assert s.min_ms <= qs[0] and qs[-1] <= s.max_ms
    assert all(a <= b + 1e-9 for a, b in zip(qs, qs[1:]))


def test_asymmetry_summary_examples():
    flat = asymmetry_summary([0.0] * 20)
    assert flat.count == 20
    assert flat.mean == flat.sd == flat.q99 == flat.trimmed_mean == 0
    mix = asymmetry_summary([0.1] * 90 + [1.0] * 10)
    assert mix.trimmed_mean < mix.mean
    with pytest.raises(EmptyInput):
        asymmetry_summary([])


def test_asymmetry_of_directional_gamma_link():
    # fwd mean 60, rev mean 90: with Gamma(100, .) on both sides the median
    # of |f-r|/min(f,r) lands close to 0.5
    links = {(0, 1): LinkModel(distfit.DistParams.gamma(100, 0.6)),
             (1, 0): LinkModel(distfit.DistParams.gamma(100, 0.9))}
    cfg = SimConfig(2, links=links, probe_interval_ms=1000, ticks=2000, seed=4)
    mesh = analyze({n: decode_log(b) for n, b in run_scenario(cfg).logs.items()}, 2)
    med = asymmetry_summary(mesh.pairs[(0, 1)].asymmetry).median
    assert med == pytest.approx(0.5, abs=0.05)


def test_nonpositive_oneway_excluded_and_counted():
    la, lb = _round_records(0, 100, 10, 10)
    # responder clock 30 ms behind: PING appears to arrive before it was sent
    lb = [LogRecord(r.timestamp_ms - 30, r.seq, r.kind, r.received, r.src, r.dst) for r in lb]
    mesh = analyze({0: la, 1: lb}, 2)
    pr = mesh.pairs[(0, 1)]
    assert pr.asymmetry == [] and pr.asymmetry_excluded == 1
    stats = {s.link: s for s in mesh.link_stats()}
    assert stats[(0, 1)].owd_nonpositive == 2


def test_daily_examples():
    one = LinkSeries(0, 1, rtt_wall=[0, 1000, 2000], rtt=[50, 50, 50])
    (d,) = daily_aggregate({(0, 1): one})
    assert (d.mean_rtt, d.mean_rtt_hw) == (50, 0)
    two = {(0, 1): LinkSeries(0, 1, rtt_wall=[10], rtt=[40]),
           (1, 0): LinkSeries(1, 0, rtt_wall=[20], rtt=[60])}
    (d,) = daily_aggregate(two)
    assert d.mean_rtt == 50 and d.n_links == 2


def test_daily_ci_covers_grand_mean():
    # 81 links with known means, 60 resampled days; the 99% CI of the
    # across-link mean should cover the true grand mean almost always
    rng = np.random.default_rng(8)
    true_means = rng.uniform(40, 360, 81)
    links = {}
    for i, m in enumerate(true_means):
        wall, rtt = [], []
        for day in range(60):
            wall += [day * DAY_MS + k * 1000 for k in range(40)]
            rtt += list(rng.gamma(25, m / 25, 40))
        links[(i, i + 1)] = LinkSeries(i, i + 1, rtt_wall=wall, rtt=rtt)
    days = daily_aggregate(links)
    grand = true_means.mean()
    covered = sum(abs(d.mean_rtt - grand) <= d.mean_rtt_hw for d in days)
    assert covered >= 0.99 * len(days) - 1


def test_cdf_export_examples():
    assert cdf_export([4, 1, 3, 2]) == [(1, .25), (2, .5), (3, .75), (4, 1.0)]
    assert cdf_export([1, 2, 2, 3]) == [(1, .25), (2, .75), (2, .75), (3, 1.0)]
    with pytest.raises(EmptyInput):
        cdf_export([])


def test_loss_estimate_within_binomial_ci():
    cfg = SimConfig(2, default_link=LinkModel(Constant(10), 0.01), probe_interval_ms=100,
                    ticks=100_000, seed=21)
    mesh = analyze({n: decode_log(b) for n, b in run_scenario(cfg).logs.items()}, 2)
    for link in mesh.links.values():
        n = link.sent
        # a message is only sent if its predecessor arrived; the rate per sent message is still p
        sigma = math.sqrt(n * 0.01 * 0.99)
        assert abs(link.lost - 0.01 * n) <= 3 * sigma


def test_loss_cdf_matches_configured_loss(tmp_path):
    links = {}
    for a in range(3):
        for b in range(3):
            if a != b:
                links[(a, b)] = LinkModel(Constant(5), 0.02 * (a + 1))
    cfg = SimConfig(3, links=links, probe_interval_ms=100, ticks=30_000, seed=2)
    mesh = analyze({n: decode_log(b) for n, b in run_scenario(cfg).logs.items()}, 3)
    for s in mesh.link_stats():
        p = 0.02 * (s.src + 1)
        sigma = math.sqrt(p * (1 - p) / s.messages_sent)
        assert abs(s.loss_fraction - p) <= 3 * sigma


def test_write_outputs_headers_and_reproducible(tmp_path):
    cfg = SimConfig(3, default_link=LinkModel(distfit.DistParams.gamma(4.63062, 43.16537), 0.01),
                    probe_interval_ms=10_000, ticks=300, seed=3)
    mesh = analyze({n: decode_log(b) for n, b in run_scenario(cfg).logs.items()}, 3)
    write_outputs(mesh, tmp_path / "a")
    write_outputs(mesh, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(["link_stats.csv", "daily.csv", "asymmetry.csv"]
                           + [f"cdf_{m}.csv" for m in CDF_METRICS])
    for name in names:
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert a.split(b"\n", 1)[0]
    with open(tmp_path / "a" / "asymmetry.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["initiator"] == "all"
    stats = read_link_stats(tmp_path / "a" / "link_stats.csv")
    assert len(stats) == 6


def test_link_stats_csv_roundtrip(tmp_path):
    stats = [descriptive_stats([1.5, 2.5, 9.0], (0, 1), 0.25)]
    write_link_stats(tmp_path / "s.csv", stats)
    back = read_link_stats(tmp_path / "s.csv")
    assert back[0].mean_ms == pytest.approx(stats[0].mean_ms, rel=1e-9)
    assert back[0].link == (0, 1) and back[0].loss_fraction == 0.25


def test_truncated_segment_names_file_and_offset(tmp_path):
    d = tmp_path / "0"
    d.mkdir()
    recs = [LogRecord(1, 0, PING, False, 0, 1)]
    (d / "0.twplog").write_bytes(encode_log(recs) + bytes(14))
    with pytest.raises(CorruptLog) as info:
        load_logs(tmp_path)
    assert info.value.offset == 15
    assert "0.twplog" in str(info.value)
