import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twp import distfit
from twp.analysis import analyze, load_logs
from twp.simnet import (
    ConfigError,
    Constant,
    LinkModel,
    SimClock,
    SimConfig,
    load_config,
    local_time,
    parse_delay,
    run_scenario,
    transmit,
)
from twp.wire import decode_log


def test_local_time_examples():
    assert local_time(SimClock(), 123) == 123
    assert local_time(SimClock(5, 100), 10_000) == 10_006
    assert local_time(SimClock(-3, 0), 2) == 0


@given(st.floats(-1e4, 1e4), st.floats(-1e5, 1e5), st.floats(0, 1e9), st.floats(1, 1e6))
def test_local_time_is_monotone(offset, drift, t, dt):
    clk = SimClock(offset, drift)
    assert local_time(clk, t + dt) >= local_time(clk, t)


def test_transmit_loss_extremes():
    rng = np.random.default_rng(0)
    assert all(transmit(LinkModel(Constant(5), 1.0), 0, rng) is None for _ in range(100))
    assert transmit(LinkModel(Constant(50), 0.0), 10, rng) == 60


def test_transmit_loss_fraction_within_binomial_ci():
    rng = np.random.default_rng(11)
    link = LinkModel(Constant(5), 0.5)
    n = 100_000
    lost = sum(transmit(link, 0, rng) is None for _ in range(n))
    sigma = math.sqrt(n * 0.25)
    assert abs(lost - n / 2) <= 3 * sigma


def test_sampled_delays_at_least_one_ms():
    rng = np.random.default_rng(3)
    # mass mostly below 1 ms, so resampling does real work
    link = LinkModel(distfit.DistParams.gamma(0.5, 1.0))
    got = [transmit(link, 0, rng) for _ in range(2000)]
    assert min(got) >= 1.0


def test_link_model_validation():
    with pytest.raises(ConfigError):
        LinkModel(Constant(5), 1.5)
    with pytest.raises(ConfigError):
        LinkModel(Constant(0.5))


def _constant_pair(ticks=10):
    link = LinkModel(Constant(25))
    return SimConfig(2, default_link=link, probe_interval_ms=1000, ticks=ticks, seed=1)


def test_constant_two_node_run():
    res = run_scenario(_constant_pair())
    logs = {n: decode_log(b) for n, b in res.logs.items()}
    assert sum(len(v) for v in logs.values()) == 6 * 10
    mesh = analyze(logs, 2)
    assert mesh.links[(0, 1)].rtt == [50] * 10
    assert mesh.links[(1, 0)].rtt == [50] * 10
    for pr in mesh.pairs.values():
        assert pr.asymmetry == [0.0] * 10


def _gamma_mesh(seed, ticks=200, loss=0.005):
    link = LinkModel(distfit.DistParams.gamma(4.63062, 43.16537), loss)
    return SimConfig(5, default_link=link, probe_interval_ms=10_000, ticks=ticks, seed=seed)


def test_same_seed_same_bytes():
    a = run_scenario(_gamma_mesh(42)).logs
    b = run_scenario(_gamma_mesh(42)).logs
    c = run_scenario(_gamma_mesh(43)).logs
    assert a == b
    assert a != c


def test_write_layout(tmp_path):
    res = run_scenario(_gamma_mesh(1, ticks=20))
    res.write(tmp_path)
    assert (tmp_path / "roster.txt").read_text().startswith("ROSTER 10000 0=sim000:0")
    logs = load_logs(tmp_path)
    assert sorted(logs) == list(range(5))
    assert {n: decode_log(b) for n, b in res.logs.items()} == logs


def test_rotation_in_simulation_is_lossless():
    cfg = _gamma_mesh(5, ticks=100)
    whole = run_scenario(cfg).logs
    cfg.rotation_interval_s = 60.0
    res = run_scenario(cfg)
    assert all(len(segs) > 5 for segs in res.segments.values())
    assert res.logs == whole


def test_clock_offset_shifts_one_way_delays():
    cfg = SimConfig(2, default_link=LinkModel(Constant(20)), probe_interval_ms=1000, ticks=5,
                    clocks={1: SimClock(offset_ms=7)})
    mesh = analyze({n: decode_log(b) for n, b in run_scenario(cfg).logs.items()}, 2)
    s = mesh.links[(0, 1)]
    # PING and ACK on 0->1 look 7 ms slower; RTTs are offset-free
    assert s.owd == [27] * 10
    assert mesh.links[(1, 0)].owd == [13] * 5
    assert s.rtt == [40] * 5


def test_validation_errors():
    with pytest.raises(ConfigError):
        run_scenario(SimConfig(1, default_link=LinkModel(Constant(5))))
    with pytest.raises(ConfigError):
        run_scenario(SimConfig(3))
    with pytest.raises(ConfigError):
        run_scenario(SimConfig(3, default_link=LinkModel(Constant(5)),
                               links={(0, 0): LinkModel(Constant(5))}))


def test_parse_delay():
    p = parse_delay("gamma shape=4.63062 scale=43.16537")
    assert p == distfit.DistParams.gamma(4.63062, 43.16537)
    assert parse_delay("constant 25") == Constant(25.0)
    assert parse_delay("lognormal3 loc=5.34111 scale=0.4128 threshold=-27.12915").family \
        is distfit.Family.LOGNORMAL3
    for bad in ("", "gamma", "warp scale=1", "gamma shape=1 scale=2 colour=3", "constant"):
        with pytest.raises(ConfigError):
            parse_delay(bad)


def test_load_config(tmp_path):
    cfg_file = tmp_path / "s.cfg"
    cfg_file.write_text(
        "[sim]\nnodes = 3\ninterval_ms = 500\nduration_s = 10\nseed = 9\n\n"
        "[defaults]\ndelay = gamma shape=2 scale=10\nloss = 0.01\n\n"
        "[link 0-1]\ndelay = constant 12\nloss = 0\nboth = yes\n\n"
        "[clock 2]\noffset_ms = 4\ndrift_ppm = 50\n")
    cfg = load_config(cfg_file)
    assert (cfg.n_nodes, cfg.probe_interval_ms, cfg.ticks, cfg.seed) == (3, 500, 20, 9)
    assert cfg.link(0, 1) == LinkModel(Constant(12), 0.0)
    assert cfg.link(1, 0) == LinkModel(Constant(12), 0.0)
    assert cfg.link(1, 2).loss_prob == 0.01
    assert cfg.clock(2) == SimClock(4, 50)


@pytest.mark.parametrize("text", [
    "[defaults]\ndelay = constant 5\n",
    "[sim]\ninterval_ms = 5\nticks = 3\n",
    "[sim]\nnodes = 2\n",
    "[sim]\nnodes = 2\nticks = 3\n[link 0-9]\ndelay = constant 3\n",
    "not an ini file",
])
def test_bad_configs(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        cfg = load_config(p)
        cfg.validate()
