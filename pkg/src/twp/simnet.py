"""Deterministic discrete-event simulation of a TWP mesh.

Every directed link has its own delay law and loss probability; every
node has its own clock offset and drift. The peers are the real
:class:`twp.peer.Peer` state machines, so the logs produced here are the
logs real peers would write.
"""

from __future__ import annotations

import configparser
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import distfit
from .coordinator import Roster
from .peer import (DEFAULT_PENDING_EXPIRY_MS, DEFAULT_PROBE_INTERVAL_MS, MAX_ROSTER,
                   Peer, PeerConfig, Segment)
from .wire import TwpMessage

MIN_DELAY_MS = 1.0
_BUFFER = 512


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimClock:
    offset_ms: float = 0.0
    drift_ppm: float = 0.0


def local_time(clock: SimClock, true_ms: float) -> int:
    """Node-local millisecond timestamp for a true instant, clamped at 0."""
    t = true_ms + clock.offset_ms + clock.drift_ppm * 1e-6 * true_ms
    return max(0, math.floor(t + 0.5))


@dataclass(frozen=True)
class Constant:
    """Fixed one-way delay; handy for exact-identity control links."""

    delay_ms: float

    def mean(self) -> float:
        return self.delay_ms


Delay = Union[distfit.DistParams, Constant]


@dataclass(frozen=True)
class LinkModel:
    delay: Delay
    loss_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigError(f"loss probability {self.loss_prob} outside [0, 1]")
        if isinstance(self.delay, Constant) and self.delay.delay_ms < MIN_DELAY_MS:
            raise ConfigError(f"constant delay must be >= {MIN_DELAY_MS} ms")


def _draw_delay(delay: Delay, rng: np.random.Generator) -> float:
    if isinstance(delay, Constant):
        return float(delay.delay_ms)
    while True:
        d = float(distfit.sample(delay, rng, 1)[0])
        if d >= MIN_DELAY_MS:
            return d


def transmit(link: LinkModel, send_true_ms: float, rng: np.random.Generator) -> Optional[float]:
    """Arrival instant of one message, or None if the link drops it."""
    if link.loss_prob > 0 and rng.random() < link.loss_prob:
        return None
    return send_true_ms + _draw_delay(link.delay, rng)


class _Channel:
    """Per-link draw stream; buffered so a run costs one RNG call per batch."""

    def __init__(self, link: LinkModel, rng: np.random.Generator):
        self.link = link
        self.rng = rng
        self._u = np.empty(0)
        self._d = np.empty(0)
        self._ui = self._di = 0

    def _uniform(self) -> float:
        if self._ui >= self._u.size:
            self._u = self.rng.random(_BUFFER)
            self._ui = 0
        self._ui += 1
        return self._u[self._ui - 1]

    def _delay(self) -> float:
        delay = self.link.delay
        if isinstance(delay, Constant):
            return float(delay.delay_ms)
        while True:
            if self._di >= self._d.size:
                self._d = distfit.sample(delay, self.rng, _BUFFER)
                self._di = 0
            d = float(self._d[self._di])
            self._di += 1
            if d >= MIN_DELAY_MS:
                return d

    def transmit(self, send_true_ms: float) -> Optional[float]:
        if self.link.loss_prob > 0 and self._uniform() < self.link.loss_prob:
            return None
        return send_true_ms + self._delay()


@dataclass
class SimConfig:
    n_nodes: int
    links: dict[tuple[int, int], LinkModel] = field(default_factory=dict)
    default_link: Optional[LinkModel] = None
    clocks: dict[int, SimClock] = field(default_factory=dict)
    probe_interval_ms: int = DEFAULT_PROBE_INTERVAL_MS
    ticks: int = 100
    seed: int = 0
    start_epoch_ms: int = 0
    pending_expiry_ms: int = DEFAULT_PENDING_EXPIRY_MS
    rotation_interval_s: float = math.inf
    initial_seq: int = 0

    def link(self, src: int, dst: int) -> LinkModel:
        model = self.links.get((src, dst), self.default_link)
        if model is None:
            raise ConfigError(f"no link model for {src}->{dst} and no default")
        return model

    def clock(self, node: int) -> SimClock:
        return self.clocks.get(node, SimClock())

    def validate(self) -> None:
        if not 2 <= self.n_nodes <= MAX_ROSTER:
            raise ConfigError(f"n_nodes must be in [2, {MAX_ROSTER}]")
        if self.probe_interval_ms <= 0:
            raise ConfigError("probe interval must be positive")
        if self.ticks < 0:
            raise ConfigError("ticks must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for (a, b) in self.links:
            if a == b or not (0 <= a < self.n_nodes and 0 <= b < self.n_nodes):
                raise ConfigError(f"link {a}->{b} is not a directed link of the mesh")
        for node, clk in self.clocks.items():
            if not 0 <= node < self.n_nodes:
                raise ConfigError(f"clock for unknown node {node}")
            if abs(clk.drift_ppm) >= 1e6:
                raise ConfigError("|drift_ppm| must be < 1e6")
        for a in range(self.n_nodes):
            for b in range(self.n_nodes):
                if a != b:
                    self.link(a, b)

    def roster(self) -> Roster:
        return Roster(self.probe_interval_ms,
                      tuple(f"sim{i:03d}:0" for i in range(self.n_nodes)))


@dataclass
class SimResult:
    config: SimConfig
    segments: dict[int, list[Segment]]
    peers: dict[int, Peer]

    def log_bytes(self, node: int) -> bytes:
        return b"".join(s.to_bytes() for s in self.segments[node])

    @property
    def logs(self) -> dict[int, bytes]:
        return {n: self.log_bytes(n) for n in self.segments}

    def write(self, out_dir) -> None:
        """Write the coordinator's upload layout: <node>/<segment>.twplog plus roster.txt."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "roster.txt").write_text(self.config.roster().encode() + "\n")
        for node, segs in self.segments.items():
            d = out / str(node)
            d.mkdir(exist_ok=True)
            for seg in segs:
                (d / f"{seg.index}.twplog").write_bytes(seg.to_bytes())


_TICK, _DELIVER = 0, 1


def run_scenario(config: SimConfig) -> SimResult:
    config.validate()
    n = config.n_nodes
    seeds = np.random.SeedSequence(config.seed)
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    channels = {
        key: _Channel(config.link(*key), np.random.Generator(np.random.PCG64(child)))
        for key, child in zip(pairs, seeds.spawn(len(pairs)))
    }
    clocks = [config.clock(i) for i in range(n)]

    def now(node: int, true_ms: float) -> int:
        return config.start_epoch_ms + local_time(clocks[node], true_ms)

    peers = {
        i: Peer(PeerConfig(i, n, config.probe_interval_ms, config.pending_expiry_ms,
                           config.rotation_interval_s, config.initial_seq),
                now_ms=now(i, 0.0))
        for i in range(n)
    }
    segments: dict[int, list[Segment]] = {i: [] for i in range(n)}

    queue: list = []
    order = 0

    def push(t, kind, payload):
        nonlocal order
        heapq.heappush(queue, (t, order, kind, payload))
        order += 1

    for k in range(config.ticks):
        push(float(k * config.probe_interval_ms), _TICK, k)

    def dispatch(src: int, t: float, actions) -> None:
        for act in actions:
            arrival = channels[(src, act.dst)].transmit(t)
            if arrival is not None:
                push(arrival, _DELIVER, (src, act.dst, act.msg))

    while queue:
        t, _, kind, payload = heapq.heappop(queue)
        if kind == _TICK:
            for i in range(n):
                local = now(i, t)
                seg = peers[i].maybe_rotate(local)
                if seg is not None:
                    segments[i].append(seg)
                dispatch(i, t, peers[i].on_tick(local, tick=payload))
        else:
            src, dst, msg = payload
            msg: TwpMessage
            dispatch(dst, t, peers[dst].on_message(msg, src, now(dst, t)))

    end = float(config.ticks * config.probe_interval_ms)
    for i in range(n):
        segments[i].append(peers[i].rotate_log(now(i, end)))
        peers[i].log.upload_queue.clear()
    return SimResult(config, segments, peers)


# -- config files ------------------------------------------------------------


def parse_delay(text: str) -> Delay:
    """Parse ``"<family> key=value ..."``, e.g. ``gamma shape=4.63 scale=43.2``.

    ``constant <ms>`` gives a fixed delay. Keys: shape, scale, loc (alias
    mean/mu), threshold; Normal also accepts ``sd``.
    """
    parts = text.split()
    if not parts:
        raise ConfigError("empty delay specification")
    name = parts[0].lower()
    if name == "constant":
        if len(parts) != 2:
            raise ConfigError(f"constant delay takes one value: {text!r}")
        return Constant(float(parts[1]))
    try:
        family = distfit.Family.parse(name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    kw = {}
    for item in parts[1:]:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        key = {"mean": "loc", "mu": "loc", "sd": "scale", "location": "loc"}.get(key, key)
        if key not in ("shape", "scale", "loc", "threshold"):
            raise ConfigError(f"unknown delay parameter {key!r}")
        kw[key] = float(value)
    if "scale" not in kw:
        raise ConfigError(f"delay {text!r} needs scale")
    try:
        return distfit.DistParams(family, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _link_from(section, fallback: Optional[LinkModel]) -> LinkModel:
    delay = parse_delay(section["delay"]) if "delay" in section else (
        fallback.delay if fallback else None)
    if delay is None:
        raise ConfigError(f"[{section.name}] needs a delay")
    loss = float(section.get("loss", fallback.loss_prob if fallback else 0.0))
    return LinkModel(delay, loss)


def load_config(path) -> SimConfig:
    """Read an INI-style scenario file (see docs/formats.md)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if "sim" not in cp:
        raise ConfigError(f"{path}: missing [sim] section")
    sim = cp["sim"]
    try:
        n = sim.getint("nodes")
        if n is None:
            raise ConfigError("[sim] needs nodes")
        interval = sim.getint("interval_ms", DEFAULT_PROBE_INTERVAL_MS)
        if "ticks" in sim:
            ticks = sim.getint("ticks")
        elif "duration_s" in sim:
            ticks = int(sim.getfloat("duration_s") * 1000 // interval)
        else:
            raise ConfigError("[sim] needs ticks or duration_s")
        cfg = SimConfig(
            n_nodes=n,
            probe_interval_ms=interval,
            ticks=ticks,
            seed=sim.getint("seed", 0),
            start_epoch_ms=sim.getint("start_epoch_ms", 0),
            pending_expiry_ms=sim.getint("pending_expiry_ms", DEFAULT_PENDING_EXPIRY_MS),
            rotation_interval_s=sim.getfloat("rotate_s", math.inf),
        )
        if "defaults" in cp:
            cfg.default_link = _link_from(cp["defaults"], None)
        for name in cp.sections():
            kind, _, rest = name.partition(" ")
            if kind == "link":
                a, sep, b = rest.partition("-")
                if not sep:
                    raise ConfigError(f"[{name}]: expected [link A-B]")
                model = _link_from(cp[name], cfg.default_link)
                cfg.links[(int(a), int(b))] = model
                if cp[name].getboolean("both", False):
                    cfg.links[(int(b), int(a))] = model
            elif kind == "clock":
                cfg.clocks[int(rest)] = SimClock(cp[name].getfloat("offset_ms", 0.0),
                                                 cp[name].getfloat("drift_ppm", 0.0))
            elif name not in ("sim", "defaults"):
                raise ConfigError(f"unknown section [{name}]")
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: missing or invalid key {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    cfg.validate()
    return cfg
