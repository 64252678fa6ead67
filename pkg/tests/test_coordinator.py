import asyncio
import random

import pytest

from twp.coordinator import (
    Coordinator,
    NotClosed,
    ProtocolError,
    RegistrationClosed,
    Roster,
    State,
    UnknownNode,
    UploadSlots,
    parse_addr,
)
from twp.analysis import analyze, load_logs


def _started(addrs, **kw):
    c = Coordinator(**kw)
    for a in addrs:
        c.register(a)
    c.start(1000)
    return c


def test_ids_follow_sorted_addresses():
    for order in (["b", "a", "c"], ["c", "b", "a"], ["a", "c", "b"]):
        c = _started(order)
        r = c.build_roster()
        assert r.addresses == ("a", "b", "c")
        assert [r.id_of(x) for x in "abc"] == [0, 1, 2]


def test_register_is_idempotent():
    c = Coordinator()
    assert c.register("10.0.0.2:9") == c.register("10.0.0.2:9")
    assert c.registered == 1


def test_register_after_start():
    c = _started(["a:1", "b:1"])
    with pytest.raises(RegistrationClosed):
        c.register("z:1")
    # a known address rejoining gets its original id back
    assert c.register("b:1") == 1


def test_roster_needs_closed_registration():
    with pytest.raises(NotClosed):
        Coordinator().build_roster()
    c = Coordinator()
    c.register("a:1")
    with pytest.raises(NotClosed):
        c.start()


def test_roster_encoding_roundtrip():
    r = Roster(10000, ("10.0.0.1:5000", "10.0.0.2:5000", "10.0.0.3:5000"))
    line = r.encode()
    assert line == "ROSTER 10000 0=10.0.0.1:5000 1=10.0.0.2:5000 2=10.0.0.3:5000"
    assert Roster.decode(line) == r
    with pytest.raises(ProtocolError):
        Roster.decode("ROSTER 10 1=a:1")


def test_rejoin_roster_is_identical():
    c = _started(["c:1", "a:1", "b:1"])
    first = c.build_roster().encode()
    c.register("a:1")
    assert c.build_roster().encode() == first


def test_upload_fifo():
    c = _started(["a", "b"], max_uploads=1)
    assert c.grant_upload(0) is True
    assert c.grant_upload(1) is False
    assert c.release_upload(0) == [1]
    with pytest.raises(UnknownNode):
        c.grant_upload(7)


def test_upload_before_start_rejected():
    c = Coordinator()
    c.register("a")
    c.register("b")
    with pytest.raises((NotClosed, UnknownNode)):
        c.grant_upload(0)


def test_three_requests_under_limit_all_granted():
    s = UploadSlots(4)
    assert [s.request(i) for i in range(3)] == [True, True, True]


@pytest.mark.parametrize("seed", range(100))
def test_random_slot_schedules_respect_limit(seed):
    rnd = random.Random(seed)
    limit = rnd.randint(1, 4)
    s = UploadSlots(limit)
    ever_queued = set()
    granted_once = set()
    for _ in range(200):
        node = rnd.randrange(10)
        if rnd.random() < 0.55:
            if s.request(node):
                granted_once.add(node)
            else:
                ever_queued.add(node)
        elif s.active:
            granted_once.update(s.release(rnd.choice(sorted(s.active))))
        assert len(s.active) <= limit
    while s.waiting:
        granted_once.update(s.release(next(iter(s.active))))
    # no starvation: everyone who queued was eventually granted
    assert ever_queued <= granted_once


def test_finalize_and_finish():
    c = _started(["a", "b", "c"])
    assert c.finalize() == [0, 1, 2]
    assert c.state is State.FINALIZING
    assert c.finalize() == []
    # uploads still accepted while finalizing
    assert c.grant_upload(2)
    assert not c.mark_finished(0)
    c.mark_finished(1)
    assert c.mark_finished(2) and c.done


def test_parse_addr():
    assert parse_addr("127.0.0.1:9000") == ("127.0.0.1", 9000)
    assert parse_addr("[::1]:80") == ("::1", 80)
    with pytest.raises(ValueError):
        parse_addr("nohost")


def test_live_mesh_over_localhost(tmp_path):
    from twp.net import CoordinatorServer, PeerRuntime

    async def run():
        srv = CoordinatorServer(tmp_path / "coord", interval_ms=40, max_uploads=1,
                                expected_nodes=3, register_s=10)
        await srv.listen("127.0.0.1:0")
        addr = f"127.0.0.1:{srv.port}"
        peers = [PeerRuntime(addr, "127.0.0.1:0", tmp_path / f"p{i}", rotate_s=0.3,
                             stop_grace_ms=150) for i in range(3)]
        tasks = [asyncio.create_task(p.run()) for p in peers]
        roster = await srv.run(1.2, finish_timeout_s=20)
        await asyncio.wait_for(asyncio.gather(*tasks), 20)
        return roster, peers

    roster, peers = asyncio.run(run())
    assert len(roster) == 3
    assert (tmp_path / "coord" / "roster.txt").read_text().startswith("ROSTER 40 ")
    logs = load_logs(tmp_path / "coord")
    assert sorted(logs) == [0, 1, 2]
    # several segments per node, each uploaded under the one-slot limit
    for node in range(3):
        segs = list((tmp_path / "coord" / str(node)).glob("*.twplog"))
        assert len(segs) >= 2
        local = sorted(p.name for p in (tmp_path / f"p{peers[0].peer.id}").glob("*.twplog"))
        assert local
    mesh = analyze(logs, 3)
    stats = mesh.link_stats()
    assert len(stats) == 6
    assert all(s.count >= 3 for s in stats)
    assert all(0 <= s.mean_ms < 200 for s in stats)
