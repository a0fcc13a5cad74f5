import json
import math
from dataclasses import replace

import numpy as np
import pytest

from latticemac.config import ChannelTopology, SystemConfig, grouped_topology
from latticemac.sim import _Run, contend_stage, measure, run_simulation, write_frame_log

CFG = SystemConfig()


class ScriptedRng:
    """Stands in for random.Random with a fixed sequence of draws."""

    def __init__(self, draws, uniform=0.5):
        self.draws = list(draws)
        self.uniform = uniform

    def randrange(self, n):
        return self.draws.pop(0)

    def random(self):
        return self.uniform


class Stub:
    def __init__(self, sid, draws, post=False, uniform=0.5):
        self.id = sid
        self.rng = ScriptedRng(draws, uniform)
        self.post_backoff = post


def one_shot(times_bits_per_station):
    return [(np.array([t for t, _ in arr], dtype=float), np.array([b for _, b in arr], dtype=float))
            for arr in times_bits_per_station]


# -- contention stage -------------------------------------------------------

def test_single_contender_wins():
    a = Stub(0, [])
    assert contend_stage([a], 0, 7, 0.0) == ("win", a, [])


def test_lowest_draw_wins():
    a, b = Stub(0, [1]), Stub(1, [0])
    kind, winner, losers = contend_stage([a, b], 0, 1, 0.0)
    assert kind == "win" and winner is b and losers == [a]


def test_equal_draws_tie():
    a, b = Stub(0, [0]), Stub(1, [0])
    kind, group, _ = contend_stage([a, b], 0, 1, 0.0)
    assert kind == "tie" and group == [a, b]


def test_post_backoff_uses_upper_half():
    a, b = Stub(0, [0], post=True), Stub(1, [2])
    # a's draw of 0 maps to 4 in the window [4..7]
    kind, winner, _ = contend_stage([a, b], 0, 7, 0.0)
    assert kind == "win" and winner is b
    # not applied after the first stage
    a, b = Stub(0, [0], post=True), Stub(1, [2])
    assert contend_stage([a, b], 1, 7, 0.0)[1] is a


def test_missed_preamble_collides():
    a, b = Stub(0, [0]), Stub(1, [3], uniform=0.0)
    kind, members, _ = contend_stage([a, b], 0, 7, 0.5)
    assert kind == "collision" and set(members) == {a, b}


# -- whole runs -------------------------------------------------------------

def test_no_traffic():
    m = run_simulation(CFG, grouped_topology(1, 3, 2, 0.0), duration=1.0)
    assert m.throughput_bps == 0.0
    assert m.delays.size == 0 and math.isnan(m.mean_delay)


def test_lone_station_served_next_frame():
    # small packets: a few arrivals in one frame still leave together
    topo = grouped_topology(1, 1, 1, 20.0, 800.0)
    m = run_simulation(CFG, topo, seed=3, duration=20.0)
    assert m.generated > 300
    assert m.overall_success_rate() == 1.0
    assert m.delays.max() <= CFG.t_frame + CFG.t_up
    assert m.delays.min() > CFG.stage_time
    # half a frame of waiting plus the head of the next subframe
    assert m.mean_delay == pytest.approx(CFG.t_frame / 2 + CFG.stage_time + 800 / CFG.bits_per_slot * CFG.epsilon,
                                         rel=0.1)


def test_two_saturated_stations_split_evenly():
    cfg = SystemConfig(beta=1, s_max=15)
    topo = grouped_topology(1, 2, 1, 400.0, 2400.0)
    m = run_simulation(cfg, topo, seed=11, duration=50.0)
    assert m.n_frames >= 10_000
    rate = m.successes[:, 0] / m.n_frames
    np.testing.assert_allclose(rate, 0.5, atol=0.02)


def test_post_backoff_fairness():
    topo = grouped_topology(1, 2, 1, 400.0, 2400.0)
    log = []
    m = run_simulation(CFG, topo, seed=5, duration=51.0, log=log)
    winners = {r["frame"]: r["winners"][0] for r in log if r["winners"]}
    repeats = [winners[f] == winners[f + 1] for f in winners if f + 1 in winners]
    assert len(repeats) >= 10_000
    assert np.mean(repeats) < 0.5
    assert m.queue_end.sum() > 0


def test_determinism():
    topo = grouped_topology(2, 4, 3, 60.0)
    cfg = replace(CFG, p_bit=1e-5, p_corr=0.01)
    la, lb = [], []
    a = run_simulation(cfg, topo, seed=9, duration=2.0, log=la)
    b = run_simulation(cfg, topo, seed=9, duration=2.0, log=lb)
    assert json.dumps(la) == json.dumps(lb)
    np.testing.assert_array_equal(a.delays, b.delays)
    c = run_simulation(cfg, topo, seed=10, duration=2.0)
    assert not np.array_equal(a.delays, c.delays)


@pytest.mark.parametrize("lam", [20.0, 150.0])
def test_conservation_and_capacity(lam):
    topo = grouped_topology(1, 10, 3, lam, 2400.0)
    cfg = replace(CFG, p_bit=2e-5, p_corr=0.02)
    log = []
    m = run_simulation(cfg, topo, seed=1, duration=3.0, log=log)
    assert m.dropped == 0
    assert m.generated == m.delivered_packets + m.queue_end.sum()
    assert all(r["bits"] <= cfg.sigma + 1e-9 for r in log)
    assert all(r["slots"] <= cfg.subframe_slots for r in log)
    assert m.throughput_bps <= topo.n_channels * cfg.sigma / cfg.t_frame


def test_slot_accounting():
    topo = grouped_topology(1, 6, 1, 300.0, 800.0)
    log = []
    run_simulation(CFG, topo, seed=2, duration=1.0, log=log)
    for r in log:
        assert r["slots"] >= r["stages"] * CFG.stage_slots
        assert r["slots"] <= CFG.subframe_slots


def test_reuse_single_packet_idle_rest():
    arr = one_shot([[(0.001, 2400.0)]])
    log = []
    m = run_simulation(CFG, grouped_topology(1, 1, 1, 0.0), arrivals=arr, duration=0.02, log=log)
    busy = [r for r in log if r["outcome"] == "win"]
    assert len(busy) == 1 and busy[0]["bits"] == 2400.0 and busy[0]["reuse"] == 0
    assert m.reuse_events == 0


def test_reuse_gives_remainder_to_loser():
    arr = one_shot([[(0.001, 1200.0)], [(0.001, 1200.0)]])
    log = []
    m = run_simulation(CFG, grouped_topology(1, 2, 1, 0.0), arrivals=arr, duration=0.02, log=log)
    first = log[0]
    assert first["frame"] == 1
    assert sorted(first["winners"]) == [0, 1] and first["reuse"] == 1
    assert m.delivered_packets == 2 and m.reuse_events == 1


def test_no_reuse_when_subframe_full():
    arr = one_shot([[(0.001, 3180.0)], [(0.001, 3180.0)]])
    log = []
    run_simulation(CFG, grouped_topology(1, 2, 1, 0.0), arrivals=arr, duration=0.02, log=log)
    assert log[0]["reuse"] == 0 and len(log[0]["winners"]) == 1
    assert len(log[1]["winners"]) == 1


def test_large_packet_is_fragmented():
    arr = one_shot([[(0.001, 8000.0)]])
    m = run_simulation(CFG, grouped_topology(1, 1, 1, 0.0), arrivals=arr, duration=0.05)
    assert m.delivered_packets == 1
    assert m.delivered_bits == 8000.0
    # three wins of at most one subframe each
    assert m.successes[0, 0] == 3
    assert m.delays[0] > 2 * CFG.t_frame


def test_bit_errors_cause_retries():
    cfg = replace(CFG, p_bit=1e-4)
    topo = grouped_topology(1, 1, 1, 30.0, 2400.0)
    m = run_simulation(cfg, topo, seed=4, duration=20.0)
    want = (1 - 1e-4) ** 2400
    assert m.overall_success_rate() == pytest.approx(want, abs=0.05)
    assert m.generated == m.delivered_packets + m.queue_end.sum()


def test_correlation_errors_collide():
    cfg = replace(CFG, p_corr=0.5)
    m = run_simulation(cfg, grouped_topology(1, 3, 1, 150.0), seed=1, duration=2.0)
    assert m.collisions > 0


def test_restricted_channel_sets_respected():
    topo = ChannelTopology(3, ((0,), (1, 2)), np.array([40.0, 40.0]))
    m = run_simulation(CFG, topo, seed=0, duration=2.0)
    assert m.attempts[0, 1:].sum() == 0 and m.attempts[1, 0] == 0
    assert m.attempts[1, 1] > 0 and m.attempts[1, 2] > 0


def test_frame_log_file(tmp_path):
    log = []
    run_simulation(CFG, grouped_topology(1, 2, 1, 50.0), seed=0, duration=0.5, log=log)
    path = tmp_path / "frames.jsonl"
    write_frame_log(log, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(log)
    rec = json.loads(lines[0])
    assert {"frame", "channel", "outcome", "winners", "stages", "bits"} <= set(rec)


def test_short_run_flagged():
    m = run_simulation(CFG, grouped_topology(1, 1, 1, 10.0), duration=0.1)
    assert m.short_run


def test_measure_arithmetic():
    topo = grouped_topology(1, 1, 5, 0.0)
    run = _Run(CFG, topo, 0.0)
    run.delivered_bits = 1000 * 2400.0
    m = measure(run, [], 1.0, 200, 1000)
    assert m.throughput_bps == pytest.approx(2.4e6)
    empty = measure(_Run(CFG, topo, 0.0), [], 1.0, 200, 0)
    assert empty.throughput_bps == 0.0 and math.isnan(empty.mean_delay)
    run.delivered_bits = 1e9
    with pytest.raises(AssertionError):
        measure(run, [], 1.0, 200, 1000)
