import math

import numpy as np
import pytest

from ndvr.simnet import (
    Event, EventKind, Frame, Group, Medium, Mobility, MobilityConfig, MobilityModel, MobilityState, RadioModel,
    RngStreams, Scheduler, SchedulerError, assign_groups, random_walk_step, rpgm_step,
)

ARENA = (300.0, 300.0)


@pytest.fixture
def scheduler():
    return Scheduler()


def make_medium(scheduler, positions, radio=None, ranges=None):
    received = []
    points = np.array(positions, dtype=float)
    medium = Medium(scheduler, radio or RadioModel(), lambda: points,
                    lambda node, frame: received.append((scheduler.now, node, frame)),
                    np.random.default_rng(0), ranges)
    return medium, received


# --- kernel -----------------------------------------------------------------

def test_equal_times_run_in_insertion_order(scheduler):
    order = []
    for label in "abc":
        scheduler.call_at(10, lambda x=label: order.append(x))
    scheduler.run_until(10)
    assert order == ["a", "b", "c"]


def test_events_run_in_time_order_and_can_chain(scheduler):
    order = []
    scheduler.call_at(30, lambda: order.append(30))
    scheduler.call_at(10, lambda: scheduler.call_later(5, lambda: order.append(15)))
    scheduler.run_until(100)
    assert order == [15, 30]


def test_scheduling_in_the_past(scheduler):
    scheduler.run_until(50)
    with pytest.raises(SchedulerError):
        scheduler.schedule(Event(10, lambda: None))


def test_empty_queue_reaches_end(scheduler):
    assert scheduler.run_until(1_000) == 0
    assert scheduler.now == 1_000


def test_events_after_end_stay_queued(scheduler):
    fired = []
    scheduler.call_at(5, lambda: fired.append(5))
    scheduler.call_at(11, lambda: fired.append(11))
    scheduler.run_until(10)
    assert fired == [5]
    assert scheduler.now == 10
    assert len(scheduler) == 1


def test_cancel_is_lazy(scheduler):
    fired = []
    event = scheduler.call_at(5, lambda: fired.append(5))
    scheduler.cancel(event)
    scheduler.run_until(10)
    assert fired == []


def test_event_log():
    scheduler = Scheduler(keep_log=True)
    scheduler.call_at(7, lambda: None, EventKind.APP, 3, "tick")
    scheduler.run_until(10)
    assert scheduler.log == ["7,0,APP,3,tick"]


def test_rng_streams_are_independent_of_interleaving():
    first = RngStreams(42)
    a1 = first.stream(1, "mobility").random(3)
    first.stream(2, "mobility").random(100)
    a2 = first.stream(1, "mobility").random(3)

    second = RngStreams(42)
    b = second.stream(1, "mobility").random(6)
    assert np.array_equal(np.concatenate([a1, a2]), b)
    assert not np.array_equal(RngStreams(43).stream(1, "mobility").random(6), b)


# --- radio ------------------------------------------------------------------

def test_tx_delay():
    radio = RadioModel()
    assert radio.tx_delay(0) == 192
    assert radio.tx_delay(1375) == 192 + 1000


def test_only_nodes_in_range_receive(scheduler):
    # D, B, A, C on a line: only B is within D's range
    medium, received = make_medium(scheduler, [(0, 0), (50, 0), (100, 0), (160, 0)])
    medium.transmit(Frame(0, b"x" * 100), now=0)
    scheduler.run_until(10_000)
    assert [node for _, node, _ in received] == [1]
    assert received[0][0] == RadioModel().tx_delay(100)


def test_range_boundary_is_inclusive(scheduler):
    medium, received = make_medium(scheduler, [(0, 0), (60, 0)])
    medium.transmit(Frame(0, b"x"), now=0)
    scheduler.run_until(10_000)
    assert len(received) == 1


def test_full_loss(scheduler):
    medium, received = make_medium(scheduler, [(0, 0), (10, 0), (20, 0)], RadioModel(loss_prob=1.0))
    medium.transmit(Frame(0, b"x"), now=0)
    scheduler.run_until(10_000)
    assert received == []
    assert medium.counters["lost"] == 2


def test_asymmetric_ranges(scheduler):
    medium, received = make_medium(scheduler, [(0, 0), (80, 0)], ranges=[100.0, 60.0])
    medium.transmit(Frame(0, b"x"), now=0)
    medium.transmit(Frame(1, b"y"), now=0)
    scheduler.run_until(10_000)
    assert [(node, frame.payload) for _, node, frame in received] == [(1, b"x")]


def test_unicast_reaches_only_addressee(scheduler):
    medium, received = make_medium(scheduler, [(0, 0), (10, 0), (20, 0)])
    medium.transmit(Frame(0, b"x", dest=2), now=0)
    scheduler.run_until(10_000)
    assert [node for _, node, _ in received] == [2]


def test_contention_serializes_neighbors(scheduler):
    radio = RadioModel(contention=True)
    medium, received = make_medium(scheduler, [(0, 0), (10, 0)], radio)
    airtime = radio.tx_delay(100)
    medium.transmit(Frame(0, b"a" * 100), now=0)
    medium.transmit(Frame(1, b"b" * 100), now=0)
    scheduler.run_until(100_000)
    assert [(t, node) for t, node, _ in received] == [(airtime, 1), (2 * airtime, 0)]


def test_contention_queue_limit(scheduler):
    radio = RadioModel(contention=True, queue_limit=2)
    medium, received = make_medium(scheduler, [(0, 0), (10, 0)], radio)
    dropped = []
    medium.on_queue_drop = dropped.append
    for i in range(5):
        medium.transmit(Frame(0, bytes([i])), now=0)
    scheduler.run_until(100_000)
    assert len(received) == 3
    assert len(dropped) == 2
    assert medium.counters["queue_drop"] == 2


# --- mobility ---------------------------------------------------------------

def test_random_walk_straight_line():
    state = MobilityState(x=10, y=10, speed=2, direction=0, leg_remaining=5)
    moved = random_walk_step(state, np.random.default_rng(0), 1.0, ARENA)
    assert moved.x == pytest.approx(12)
    assert moved.y == pytest.approx(10)
    assert moved.leg_remaining == pytest.approx(4)


def test_random_walk_new_leg_replays_stream():
    state = MobilityState(x=100, y=100)
    moved = random_walk_step(state, np.random.default_rng(9), 0.1, ARENA)
    replay = np.random.default_rng(9)
    assert moved.speed == pytest.approx(replay.uniform(1, 20))
    assert moved.direction == pytest.approx(replay.uniform(0, 2 * math.pi))
    assert moved.leg_remaining == pytest.approx(19.9)


def test_random_walk_reflects_at_wall():
    state = MobilityState(x=299, y=100, speed=5, direction=0, leg_remaining=10)
    moved = random_walk_step(state, np.random.default_rng(0), 1.0, ARENA)
    assert moved.x == pytest.approx(296)
    assert moved.direction == pytest.approx(math.pi)


def test_random_walk_stays_in_arena():
    rng = np.random.default_rng(4)
    state = MobilityState(x=150, y=150)
    for _ in range(5000):
        state = random_walk_step(state, rng, 0.1, ARENA)
        assert 0 <= state.x <= 300 and 0 <= state.y <= 300
        assert 1 <= state.speed <= 20


def test_assign_groups_covers_every_node():
    groups = assign_groups(list(range(15)), np.random.default_rng(3))
    assert sorted(sum(groups, [])) == list(range(15))
    assert all(len(g) >= 1 for g in groups)
    assert 3 <= len(groups) <= 8


def test_rpgm_members_track_reference():
    rng = np.random.default_rng(5)
    groups = [Group([0, 1, 2], MobilityState(150, 150)), Group([3], MobilityState(20, 20))]
    membership = [list(g.members) for g in groups]
    for _ in range(600):
        positions = rpgm_step(groups, rng, 0.1, ARENA)
        for group in groups:
            for member in group.members:
                x, y = positions[member]
                assert math.hypot(x - group.reference.x, y - group.reference.y) <= 10.0 + 1e-9
                assert 0 <= x <= 300 and 0 <= y <= 300
    assert [g.members for g in groups] == membership


def test_rpgm_members_start_around_reference():
    initial = np.random.default_rng(2).uniform(0, 300, size=(15, 2))
    config = MobilityConfig(model=MobilityModel.RPGM)
    mobility = Mobility(config, ARENA, initial, RngStreams(4))
    rows = {node: (x, y) for _, node, x, y in mobility.rows(0)}
    assert sorted(sum((g.members for g in mobility.groups), [])) == list(range(15))
    for group in mobility.groups:
        for member in group.members:
            x, y = rows[member]
            assert math.hypot(x - group.reference.x, y - group.reference.y) <= config.offset_max_m + 1e-3


def test_single_member_group_follows_reference_walk():
    rng = np.random.default_rng(8)
    group = Group([0], MobilityState(100, 100))
    config = MobilityConfig(offset_max_m=0.0)
    positions = rpgm_step([group], rng, 0.1, ARENA, config)
    assert positions[0] == pytest.approx((group.reference.x, group.reference.y))


def test_mobility_manager_is_deterministic():
    config = MobilityConfig(model=MobilityModel.RANDOM_WALK)
    runs = []
    for _ in range(2):
        mobility = Mobility(config, ARENA, [(10, 10), (200, 200)], RngStreams(1))
        for _ in range(50):
            mobility.step()
        runs.append(mobility.rows(5))
    assert runs[0] == runs[1]
    assert runs[0][0][:2] == (5, 0)


def test_static_mobility_never_moves():
    mobility = Mobility(MobilityConfig(), ARENA, [(1, 2)], RngStreams(1))
    mobility.step()
    assert mobility.rows(1) == [(1, 0, 1.0, 2.0)]
