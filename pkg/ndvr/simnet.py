"""
simnet.py

Description:
Deterministic discrete-event kernel, unit-disk wireless medium and the
random walk / reference point group mobility models.

All times are integer microseconds. Events are ordered by (time, seq), seq
being assigned in scheduling order, so equal seeds give identical runs.

License:
MIT License
"""

import heapq
import itertools
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

US_PER_S = 1_000_000


class SchedulerError(Exception):
    """Raised when an event is scheduled before the current simulation time"""


class EventKind(Enum):
    TIMER = "TIMER"
    ARRIVAL = "ARRIVAL"
    MOBILITY = "MOBILITY"
    APP = "APP"


@dataclass(eq=False)
class Event:
    time: int
    callback: Callable[[], None]
    kind: EventKind = EventKind.TIMER
    target: Optional[int] = None
    label: str = ""
    seq: int = -1
    cancelled: bool = False


class Scheduler:
    """Single-threaded event loop over a heap of (time, seq, event) entries."""

    def __init__(self, keep_log: bool = False):
        self.now = 0
        self._queue: List[Tuple[int, int, Event]] = []
        self._seq = itertools.count()
        self.processed = 0
        self.log: Optional[List[str]] = [] if keep_log else None

    def __len__(self):
        return len(self._queue)

    def schedule(self, event: Event) -> Event:
        if event.time < self.now:
            raise SchedulerError(f"event at {event.time} us is before now ({self.now} us)")
        event.seq = next(self._seq)
        heapq.heappush(self._queue, (event.time, event.seq, event))
        return event

    def call_at(self, time: int, callback: Callable[[], None], kind: EventKind = EventKind.TIMER,
                target: Optional[int] = None, label: str = "") -> Event:
        return self.schedule(Event(int(time), callback, kind, target, label))

    def call_later(self, delay: int, callback: Callable[[], None], kind: EventKind = EventKind.TIMER,
                   target: Optional[int] = None, label: str = "") -> Event:
        return self.call_at(self.now + delay, callback, kind, target, label)

    @staticmethod
    def cancel(event: Optional[Event]) -> None:
        # lazy: the entry stays queued and is skipped when popped
        if event is not None:
            event.cancelled = True

    def run_until(self, t_end: int) -> int:
        """Process every event with time <= t_end; returns the number processed."""
        processed = 0
        while self._queue and self._queue[0][0] <= t_end:
            time, seq, event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            self.now = time
            if self.log is not None:
                target = "" if event.target is None else event.target
                self.log.append(f"{time},{seq},{event.kind.value},{target},{event.label}")
            event.callback()
            processed += 1
        self.now = max(self.now, t_end)
        self.processed += processed
        return processed


class RngStreams:
    """Named numpy substreams, one per (node, purpose), derived from a single seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: Dict[Tuple[int, str], np.random.Generator] = {}

    def stream(self, node: int, purpose: str) -> np.random.Generator:
        key = (node, purpose)
        if key not in self._streams:
            # node -1 is the scenario-wide stream
            entropy = [self.seed, node + 1, zlib.crc32(purpose.encode())]
            self._streams[key] = np.random.default_rng(np.random.SeedSequence(entropy))
        return self._streams[key]


# ---------------------------------------------------------------------------
# Radio
# ---------------------------------------------------------------------------

@dataclass
class RadioModel:
    range_m: float = 60.0
    loss_prob: float = 0.0
    preamble_us: int = 192
    bitrate_bps: int = 11_000_000
    contention: bool = False
    queue_limit: int = 50

    def __post_init__(self):
        if self.range_m <= 0:
            raise ValueError("range_m must be positive")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be within [0, 1]")
        if self.bitrate_bps <= 0 or self.preamble_us < 0:
            raise ValueError("bitrate_bps must be positive and preamble_us non-negative")
        if self.queue_limit < 1:
            raise ValueError("queue_limit must be at least 1")

    def tx_delay(self, size: int) -> int:
        return self.preamble_us + size * 8 * US_PER_S // self.bitrate_bps


@dataclass(frozen=True)
class Frame:
    sender: int
    payload: bytes
    dest: Optional[int] = None  # None is a broadcast


class Medium:
    """
    Unit-disk medium: a frame reaches every node within the sender's range.

    With ``contention`` on, a sender transmits only while its neighborhood is
    idle, and the frame then occupies the medium of every node in range for
    its airtime. Waiting frames beyond ``queue_limit`` are dropped.
    """

    def __init__(self, scheduler: Scheduler, radio: RadioModel, positions: Callable[[], np.ndarray],
                 deliver: Callable[[int, Frame], None], rng: np.random.Generator,
                 ranges: Optional[Sequence[float]] = None):
        self.scheduler = scheduler
        self.radio = radio
        self.positions = positions
        self.deliver = deliver
        self.rng = rng
        self.ranges = None if ranges is None else np.asarray(ranges, dtype=float)
        self.on_queue_drop: Optional[Callable[[Frame], None]] = None
        self.counters: Dict[str, int] = {"frames": 0, "deliveries": 0, "lost": 0, "queue_drop": 0}
        self._busy_until: Dict[int, int] = {}
        self._queues: Dict[int, List[Frame]] = {}
        self._retry: Dict[int, Event] = {}

    def range_of(self, node: int) -> float:
        if self.ranges is None:
            return self.radio.range_m
        return float(self.ranges[node])

    def in_range(self, sender: int) -> List[int]:
        positions = self.positions()
        distance = np.hypot(*(positions - positions[sender]).T)
        receivers = np.nonzero(distance <= self.range_of(sender))[0]
        return [int(r) for r in receivers if r != sender]

    def transmit(self, frame: Frame, now: int) -> List[Event]:
        if not self.radio.contention:
            return self._start(frame, now)
        queue = self._queues.setdefault(frame.sender, [])
        if not queue and self._busy_until.get(frame.sender, 0) <= now:
            return self._start(frame, now)
        if len(queue) >= self.radio.queue_limit:
            self.counters["queue_drop"] += 1
            if self.on_queue_drop is not None:
                self.on_queue_drop(frame)
            return []
        queue.append(frame)
        self._arm_retry(frame.sender)
        return []

    def _arm_retry(self, sender: int) -> None:
        if sender in self._retry and not self._retry[sender].cancelled:
            return
        when = max(self._busy_until.get(sender, 0), self.scheduler.now)
        self._retry[sender] = self.scheduler.call_at(when, lambda: self._drain(sender), EventKind.TIMER,
                                                     sender, "medium-retry")

    def _drain(self, sender: int) -> None:
        self._retry.pop(sender, None)
        queue = self._queues.get(sender)
        now = self.scheduler.now
        while queue and self._busy_until.get(sender, 0) <= now:
            self._start(queue.pop(0), now)
        if queue:
            self._arm_retry(sender)

    def _start(self, frame: Frame, now: int) -> List[Event]:
        airtime = self.radio.tx_delay(len(frame.payload))
        end = now + airtime
        receivers = self.in_range(frame.sender)
        self.counters["frames"] += 1
        if self.radio.contention:
            for node in receivers + [frame.sender]:
                self._busy_until[node] = max(self._busy_until.get(node, 0), end)
        if frame.dest is not None:
            receivers = [r for r in receivers if r == frame.dest]
        events = []
        for receiver in receivers:
            if self.radio.loss_prob > 0 and self.rng.random() < self.radio.loss_prob:
                self.counters["lost"] += 1
                continue
            events.append(self.scheduler.call_at(
                end, lambda r=receiver: self._arrive(r, frame), EventKind.ARRIVAL, receiver, "arrival"))
        return events

    def _arrive(self, receiver: int, frame: Frame) -> None:
        self.counters["deliveries"] += 1
        self.deliver(receiver, frame)


# ---------------------------------------------------------------------------
# Mobility
# ---------------------------------------------------------------------------

class MobilityModel(Enum):
    STATIC = "STATIC"
    RANDOM_WALK = "RANDOM_WALK"
    RPGM = "RPGM"


@dataclass
class MobilityConfig:
    model: MobilityModel = MobilityModel.STATIC
    speed_min: float = 1.0
    speed_max: float = 20.0
    leg_s: float = 20.0
    step_ms: int = 100
    group_mean: float = 3.0
    group_sd: float = 0.2
    offset_max_m: float = 10.0

    def __post_init__(self):
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("speed_min must be between 0 and speed_max")
        if self.leg_s <= 0 or self.step_ms <= 0:
            raise ValueError("leg_s and step_ms must be positive")
        if self.offset_max_m < 0 or self.group_sd < 0:
            raise ValueError("offset_max_m and group_sd must not be negative")


@dataclass
class MobilityState:
    x: float
    y: float
    speed: float = 0.0
    direction: float = 0.0
    leg_remaining: float = 0.0


def _reflect(position: float, limit: float) -> Tuple[float, bool]:
    if position < 0:
        return min(-position, limit), True
    if position > limit:
        return max(2 * limit - position, 0.0), True
    return position, False


def random_walk_step(state: MobilityState, rng: np.random.Generator, dt: float,
                     arena: Tuple[float, float], config: MobilityConfig = MobilityConfig()) -> MobilityState:
    """
    Advance one random-walk node by ``dt`` seconds.

    A new leg (speed, direction) is drawn first when the previous one is used up.
    Walls reflect the heading and the position is kept inside the arena.
    """
    if state.leg_remaining <= 0:
        speed = float(rng.uniform(config.speed_min, config.speed_max))
        direction = float(rng.uniform(0.0, 2 * math.pi))
        state = replace(state, speed=speed, direction=direction, leg_remaining=config.leg_s)

    width, height = arena
    x = state.x + state.speed * math.cos(state.direction) * dt
    y = state.y + state.speed * math.sin(state.direction) * dt
    direction = state.direction
    x, bounced_x = _reflect(x, width)
    if bounced_x:
        direction = math.pi - direction
    y, bounced_y = _reflect(y, height)
    if bounced_y:
        direction = -direction
    return MobilityState(x=x, y=y, speed=state.speed, direction=direction % (2 * math.pi),
                         leg_remaining=max(state.leg_remaining - dt, 0.0))


@dataclass
class Group:
    members: List[int]
    reference: MobilityState
    offsets: Dict[int, Tuple[float, float]] = field(default_factory=dict)


def assign_groups(nodes: Sequence[int], rng: np.random.Generator, mean: float = 3.0,
                  sd: float = 0.2) -> List[List[int]]:
    """Split nodes into consecutive groups whose sizes are Normal(mean, sd) rounded, at least 1."""
    groups = []
    index = 0
    while index < len(nodes):
        size = max(1, int(round(rng.normal(mean, sd))))
        groups.append(list(nodes[index:index + size]))
        index += size
    return groups


def _draw_offsets(group: Group, rng: np.random.Generator, bound: float) -> None:
    for member in group.members:
        radius = float(rng.uniform(0.0, bound))
        angle = float(rng.uniform(0.0, 2 * math.pi))
        group.offsets[member] = (radius * math.cos(angle), radius * math.sin(angle))


def _member_positions(group: Group, arena: Tuple[float, float]) -> Dict[int, Tuple[float, float]]:
    width, height = arena
    positions = {}
    for member in group.members:
        dx, dy = group.offsets[member]
        positions[member] = (min(max(group.reference.x + dx, 0.0), width),
                             min(max(group.reference.y + dy, 0.0), height))
    return positions


def rpgm_step(groups: Sequence[Group], rng: np.random.Generator, dt: float, arena: Tuple[float, float],
              config: MobilityConfig = MobilityConfig()) -> Dict[int, Tuple[float, float]]:
    """Move every group's reference point and place members at reference plus offset."""
    positions = {}
    for group in groups:
        new_leg = group.reference.leg_remaining <= 0
        group.reference = random_walk_step(group.reference, rng, dt, arena, config)
        if new_leg or not group.offsets:
            _draw_offsets(group, rng, config.offset_max_m)
        positions.update(_member_positions(group, arena))
    return positions


class Mobility:
    """Positions of every node, advanced in fixed steps by the host."""

    def __init__(self, config: MobilityConfig, arena: Tuple[float, float], initial: Sequence[Tuple[float, float]],
                 streams: RngStreams):
        self.config = config
        self.arena = arena
        self.positions = np.array(initial, dtype=float).reshape(-1, 2)
        self.states = [MobilityState(x, y) for x, y in self.positions]
        self.groups: List[Group] = []
        self._streams = streams
        if config.model is MobilityModel.RPGM:
            layout = assign_groups(list(range(len(self.positions))), streams.stream(-1, "groups"),
                                   config.group_mean, config.group_sd)
            placement = streams.stream(-1, "rpgm")
            for members in layout:
                x, y = self.positions[members[0]]
                group = Group(members=members, reference=MobilityState(x, y))
                # members start around the reference point, not at their own draws
                _draw_offsets(group, placement, config.offset_max_m)
                for node, position in _member_positions(group, arena).items():
                    self.positions[node] = position
                self.groups.append(group)

    @property
    def step_us(self) -> int:
        return self.config.step_ms * 1000

    def step(self) -> None:
        dt = self.config.step_ms / 1000.0
        if self.config.model is MobilityModel.RANDOM_WALK:
            for node, state in enumerate(self.states):
                state = random_walk_step(state, self._streams.stream(node, "mobility"), dt, self.arena, self.config)
                self.states[node] = state
                self.positions[node] = (state.x, state.y)
        elif self.config.model is MobilityModel.RPGM:
            moved = rpgm_step(self.groups, self._streams.stream(-1, "rpgm"), dt, self.arena, self.config)
            for node, position in moved.items():
                self.positions[node] = position

    def rows(self, time_s: int) -> List[Tuple[int, int, float, float]]:
        return [(time_s, node, round(float(x), 3), round(float(y), 3)) for node, (x, y) in enumerate(self.positions)]
