"""
simulation.py

Description:
Puts a forwarder, an NDVR router, a trust store and the workload apps on
every node of a scenario, connects the nodes through the wireless medium
and drives the run.

Face layout of a node:
  1, 2, 3   application faces (NDVR, producer, consumer)
  10        the broadcast ad hoc face
  256 + n   unicast face towards node n, created on first contact

License:
MIT License
"""

import functools
import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

from ndvr.apps_metrics import (
    CbrConsumer, CbrProducer, MetricKind, MetricsLog, Summary, SyncConsumer, SyncProducer, summarize,
)
from ndvr.ndn_minicore import (
    DEFAULT_INTEREST_LIFETIME_MS, Cache, Data, DecodeError, Drop, EncodingError, Face, FaceKind, Forwarder,
    Interest, Name, Send, TraceDirection, decode_packet, encode_packet, format_trace_line, is_localhop,
    is_ndvr_name,
)
from ndvr.ndvr_core import (
    DVINFO_PREFIX, EHLO_PREFIX, KEY_COMPONENT, ExpressInterest, FetchKey, FibRemove, FibUpdate, NdvrRouter,
    ParseError, PrefixLearned, ReplyDvinfo, RouterName, dvinfo_prefix, parse_dvinfo_name,
)
from ndvr.scenario import ConfigError, ForwardingMode, ScenarioConfig, WorkloadKind
from ndvr.simnet import Event, EventKind, Frame, Medium, Mobility, MobilityModel, RngStreams, Scheduler
from ndvr.trust import Accepted, KeyChain, NeedKey, Rejected, TrustStore, generate_keys, parse_key_data, validate

logger = logging.getLogger(__name__)

FACE_NDVR = 1
FACE_PRODUCER = 2
FACE_CONSUMER = 3
FACE_BROADCAST = 10
UNICAST_FACE_BASE = 256

PIT_SWEEP_US = 1_000_000
APP_FRESHNESS_MS = 10_000

MOBILITY_COLUMNS = ["time_s", "node_id", "x_m", "y_m"]
ROUTE_COLUMNS = ["prefix", "cost", "seqnum", "nexthop", "face"]

# every receiver of a broadcast decodes the same bytes
_decode = functools.lru_cache(maxsize=4096)(decode_packet)


class InvariantError(Exception):
    """Raised when a run breaks a property the simulator must guarantee"""


def is_key_name(name: Name) -> bool:
    return len(name) > 0 and name[-1] == KEY_COMPONENT


@dataclass
class _Waiter:
    on_data: Optional[Callable[[Data], None]]
    on_timeout: Optional[Callable[[], None]]
    timer: Optional[Event] = None


class StaticPrefix:
    """Advertises one fixed prefix at start."""

    def __init__(self, node, prefix: Name):
        self.node = node
        self.prefix = prefix

    def start(self) -> None:
        self.node.advertise(self.prefix)


class SimNode:
    """
    One simulated node: forwarder, NDVR router and applications.

    It also implements the host interface the workload apps expect
    (``express``, ``publish``, ``serve``, ``advertise``, ``schedule``).
    """

    def __init__(self, sim: "Simulation", node_id: int, label: str, keychain: KeyChain, trust: TrustStore):
        config = sim.config
        self.sim = sim
        self.node_id = node_id
        self.label = label
        self.active = True
        ndvr_mode = config.forwarding is ForwardingMode.NDVR_MULTICAST

        self.forwarder = Forwarder(node_id, config.cs_capacity, cache_unsolicited=ndvr_mode)
        for face_id in (FACE_NDVR, FACE_PRODUCER, FACE_CONSUMER):
            self.forwarder.add_face(Face(face_id, FaceKind.APP))
        self.forwarder.add_face(Face(FACE_BROADCAST, FaceKind.BROADCAST))

        self.router_name = RouterName.make(config.ndvr.network, label)
        self.key_name = self.router_name.key_name()
        self.keychain = keychain
        self.trust = trust
        self.router: Optional[NdvrRouter] = None
        if ndvr_mode:
            self.router = NdvrRouter(self.router_name, config.ndvr, sim.streams.stream(node_id, "ndvr"))

        self.apps: List = []
        self.consumer: Optional[SyncConsumer] = None
        self.counters = Counter()
        # (time removed, neighbor, time its last EHLO was heard)
        self.removals: List[Tuple[int, RouterName, int]] = []
        self._nonces = sim.streams.stream(node_id, "nonce")
        self._waiters: Dict[Tuple[int, Name], _Waiter] = {}
        self._handlers: Dict[Name, Callable[[Interest], bytes]] = {}
        self._published: Dict[Name, Data] = {}
        self._ehlo_timer: Optional[Event] = None
        self._install_routes()

    def __repr__(self):
        return f"SimNode({self.node_id}, {self.label!r})"

    def _install_routes(self) -> None:
        fib = self.forwarder.fib
        if self.router is None:
            fib.add_next_hop(Name(), FACE_BROADCAST)
            return
        fib.set_next_hops(EHLO_PREFIX, {FACE_NDVR, FACE_BROADCAST})
        fib.set_next_hops(DVINFO_PREFIX, {FACE_BROADCAST})
        fib.set_next_hops(dvinfo_prefix(self.router_name), {FACE_NDVR})
        fib.set_next_hops(self.key_name, {FACE_NDVR})

    # -- host interface -------------------------------------------------------

    @property
    def now(self) -> int:
        return self.sim.scheduler.now

    @property
    def metrics(self) -> MetricsLog:
        return self.sim.metrics

    def schedule(self, delay_us: int, callback: Callable[[], None], label: str = "",
                 kind: EventKind = EventKind.APP) -> Event:
        return self.sim.scheduler.call_later(int(delay_us), callback, kind, self.node_id, label)

    def express(self, name: Name, on_data: Optional[Callable[[Data], None]] = None,
                on_timeout: Optional[Callable[[], None]] = None,
                lifetime_ms: int = DEFAULT_INTEREST_LIFETIME_MS, app_parameters: Optional[bytes] = None,
                face_id: int = FACE_CONSUMER) -> Interest:
        interest = Interest(name, int(self._nonces.integers(0, 2 ** 32)), lifetime_ms, app_parameters)
        if on_data is not None or on_timeout is not None:
            key = (face_id, name)
            previous = self._waiters.pop(key, None)
            if previous is not None:
                Scheduler.cancel(previous.timer)
            waiter = _Waiter(on_data, on_timeout)
            waiter.timer = self.schedule(lifetime_ms * 1000, lambda: self._expire(key, waiter),
                                         "interest-timeout", EventKind.TIMER)
            # registered first: a CS hit answers synchronously
            self._waiters[key] = waiter
        self._execute(self.forwarder.forward_interest(interest, face_id, self.now), face_id)
        return interest

    def publish(self, name: Name, content: bytes) -> None:
        self._published[name] = self.keychain.sign(Data(name, content, freshness_ms=APP_FRESHNESS_MS),
                                                    self.key_name)
        self.forwarder.fib.add_next_hop(name, FACE_PRODUCER)

    def serve(self, prefix: Name, handler: Callable[[Interest], bytes]) -> None:
        self._handlers[prefix] = handler
        self.forwarder.fib.add_next_hop(prefix, FACE_PRODUCER)

    def advertise(self, prefix: Name) -> None:
        if self.router is not None:
            entry = self.router.advertise_local_prefix(prefix)
            logger.debug("node %s: advertising %s seq %d", self.label, prefix, entry.seq_num)

    # -- lifecycle ------------------------------------------------------------

    def start(self, beacons: bool = True) -> None:
        if self.router is not None and beacons:
            self._ehlo_timer = self.schedule(self.router.start_jitter_us(), self._ehlo_tick, "ehlo",
                                             EventKind.TIMER)
        self.schedule(PIT_SWEEP_US, self._sweep, "pit-sweep", EventKind.TIMER)
        for app in self.apps:
            app.start()

    def stop(self) -> None:
        """Switch the node off: it no longer sends, receives or beacons."""
        self.active = False
        Scheduler.cancel(self._ehlo_timer)
        logger.info("node %s switched off at %d us", self.label, self.now)

    def send_ehlo(self) -> None:
        self._run_ndvr([self.router.make_ehlo()])

    def unicast_face(self, peer: int) -> int:
        face_id = UNICAST_FACE_BASE + peer
        if face_id not in self.forwarder.faces:
            self.forwarder.add_face(Face(face_id, FaceKind.UNICAST, peer))
        return face_id

    def _ehlo_tick(self) -> None:
        if not self.active:
            return
        now = self.now
        heard = {router: nb.last_seen for router, nb in self.router.neighbors.items()}
        removed, actions = self.router.tick(now)
        for router in removed:
            self.removals.append((now, router, heard[router]))
        self._run_ndvr(actions)
        self._ehlo_timer = self.schedule(self.sim.config.ndvr.ehlo_interval_us, self._ehlo_tick, "ehlo",
                                         EventKind.TIMER)

    def _sweep(self) -> None:
        self.forwarder.expire_pit(self.now)
        self.schedule(PIT_SWEEP_US, self._sweep, "pit-sweep", EventKind.TIMER)

    # -- packet plumbing ------------------------------------------------------

    def receive(self, frame: Frame) -> None:
        if not self.active:
            return
        try:
            packet = _decode(frame.payload)
        except DecodeError as e:
            self.counters["decode_error"] += 1
            logger.debug("node %s: undecodable frame from %d: %s", self.label, frame.sender, e)
            return
        link_face = self.unicast_face(frame.sender)
        in_face = FACE_BROADCAST if frame.dest is None else link_face
        size = len(frame.payload)
        self.trace_packet(TraceDirection.RX, packet, size)
        if isinstance(packet, Interest):
            actions = self.forwarder.forward_interest(packet, in_face, self.now)
        else:
            actions = self.forwarder.handle_data(packet, in_face, self.now)
        self._execute(actions, in_face, link_face, size)

    def _execute(self, actions: List, in_face: int, link_face: Optional[int] = None,
                 size: Optional[int] = None) -> None:
        from_radio = not self.forwarder.faces[in_face].local
        for action in actions:
            if isinstance(action, Send):
                face = self.forwarder.faces[action.face_id]
                if face.local:
                    packet = action.packet
                    if link_face is not None:
                        # apps see the link the packet came over, not the shared broadcast face
                        packet = replace(packet, incoming_face=link_face)
                    self._deliver_to_app(face.face_id, packet)
                    continue
                if from_radio and is_localhop(action.packet.name):
                    raise InvariantError(f"node {self.label} would relay {action.packet.name} beyond one hop")
                self._transmit(face, action.packet)
            elif isinstance(action, Cache):
                self.trace_packet(TraceDirection.CACHE, action.packet, size)
            elif isinstance(action, Drop):
                logger.debug("node %s: drop %s (%s)", self.label, action.packet.name, action.reason)
                self.trace_packet(TraceDirection.DROP, action.packet, size)

    def _transmit(self, face: Face, packet) -> None:
        if not self.active:
            return
        try:
            payload = encode_packet(packet)
        except EncodingError as e:
            logger.error("node %s: cannot encode %s: %s", self.label, packet.name, e)
            self.counters["encoding_error"] += 1
            return
        size = len(payload)
        self.trace_packet(TraceDirection.TX, packet, size)
        name = packet.name
        if is_ndvr_name(name):
            self.metrics.record(MetricKind.NDVR_PKT, self.now, self.node_id, name, size)
        elif not is_localhop(name) and not is_key_name(name):
            self.metrics.record(MetricKind.PKT_FORWARDED, self.now, self.node_id, name, size)
        dest = face.peer if face.kind is FaceKind.UNICAST else None
        self.sim.medium.transmit(Frame(self.node_id, payload, dest), self.now)

    def trace_packet(self, direction: TraceDirection, packet, size: Optional[int] = None) -> None:
        sink = self.sim.trace
        if sink is None:
            return
        if size is None:
            try:
                size = len(encode_packet(packet))
            except EncodingError:
                size = 0
        sink(format_trace_line(self.now, self.node_id, direction, packet, size))

    def _deliver_to_app(self, face_id: int, packet) -> None:
        if isinstance(packet, Data):
            waiter = self._waiters.pop((face_id, packet.name), None)
            if waiter is None:
                self.counters["app_data_unexpected"] += 1
                return
            Scheduler.cancel(waiter.timer)
            if waiter.on_data is not None:
                waiter.on_data(packet)
        elif face_id == FACE_NDVR:
            self._ndvr_interest(packet)
        elif face_id == FACE_PRODUCER:
            self._produce(packet)
        else:
            self.counters["app_interest_unexpected"] += 1

    def _expire(self, key: Tuple[int, Name], waiter: _Waiter) -> None:
        if self._waiters.get(key) is not waiter:
            return
        del self._waiters[key]
        if waiter.on_timeout is not None:
            waiter.on_timeout()

    def _reply(self, data: Data, face_id: int) -> None:
        self._execute(self.forwarder.handle_data(data, face_id, self.now), face_id)

    def _produce(self, interest: Interest) -> None:
        name = interest.name
        data = self._published.get(name)
        if data is None:
            handler = None
            for length in range(len(name), -1, -1):
                handler = self._handlers.get(name[:length])
                if handler is not None:
                    break
            if handler is None:
                self.counters["no_producer"] += 1
                return
            data = self.keychain.sign(Data(name, handler(interest), freshness_ms=APP_FRESHNESS_MS), self.key_name)
        self._reply(data, FACE_PRODUCER)

    # -- NDVR application -----------------------------------------------------

    def _ndvr_interest(self, interest: Interest) -> None:
        if self.router is None or not self.active:
            return
        name = interest.name
        if EHLO_PREFIX.is_prefix_of(name):
            if interest.incoming_face is None:
                return
            actions = self.router.on_ehlo_interest(name, interest.app_parameters, interest.incoming_face, self.now)
        elif name == self.key_name:
            self._reply(self.keychain.key_data(self.key_name), FACE_NDVR)
            return
        else:
            actions = self.router.on_dvinfo_interest(name, self.now)
        self._run_ndvr(actions)

    def _run_ndvr(self, actions: List) -> None:
        fib = self.forwarder.fib
        for action in actions:
            if isinstance(action, ExpressInterest):
                if action.delay_us > 0:
                    self.schedule(action.delay_us, lambda a=action: self._ndvr_express(a), "dvinfo-backoff")
                else:
                    self._ndvr_express(action)
            elif isinstance(action, ReplyDvinfo):
                self.schedule(action.delay_us, lambda n=action.name: self._fire_reply(n), "dvinfo-reply")
            elif isinstance(action, FetchKey):
                self._fetch_key(action)
            elif isinstance(action, FibUpdate):
                fib.set_next_hops(action.prefix, {action.face_id})
            elif isinstance(action, FibRemove):
                fib.remove(action.prefix)
            elif isinstance(action, PrefixLearned):
                if self.consumer is not None:
                    self.consumer.on_prefix_learned(action.prefix)

    def _ndvr_express(self, action: ExpressInterest) -> None:
        if not self.active:
            return
        name = action.name
        if EHLO_PREFIX.is_prefix_of(name):
            self.express(name, lifetime_ms=action.lifetime_ms, app_parameters=action.app_parameters,
                         face_id=FACE_NDVR)
            return
        router, version = parse_dvinfo_name(name)
        self.express(name, self._on_dvinfo_data, lambda: self.router.on_fetch_timeout(router, version),
                     action.lifetime_ms, face_id=FACE_NDVR)

    def _fire_reply(self, name: Name) -> None:
        if not self.active:
            return
        content = self.router.fire_reply(name, self.now)
        if content is None:
            return
        freshness = int(self.sim.config.ndvr.ehlo_interval_s * 1000)
        self._reply(self.keychain.sign(Data(name, content, freshness_ms=freshness), self.key_name), FACE_NDVR)

    def _on_dvinfo_data(self, data: Data) -> None:
        try:
            router, version = parse_dvinfo_name(data.name)
        except ParseError as e:
            logger.warning("node %s: ignoring DVINFO Data: %s", self.label, e)
            self.counters["malformed_dvinfo_data"] += 1
            return
        verdict = validate(data, self.trust, self.now)
        if isinstance(verdict, NeedKey):
            if self.trust.suspend(data, verdict.key_name):
                self._run_ndvr([self.router.on_need_key(verdict.key_name, router)])
            return
        if isinstance(verdict, Rejected):
            logger.warning("node %s: rejected %s: %s %s", self.label, data.name, verdict.reason.name, verdict.detail)
            self.counters["dvinfo_rejected"] += 1
            return
        self._run_ndvr(self.router.on_dvinfo_data(router, version, data.content, self.now))

    def _fetch_key(self, action: FetchKey) -> None:
        if action.face_id is None:
            self._abandon_key(action.key_name, "key_fetch_no_face")
            return
        self.forwarder.fib.set_next_hops(action.key_name, {action.face_id})
        key_name = action.key_name
        self.express(key_name, self._on_key_data, lambda: self._abandon_key(key_name, "key_fetch_timeout"),
                     self.sim.config.ndvr.dvinfo_lifetime_ms, face_id=FACE_NDVR)

    def _on_key_data(self, data: Data) -> None:
        self.forwarder.fib.remove(data.name)
        verdict = validate(data, self.trust, self.now)
        parked = self.trust.resume(data.name)
        if not isinstance(verdict, Accepted):
            reason = verdict.reason.name if isinstance(verdict, Rejected) else "NEED_KEY"
            logger.warning("node %s: rejected key %s: %s", self.label, data.name, reason)
            self.counters["key_rejected"] += 1
            return
        self.trust.add_key(parse_key_data(data))
        for dvinfo, _ in parked:
            self._on_dvinfo_data(dvinfo)

    def _abandon_key(self, key_name: Name, counter: str) -> None:
        self.forwarder.fib.remove(key_name)
        self.counters[counter] += 1
        for dvinfo, _ in self.trust.resume(key_name):
            router, version = parse_dvinfo_name(dvinfo.name)
            self.router.on_fetch_timeout(router, version)


class Simulation:
    """
    One run of a scenario.

    :param config: the scenario; ``config.seed`` must be set
    :param trace: optional sink receiving one packet-trace line at a time
    :param keep_event_log: keep the processed-event log of the kernel
    """

    def __init__(self, config: ScenarioConfig, trace: Optional[Callable[[str], None]] = None,
                 keep_event_log: bool = False):
        if config.seed is None:
            raise ConfigError("a seed is required")
        self.config = config
        self.trace = trace
        self.streams = RngStreams(config.seed)
        self.scheduler = Scheduler(keep_log=keep_event_log)
        self.metrics = MetricsLog()
        self.mobility_rows: List[Tuple[int, int, float, float]] = []
        self.duration_s = config.duration_s

        self.mobility = Mobility(config.mobility, config.arena, self._initial_positions(), self.streams)
        ranges = None
        if any(spec.range_m is not None for spec in config.nodes):
            ranges = [spec.range_m if spec.range_m is not None else config.radio.range_m for spec in config.nodes]
        self.medium = Medium(self.scheduler, config.radio, lambda: self.mobility.positions, self._deliver,
                             self.streams.stream(-1, "loss"), ranges)
        self.medium.on_queue_drop = self._on_queue_drop

        routers = [RouterName.make(config.ndvr.network, spec.name) for spec in config.nodes]
        store, keychain = generate_keys(Name.parse(config.ndvr.network), routers, self.streams.stream(-1, "keys"))
        self.nodes = [SimNode(self, index, spec.name, keychain.only(router.key_name()), store.copy_for_node())
                      for index, (spec, router) in enumerate(zip(config.nodes, routers))]
        self._by_label = {node.label: node for node in self.nodes}
        self._install_workload()
        self._started = False

    def __getitem__(self, label: str) -> SimNode:
        return self._by_label[label]

    def _initial_positions(self) -> List[Tuple[float, float]]:
        rng = self.streams.stream(-1, "placement")
        width, height = self.config.arena
        positions = []
        for spec in self.config.nodes:
            if spec.placed:
                positions.append((spec.x, spec.y))
            else:
                positions.append((float(rng.uniform(0, width)), float(rng.uniform(0, height))))
        return positions

    def _install_workload(self) -> None:
        workload = self.config.workload
        base = Name.parse(workload.producer.base_prefix)
        labels = [node.label for node in self.nodes]
        for index, node in enumerate(self.nodes):
            if workload.kind is WorkloadKind.STATIC:
                node.apps.append(StaticPrefix(node, Name.parse(workload.prefix).append(node.label)))
            elif workload.kind is WorkloadKind.SYNC_POISSON:
                producer = SyncProducer(node, workload.producer, self.streams.stream(index, "producer"))
                node.consumer = SyncConsumer(node, producer.prefix)
                node.apps.append(producer)
            else:
                cbr = workload.cbr
                if cbr.targets:
                    unknown = sorted(set(cbr.targets) - set(labels))
                    if unknown:
                        raise ConfigError(f"unknown CBR targets: {', '.join(unknown)}")
                    targets = [t for t in cbr.targets if t != node.label]
                else:
                    others = labels[index + 1:] + labels[:index]
                    targets = others[:cbr.target_count] if cbr.target_count else others
                node.apps.append(CbrProducer(node, base.append(node.label), cbr.payload_size))
                node.apps.append(CbrConsumer(node, cbr, [base.append(t) for t in targets]))

    def start(self, beacons: bool = True) -> None:
        """Start nodes, apps and mobility; ``beacons=False`` leaves EHLO to the caller."""
        if self._started:
            return
        self._started = True
        for node in self.nodes:
            node.start(beacons)
        if self.config.mobility.model is not MobilityModel.STATIC:
            self.scheduler.call_later(self.mobility.step_us, self._mobility_step, EventKind.MOBILITY, None, "step")
        self.scheduler.call_later(0, self._log_positions, EventKind.MOBILITY, None, "log")
        logger.info("simulation started: %d nodes, seed %s, %s", len(self.nodes), self.config.seed,
                    self.config.forwarding.value)

    def run(self, duration_s: Optional[float] = None) -> Summary:
        if duration_s is not None:
            self.duration_s = duration_s
        self.start()
        processed = self.scheduler.run_until(int(round(self.duration_s * 1_000_000)))
        logger.info("simulation finished at %d us after %d events", self.scheduler.now, processed)
        return self.summary()

    def summary(self) -> Summary:
        return summarize(self.metrics.events, self.duration_s, len(self.nodes))

    def routes(self, label: str) -> List[Tuple[str, int, int, str, str]]:
        router = self[label].router
        return router.dump_routes() if router is not None else []

    def _mobility_step(self) -> None:
        self.mobility.step()
        self.scheduler.call_later(self.mobility.step_us, self._mobility_step, EventKind.MOBILITY, None, "step")

    def _log_positions(self) -> None:
        self.mobility_rows.extend(self.mobility.rows(self.scheduler.now // 1_000_000))
        self.scheduler.call_later(1_000_000, self._log_positions, EventKind.MOBILITY, None, "log")

    def _deliver(self, receiver: int, frame: Frame) -> None:
        self.nodes[receiver].receive(frame)

    def _on_queue_drop(self, frame: Frame) -> None:
        self.nodes[frame.sender].trace_packet(TraceDirection.DROP, _decode(frame.payload), len(frame.payload))
