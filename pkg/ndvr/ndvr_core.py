"""
ndvr_core.py

Description:
The NDVR routing state machine: neighbor table, distance-vector table,
EHLO beaconing with a round-robin priority subgroup, DVINFO request and
reply scheduling, and sequence-numbered route processing.

The router keeps no timers. Each handler returns a list of actions
(ExpressInterest, ReplyDvinfo, FetchKey, FibUpdate, FibRemove,
PrefixLearned) and the host executes them.

License:
MIT License
"""

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from ndvr.ndn_minicore import (
    TLV_COMPONENT, TLV_NAME, DecodeError, EncodingError, Name, decode_name, encode_length, encode_name,
    iter_tlvs, read_tlv,
)

logger = logging.getLogger(__name__)

ROUTER_MARKER = b"\xc1.Router"
KEY_COMPONENT = b"KEY"
COST_INFINITY = 2 ** 32 - 1
TLV_DV_ENTRY = 0x90

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
FNV_MASK = 0xFFFFFFFFFFFFFFFF

EHLO_PREFIX = Name.parse("/localhop/ndvr/ehlo")
DVINFO_PREFIX = Name.parse("/localhop/ndvr/dvinfo")


class ParseError(Exception):
    """Raised when an NDVR name or payload does not follow the protocol layout"""


class CostStrategy(Enum):
    HOP_COUNT = "HOP_COUNT"


@dataclass(frozen=True, order=True)
class RouterName:
    network: Name
    label: bytes

    def __post_init__(self):
        if not self.label:
            raise ValueError("router label must be non-empty")

    @classmethod
    def make(cls, network: str, label: str) -> "RouterName":
        return cls(Name.parse(network), label.encode())

    @classmethod
    def from_name(cls, name: Name) -> "RouterName":
        """Split ``<network>/%C1.Router/<label>`` back into its parts."""
        if len(name) < 3 or name[-2] != ROUTER_MARKER:
            raise ParseError(f"not a router name: {name}")
        return cls(name[:-2], name[-1])

    def to_name(self) -> Name:
        return self.network.append(ROUTER_MARKER, self.label)

    def key_name(self) -> Name:
        return self.network + self.to_name().append(KEY_COMPONENT)

    def __str__(self):
        return str(self.to_name())


@dataclass
class NdvrConfig:
    ehlo_interval_s: float = 1.0
    ehlo_multiplier: int = 2
    subgroup_size: int = 2
    backoff_min_ms: int = 100
    backoff_max_ms: int = 300
    reply_delay_ms: int = 10
    start_jitter_max_ms: int = 100
    dvinfo_lifetime_ms: int = 1000
    cost_strategy: CostStrategy = CostStrategy.HOP_COUNT
    network: str = "/ufba"

    def __post_init__(self):
        if self.ehlo_interval_s <= 0:
            raise ValueError("ehlo_interval_s must be positive")
        if self.ehlo_multiplier < 1:
            raise ValueError("ehlo_multiplier must be at least 1")
        if self.subgroup_size < 1:
            raise ValueError("subgroup_size must be at least 1")
        if self.backoff_min_ms < 0 or self.backoff_min_ms > self.backoff_max_ms:
            raise ValueError("backoff_min_ms must be between 0 and backoff_max_ms")
        if self.reply_delay_ms < 0 or self.start_jitter_max_ms < 0:
            raise ValueError("delays must not be negative")
        if self.dvinfo_lifetime_ms <= 0:
            raise ValueError("dvinfo_lifetime_ms must be positive")
        if not Name.parse(self.network):
            raise ValueError(f"network needs at least one component, got {self.network!r}")

    @property
    def ehlo_interval_us(self) -> int:
        return int(round(self.ehlo_interval_s * 1_000_000))

    @property
    def neighbor_timeout_us(self) -> int:
        return self.ehlo_interval_us * self.ehlo_multiplier


@dataclass
class NeighborEntry:
    router: RouterName
    last_seen: int
    first_seen: int
    face_id: int
    last_version: int = 0
    pending_version: Optional[int] = None


@dataclass(frozen=True)
class RouteEntry:
    prefix: Name
    cost: int
    seq_num: int
    next_hop: Optional[RouterName] = None  # None is LOCAL
    face_id: Optional[int] = None

    @property
    def is_local(self) -> bool:
        return self.next_hop is None


@dataclass(frozen=True)
class EhloInfo:
    router: RouterName
    prefix_count: int
    version: int
    digest: str
    priority_subgroup: Tuple[RouterName, ...] = ()


# Actions returned to the host

@dataclass(frozen=True)
class ExpressInterest:
    name: Name
    app_parameters: Optional[bytes] = None
    delay_us: int = 0
    lifetime_ms: int = 1000


@dataclass(frozen=True)
class ReplyDvinfo:
    name: Name
    delay_us: int


@dataclass(frozen=True)
class FetchKey:
    key_name: Name
    face_id: Optional[int]


@dataclass(frozen=True)
class FibUpdate:
    prefix: Name
    face_id: int


@dataclass(frozen=True)
class FibRemove:
    prefix: Name


@dataclass(frozen=True)
class PrefixLearned:
    prefix: Name


# ---------------------------------------------------------------------------
# Encodings
# ---------------------------------------------------------------------------

def encode_dv_entry(prefix: Name, cost: int, seq_num: int) -> bytes:
    if not 0 <= cost <= COST_INFINITY or not 0 <= seq_num < 2 ** 64:
        raise EncodingError("cost or sequence number out of range")
    value = encode_name(prefix) + cost.to_bytes(4, "big") + seq_num.to_bytes(8, "big")
    return bytes((TLV_DV_ENTRY,)) + encode_length(len(value)) + value


def encode_dv_entries(entries: Iterable[RouteEntry]) -> bytes:
    ordered = sorted(entries, key=lambda e: e.prefix.sort_key())
    return b"".join(encode_dv_entry(e.prefix, e.cost, e.seq_num) for e in ordered)


def decode_dv_entries(content: bytes) -> Tuple[List[Tuple[Name, int, int]], int]:
    """
    Decode DVINFO content.

    Returns:
        tuple: ([(prefix, cost, seq_num), ...], number of malformed entries skipped)
    """
    entries = []
    malformed = 0
    offset = 0
    while offset < len(content):
        try:
            tlv_type, start, end = read_tlv(content, offset)
        except DecodeError:
            # framing lost, nothing after this point can be trusted
            return entries, malformed + 1
        offset = end
        if tlv_type != TLV_DV_ENTRY:
            malformed += 1
            continue
        try:
            name_type, name_start, name_end = read_tlv(content[:end], start)
            if name_type != TLV_NAME or end - name_end != 12:
                raise DecodeError("bad entry layout")
            components = []
            for comp_type, comp_start, comp_end in iter_tlvs(content, name_start, name_end):
                if comp_type != TLV_COMPONENT or comp_end == comp_start:
                    raise DecodeError("bad prefix component")
                components.append(content[comp_start:comp_end])
        except DecodeError:
            malformed += 1
            continue
        cost = int.from_bytes(content[name_end:name_end + 4], "big")
        seq_num = int.from_bytes(content[name_end + 4:end], "big")
        entries.append((Name(tuple(components)), cost, seq_num))
    return entries, malformed


def compute_digest(entries: Iterable[RouteEntry]) -> str:
    """64-bit FNV-1a over the sorted entry encodings, as 16 lowercase hex characters."""
    value = FNV_OFFSET_BASIS
    for byte in encode_dv_entries(entries):
        value = ((value ^ byte) * FNV_PRIME) & FNV_MASK
    return f"{value:016x}"


def ehlo_name(router: RouterName, prefix_count: int, version: int, digest: str) -> Name:
    return (EHLO_PREFIX + router.to_name()).append(str(prefix_count), str(version), digest)


def dvinfo_prefix(router: RouterName) -> Name:
    return DVINFO_PREFIX + router.to_name()


def dvinfo_name(router: RouterName, version: int) -> Name:
    return dvinfo_prefix(router).append(str(version))


def _decimal(component: bytes, what: str) -> int:
    if not component.isdigit():
        raise ParseError(f"{what} is not a decimal number: {component!r}")
    return int(component)


def encode_subgroup(subgroup: Sequence[RouterName]) -> bytes:
    return b"".join(encode_name(r.to_name()) for r in subgroup)


def parse_ehlo(name: Name, app_parameters: Optional[bytes]) -> EhloInfo:
    if len(name) < 9 or name[:3] != EHLO_PREFIX:
        raise ParseError(f"malformed EHLO name: {name}")
    router = RouterName.from_name(name[3:-3])
    subgroup = []
    params = app_parameters or b""
    offset = 0
    try:
        while offset < len(params):
            tlv_type, _, end = read_tlv(params, offset)
            if tlv_type != TLV_NAME:
                raise ParseError("EHLO parameters must be a list of names")
            subgroup.append(RouterName.from_name(decode_name(params[offset:end])))
            offset = end
    except DecodeError as e:
        raise ParseError(f"malformed EHLO parameters: {e}") from e
    try:
        digest = name[-1].decode("ascii")
    except UnicodeDecodeError as e:
        raise ParseError("EHLO digest is not ASCII") from e
    return EhloInfo(router=router, prefix_count=_decimal(name[-3], "#prefixes"),
                    version=_decimal(name[-2], "#ver"), digest=digest, priority_subgroup=tuple(subgroup))


def parse_dvinfo_name(name: Name) -> Tuple[RouterName, int]:
    if len(name) < 7 or name[:3] != DVINFO_PREFIX:
        raise ParseError(f"malformed DVINFO name: {name}")
    return RouterName.from_name(name[3:-1]), _decimal(name[-1], "#ver")


def select_priority_subgroup(neighbors: Sequence[RouterName], rr_cursor: int,
                             size: int) -> Tuple[List[RouterName], int]:
    """
    Pick the next ``size`` neighbors cyclically from ``rr_cursor``.

    ``neighbors`` must already be ordered by first-seen time then router name.
    """
    count = len(neighbors)
    if count == 0:
        return [], 0
    if count <= size:
        return list(neighbors), (rr_cursor + size) % count
    start = rr_cursor % count
    picked = [neighbors[(start + i) % count] for i in range(size)]
    return picked, (start + size) % count


def calculate_cost(neighbor: RouterName, advertised_cost: int,
                   strategy: CostStrategy = CostStrategy.HOP_COUNT) -> int:
    if strategy is not CostStrategy.HOP_COUNT:
        raise ValueError(f"unsupported cost strategy {strategy}")
    return min(advertised_cost + 1, COST_INFINITY)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

class DvTable:
    """Distance-vector table with a monotonic version and a cached digest."""

    def __init__(self):
        self.entries: Dict[Name, RouteEntry] = {}
        self.version = 0
        self._digest = compute_digest(())

    def __len__(self):
        return len(self.entries)

    def __contains__(self, prefix: Name) -> bool:
        return prefix in self.entries

    @property
    def digest(self) -> str:
        return self._digest

    @property
    def prefix_count(self) -> int:
        return len(self.entries)

    def get(self, prefix: Name) -> Optional[RouteEntry]:
        return self.entries.get(prefix)

    def put(self, entry: RouteEntry) -> None:
        self.entries[entry.prefix] = entry

    def remove(self, prefix: Name) -> None:
        self.entries.pop(prefix, None)

    def commit(self) -> None:
        """Record one change: bump the version and refresh the digest."""
        self.version += 1
        self._digest = compute_digest(self.entries.values())

    def sorted_entries(self) -> List[RouteEntry]:
        return sorted(self.entries.values(), key=lambda e: e.prefix.sort_key())


# ---------------------------------------------------------------------------
# Router
# ---------------------------------------------------------------------------

class NdvrRouter:
    """
    One node's NDVR instance.

    :param router: this node's router name
    :param config: protocol timers and sizes
    :param rng: numpy Generator used for backoff and start jitter draws
    """

    def __init__(self, router: RouterName, config: NdvrConfig, rng):
        self.router = router
        self.config = config
        self.rng = rng
        self.neighbors: Dict[RouterName, NeighborEntry] = {}
        self.table = DvTable()
        self.rr_cursor = 0
        self.counters = Counter()
        self._replies_pending: Dict[Name, int] = {}
        self._replies_sent: Dict[Name, int] = {}

    # -- neighbors ----------------------------------------------------------

    def ordered_neighbors(self) -> List[RouterName]:
        entries = sorted(self.neighbors.values(), key=lambda nb: (nb.first_seen, nb.router))
        return [nb.router for nb in entries]

    def start_jitter_us(self) -> int:
        return int(self.rng.integers(0, self.config.start_jitter_max_ms * 1000 + 1))

    def build_ehlo(self) -> Tuple[Name, bytes]:
        subgroup, self.rr_cursor = select_priority_subgroup(
            self.ordered_neighbors(), self.rr_cursor, self.config.subgroup_size)
        name = ehlo_name(self.router, self.table.prefix_count, self.table.version, self.table.digest)
        return name, encode_subgroup(subgroup)

    def make_ehlo(self) -> ExpressInterest:
        name, params = self.build_ehlo()
        self.counters["ehlo_sent"] += 1
        return ExpressInterest(name, app_parameters=params, lifetime_ms=self.config.dvinfo_lifetime_ms)

    def tick(self, now: int) -> Tuple[List[RouterName], List]:
        """EHLO timer: expire silent neighbors, then beacon."""
        removed, actions = self.on_neighbor_timeout(now)
        actions.append(self.make_ehlo())
        return removed, actions

    def on_ehlo(self, ehlo: EhloInfo, in_face: int, now: int) -> List:
        if ehlo.router == self.router:
            return []
        neighbor = self.neighbors.get(ehlo.router)
        if neighbor is None:
            neighbor = NeighborEntry(router=ehlo.router, last_seen=now, first_seen=now, face_id=in_face)
            self.neighbors[ehlo.router] = neighbor
            logger.info("%s: neighbor %s added on face %d", self.router, ehlo.router, in_face)
        neighbor.last_seen = now
        neighbor.face_id = in_face

        if ehlo.prefix_count == 0 or ehlo.version <= neighbor.last_version:
            return []
        if ehlo.digest == self.table.digest:
            return []
        if neighbor.pending_version is not None and neighbor.pending_version >= ehlo.version:
            return []

        neighbor.pending_version = ehlo.version
        immediate = self.router in ehlo.priority_subgroup or ehlo.prefix_count > self.table.prefix_count
        delay = 0
        if not immediate:
            delay = int(self.rng.integers(self.config.backoff_min_ms * 1000, self.config.backoff_max_ms * 1000 + 1))
        self.counters["dvinfo_fetch"] += 1
        return [ExpressInterest(dvinfo_name(ehlo.router, ehlo.version), delay_us=delay,
                                lifetime_ms=self.config.dvinfo_lifetime_ms)]

    def on_ehlo_interest(self, name: Name, app_parameters: Optional[bytes], in_face: int, now: int) -> List:
        try:
            ehlo = parse_ehlo(name, app_parameters)
        except ParseError as e:
            logger.warning("%s: ignoring EHLO: %s", self.router, e)
            self.counters["malformed_ehlo"] += 1
            return []
        return self.on_ehlo(ehlo, in_face, now)

    def on_neighbor_timeout(self, now: int) -> Tuple[List[RouterName], List]:
        limit = self.config.neighbor_timeout_us
        removed = [nb.router for nb in self.neighbors.values() if now - nb.last_seen > limit]
        if not removed:
            return [], []
        gone = set(removed)
        for router in removed:
            del self.neighbors[router]
            logger.info("%s: neighbor %s timed out", self.router, router)
        actions = []
        for entry in self.table.sorted_entries():
            if entry.next_hop in gone:
                self.table.remove(entry.prefix)
                actions.append(FibRemove(entry.prefix))
        if actions:
            self.table.commit()
        return removed, actions

    # -- DVINFO exchange ----------------------------------------------------

    def build_dvinfo_data(self, requested_version: int) -> Optional[bytes]:
        if requested_version > self.table.version:
            return None
        return encode_dv_entries(self.table.entries.values())

    def on_dvinfo_interest(self, name: Name, now: int) -> List:
        try:
            router, version = parse_dvinfo_name(name)
        except ParseError as e:
            logger.warning("%s: ignoring DVINFO Interest: %s", self.router, e)
            self.counters["malformed_dvinfo_interest"] += 1
            return []
        if router != self.router:
            return []
        if version > self.table.version:
            self.counters["dvinfo_future_version"] += 1
            return []
        delay = self.config.reply_delay_ms * 1000
        # only replies inside the suppression window matter
        self._replies_sent = {n: t for n, t in self._replies_sent.items() if now - t < delay}
        if name in self._replies_pending or name in self._replies_sent:
            self.counters["dvinfo_reply_suppressed"] += 1
            return []
        self._replies_pending[name] = now + delay
        return [ReplyDvinfo(name, delay)]

    def fire_reply(self, name: Name, now: int) -> Optional[bytes]:
        """Build the content for a scheduled reply; the table is read at send time."""
        self._replies_pending.pop(name, None)
        _, version = parse_dvinfo_name(name)
        content = self.build_dvinfo_data(version)
        if content is not None:
            self._replies_sent[name] = now
            self.counters["dvinfo_reply"] += 1
        return content

    def on_dvinfo_data(self, router: RouterName, version: int, content: bytes, now: int) -> List:
        neighbor = self.neighbors.get(router)
        if neighbor is None:
            self.counters["dvinfo_from_stranger"] += 1
            return []
        entries, malformed = decode_dv_entries(content)
        if malformed:
            logger.warning("%s: %d malformed entries in DVINFO from %s", self.router, malformed, router)
            self.counters["malformed_dv_entry"] += malformed
        neighbor.last_version = max(neighbor.last_version, version)
        if neighbor.pending_version is not None and neighbor.pending_version <= version:
            neighbor.pending_version = None
        return self.process_dvinfo(entries, neighbor)

    def on_fetch_timeout(self, router: RouterName, version: int) -> None:
        neighbor = self.neighbors.get(router)
        if neighbor is not None and neighbor.pending_version == version:
            neighbor.pending_version = None
            self.counters["dvinfo_fetch_timeout"] += 1

    def on_need_key(self, key_name: Name, router: RouterName) -> FetchKey:
        neighbor = self.neighbors.get(router)
        return FetchKey(key_name, neighbor.face_id if neighbor else None)

    # -- route processing ---------------------------------------------------

    def process_dvinfo(self, entries: Iterable[Tuple[Name, int, int]], neighbor: NeighborEntry) -> List:
        actions = []
        for prefix, advertised_cost, seq_num in entries:
            cost = calculate_cost(neighbor.router, advertised_cost, self.config.cost_strategy)
            if cost >= COST_INFINITY:
                self.counters["cost_infinity"] += 1
                continue
            existing = self.table.get(prefix)
            if existing is not None and existing.is_local:
                continue
            if (existing is None or seq_num > existing.seq_num
                    or (seq_num == existing.seq_num and cost < existing.cost)):
                self.table.put(RouteEntry(prefix, cost, seq_num, neighbor.router, neighbor.face_id))
                actions.append(FibUpdate(prefix, neighbor.face_id))
                if existing is None:
                    logger.debug("%s: learned %s via %s cost %d", self.router, prefix, neighbor.router, cost)
                    actions.append(PrefixLearned(prefix))
        if actions:
            self.table.commit()
        return actions

    def advertise_local_prefix(self, prefix: Name) -> RouteEntry:
        existing = self.table.get(prefix)
        # a learned route for the same prefix is replaced, and its seq outranked
        seq_num = existing.seq_num + 1 if existing is not None else 1
        entry = RouteEntry(prefix, 0, seq_num)
        self.table.put(entry)
        self.table.commit()
        return entry

    def dump_routes(self) -> List[Tuple[str, int, int, str, str]]:
        rows = []
        for entry in self.table.sorted_entries():
            next_hop = "LOCAL" if entry.is_local else str(entry.next_hop)
            face = "LOCAL" if entry.face_id is None else str(entry.face_id)
            rows.append((str(entry.prefix), entry.cost, entry.seq_num, next_hop, face))
        return rows
