"""
ndn_minicore.py

Description:
Minimal NDN data plane used by every simulated node: hierarchical names,
the TLV packet codec, and a per-node forwarder with PIT, FIB and Content
Store running the multicast strategy.

The wire format is documented in WIRE_FORMAT.md at the repository root.

License:
MIT License
"""

import logging
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import total_ordering
from typing import Dict, Iterable, List, Optional, Set, Tuple, Union
from urllib.parse import unquote_to_bytes

logger = logging.getLogger(__name__)

# TLV type numbers
TLV_INTEREST = 0x05
TLV_DATA = 0x06
TLV_NAME = 0x07
TLV_COMPONENT = 0x08
TLV_NONCE = 0x0A
TLV_LIFETIME = 0x0C
TLV_CONTENT = 0x15
TLV_SIGNATURE_VALUE = 0x17
TLV_FRESHNESS = 0x19
TLV_KEY_LOCATOR = 0x1C
TLV_APP_PARAMETERS = 0x24

MAX_TLV_LENGTH = 0xFFFF
UINT32_MAX = 0xFFFFFFFF

DEFAULT_INTEREST_LIFETIME_MS = 4000
DEFAULT_CS_CAPACITY = 256
DEFAULT_NONCE_MEMORY = 1024

LOCALHOP = b"localhop"
NDVR = b"ndvr"


class EncodingError(Exception):
    """Raised when a value cannot be represented in the TLV wire format"""


class DecodeError(Exception):
    """Raised when a byte string is not a valid TLV encoding"""


# ---------------------------------------------------------------------------
# TLV primitives
# ---------------------------------------------------------------------------

def encode_length(length: int) -> bytes:
    if length < 0 or length > MAX_TLV_LENGTH:
        raise EncodingError(f"TLV length {length} out of range")
    if length < 253:
        return bytes((length,))
    return b"\xfd" + length.to_bytes(2, "big")


def encode_tlv(tlv_type: int, value: bytes) -> bytes:
    return bytes((tlv_type,)) + encode_length(len(value)) + value


def encode_uint(tlv_type: int, value: int, width: int) -> bytes:
    if value < 0 or value >= 1 << (8 * width):
        raise EncodingError(f"value {value} does not fit in {width} bytes")
    return encode_tlv(tlv_type, value.to_bytes(width, "big"))


def read_tlv(buf: bytes, offset: int) -> Tuple[int, int, int]:
    """
    Read one TLV header at ``offset``.

    Returns:
        tuple: (type, value_start, value_end)

    Raises:
        DecodeError: on truncation, reserved length markers or non-minimal lengths
    """
    if offset >= len(buf):
        raise DecodeError("truncated TLV: missing type")
    tlv_type = buf[offset]
    if tlv_type >= 253:
        raise DecodeError(f"multi-byte TLV type at offset {offset}")
    offset += 1
    if offset >= len(buf):
        raise DecodeError("truncated TLV: missing length")
    length = buf[offset]
    offset += 1
    if length == 0xFD:
        if offset + 2 > len(buf):
            raise DecodeError("truncated TLV: short length field")
        length = int.from_bytes(buf[offset:offset + 2], "big")
        if length < 253:
            raise DecodeError("non-minimal TLV length encoding")
        offset += 2
    elif length > 0xFD:
        raise DecodeError(f"unsupported TLV length marker 0x{length:02X}")
    end = offset + length
    if end > len(buf):
        raise DecodeError("truncated TLV: value shorter than length")
    return tlv_type, offset, end


def iter_tlvs(buf: bytes, start: int = 0, end: Optional[int] = None):
    """Yield (type, value_start, value_end) for consecutive TLVs in ``buf[start:end]``."""
    end = len(buf) if end is None else end
    view = buf[:end]
    offset = start
    while offset < end:
        tlv_type, value_start, value_end = read_tlv(view, offset)
        yield tlv_type, value_start, value_end
        offset = value_end


def _expect(buf: bytes, offset: int, tlv_type: int, limit: int) -> Tuple[int, int]:
    actual, start, end = read_tlv(buf[:limit], offset)
    if actual != tlv_type:
        raise DecodeError(f"expected TLV type 0x{tlv_type:02X}, got 0x{actual:02X}")
    return start, end


# ---------------------------------------------------------------------------
# Names
# ---------------------------------------------------------------------------

def _escape_component(component: bytes) -> str:
    return "".join(
        chr(b) if 0x21 <= b <= 0x7E and b not in (0x2F, 0x25) else f"%{b:02X}"
        for b in component
    )


ComponentLike = Union[bytes, str, int]


def _to_component(value: ComponentLike) -> bytes:
    if isinstance(value, bytes):
        return value
    if isinstance(value, int):
        return str(value).encode()
    return unquote_to_bytes(value)


@total_ordering
@dataclass(frozen=True)
class Name:
    """A hierarchical NDN name; components are non-empty byte strings."""

    components: Tuple[bytes, ...] = ()

    def __post_init__(self):
        comps = tuple(bytes(c) for c in self.components)
        for component in comps:
            if not component:
                raise ValueError("name components must be non-empty")
        object.__setattr__(self, "components", comps)

    @classmethod
    def parse(cls, text: str) -> "Name":
        """Parse the ``/c1/c2`` text form, undoing percent-escapes."""
        stripped = text.strip()
        if stripped.startswith("ndn:"):
            stripped = stripped[4:]
        stripped = stripped.strip("/")
        if not stripped:
            return cls(())
        return cls(tuple(unquote_to_bytes(part) for part in stripped.split("/")))

    def __str__(self) -> str:
        if not self.components:
            return "/"
        return "".join("/" + _escape_component(c) for c in self.components)

    def __repr__(self) -> str:
        return f"Name('{self}')"

    def __len__(self) -> int:
        return len(self.components)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Name(self.components[index])
        return self.components[index]

    def __add__(self, other: "Name") -> "Name":
        return Name(self.components + other.components)

    def __lt__(self, other: "Name") -> bool:
        return self.sort_key() < other.sort_key()

    def sort_key(self) -> Tuple[Tuple[int, bytes], ...]:
        return tuple((len(c), c) for c in self.components)

    def append(self, *components: ComponentLike) -> "Name":
        return Name(self.components + tuple(_to_component(c) for c in components))

    def is_prefix_of(self, other: "Name") -> bool:
        return other.components[:len(self.components)] == self.components


def encode_name(name: Name) -> bytes:
    """Encode a name as ``0x07 <len> (0x08 <len> <bytes>)*``."""
    inner = b"".join(encode_tlv(TLV_COMPONENT, c) for c in name.components)
    return encode_tlv(TLV_NAME, inner)


def _decode_name_at(buf: bytes, start: int, end: int) -> Name:
    components = []
    for tlv_type, value_start, value_end in iter_tlvs(buf, start, end):
        if tlv_type != TLV_COMPONENT:
            raise DecodeError(f"unexpected TLV 0x{tlv_type:02X} inside Name")
        if value_end == value_start:
            raise DecodeError("empty name component")
        components.append(bytes(buf[value_start:value_end]))
    return Name(tuple(components))


def decode_name(buf: bytes) -> Name:
    """Inverse of :func:`encode_name`; rejects trailing bytes."""
    buf = bytes(buf)
    start, end = _expect(buf, 0, TLV_NAME, len(buf))
    if end != len(buf):
        raise DecodeError("trailing bytes after Name")
    return _decode_name_at(buf, start, end)


def is_localhop(name: Name) -> bool:
    return len(name) > 0 and name[0] == LOCALHOP


def is_ndvr_name(name: Name) -> bool:
    return len(name) > 1 and name[0] == LOCALHOP and name[1] == NDVR


# ---------------------------------------------------------------------------
# Packets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Interest:
    name: Name
    nonce: int
    lifetime_ms: int = DEFAULT_INTEREST_LIFETIME_MS
    app_parameters: Optional[bytes] = None
    # set by the forwarder on delivery to an application, never encoded
    incoming_face: Optional[int] = field(default=None, compare=False)


@dataclass(frozen=True)
class Data:
    name: Name
    content: bytes = b""
    key_locator: Name = Name()
    signature: bytes = b""
    freshness_ms: int = 0
    incoming_face: Optional[int] = field(default=None, compare=False)

    def signed_portion(self) -> bytes:
        """TLVs of name, content, key locator and freshness, in wire order."""
        return (encode_name(self.name)
                + encode_tlv(TLV_CONTENT, self.content)
                + encode_tlv(TLV_KEY_LOCATOR, encode_name(self.key_locator))
                + encode_uint(TLV_FRESHNESS, self.freshness_ms, 4))


Packet = Union[Interest, Data]


def encode_packet(packet: Packet) -> bytes:
    if isinstance(packet, Interest):
        inner = (encode_name(packet.name)
                 + encode_uint(TLV_NONCE, packet.nonce, 4)
                 + encode_uint(TLV_LIFETIME, packet.lifetime_ms, 4))
        if packet.app_parameters is not None:
            inner += encode_tlv(TLV_APP_PARAMETERS, packet.app_parameters)
        return encode_tlv(TLV_INTEREST, inner)
    if isinstance(packet, Data):
        inner = packet.signed_portion() + encode_tlv(TLV_SIGNATURE_VALUE, packet.signature)
        return encode_tlv(TLV_DATA, inner)
    raise EncodingError(f"cannot encode {type(packet).__name__}")


def _decode_fixed_uint(buf: bytes, offset: int, tlv_type: int, width: int, limit: int) -> Tuple[int, int]:
    start, end = _expect(buf, offset, tlv_type, limit)
    if end - start != width:
        raise DecodeError(f"TLV 0x{tlv_type:02X} must be {width} bytes")
    return int.from_bytes(buf[start:end], "big"), end


def _decode_interest(buf: bytes, start: int, end: int) -> Interest:
    name_start, name_end = _expect(buf, start, TLV_NAME, end)
    name = _decode_name_at(buf, name_start, name_end)
    nonce, offset = _decode_fixed_uint(buf, name_end, TLV_NONCE, 4, end)
    lifetime, offset = _decode_fixed_uint(buf, offset, TLV_LIFETIME, 4, end)
    params = None
    if offset < end:
        params_start, params_end = _expect(buf, offset, TLV_APP_PARAMETERS, end)
        params = bytes(buf[params_start:params_end])
        offset = params_end
    if offset != end:
        raise DecodeError("trailing fields in Interest")
    return Interest(name=name, nonce=nonce, lifetime_ms=lifetime, app_parameters=params)


def _decode_data(buf: bytes, start: int, end: int) -> Data:
    name_start, name_end = _expect(buf, start, TLV_NAME, end)
    name = _decode_name_at(buf, name_start, name_end)
    content_start, content_end = _expect(buf, name_end, TLV_CONTENT, end)
    locator_start, locator_end = _expect(buf, content_end, TLV_KEY_LOCATOR, end)
    inner_start, inner_end = _expect(buf, locator_start, TLV_NAME, locator_end)
    if inner_end != locator_end:
        raise DecodeError("trailing bytes in KeyLocator")
    key_locator = _decode_name_at(buf, inner_start, inner_end)
    freshness, offset = _decode_fixed_uint(buf, locator_end, TLV_FRESHNESS, 4, end)
    sig_start, sig_end = _expect(buf, offset, TLV_SIGNATURE_VALUE, end)
    if sig_end != end:
        raise DecodeError("trailing fields in Data")
    return Data(name=name, content=bytes(buf[content_start:content_end]), key_locator=key_locator,
                signature=bytes(buf[sig_start:sig_end]), freshness_ms=freshness)


def decode_packet(buf: bytes) -> Packet:
    buf = bytes(buf)
    tlv_type, start, end = read_tlv(buf, 0)
    if end != len(buf):
        raise DecodeError("trailing bytes after packet")
    if tlv_type == TLV_INTEREST:
        return _decode_interest(buf, start, end)
    if tlv_type == TLV_DATA:
        return _decode_data(buf, start, end)
    raise DecodeError(f"unknown packet type 0x{tlv_type:02X}")


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

class FaceKind(Enum):
    APP = "app"
    BROADCAST = "broadcast"
    UNICAST = "unicast"


@dataclass(frozen=True)
class Face:
    face_id: int
    kind: FaceKind
    peer: Optional[int] = None

    @property
    def local(self) -> bool:
        return self.kind is FaceKind.APP

    @property
    def adhoc(self) -> bool:
        # a packet may leave an ad hoc face it arrived on
        return self.kind is FaceKind.BROADCAST


class Fib:
    """Name prefix to next-hop faces, longest-prefix match."""

    def __init__(self):
        self._entries: Dict[Name, Set[int]] = {}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, prefix: Name) -> bool:
        return prefix in self._entries

    def add_next_hop(self, prefix: Name, face_id: int) -> None:
        self._entries.setdefault(prefix, set()).add(face_id)

    def set_next_hops(self, prefix: Name, face_ids: Iterable[int]) -> None:
        self._entries[prefix] = set(face_ids)

    def remove(self, prefix: Name) -> None:
        self._entries.pop(prefix, None)

    def next_hops(self, prefix: Name) -> Set[int]:
        return set(self._entries.get(prefix, ()))

    def lookup(self, name: Name) -> Set[int]:
        for length in range(len(name), -1, -1):
            hops = self._entries.get(name[:length])
            if hops:
                return set(hops)
        return set()

    def entries(self) -> List[Tuple[Name, Set[int]]]:
        return sorted(((p, set(h)) for p, h in self._entries.items()), key=lambda e: e[0].sort_key())


def fib_lookup(fib: Fib, name: Name) -> Set[int]:
    return fib.lookup(name)


@dataclass
class PitEntry:
    name: Name
    in_faces: Dict[int, int] = field(default_factory=dict)  # face id -> nonce
    expiry: int = 0
    delivered: Set[Tuple[int, int]] = field(default_factory=set)


class ContentStore:
    """FIFO packet cache with the NDVR unsolicited-data policy."""

    def __init__(self, capacity: int = DEFAULT_CS_CAPACITY, cache_unsolicited: bool = False):
        self.capacity = capacity
        self.cache_unsolicited = cache_unsolicited
        self._entries: "OrderedDict[Name, Tuple[Data, int]]" = OrderedDict()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, name: Name) -> bool:
        return name in self._entries

    def insert(self, data: Data, now: int) -> List[Name]:
        """Cache ``data``; returns the names evicted to make room."""
        self._entries.pop(data.name, None)
        self._entries[data.name] = (data, now)
        evicted = []
        while len(self._entries) > self.capacity:
            evicted.append(self._entries.popitem(last=False)[0])
        return evicted

    def lookup(self, name: Name) -> Optional[Data]:
        entry = self._entries.get(name)
        return entry[0] if entry else None

    def accepts_unsolicited(self, data: Data) -> bool:
        return self.cache_unsolicited and is_ndvr_name(data.name)

    def names(self) -> List[Name]:
        return list(self._entries)


class DeadNonceList:
    """Bounded FIFO memory of (name, nonce) pairs already seen."""

    def __init__(self, capacity: int = DEFAULT_NONCE_MEMORY):
        self.capacity = capacity
        self._order = deque()
        self._seen = set()

    def __contains__(self, key) -> bool:
        return key in self._seen

    def add(self, key) -> None:
        if key in self._seen:
            return
        self._order.append(key)
        self._seen.add(key)
        if len(self._order) > self.capacity:
            self._seen.discard(self._order.popleft())


# ---------------------------------------------------------------------------
# Forwarder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    face_id: int
    packet: Packet


@dataclass(frozen=True)
class Drop:
    packet: Packet
    reason: str


@dataclass(frozen=True)
class Cache:
    packet: Data


class Forwarder:
    """
    Per-node forwarding engine.

    Every method is a function of the forwarder state and its arguments and
    returns a list of Send/Drop/Cache actions for the host to execute.
    """

    def __init__(self, node_id: int, cs_capacity: int = DEFAULT_CS_CAPACITY,
                 cache_unsolicited: bool = False, nonce_memory: int = DEFAULT_NONCE_MEMORY):
        self.node_id = node_id
        self.faces: Dict[int, Face] = {}
        self.fib = Fib()
        self.pit: Dict[Name, PitEntry] = {}
        self.cs = ContentStore(cs_capacity, cache_unsolicited)
        self.dead_nonces = DeadNonceList(nonce_memory)
        self.counters = Counter()
        self.unsolicited_cached: Set[Name] = set()

    def add_face(self, face: Face) -> Face:
        self.faces[face.face_id] = face
        return face

    def _is_local(self, face_id: int) -> bool:
        face = self.faces.get(face_id)
        return face is not None and face.local

    def _egress_allowed(self, face_id: int, in_face: int) -> bool:
        if face_id != in_face:
            return True
        face = self.faces.get(face_id)
        return face is not None and face.adhoc

    def forward_interest(self, interest: Interest, in_face: int, now: int) -> List:
        name = interest.name
        scoped = is_localhop(name) and not self._is_local(in_face)

        if not scoped:
            cached = self.cs.lookup(name)
            if cached is not None:
                self.counters["cs_hit"] += 1
                return [Send(in_face, cached)]

        key = (name, interest.nonce)
        if key in self.dead_nonces:
            self.counters["drop_duplicate_nonce"] += 1
            return [Drop(interest, "duplicate-nonce")]
        self.dead_nonces.add(key)

        hops = self.fib.lookup(name)
        if scoped:
            hops = {f for f in hops if self._is_local(f)}
            if not hops:
                self.counters["drop_localhop_scope"] += 1
                return [Drop(interest, "localhop-scope")]

        # pending entries aggregate before the route check
        expiry = now + interest.lifetime_ms * 1000
        entry = self.pit.get(name)
        if entry is not None and entry.expiry <= now:
            del self.pit[name]
            entry = None
        if entry is not None:
            retransmission = in_face in entry.in_faces
            entry.in_faces[in_face] = interest.nonce
            entry.expiry = max(entry.expiry, expiry)
            if not retransmission:
                self.counters["pit_aggregate"] += 1
                return []

        out_faces = sorted(f for f in hops if self._egress_allowed(f, in_face))
        if not out_faces:
            self.counters["drop_no_route"] += 1
            return [Drop(interest, "no-route")]
        if entry is None:
            self.pit[name] = PitEntry(name=name, in_faces={in_face: interest.nonce}, expiry=expiry)

        self.counters["interest_forwarded"] += 1
        return [Send(f, interest) for f in out_faces]

    def _cache(self, data: Data, now: int) -> None:
        for name in self.cs.insert(data, now):
            self.unsolicited_cached.discard(name)

    def handle_data(self, data: Data, in_face: int, now: int) -> List:
        entry = self.pit.get(data.name)
        if entry is not None and entry.expiry <= now:
            del self.pit[data.name]
            entry = None

        if entry is None:
            if self.cs.accepts_unsolicited(data):
                self._cache(data, now)
                self.unsolicited_cached.add(data.name)
                self.counters["cache_unsolicited"] += 1
                return [Cache(data)]
            self.counters["drop_unsolicited"] += 1
            return [Drop(data, "unsolicited")]

        del self.pit[data.name]
        self._cache(data, now)
        self.unsolicited_cached.discard(data.name)
        scoped = is_localhop(data.name) and not self._is_local(in_face)
        actions = []
        for face_id, nonce in sorted(entry.in_faces.items()):
            if scoped and not self._is_local(face_id):
                continue
            if not self._egress_allowed(face_id, in_face):
                continue
            if (face_id, nonce) in entry.delivered:
                continue
            entry.delivered.add((face_id, nonce))
            actions.append(Send(face_id, data))
        self.counters["data_forwarded"] += len(actions)
        return actions

    def expire_pit(self, now: int) -> List[PitEntry]:
        expired = [entry for entry in self.pit.values() if entry.expiry <= now]
        for entry in expired:
            del self.pit[entry.name]
        return expired


# ---------------------------------------------------------------------------
# Packet traces
# ---------------------------------------------------------------------------

class TraceDirection(Enum):
    TX = "TX"
    RX = "RX"
    DROP = "DROP"
    CACHE = "CACHE"


def format_trace_line(time_us: int, node_id: int, direction: TraceDirection, packet: Packet, size: int) -> str:
    kind = "I" if isinstance(packet, Interest) else "D"
    return f"{time_us},{node_id},{direction.value},{kind},{packet.name},{size}"
