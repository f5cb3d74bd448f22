"""
scenario.py

Description:
Scenario files and the typed configuration they produce.

A scenario is a flat sectioned ``key = value`` file:

    [arena]
    width = 300
    height = 300

    [nodes]
    count = 10          # or one line per node: A = 0, 0[, range_m]

    [run]
    duration_s = 60
    seed = 1

Sections: arena, nodes, mobility, radio, ndvr, forwarding, workload, run.
``#`` and ``;`` start comments. Every error is reported with its line number.

License:
MIT License
"""

import logging
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from ndvr.apps_metrics import CbrConfig, ProducerConfig
from ndvr.ndn_minicore import Name
from ndvr.ndvr_core import CostStrategy, NdvrConfig
from ndvr.simnet import MobilityConfig, MobilityModel, RadioModel

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Raised when a scenario file cannot be turned into a ScenarioConfig"""

    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}")
        self.message = message
        self.line = line


class ForwardingMode(Enum):
    MULTICAST_DEFAULT_ROUTE = "MULTICAST_DEFAULT_ROUTE"
    NDVR_MULTICAST = "NDVR_MULTICAST"


class WorkloadKind(Enum):
    SYNC_POISSON = "SYNC_POISSON"
    CBR = "CBR"
    STATIC = "STATIC"


class TraceLevel(Enum):
    NONE = "none"
    PKT = "pkt"
    FULL = "full"


@dataclass
class NodeSpec:
    name: str
    x: Optional[float] = None
    y: Optional[float] = None
    range_m: Optional[float] = None

    @property
    def placed(self) -> bool:
        return self.x is not None and self.y is not None


@dataclass
class WorkloadConfig:
    kind: WorkloadKind = WorkloadKind.STATIC
    # STATIC: each node advertises <prefix>/<node>
    prefix: str = "/ndn"
    producer: ProducerConfig = field(default_factory=ProducerConfig)
    cbr: CbrConfig = field(default_factory=CbrConfig)


@dataclass
class ScenarioConfig:
    nodes: List[NodeSpec]
    duration_s: float
    arena: Tuple[float, float] = (300.0, 300.0)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    radio: RadioModel = field(default_factory=RadioModel)
    ndvr: NdvrConfig = field(default_factory=NdvrConfig)
    forwarding: ForwardingMode = ForwardingMode.NDVR_MULTICAST
    cs_capacity: int = 256
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    seed: Optional[int] = None
    trace_level: TraceLevel = TraceLevel.PKT

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("a scenario needs at least one node")
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("node names must be unique")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.arena[0] <= 0 or self.arena[1] <= 0:
            raise ValueError("arena dimensions must be positive")
        if self.cs_capacity < 1:
            raise ValueError("cs_capacity must be at least 1")
        if self.seed is not None and self.seed < 0:
            raise ValueError("seed must not be negative")

    @property
    def node_names(self) -> List[str]:
        return [n.name for n in self.nodes]


# ---------------------------------------------------------------------------
# Value converters
# ---------------------------------------------------------------------------

def _bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _enum(cls) -> Callable[[str], Enum]:
    def convert(value: str):
        for member in cls:
            if value.upper() == member.name or value == member.value:
                return member
        choices = ", ".join(m.name for m in cls)
        raise ValueError(f"expected one of {choices}, got {value!r}")
    return convert


def _list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _prefix(value: str) -> str:
    """Accept only text that parses as a Name (no empty components)."""
    Name.parse(value)
    return value


def _network(value: str) -> str:
    if not Name.parse(value):
        raise ValueError(f"network needs at least one component, got {value!r}")
    return value


def _seed(value: str) -> int:
    seed = int(value)
    if seed < 0:
        raise ValueError(f"seed must not be negative, got {seed}")
    return seed


_SCHEMA: Dict[str, Dict[str, Callable[[str], object]]] = {
    "arena": {"width": float, "height": float},
    "mobility": {
        "model": _enum(MobilityModel), "speed_min": float, "speed_max": float, "leg_s": float,
        "step_ms": int, "group_mean": float, "group_sd": float, "offset_max_m": float,
    },
    "radio": {
        "range_m": float, "loss_prob": float, "preamble_us": int, "bitrate_bps": int,
        "contention": _bool, "queue_limit": int,
    },
    "ndvr": {
        "ehlo_interval_s": float, "ehlo_multiplier": int, "subgroup_size": int, "backoff_min_ms": int,
        "backoff_max_ms": int, "reply_delay_ms": int, "start_jitter_max_ms": int, "dvinfo_lifetime_ms": int,
        "cost_strategy": _enum(CostStrategy), "network": _network,
    },
    "forwarding": {"mode": _enum(ForwardingMode), "cs_capacity": int},
    "workload": {
        "kind": _enum(WorkloadKind), "prefix": _prefix, "base_prefix": _prefix, "mean_interval_s": float,
        "duration_s": float, "payload_size": int, "idt_ms": int, "targets": _list, "target_count": int,
        "lifetime_ms": int,
    },
    "run": {"duration_s": float, "seed": _seed, "trace_level": _enum(TraceLevel)},
}

_PRODUCER_KEYS = {f.name for f in fields(ProducerConfig)}
_CBR_KEYS = {f.name for f in fields(CbrConfig)}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

@dataclass
class _Section:
    line: int
    values: Dict[str, Tuple[object, int]] = field(default_factory=dict)

    def get(self, key: str, default=None):
        entry = self.values.get(key)
        return default if entry is None else entry[0]

    def plain(self) -> Dict[str, object]:
        return {key: value for key, (value, _) in self.values.items()}


def _strip_comment(text: str) -> str:
    for marker in ("#", ";"):
        index = text.find(marker)
        if index >= 0:
            text = text[:index]
    return text.strip()


def _parse_node(key: str, value: str, line: int) -> NodeSpec:
    parts = _list(value)
    if len(parts) not in (2, 3):
        raise ConfigError(f"node {key} needs 'x, y' or 'x, y, range_m'", line)
    try:
        numbers = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"node {key} coordinates must be numbers, got {value!r}", line)
    return NodeSpec(key, numbers[0], numbers[1], numbers[2] if len(numbers) == 3 else None)


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse scenario text; see the module docstring for the format."""
    sections: Dict[str, _Section] = {}
    nodes: List[NodeSpec] = []
    node_count: Optional[Tuple[int, int]] = None
    current: Optional[str] = None
    last_line = 0

    for number, raw in enumerate(text.splitlines(), start=1):
        last_line = number
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", number)
            current = line[1:-1].strip().lower()
            if current != "nodes" and current not in _SCHEMA:
                raise ConfigError(f"unknown section [{current}]", number)
            if current in sections:
                raise ConfigError(f"section [{current}] given twice", number)
            sections[current] = _Section(number)
            continue
        if current is None:
            raise ConfigError("key outside of any section", number)
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"expected 'key = value', got {line!r}", number)

        section = sections[current]
        if current == "nodes":
            if key == "count":
                try:
                    node_count = (int(value), number)
                except ValueError:
                    raise ConfigError(f"count must be an integer, got {value!r}", number)
            else:
                if any(n.name == key for n in nodes):
                    raise ConfigError(f"node {key} given twice", number)
                nodes.append(_parse_node(key, value, number))
            continue

        converter = _SCHEMA[current].get(key)
        if converter is None:
            raise ConfigError(f"unknown key {key!r} in [{current}]", number)
        if key in section.values:
            raise ConfigError(f"key {key!r} given twice in [{current}]", number)
        try:
            section.values[key] = (converter(value), number)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}", number)

    if not sections:
        raise ConfigError("empty scenario", last_line)
    return _build(sections, nodes, node_count, last_line)


def _construct(factory, kwargs: Dict[str, object], line: int, what: str):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {what}: {e}", line)


def _build(sections: Dict[str, _Section], nodes: List[NodeSpec], node_count: Optional[Tuple[int, int]],
           last_line: int) -> ScenarioConfig:
    if "nodes" not in sections:
        raise ConfigError("missing required section [nodes]", last_line)
    if node_count is not None:
        count, line = node_count
        if nodes:
            raise ConfigError("use either count or explicit nodes, not both", line)
        if count < 1:
            raise ConfigError("count must be at least 1", line)
        nodes = [NodeSpec(str(i)) for i in range(count)]
    if not nodes:
        raise ConfigError("missing required field: no nodes defined", sections["nodes"].line)

    run = sections.get("run")
    if run is None or "duration_s" not in run.values:
        raise ConfigError("missing required field: [run] duration_s", run.line if run else last_line)

    empty = _Section(last_line)
    arena = sections.get("arena", empty)
    mobility = sections.get("mobility", empty)
    radio = sections.get("radio", empty)
    ndvr = sections.get("ndvr", empty)
    forwarding = sections.get("forwarding", empty)
    workload = sections.get("workload", empty)

    width, height = arena.get("width", 300.0), arena.get("height", 300.0)
    for node in nodes:
        if node.placed and not (0 <= node.x <= width and 0 <= node.y <= height):
            raise ConfigError(f"node {node.name} lies outside the arena", sections["nodes"].line)

    values = workload.plain()
    producer = _construct(ProducerConfig, {k: v for k, v in values.items() if k in _PRODUCER_KEYS},
                          workload.line, "workload")
    cbr = _construct(CbrConfig, {k: v for k, v in values.items() if k in _CBR_KEYS}, workload.line, "workload")
    workload_config = WorkloadConfig(kind=values.get("kind", WorkloadKind.STATIC),
                                     prefix=values.get("prefix", "/ndn"), producer=producer, cbr=cbr)

    return _construct(ScenarioConfig, dict(
        nodes=nodes,
        duration_s=run.get("duration_s"),
        arena=(width, height),
        mobility=_construct(MobilityConfig, mobility.plain(), mobility.line, "[mobility]"),
        radio=_construct(RadioModel, radio.plain(), radio.line, "[radio]"),
        ndvr=_construct(NdvrConfig, ndvr.plain(), ndvr.line, "[ndvr]"),
        forwarding=forwarding.get("mode", ForwardingMode.NDVR_MULTICAST),
        cs_capacity=forwarding.get("cs_capacity", 256),
        workload=workload_config,
        seed=run.get("seed"),
        trace_level=run.get("trace_level", TraceLevel.PKT),
    ), run.line, "scenario")


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")
    config = parse_scenario(text)
    logger.info("loaded scenario %s: %d nodes, %s s, %s", path, len(config.nodes), config.duration_s,
                config.forwarding.value)
    return config
