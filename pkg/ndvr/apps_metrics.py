"""
apps_metrics.py

Description:
Simulation workloads and the metrics computed from their event log.

Workloads:
  - sync producer: publishes items at Poisson times and advertises each one
  - sync consumer: fetches every newly learned item, with bounded retries
  - CBR consumer/producer: constant-rate Interests towards fixed prefixes

Apps talk to their node through a small host interface: ``node_id``, ``label``,
``now``, ``schedule(delay_us, callback, label)``, ``express(name, on_data,
on_timeout, lifetime_ms)``, ``publish(name, content)``, ``advertise(prefix)``,
``serve(prefix, handler)`` and ``metrics``.

License:
MIT License
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from ndvr.ndn_minicore import Name

logger = logging.getLogger(__name__)

DELAYS_COLUMNS = ["node", "name", "delay_us"]
CDF_COLUMNS = ["delay_us", "fraction"]
SUMMARY_COLUMNS = ["metric", "value"]


class MetricKind(Enum):
    INTEREST_SENT = "INTEREST_SENT"
    DATA_PRODUCED = "DATA_PRODUCED"
    DATA_DELIVERED = "DATA_DELIVERED"
    DATA_UNDELIVERED = "DATA_UNDELIVERED"
    PKT_FORWARDED = "PKT_FORWARDED"
    NDVR_PKT = "NDVR_PKT"


@dataclass(frozen=True)
class MetricEvent:
    kind: MetricKind
    time: int
    node: int
    name: str
    size: int = 0
    sent_time: Optional[int] = None


class MetricsLog:
    """Append-only event log shared by every node of one run."""

    def __init__(self):
        self.events: List[MetricEvent] = []

    def __len__(self):
        return len(self.events)

    def record(self, kind: MetricKind, time: int, node: int, name, size: int = 0,
               sent_time: Optional[int] = None) -> None:
        self.events.append(MetricEvent(kind, time, node, str(name), size, sent_time))

    def count(self, kind: MetricKind) -> int:
        return sum(1 for e in self.events if e.kind is kind)


@dataclass
class ProducerConfig:
    base_prefix: str = "/ndn/dataSync"
    mean_interval_s: float = 40.0
    duration_s: float = 800.0
    payload_size: int = 100

    def __post_init__(self):
        if self.mean_interval_s <= 0 or self.duration_s < 0:
            raise ValueError("mean_interval_s must be positive and duration_s non-negative")


@dataclass
class CbrConfig:
    idt_ms: int = 100
    payload_size: int = 300
    duration_s: float = 100.0
    targets: List[str] = field(default_factory=list)
    # with no explicit targets: 0 asks every other node, k the next k nodes
    target_count: int = 0
    lifetime_ms: int = 4000

    def __post_init__(self):
        if self.idt_ms <= 0 or self.payload_size < 0 or self.lifetime_ms <= 0:
            raise ValueError("idt_ms and lifetime_ms must be positive, payload_size non-negative")
        if self.target_count < 0:
            raise ValueError("target_count must not be negative")


# ---------------------------------------------------------------------------
# Sync workload
# ---------------------------------------------------------------------------

class SyncProducer:
    """Publishes ``<base>/<node>/<seq>`` items at exponential intervals."""

    def __init__(self, node, config: ProducerConfig, rng: np.random.Generator):
        self.node = node
        self.config = config
        self.rng = rng
        self.prefix = Name.parse(config.base_prefix).append(node.label)
        self.seq = 0

    def _next_gap_us(self) -> int:
        return max(1, int(self.rng.exponential(self.config.mean_interval_s) * 1_000_000))

    def start(self) -> None:
        self.node.schedule(self._next_gap_us(), self.tick, "sync-producer")

    def tick(self) -> Optional[Name]:
        return sync_producer_tick(self, self.node.now)


def sync_producer_tick(producer: SyncProducer, now: int) -> Optional[Name]:
    """Publish one item, advertise it, and schedule the next generation."""
    horizon = int(producer.config.duration_s * 1_000_000)
    if now >= horizon:
        return None
    producer.seq += 1
    name = producer.prefix.append(producer.seq)
    node = producer.node
    node.publish(name, bytes(producer.config.payload_size))
    node.advertise(name)
    node.metrics.record(MetricKind.DATA_PRODUCED, now, node.node_id, name, producer.config.payload_size)
    gap = producer._next_gap_us()
    if now + gap < horizon:
        node.schedule(gap, producer.tick, "sync-producer")
    return name


@dataclass
class _Fetch:
    name: Name
    first_sent: int
    attempts: int = 0


class SeenItems:
    """
    Names the consumer has already started fetching.

    Item names end in a decimal sequence number; per origin prefix the
    contiguous run from 1 is folded into a watermark, so memory tracks
    the number of origins and gaps rather than the number of items.
    """

    def __init__(self):
        self._watermark: Dict[Name, int] = {}
        self._above: Dict[Name, Set[int]] = {}
        self._other: Set[Name] = set()

    @staticmethod
    def _split(name: Name) -> Tuple[Name, Optional[int]]:
        if len(name) and name[-1].isdigit() and int(name[-1]) > 0:
            return name[:-1], int(name[-1])
        return name, None

    def __contains__(self, name: Name) -> bool:
        origin, seq = self._split(name)
        if seq is None:
            return name in self._other
        return seq <= self._watermark.get(origin, 0) or seq in self._above.get(origin, ())

    def add(self, name: Name) -> None:
        origin, seq = self._split(name)
        if seq is None:
            self._other.add(name)
            return
        mark = self._watermark.get(origin, 0)
        above = self._above.setdefault(origin, set())
        above.add(seq)
        while mark + 1 in above:
            mark += 1
            above.discard(mark)
        above.difference_update({s for s in above if s <= mark})
        self._watermark[origin] = mark
        if not above:
            del self._above[origin]

    @property
    def stored(self) -> int:
        """Number of records held: one watermark per origin plus gaps."""
        return len(self._watermark) + sum(len(s) for s in self._above.values()) + len(self._other)


class SyncConsumer:
    """Fetches each learned item once; the delay runs from the first Interest."""

    def __init__(self, node, own_prefix: Name, retries: int = 3, retry_interval_ms: int = 1000):
        self.node = node
        self.own_prefix = own_prefix
        self.retries = retries
        self.retry_interval_ms = retry_interval_ms
        # in flight only; finished fetches live on in ``seen``
        self.fetches: Dict[Name, _Fetch] = {}
        self.seen = SeenItems()

    def on_prefix_learned(self, prefix: Name) -> bool:
        return sync_consumer_on_route(self, prefix)

    def _send(self, fetch: _Fetch) -> None:
        fetch.attempts += 1
        self.node.express(fetch.name, lambda data: self._on_data(fetch, data),
                          lambda: self._on_timeout(fetch), self.retry_interval_ms)

    def _on_data(self, fetch: _Fetch, data) -> None:
        node = self.node
        self.fetches.pop(fetch.name, None)
        node.metrics.record(MetricKind.DATA_DELIVERED, node.now, node.node_id, fetch.name,
                            len(data.content), sent_time=fetch.first_sent)

    def _on_timeout(self, fetch: _Fetch) -> None:
        if fetch.attempts <= self.retries:
            self._send(fetch)
            return
        node = self.node
        self.fetches.pop(fetch.name, None)
        logger.debug("node %s: %s undelivered after %d attempts", node.node_id, fetch.name, fetch.attempts)
        node.metrics.record(MetricKind.DATA_UNDELIVERED, node.now, node.node_id, fetch.name,
                            sent_time=fetch.first_sent)


def sync_consumer_on_route(consumer: SyncConsumer, prefix: Name) -> bool:
    """Start fetching a newly learned name; returns False when it is ours or already known."""
    if consumer.own_prefix.is_prefix_of(prefix) or prefix in consumer.seen:
        return False
    node = consumer.node
    fetch = _Fetch(prefix, first_sent=node.now)
    consumer.seen.add(prefix)
    consumer.fetches[prefix] = fetch
    node.metrics.record(MetricKind.INTEREST_SENT, node.now, node.node_id, prefix)
    consumer._send(fetch)
    return True


# ---------------------------------------------------------------------------
# CBR workload
# ---------------------------------------------------------------------------

class CbrProducer:
    """Answers every Interest under ``prefix`` with ``payload_size`` bytes."""

    def __init__(self, node, prefix: Name, payload_size: int):
        self.node = node
        self.prefix = prefix
        self.payload = bytes(payload_size)
        self.served = 0

    def start(self) -> None:
        self.node.serve(self.prefix, self.on_interest)
        self.node.advertise(self.prefix)

    def on_interest(self, interest) -> bytes:
        self.served += 1
        self.node.metrics.record(MetricKind.DATA_PRODUCED, self.node.now, self.node.node_id, interest.name,
                                 len(self.payload))
        return self.payload


class CbrConsumer:
    """Sends one Interest per target every ``idt_ms``."""

    def __init__(self, node, config: CbrConfig, targets: Sequence[Name]):
        self.node = node
        self.config = config
        self.targets = list(targets)
        self.seq = 0

    def start(self) -> None:
        self.node.schedule(0, self.tick, "cbr")

    def tick(self) -> None:
        node = self.node
        if node.now >= int(self.config.duration_s * 1_000_000):
            return
        self.seq += 1
        for target in self.targets:
            name = target.append(node.label, self.seq)
            sent = node.now
            node.metrics.record(MetricKind.INTEREST_SENT, sent, node.node_id, name)
            node.express(name, lambda data, n=name, t=sent: self._on_data(n, t, data),
                         lambda n=name, t=sent: self._on_timeout(n, t), self.config.lifetime_ms)
        node.schedule(self.config.idt_ms * 1000, self.tick, "cbr")

    def _on_data(self, name: Name, sent: int, data) -> None:
        self.node.metrics.record(MetricKind.DATA_DELIVERED, self.node.now, self.node.node_id, name,
                                 len(data.content), sent_time=sent)

    def _on_timeout(self, name: Name, sent: int) -> None:
        self.node.metrics.record(MetricKind.DATA_UNDELIVERED, self.node.now, self.node.node_id, name,
                                 sent_time=sent)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

@dataclass
class Summary:
    delays: pd.DataFrame
    cdf: pd.DataFrame
    metrics: Dict[str, float]


def summarize(events: Sequence[MetricEvent], duration_s: float, node_count: int = 1) -> Summary:
    """
    Reduce a metrics log to delay CDF, overhead, delivery rate and forwarding counts.

    Undelivered items are reported separately and stay out of the CDF.
    """
    delivered = [e for e in events if e.kind is MetricKind.DATA_DELIVERED]
    delays = pd.DataFrame(
        [(e.node, e.name, e.time - e.sent_time) for e in delivered],
        columns=DELAYS_COLUMNS,
    )
    ordered = np.sort(delays["delay_us"].to_numpy(dtype=np.int64))
    fractions = np.arange(1, len(ordered) + 1) / len(ordered) if len(ordered) else np.array([])
    cdf = pd.DataFrame({"delay_us": ordered, "fraction": fractions}, columns=CDF_COLUMNS)

    counts = {kind: 0 for kind in MetricKind}
    for e in events:
        counts[e.kind] += 1
    rate = counts[MetricKind.DATA_DELIVERED] / duration_s if duration_s > 0 else 0.0
    metrics = {
        "overhead_pkts": counts[MetricKind.NDVR_PKT],
        "delivered": counts[MetricKind.DATA_DELIVERED],
        "delivery_rate_pps": rate,
        "delivery_rate_pps_per_node": rate / node_count if node_count else 0.0,
        "forwarded_pkts": counts[MetricKind.PKT_FORWARDED],
        "undelivered": counts[MetricKind.DATA_UNDELIVERED],
    }
    return Summary(delays=delays, cdf=cdf, metrics=metrics)


def write_summary(summary: Summary, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    summary.delays.to_csv(out_dir / "delays.csv", index=False)
    summary.cdf.to_csv(out_dir / "cdf.csv", index=False)
    rows = pd.DataFrame(list(summary.metrics.items()), columns=SUMMARY_COLUMNS)
    rows.to_csv(out_dir / "summary.csv", index=False)


def confidence_interval(values: Sequence[float], level: float = 0.95) -> Tuple[float, float]:
    """
    Student-t confidence interval for the mean.

    Returns:
        tuple: (mean, half width); the half width is 0.0 for a single value
    """
    data = np.asarray(values, dtype=float)
    if data.size == 0:
        raise ValueError("confidence_interval needs at least one value")
    mean = float(data.mean())
    if data.size == 1:
        return mean, 0.0
    sem = float(data.std(ddof=1)) / math.sqrt(data.size)
    return mean, float(stats.t.ppf((1 + level) / 2, data.size - 1)) * sem
