import itertools
import math
import random
from collections import Counter
from dataclasses import replace
from pathlib import Path

import networkx as nx
import pytest

from ndvr.apps_metrics import CbrConfig, MetricKind, ProducerConfig, confidence_interval
from ndvr.cli import compare
from ndvr.ndn_minicore import Interest, Name, Send, encode_packet, is_ndvr_name
from ndvr.ndvr_core import NeighborEntry, RouterName, dvinfo_name
from ndvr.scenario import ConfigError, ForwardingMode, NodeSpec, WorkloadConfig, WorkloadKind, load_scenario
from ndvr.simnet import Frame
from ndvr.simulation import FACE_BROADCAST, InvariantError, Simulation, is_key_name

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def scenario(name, **changes):
    config = load_scenario(SCENARIOS / name)
    return replace(config, **changes) if changes else config


def unit_disk_graph(config):
    graph = nx.Graph()
    graph.add_nodes_from(spec.name for spec in config.nodes)
    for a, b in itertools.combinations(config.nodes, 2):
        if math.hypot(a.x - b.x, a.y - b.y) <= config.radio.range_m:
            graph.add_edge(a.name, b.name)
    return graph


def hop_label(nexthop):
    return RouterName.from_name(Name.parse(nexthop)).label.decode()


def assert_routes_match_bfs(sim, graph):
    for node in sim.nodes:
        distances = nx.single_source_shortest_path_length(graph, node.label)
        rows = {prefix: (cost, nexthop) for prefix, cost, _, nexthop, _ in sim.routes(node.label)}
        assert {prefix: cost for prefix, (cost, _) in rows.items()} == {
            f"/ndn/{label}": hops for label, hops in distances.items()}
        for label, hops in distances.items():
            prefix = f"/ndn/{label}"
            if hops == 0:
                assert rows[prefix][1] == "LOCAL"
                continue
            hop = hop_label(rows[prefix][1])
            assert nx.shortest_path_length(graph, hop, label) == hops - 1
            expected_face = node.unicast_face(sim[hop].node_id)
            assert node.forwarder.fib.next_hops(Name.parse(prefix)) == {expected_face}


def parse_trace(lines):
    rows = []
    for line in lines:
        time, node, direction, kind, name, size = line.split(",")
        rows.append((int(time), int(node), direction, kind, name, int(size)))
    return rows


# --- routing on static topologies ---------------------------------------------

def test_static_chain_converges_to_hop_counts():
    config = scenario("chain.scn")
    sim = Simulation(config)
    sim.run(5 * config.ndvr.ehlo_interval_s)
    assert_routes_match_bfs(sim, unit_disk_graph(config))


def test_prioritized_exchange_packet_flow():
    lines = []
    sim = Simulation(scenario("neighborhood.scn"), trace=lines.append)
    a, b, c, d = (sim[label] for label in "ABCD")
    sim.start(beacons=False)

    # A sits at version 10 and knows B, C, D in that order; they last saw version 9
    a.router.table.version = 9
    a.router.table.commit()
    for order, peer in enumerate((b, c, d)):
        a.router.neighbors[peer.router_name] = NeighborEntry(
            peer.router_name, last_seen=0, first_seen=order, face_id=a.unicast_face(peer.node_id))
        peer.router.neighbors[a.router_name] = NeighborEntry(
            a.router_name, last_seen=0, first_seen=0, face_id=peer.unicast_face(a.node_id), last_version=9)

    sim.scheduler.call_at(0, a.send_ehlo)
    sim.scheduler.run_until(1_000_000)

    target = str(dvinfo_name(a.router_name, 10))
    rows = [row for row in parse_trace(lines) if row[4] == target]
    interests_tx = [row for row in rows if row[2] == "TX" and row[3] == "I"]
    data_tx = [row for row in rows if row[2] == "TX" and row[3] == "D"]
    cached = [row for row in rows if row[2] == "CACHE"]

    assert sorted(row[1] for row in interests_tx) == [b.node_id, c.node_id]
    assert [row[1] for row in data_tx] == [a.node_id]
    assert [row[1] for row in cached] == [d.node_id]
    assert cached[0][0] > data_tx[0][0]
    assert not [row for row in interests_tx if row[1] == d.node_id]
    # D still took the table in, from its cache
    for peer in (b, c, d):
        assert Name.parse("/ndn/A") in peer.router.table
        assert peer.router.neighbors[a.router_name].last_version == 10


def test_localhop_packets_never_relayed():
    lines = []
    sim = Simulation(scenario("chain.scn"), trace=lines.append)
    sim.run(5.0)
    rows = parse_trace(lines)
    owners = {str(node.router_name): node.node_id for node in sim.nodes}
    for time, node, direction, kind, name, _ in rows:
        if direction != "TX" or not name.startswith("/localhop/ndvr/"):
            continue
        parsed = Name.parse(name)
        if parsed[2] == b"ehlo":
            assert owners[str(RouterName.from_name(parsed[3:-3]))] == node
        elif kind == "D":
            assert owners[str(RouterName.from_name(parsed[3:-1]))] == node


def test_silenced_neighbor_removed_within_window():
    config = scenario("neighborhood.scn", seed=3)
    sim = Simulation(config)
    sim.run(3.0)
    silent = sim["B"]
    silent.stop()
    sim.run(10.0)

    timeout = config.ndvr.neighbor_timeout_us
    interval = config.ndvr.ehlo_interval_us
    for label in "ACD":
        node = sim[label]
        (removed_at, _, heard_at), = [r for r in node.removals if r[1] == silent.router_name]
        assert timeout < removed_at - heard_at <= timeout + interval
        assert silent.router_name not in node.router.neighbors
        assert "/ndn/B" not in [row[0] for row in sim.routes(label)]


def watch_tables(sim, violations, period_us=100_000):
    """Sample every table periodically, recording sequence regressions and costs above n - 1."""
    bound = len(sim.nodes) - 1
    previous = {}

    def sample():
        for node in sim.nodes:
            for entry in node.router.table.entries.values():
                key = (node.label, entry.prefix)
                earlier = previous.get(key)
                if earlier is not None and entry.seq_num < earlier:
                    violations.append(("seq", sim.scheduler.now, key))
                if entry.cost > bound:
                    violations.append(("cost", sim.scheduler.now, key, entry.cost))
                previous[key] = entry.seq_num
        sim.scheduler.call_later(period_us, sample)

    sim.scheduler.call_later(0, sample)


def test_link_cut_keeps_sequence_numbers_and_costs_bounded():
    config = scenario("chain.scn")
    sim = Simulation(config)
    violations = []
    sim.start()
    watch_tables(sim, violations)
    sim.run(5.0)
    sim.mobility.positions[3] = (290.0, 290.0)
    sim.run(12.0)
    assert Name.parse("/ndn/D") not in sim["C"].router.table
    sim.mobility.positions[3] = (150.0, 0.0)
    sim.run(20.0)

    assert violations == []
    assert_routes_match_bfs(sim, unit_disk_graph(config))


def random_connected_placement(rng, size, range_m, side=150.0):
    """Grow a placement node by node, each new node within range of an earlier one."""
    points = [(rng.uniform(0, side), rng.uniform(0, side))]
    while len(points) < size:
        x0, y0 = rng.choice(points)
        angle = rng.uniform(0, 2 * math.pi)
        distance = rng.uniform(0.3, 0.9) * range_m
        x, y = x0 + distance * math.cos(angle), y0 + distance * math.sin(angle)
        if 0 <= x <= side and 0 <= y <= side:
            points.append((x, y))
    return points


@pytest.mark.parametrize("seed", [3, 17])
def test_link_cut_on_random_topology(seed):
    rng = random.Random(seed)
    base = scenario("chain.scn")
    points = random_connected_placement(rng, 6, base.radio.range_m)
    config = replace(base, nodes=[NodeSpec(label, x, y) for label, (x, y) in zip("ABCDEF", points)], seed=seed)
    graph = unit_disk_graph(config)
    assert nx.is_connected(graph)

    sim = Simulation(config)
    violations = []
    sim.start()
    watch_tables(sim, violations)
    sim.run(10.0)
    assert_routes_match_bfs(sim, graph)

    moved = sim[rng.choice("ABCDEF")]
    home = tuple(sim.mobility.positions[moved.node_id])
    sim.mobility.positions[moved.node_id] = (290.0, 290.0)
    sim.run(16.0)
    assert all(entry.is_local for entry in moved.router.table.entries.values())
    for node in sim.nodes:
        assert moved.router_name not in node.router.neighbors
        assert all(entry.next_hop != moved.router_name for entry in node.router.table.entries.values())

    sim.mobility.positions[moved.node_id] = home
    sim.run(30.0)
    assert violations == []
    assert_routes_match_bfs(sim, graph)


def test_relaying_a_localhop_packet_is_an_invariant_breach(mocker):
    sim = Simulation(scenario("neighborhood.scn"))
    node = sim["A"]
    ehlo = Interest(Name.parse("/localhop/ndvr/ehlo/ufba/%C1.Router/B/1/1/0000000000000000"), nonce=5)
    mocker.patch.object(node.forwarder, "forward_interest", return_value=[Send(FACE_BROADCAST, ehlo)])
    with pytest.raises(InvariantError):
        node.receive(Frame(1, encode_packet(ehlo)))


# --- determinism ---------------------------------------------------------------

@pytest.mark.parametrize("name, seconds", [("chain.scn", 4.0), ("neighborhood.scn", 4.0), ("forwarding.scn", 2.0)])
def test_same_seed_gives_identical_runs(name, seconds):
    runs = []
    for _ in range(2):
        lines = []
        sim = Simulation(scenario(name), trace=lines.append, keep_event_log=True)
        sim.run(seconds)
        runs.append((lines, sim.scheduler.log, sim.mobility_rows))
    assert runs[0] == runs[1]
    assert runs[0][0]


def test_different_seeds_differ():
    traces = []
    for seed in (7, 8):
        lines = []
        Simulation(scenario("neighborhood.scn", seed=seed), trace=lines.append).run(2.0)
        traces.append(lines)
    assert traces[0] != traces[1]


def test_mobility_rows_each_second():
    sim = Simulation(scenario("forwarding.scn"))
    sim.run(3.0)
    seconds = [row[0] for row in sim.mobility_rows]
    assert sorted(set(seconds))[:3] == [0, 1, 2]
    assert all(seconds.count(t) == 15 for t in set(seconds))
    assert all(0 <= x <= 300 and 0 <= y <= 300 for _, _, x, y in sim.mobility_rows)


# --- workloads -------------------------------------------------------------------

def cbr_towards_d(mode, duration_s):
    workload = WorkloadConfig(kind=WorkloadKind.CBR, cbr=CbrConfig(idt_ms=500, duration_s=duration_s, targets=["D"]))
    return scenario("chain.scn", forwarding=mode, workload=workload)


def test_default_route_floods_and_delivers():
    sim = Simulation(cbr_towards_d(ForwardingMode.MULTICAST_DEFAULT_ROUTE, 3.0))
    metrics = sim.run(5.0).metrics
    # A, B and C each ask D six times
    assert metrics["delivered"] == 18
    assert metrics["undelivered"] == 0
    assert metrics["overhead_pkts"] == 0
    assert all(sim.routes(label) == [] for label in "ABCD")


def test_ndvr_routes_application_traffic():
    sim = Simulation(cbr_towards_d(ForwardingMode.NDVR_MULTICAST, 8.0))
    sim.run(10.0)
    events = sim.metrics.events
    late_sent = [e for e in events if e.kind is MetricKind.INTEREST_SENT and e.time >= 6_000_000]
    late_delivered = [e for e in events if e.kind is MetricKind.DATA_DELIVERED and e.sent_time >= 6_000_000]
    assert len(late_sent) == 12
    assert sorted(e.name for e in late_delivered) == sorted(e.name for e in late_sent)
    # three hops out and back take longer than a single frame
    one_frame = sim.config.radio.tx_delay(0)
    assert all(e.time - e.sent_time > 6 * one_frame for e in late_delivered if e.node == sim["A"].node_id)
    assert sim.summary().metrics["overhead_pkts"] > 0


def test_sync_workload_delivers_every_item():
    workload = WorkloadConfig(kind=WorkloadKind.SYNC_POISSON,
                              producer=ProducerConfig(mean_interval_s=2.0, duration_s=10.0))
    sim = Simulation(scenario("neighborhood.scn", workload=workload))
    metrics = sim.run(14.0).metrics
    events = sim.metrics.events
    produced = [e for e in events if e.kind is MetricKind.DATA_PRODUCED]
    delivered = [e for e in events if e.kind is MetricKind.DATA_DELIVERED]
    assert produced
    assert metrics["undelivered"] == 0
    assert len(delivered) == 3 * len(produced)
    for event in delivered:
        owner = Name.parse(event.name)[2].decode()
        assert owner != sim.nodes[event.node].label
    assert len({(e.node, e.name) for e in delivered}) == len(delivered)


@pytest.mark.parametrize("name", ["chain.scn", "neighborhood.scn"])
def test_overhead_matches_ndvr_transmissions_in_trace(name):
    lines = []
    sim = Simulation(scenario(name), trace=lines.append)
    summary = sim.run(6.0)

    traced = Counter(node for _, node, direction, _, packet_name, _ in parse_trace(lines)
                     if direction == "TX" and is_ndvr_name(Name.parse(packet_name)))
    recorded = Counter(e.node for e in sim.metrics.events if e.kind is MetricKind.NDVR_PKT)
    assert traced == recorded
    assert set(traced) == {node.node_id for node in sim.nodes}
    assert summary.metrics["overhead_pkts"] == sum(traced.values())


def test_keys_are_fetched_and_cached():
    sim = Simulation(scenario("chain.scn"))
    sim.run(5.0)
    b = sim["B"]
    assert set(b.trust.cached_keys) == {sim["A"].key_name, sim["C"].key_name}
    assert b.counters["dvinfo_rejected"] == 0
    assert is_key_name(sim["A"].key_name)


def test_unknown_cbr_target_rejected():
    workload = WorkloadConfig(kind=WorkloadKind.CBR, cbr=CbrConfig(targets=["Z"]))
    with pytest.raises(ConfigError, match="unknown CBR targets"):
        Simulation(scenario("chain.scn", workload=workload))


# --- forwarding comparison --------------------------------------------------------

@pytest.mark.slow
def test_ndvr_beats_default_route_under_group_mobility():
    # the shared-medium variant, lightened to one flow per node
    config = scenario("forwarding_contention.scn")
    cbr = replace(config.workload.cbr, duration_s=60.0, target_count=1)
    config = replace(config, nodes=[NodeSpec(str(i)) for i in range(10)], duration_s=60.0,
                     workload=replace(config.workload, cbr=cbr))
    results = compare(config, list(range(1, 11)))

    def interval(mode, column):
        values = results[results["mode"] == mode.value][column]
        mean, half = confidence_interval(values)
        return mean - half, mean + half

    ndvr_rate = interval(ForwardingMode.NDVR_MULTICAST, "delivery_rate_pps")
    flood_rate = interval(ForwardingMode.MULTICAST_DEFAULT_ROUTE, "delivery_rate_pps")
    assert ndvr_rate[0] > flood_rate[1]

    ndvr_forwarded = interval(ForwardingMode.NDVR_MULTICAST, "forwarded_pkts")
    flood_forwarded = interval(ForwardingMode.MULTICAST_DEFAULT_ROUTE, "forwarded_pkts")
    assert ndvr_forwarded[1] < flood_forwarded[0]
