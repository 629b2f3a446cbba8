import math
import pytest
import numpy as np

from aquobs.network import Link, Node, ReactionParams, WaterNetwork, build_profile
from aquobs.dynamics import Scenario

# radius giving a unit cross-section, so flow and velocity coincide
UNIT_RADIUS = 1.0 / math.sqrt(math.pi)


def pipe(pid: str, a: str, b: str, length: float = 1.0, radius: float = UNIT_RADIUS) -> Link:
    return Link(id=pid, kind="pipe", from_node=a, to_node=b, length=length, radius=radius)


def make_network(nodes: list[tuple[str, str]], links: list[Link], **reactions) -> WaterNetwork:
    return WaterNetwork(
        nodes=tuple(Node(id=nid, kind=kind) for nid, kind in nodes),
        links=tuple(links),
        reactions=ReactionParams(**reactions),
    )


def series(values, n_steps: int) -> np.ndarray:
    values = np.atleast_1d(np.asarray(values, dtype=float))
    return np.resize(values, n_steps)


def profile(net: WaterNetwork, dt_h: float, n_steps: int, flows: dict, demands: dict | None = None,
            volumes: dict | None = None, booster_flows: dict | None = None):
    """Hydraulic profile from per-id constants or per-step lists."""
    to_series = lambda d: None if d is None else {k: series(v, n_steps) for k, v in d.items()}
    return build_profile(
        net, dt_h, to_series(flows), demands=to_series(demands), volumes=to_series(volumes),
        booster_flows=to_series(booster_flows),
    )


def scenario(sid: str = "s", ts: float = 4.0, dt_wq: float = 1.0, dt_h: float = 10.0, **kwargs) -> Scenario:
    return Scenario(id=sid, ts=ts, dt_wq=dt_wq, dt_h=dt_h, **kwargs)


def line_pipe(length: float = 2.0, flows=(0.5, 1.0), dt_h: float = 10.0, **reactions):
    """R1 -> P1 -> J1 with J1 consuming the pipe flow."""
    net = make_network([("R1", "reservoir"), ("J1", "junction")], [pipe("P1", "R1", "J1", length)], **reactions)
    hyd = profile(net, dt_h, len(flows), {"P1": list(flows)}, demands={"J1": list(flows)})
    return net, hyd


def mixed_network(alpha_b=0.001, alpha_w=0.001, alpha_f=0.002, alpha_r=0.002):
    """Reservoir, three junctions, a tank, a valve and four pipes over two hydraulic steps.

    Step 1 carries half the flows of step 0; dt_h = 4 s and every pipe is 3 m long.
    """
    net = make_network(
        [("R1", "reservoir"), ("J1", "junction"), ("J2", "junction"), ("J3", "junction"), ("T1", "tank")],
        [
            pipe("P1", "R1", "J1", 3.0),
            pipe("P2", "J1", "J2", 3.0),
            pipe("P3", "J1", "T1", 3.0),
            pipe("P4", "T1", "J2", 3.0),
            Link(id="V1", kind="valve", from_node="J2", to_node="J3"),
        ],
        alpha_b=alpha_b, alpha_w=alpha_w, alpha_f=alpha_f, alpha_r=alpha_r,
    )
    hyd = profile(
        net, 4.0, 2,
        flows={"P1": [0.9, 0.45], "P2": [0.4, 0.2], "P3": [0.5, 0.25], "P4": [0.3, 0.15], "V1": [0.2, 0.1]},
        demands={"J2": [0.5, 0.25], "J3": [0.2, 0.1]},
        volumes={"T1": [5.0, 5.8]},
    )
    return net, hyd


def ring_network():
    """Closed loop J1 -> P1 -> T1 -> P2 -> J2 -> P3 -> J3 -> P4 -> J1 with unit flow and no demand."""
    net = make_network(
        [("J1", "junction"), ("T1", "tank"), ("J2", "junction"), ("J3", "junction")],
        [pipe("P1", "J1", "T1", 3.0), pipe("P2", "T1", "J2", 3.0), pipe("P3", "J2", "J3", 2.0),
         pipe("P4", "J3", "J1", 1.5)],
    )
    hyd = profile(net, 400.0, 1, flows={"P1": 1.0, "P2": 1.0, "P3": 1.0, "P4": 1.0}, volumes={"T1": 4.0})
    return net, hyd


def reversing_line(n_junctions: int = 8, dt_h: float = 20.0):
    """R1 - J1 .. Jn - R2 with 2 m pipes and two mirrored single-step profiles.

    The first profile is fed from R1 only, the second from R2 only; each
    junction draws 0.1 m³/s.
    """
    ids = [f"J{i}" for i in range(1, n_junctions + 1)]
    chain = ["R1"] + ids + ["R2"]
    nodes = [("R1", "reservoir")] + [(nid, "junction") for nid in ids] + [("R2", "reservoir")]
    links = [pipe(f"P{i}", chain[i], chain[i + 1], 2.0) for i in range(len(chain) - 1)]
    net = make_network(nodes, links)
    total = 0.1 * n_junctions
    forward = [total - 0.1 * i for i in range(len(links))]
    demands = {nid: 0.1 for nid in ids}
    left = {link.id: forward[i] for i, link in enumerate(links)}
    right = {link.id: -forward[len(links) - 1 - i] for i, link in enumerate(links)}
    return net, profile(net, dt_h, 1, left, demands), profile(net, dt_h, 1, right, demands)


def random_tree(rng: np.random.Generator, max_junctions: int = 6, tank: bool = False, pump: bool = False,
                **reactions):
    """Reservoir-fed random tree with positive demands and balanced flows.

    Every pipe is as long as its flow, so all travel times are one second.
    With `tank`, a filling tank T0 hangs below a random junction and feeds
    one more junction; with `pump`, the link leaving the reservoir is a pump.
    """
    n = int(rng.integers(2, max_junctions + 1))
    ids = [f"J{i}" for i in range(n)]
    parents = ["R0"] + [ids[int(rng.integers(i))] for i in range(1, n)]
    demands = rng.uniform(0.1, 1.0, size=n)
    nodes = [("R0", "reservoir")] + [(nid, "junction") for nid in ids]
    extra = np.zeros(n)
    links, flows, volumes = [], {}, None
    if tank:
        feed, drain = rng.uniform(0.5, 1.0), rng.uniform(0.1, 0.4)
        host, sink = int(rng.integers(n)), f"J{n}"
        extra[host] = feed
        nodes += [("T0", "tank"), (sink, "junction")]
        flows.update({"PT0": feed, "PT1": drain})
        links += [pipe("PT0", ids[host], "T0", feed), pipe("PT1", "T0", sink, drain)]
        demands = np.append(demands, drain)
        volumes = {"T0": rng.uniform(1.0, 5.0)}
    for i in range(n - 1, -1, -1):
        children = sum(flows[f"P{j}"] for j in range(i + 1, n) if parents[j] == ids[i])
        flows[f"P{i}"] = demands[i] + extra[i] + children
    links += [pipe(f"P{i}", parents[i], ids[i], flows[f"P{i}"]) for i in range(n)]
    if pump:
        flows["U0"] = flows.pop("P0")
        links = [Link(id="U0", kind="pump", from_node="R0", to_node="J0") if link.id == "P0" else link
                 for link in links]
    net = make_network(nodes, links, **reactions)
    all_ids = [nid for nid, kind in nodes if kind == "junction"]
    return net, profile(net, 1.0, 1, flows, demands=dict(zip(all_ids, demands)), volumes=volumes)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


def random_atoms_factors(rng: np.random.Generator, n_cand: int, n_x: int, n_steps: int = 3,
                         rows: int = 1) -> np.ndarray:
    return rng.normal(size=(n_cand, n_steps, rows, n_x))
