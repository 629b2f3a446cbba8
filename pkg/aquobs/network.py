#!/usr/bin/env python3

"""Module containing the network data model and its input readers.

This module defines the water network graph, the hydraulic profile that
parameterizes the water quality dynamics, and the pipe segmentation that
fixes the size of the state vector.

Methods:
    - validate_network : Check the structural invariants of a WaterNetwork.
    - parse_network : Build a WaterNetwork from the JSON network document.
    - serialize_network : Render a WaterNetwork as a JSON network document.
    - parse_inp_topology : Import topology and pipe geometry from an INP document.
    - build_profile : Assemble and validate a HydraulicProfile from arrays.
    - check_mass_balance : Verify junction flow balance at every hydraulic step.
    - load_hydraulics : Build a HydraulicProfile from the hydraulics CSV document.
    - hydraulics_frame : Render a HydraulicProfile in the hydraulics CSV layout.
    - segment_pipes : Compute the CFL-safe pipe segmentation.
    - species_index : Resolve a species name or position to its block position.
"""

# Standard imports
import json as _json
import math as _math
import numpy as _np
import pandas as _pd
from logging import getLogger as _getLogger
from dataclasses import dataclass as _dataclass, field as _field, replace as _replace
from collections.abc import Mapping as _Mapping
from scipy.sparse import coo_matrix as _coo_matrix
from scipy.sparse.csgraph import connected_components as _connected_components

# Module imports
from . import common as _common, _EXIT_MSG, SPECIES
from .common import ParseError, ValidationError, MassBalanceError, CFLError

_LOG = _getLogger(__name__)

NODE_KINDS = ("junction", "tank", "reservoir")
LINK_KINDS = ("pipe", "pump", "valve")
HYDRAULIC_QUANTITIES = {
    "flow": "link",
    "velocity": "link",
    "demand": "junction",
    "booster_flow": "junction",
    "volume": "tank",
    "booster_volume": "tank",
}
EPS_MASS = 1.0e-6
EPS_FLOW = 1.0e-12
_CFL_SLACK = 1.0e-9

_LENGTH_UNITS = {"m": 1.0, "mm": 1.0e-3, "cm": 1.0e-2, "ft": 0.3048, "in": 0.0254}
_FLOW_UNITS = {
    "m3/s": 1.0, "l/s": 1.0e-3, "m3/h": 1.0 / 3600.0, "m3/d": 1.0 / 86400.0,
    "gpm": 6.30901964e-5, "cfs": 0.028316846592,
}
_VELOCITY_UNITS = {"m/s": 1.0, "ft/s": 0.3048}
_VOLUME_UNITS = {"m3": 1.0, "l": 1.0e-3, "ft3": 0.028316846592}
_US_FLOW_UNITS = ("CFS", "GPM", "MGD", "IMGD", "AFD")
_INP_REQUIRED = ("JUNCTIONS", "RESERVOIRS", "TANKS", "PIPES")
_INP_HANDLED = _INP_REQUIRED + ("PUMPS", "VALVES", "OPTIONS", "REACTIONS", "TITLE", "END")


@_dataclass(frozen=True)
class Node:
    id: str
    kind: str
    elevation: float = 0.0


@_dataclass(frozen=True)
class Link:
    id: str
    kind: str
    from_node: str
    to_node: str
    length: float | None = None
    radius: float | None = None

    @property
    def area(self) -> float:
        """Cross-sectional area of a pipe in m²."""
        return _math.pi * self.radius**2


@_dataclass(frozen=True)
class ReactionParams:
    """Reaction coefficients: α_b 1/s, α_w m/s, α_f m/s, α_r L/(mg·s)."""

    alpha_b: float = 0.0
    alpha_w: float = 0.0
    alpha_f: float = 0.0
    alpha_r: float = 0.0

    def with_overrides(self, overrides: _Mapping | None) -> "ReactionParams":
        """Apply absolute (`alpha_r`) and multiplicative (`alpha_r_multiplier`) overrides."""
        if not overrides:
            return self
        values = {name: getattr(self, name) for name in ("alpha_b", "alpha_w", "alpha_f", "alpha_r")}
        for key, value in overrides.items():
            name = key[: -len("_multiplier")] if key.endswith("_multiplier") else key
            if name not in values:
                raise ValidationError(f"Unknown reaction override '{key}'")
            values[name] = values[name] * float(value) if name != key else float(value)
        return ReactionParams(**values)

    def as_dict(self) -> dict:
        return {
            "alpha_b": self.alpha_b, "alpha_w": self.alpha_w,
            "alpha_f": self.alpha_f, "alpha_r": self.alpha_r,
        }


@_dataclass(frozen=True)
class WaterNetwork:
    """Typed directed graph of nodes and links with reaction parameters.

    Instances are validated on construction and never change afterwards.
    """

    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    reactions: ReactionParams = ReactionParams()
    pipe_reactions: tuple[tuple[str, ReactionParams], ...] = ()
    _node_pos: dict = _field(init=False, repr=False, compare=False)
    _link_pos: dict = _field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "pipe_reactions", tuple(self.pipe_reactions))
        object.__setattr__(self, "_node_pos", {n.id: i for i, n in enumerate(self.nodes)})
        object.__setattr__(self, "_link_pos", {l.id: i for i, l in enumerate(self.links)})
        validate_network(self)

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes)

    @property
    def link_ids(self) -> tuple[str, ...]:
        return tuple(l.id for l in self.links)

    @property
    def pipes(self) -> tuple[Link, ...]:
        return tuple(l for l in self.links if l.kind == "pipe")

    def node_position(self, node_id: str) -> int:
        try:
            return self._node_pos[node_id]
        except KeyError:
            raise ValidationError(f"Unknown node '{node_id}'") from None

    def link_position(self, link_id: str) -> int:
        try:
            return self._link_pos[link_id]
        except KeyError:
            raise ValidationError(f"Unknown link '{link_id}'") from None

    def node(self, node_id: str) -> Node:
        return self.nodes[self.node_position(node_id)]

    def link(self, link_id: str) -> Link:
        return self.links[self.link_position(link_id)]

    def reaction_for(self, pipe_id: str | None = None) -> ReactionParams:
        """Reaction coefficients of a pipe, or the network-wide ones if None."""
        if pipe_id is not None:
            for pid, params in self.pipe_reactions:
                if pid == pipe_id:
                    return params
        return self.reactions

    def counts(self) -> dict[str, int]:
        """Number of components per kind, e.g. {'junction': 9, ..., 'pipe': 12}."""
        result = {kind: 0 for kind in NODE_KINDS + LINK_KINDS}
        for item in self.nodes + self.links:
            result[item.kind] += 1
        return result


def validate_network(net: WaterNetwork) -> None:
    """Check the structural invariants of a WaterNetwork.

    Args:
        - net (WaterNetwork) : Network to check.

    Raises:
        ValidationError : On duplicate ids, dangling link endpoints, non-positive
        pipe geometry, negative reaction coefficients or a disconnected graph.
    """
    if not net.nodes:
        raise ValidationError("Network has no nodes")
    if len(net._node_pos) != len(net.nodes):
        raise ValidationError("Node ids are not unique")
    if len(net._link_pos) != len(net.links):
        raise ValidationError("Link ids are not unique")
    for node in net.nodes:
        if node.kind not in NODE_KINDS:
            raise ValidationError(f"Node '{node.id}' has unknown kind '{node.kind}'")
    for link in net.links:
        if link.kind not in LINK_KINDS:
            raise ValidationError(f"Link '{link.id}' has unknown kind '{link.kind}'")
        for end in (link.from_node, link.to_node):
            if end not in net._node_pos:
                raise ValidationError(f"Link '{link.id}' references missing node '{end}'")
        if link.kind == "pipe":
            if link.length is None or not link.length > 0:
                raise ValidationError(f"Pipe '{link.id}' needs a strictly positive length")
            if link.radius is None or not link.radius > 0:
                raise ValidationError(f"Pipe '{link.id}' needs a strictly positive radius")
    for owner, params in (("network", net.reactions),) + net.pipe_reactions:
        for name, value in params.as_dict().items():
            if not value >= 0:
                raise ValidationError(f"Reaction coefficient {name} of {owner} must be >= 0")
    pipe_ids = {l.id for l in net.links if l.kind == "pipe"}
    for pid, _ in net.pipe_reactions:
        if pid not in pipe_ids:
            raise ValidationError(f"Reaction override references unknown pipe '{pid}'")
    n = len(net.nodes)
    if n > 1:
        rows = [net._node_pos[l.from_node] for l in net.links]
        cols = [net._node_pos[l.to_node] for l in net.links]
        graph = _coo_matrix((_np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_parts, _ = _connected_components(graph, directed=True, connection="weak")
        if n_parts != 1:
            raise ValidationError(f"Network graph is not connected ({n_parts} components)")


def _require(obj: dict, key: str, path: str, kinds: tuple):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing required key '{key}'", path)
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kinds):
        raise ParseError(f"'{key}' has wrong type {type(value).__name__}", f"{path}.{key}")
    return value


def _optional_number(obj: dict, key: str, path: str) -> float | None:
    if key not in obj or obj[key] is None:
        return None
    return float(_require(obj, key, path, (int, float)))


def _parse_reactions(obj, path: str, base: ReactionParams) -> ReactionParams:
    if not isinstance(obj, dict):
        raise ParseError("reaction parameters must be an object", path)
    values = base.as_dict()
    for name in values:
        number = _optional_number(obj, name, path)
        if number is not None:
            values[name] = number
    return ReactionParams(**values)


def parse_network(text: str) -> WaterNetwork:
    """Build a WaterNetwork from the JSON network document.

    Args:
        - text (str) : JSON document with `nodes`, `links` and optional `reactions`
        keys; per-pipe overrides live under `reactions.pipes`.

    Returns:
        WaterNetwork : Validated network.
    """
    _LOG.debug(f"Executing: parse_network(text=<{len(text)} chars>)")
    try:
        try:
            doc = _json.loads(text)
        except _json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", e.lineno) from e
        if not isinstance(doc, dict):
            raise ParseError("top level must be an object", "$")
        nodes = []
        for i, item in enumerate(_require(doc, "nodes", "$", (list,))):
            path = f"nodes[{i}]"
            kind = _require(item, "kind", path, (str,))
            if kind not in NODE_KINDS:
                raise ParseError(f"kind must be one of {NODE_KINDS}", f"{path}.kind")
            elevation = _optional_number(item, "elevation", path)
            nodes.append(Node(
                id=str(_require(item, "id", path, (str, int))),
                kind=kind,
                elevation=0.0 if elevation is None else elevation,
            ))
        links = []
        for i, item in enumerate(_require(doc, "links", "$", (list,))):
            path = f"links[{i}]"
            kind = _require(item, "kind", path, (str,))
            if kind not in LINK_KINDS:
                raise ParseError(f"kind must be one of {LINK_KINDS}", f"{path}.kind")
            length = _optional_number(item, "length", path)
            radius = _optional_number(item, "radius", path)
            if kind == "pipe":
                _require(item, "length", path, (int, float))
                _require(item, "radius", path, (int, float))
            links.append(Link(
                id=str(_require(item, "id", path, (str, int))),
                kind=kind,
                from_node=str(_require(item, "from", path, (str, int))),
                to_node=str(_require(item, "to", path, (str, int))),
                length=length,
                radius=radius,
            ))
        reactions = ReactionParams()
        pipe_reactions = []
        if doc.get("reactions") is not None:
            reactions = _parse_reactions(doc["reactions"], "reactions", reactions)
            overrides = doc["reactions"].get("pipes", {})
            if not isinstance(overrides, dict):
                raise ParseError("per-pipe overrides must be an object", "reactions.pipes")
            for pid, params in overrides.items():
                pipe_reactions.append(
                    (str(pid), _parse_reactions(params, f"reactions.pipes.{pid}", reactions))
                )
        return WaterNetwork(
            nodes=tuple(nodes), links=tuple(links),
            reactions=reactions, pipe_reactions=tuple(pipe_reactions),
        )
    except ValidationError as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        raise e


def serialize_network(net: WaterNetwork) -> str:
    """Render a WaterNetwork as a JSON network document."""
    doc = {
        "nodes": [{"id": n.id, "kind": n.kind, "elevation": n.elevation} for n in net.nodes],
        "links": [],
        "reactions": net.reactions.as_dict(),
    }
    for link in net.links:
        item = {"id": link.id, "kind": link.kind, "from": link.from_node, "to": link.to_node}
        if link.length is not None:
            item["length"] = link.length
        if link.radius is not None:
            item["radius"] = link.radius
        doc["links"].append(item)
    if net.pipe_reactions:
        doc["reactions"]["pipes"] = {pid: params.as_dict() for pid, params in net.pipe_reactions}
    return _json.dumps(doc, indent=2)


def _inp_sections(text: str) -> dict[str, list[tuple[int, list[str]]]]:
    sections: dict[str, list[tuple[int, list[str]]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"malformed section header '{line}'", lineno)
            current = line[1:-1].strip().upper()
            sections.setdefault(current, [])
            continue
        if current is None:
            raise ParseError("data found before the first section header", lineno)
        sections[current].append((lineno, line.split()))
    return sections


def _inp_number(tokens: list[str], col: int, name: str, lineno: int) -> float:
    if col >= len(tokens):
        raise ParseError(f"missing column '{name}'", lineno)
    try:
        return float(tokens[col])
    except ValueError:
        raise ParseError(f"cannot parse {name} '{tokens[col]}' as a number", lineno) from None


def parse_inp_topology(
    text: str,
    length_unit: str | None = None,
    diameter_unit: str | None = None,
    reactions: ReactionParams | None = None,
) -> WaterNetwork:
    """Import topology and pipe geometry from an INP-style sectioned document.

    Args:
        - text (str) : INP document; sections are case-insensitive and `;` starts a comment.
        - length_unit (str | None, optional) : Unit of the pipe length column,
        inferred from `[OPTIONS] UNITS` if None (default): ft for US flow units, else m.
        - diameter_unit (str | None, optional) : Unit of the diameter column,
        inferred the same way: in for US flow units, else mm.
        - reactions (ReactionParams | None, optional) : Network-wide coefficients;
        `[REACTIONS] GLOBAL BULK/WALL` entries are used when None.

    Returns:
        WaterNetwork : Network with topology and pipe geometry imported.
    """
    _LOG.debug(
        f"Executing: parse_inp_topology(length_unit={length_unit!r}, diameter_unit={diameter_unit!r})"
    )
    try:
        sections = _inp_sections(text)
        for name in _INP_REQUIRED:
            if name not in sections:
                raise ParseError(f"[{name}] section required")
        for name in sections:
            if name not in _INP_HANDLED:
                _LOG.warning(f"Ignoring unsupported INP section [{name}]")
        us_units = False
        for _, tokens in sections.get("OPTIONS", []):
            if tokens[0].upper() == "UNITS" and len(tokens) > 1:
                us_units = tokens[1].upper() in _US_FLOW_UNITS
        length_unit = length_unit or ("ft" if us_units else "m")
        diameter_unit = diameter_unit or ("in" if us_units else "mm")
        for unit in (length_unit, diameter_unit):
            if unit not in _LENGTH_UNITS:
                raise ValidationError(f"Unknown length unit '{unit}'")
        to_m, d_to_m = _LENGTH_UNITS[length_unit], _LENGTH_UNITS[diameter_unit]

        nodes = []
        for section, kind in (("JUNCTIONS", "junction"), ("RESERVOIRS", "reservoir"), ("TANKS", "tank")):
            for lineno, tokens in sections[section]:
                elevation = _inp_number(tokens, 1, "elevation", lineno) if len(tokens) > 1 else 0.0
                nodes.append(Node(id=tokens[0], kind=kind, elevation=elevation * to_m))
        links = []
        for lineno, tokens in sections["PIPES"]:
            if len(tokens) < 3:
                raise ParseError("pipe needs ID, Node1 and Node2", lineno)
            length = _inp_number(tokens, 3, "length", lineno)
            diameter = _inp_number(tokens, 4, "diameter", lineno)
            links.append(Link(
                id=tokens[0], kind="pipe", from_node=tokens[1], to_node=tokens[2],
                length=length * to_m, radius=diameter * d_to_m / 2.0,
            ))
        for section, kind in (("PUMPS", "pump"), ("VALVES", "valve")):
            for lineno, tokens in sections.get(section, []):
                if len(tokens) < 3:
                    raise ParseError(f"{kind} needs ID, Node1 and Node2", lineno)
                links.append(Link(id=tokens[0], kind=kind, from_node=tokens[1], to_node=tokens[2]))

        if reactions is None:
            reactions = ReactionParams()
            for lineno, tokens in sections.get("REACTIONS", []):
                if len(tokens) >= 3 and tokens[0].upper() == "GLOBAL":
                    value = abs(_inp_number(tokens, 2, "coefficient", lineno)) / 86400.0
                    if tokens[1].upper() == "BULK":
                        reactions = _replace(reactions, alpha_b=value)
                    elif tokens[1].upper() == "WALL":
                        reactions = _replace(reactions, alpha_w=value * to_m)
        return WaterNetwork(nodes=tuple(nodes), links=tuple(links), reactions=reactions)
    except ValidationError as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        raise e


@_dataclass(frozen=True, eq=False)
class HydraulicProfile:
    """Per-hydraulic-step flows, velocities, demands and tank volumes in SI units.

    Arrays have shape (n_steps, n_links) for link quantities and
    (n_steps, n_nodes) for node quantities, in network order. Entries that do
    not apply to an entity (velocity of a pump, volume of a junction) are 0.
    """

    dt_h: float
    link_ids: tuple[str, ...]
    node_ids: tuple[str, ...]
    flows: _np.ndarray
    velocities: _np.ndarray
    demands: _np.ndarray
    booster_flows: _np.ndarray
    volumes: _np.ndarray
    booster_volumes: _np.ndarray

    def __post_init__(self):
        for name in ("flows", "velocities", "demands", "booster_flows", "volumes", "booster_volumes"):
            array = _np.array(getattr(self, name), dtype=float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

    @property
    def n_steps(self) -> int:
        return self.flows.shape[0]


def _as_matrix(values, ids: tuple[str, ...], n_steps: int, name: str) -> _np.ndarray:
    matrix = _np.zeros((n_steps, len(ids)))
    if values is None:
        return matrix
    if isinstance(values, _Mapping):
        pos = {entity: i for i, entity in enumerate(ids)}
        for entity, series in values.items():
            if entity not in pos:
                raise ValidationError(f"Unknown id '{entity}' in {name}")
            series = _np.broadcast_to(_np.asarray(series, dtype=float), (n_steps,))
            matrix[:, pos[entity]] = series
        return matrix
    array = _np.asarray(values, dtype=float)
    if array.shape != matrix.shape:
        raise ValidationError(f"{name} has shape {array.shape}, expected {matrix.shape}")
    return array.copy()


def _link_exchange(net: WaterNetwork, flows_k: _np.ndarray) -> tuple[_np.ndarray, _np.ndarray]:
    """Total inflow and outflow per node for one hydraulic step."""
    inflow = _np.zeros(len(net.nodes))
    outflow = _np.zeros(len(net.nodes))
    for j, link in enumerate(net.links):
        q = flows_k[j]
        src, dst = net.node_position(link.from_node), net.node_position(link.to_node)
        if q < 0:
            src, dst = dst, src
        outflow[src] += abs(q)
        inflow[dst] += abs(q)
    return inflow, outflow


def check_mass_balance(
    net: WaterNetwork, hyd: HydraulicProfile, tolerance: float = EPS_MASS
) -> float:
    """Verify junction flow balance at every hydraulic step.

    Args:
        - net (WaterNetwork) : Network the profile belongs to.
        - hyd (HydraulicProfile) : Profile to check.
        - tolerance (float, optional) : Relative tolerance ε_mass, 1e-6 by default.

    Returns:
        float : Largest absolute residual |Σin + q_B − Σout − q_D| seen.
    """
    worst = 0.0
    junctions = [i for i, n in enumerate(net.nodes) if n.kind == "junction"]
    for k in range(hyd.n_steps):
        inflow, outflow = _link_exchange(net, hyd.flows[k])
        for i in junctions:
            residual = abs(inflow[i] + hyd.booster_flows[k, i] - outflow[i] - hyd.demands[k, i])
            worst = max(worst, residual)
            if residual > tolerance * max(1.0, inflow[i]):
                raise MassBalanceError(
                    f"Mass balance violated at junction '{net.nodes[i].id}', step {k}: "
                    f"residual {residual:.6g} m3/s"
                )
    return worst


def build_profile(
    net: WaterNetwork,
    dt_h: float,
    flows,
    demands=None,
    booster_flows=None,
    volumes=None,
    booster_volumes=None,
    velocities=None,
    mass_tolerance: float = EPS_MASS,
) -> HydraulicProfile:
    """Assemble and validate a HydraulicProfile from arrays or id-keyed mappings.

    Args:
        - net (WaterNetwork) : Network the data refers to.
        - dt_h (float) : Hydraulic step Δt_H in seconds.
        - flows : Signed link flows, (n_steps, n_links) array or {link_id: series}.
        The step count is taken from this argument.
        - demands, booster_flows : Junction quantities in m³/s.
        - volumes, booster_volumes : Tank quantities in m³.
        - velocities : Pipe velocities in m/s, derived from flows where absent.
        - mass_tolerance (float, optional) : ε_mass for the junction balance check.

    Returns:
        HydraulicProfile : Profile satisfying all hydraulic invariants.
    """
    if not dt_h > 0:
        raise ValidationError("Hydraulic step dt_h must be positive")
    link_ids, node_ids = net.link_ids, net.node_ids
    if isinstance(flows, _Mapping):
        missing = [lid for lid in link_ids if lid not in flows]
        if missing:
            raise ValidationError(f"Missing flow for link '{missing[0]}'")
        n_steps = max(_np.atleast_1d(_np.asarray(v)).shape[0] for v in flows.values())
    else:
        n_steps = _np.atleast_2d(_np.asarray(flows)).shape[0]
    if n_steps < 1:
        raise ValidationError("Hydraulic profile has no steps")
    q = _as_matrix(flows, link_ids, n_steps, "flows")
    v = _np.zeros_like(q)
    given_v = _as_matrix(velocities, link_ids, n_steps, "velocities") if velocities is not None else None
    given_mask = _np.zeros(len(link_ids), dtype=bool)
    if isinstance(velocities, _Mapping):
        given_mask[[net.link_position(lid) for lid in velocities]] = True
    elif velocities is not None:
        given_mask[:] = True
    for j, link in enumerate(net.links):
        if link.kind != "pipe":
            continue
        derived = q[:, j] / link.area
        if given_mask[j]:
            bad = ~_np.isclose(given_v[:, j], derived, rtol=1e-6, atol=1e-12)
            if bad.any():
                k = int(_np.argmax(bad))
                raise ValidationError(
                    f"Velocity of pipe '{link.id}' at step {k} disagrees with flow/area"
                )
            v[:, j] = given_v[:, j]
        else:
            v[:, j] = derived
    vol = _as_matrix(volumes, node_ids, n_steps, "volumes")
    for i, node in enumerate(net.nodes):
        if node.kind == "tank":
            bad = ~(vol[:, i] > 0)
            if bad.any():
                raise ValidationError(
                    f"Tank '{node.id}' volume must be strictly positive (step {int(_np.argmax(bad))})"
                )
        elif _np.any(vol[:, i] != 0):
            raise ValidationError(f"Volume given for non-tank node '{node.id}'")
    hyd = HydraulicProfile(
        dt_h=float(dt_h),
        link_ids=link_ids,
        node_ids=node_ids,
        flows=q,
        velocities=v,
        demands=_as_matrix(demands, node_ids, n_steps, "demands"),
        booster_flows=_as_matrix(booster_flows, node_ids, n_steps, "booster_flows"),
        volumes=vol,
        booster_volumes=_as_matrix(booster_volumes, node_ids, n_steps, "booster_volumes"),
    )
    check_mass_balance(net, hyd, tolerance=mass_tolerance)
    return hyd


def _csv_header(text: str) -> dict[str, str]:
    meta = {}
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if not stripped.startswith("#"):
            break
        key, sep, value = stripped[1:].partition(":")
        if sep:
            meta[key.strip().lower()] = value.strip()
    return meta


def _unit_factor(table: dict[str, float], unit: str, what: str) -> float:
    try:
        return table[unit.lower()]
    except KeyError:
        raise ParseError(f"unknown {what} unit '{unit}'", "header") from None


def load_hydraulics(
    text: str,
    net: WaterNetwork,
    dt_h: float | None = None,
    mass_tolerance: float = EPS_MASS,
    default_dt_h: float = 3600.0,
) -> HydraulicProfile:
    """Build a HydraulicProfile from the hydraulics CSV document.

    Args:
        - text (str) : CSV with header `step,entity_kind,entity_id,quantity,value`,
        optionally preceded by `# key: value` lines (dt_h, flow_unit, velocity_unit,
        volume_unit).
        - net (WaterNetwork) : Network the ids are resolved against.
        - dt_h (float | None, optional) : Hydraulic step in seconds, overriding the
        header.
        - default_dt_h (float, optional) : Hydraulic step used when neither is given.
        - mass_tolerance (float, optional) : ε_mass for the junction balance check.

    Returns:
        HydraulicProfile : Profile in SI units with the mass-balance invariant checked.
    """
    _LOG.debug(f"Executing: load_hydraulics(text=<{len(text)} chars>, dt_h={dt_h})")
    try:
        meta = _csv_header(text)
        if dt_h is None:
            dt_h = float(meta.get("dt_h", default_dt_h))
        flow_f = _unit_factor(_FLOW_UNITS, meta.get("flow_unit", "m3/s"), "flow")
        vel_f = _unit_factor(_VELOCITY_UNITS, meta.get("velocity_unit", "m/s"), "velocity")
        vol_f = _unit_factor(_VOLUME_UNITS, meta.get("volume_unit", "m3"), "volume")
        factors = {
            "flow": flow_f, "velocity": vel_f, "demand": flow_f,
            "booster_flow": flow_f, "volume": vol_f, "booster_volume": vol_f,
        }
        df = _common.read_dataframe(
            text, sep=",",
            usecols=["step", "entity_kind", "entity_id", "quantity", "value"],
            dtype={"entity_kind": str, "entity_id": str, "quantity": str},
            comment="#",
        )
        if df.empty:
            raise ValidationError("Hydraulics document has no rows")
        df["step"] = _pd.to_numeric(df["step"], errors="coerce")
        df["value"] = _pd.to_numeric(df["value"], errors="coerce")
        if df["step"].isna().any() or (df["step"] % 1 != 0).any() or (df["step"] < 0).any():
            raise ParseError("step must be a non-negative integer", "step")
        if df["value"].isna().any():
            raise ParseError("value must be numeric", "value")
        df["step"] = df["step"].astype(int)
        df["entity_kind"] = df["entity_kind"].str.strip().str.lower()
        df["quantity"] = df["quantity"].str.strip().str.lower()
        df["entity_id"] = df["entity_id"].str.strip()
        unknown_q = set(df["quantity"]) - set(HYDRAULIC_QUANTITIES)
        if unknown_q:
            raise ValidationError(f"Unknown hydraulic quantity '{sorted(unknown_q)[0]}'")
        if df.duplicated(subset=["step", "entity_id", "quantity"]).any():
            row = df[df.duplicated(subset=["step", "entity_id", "quantity"])].iloc[0]
            raise ValidationError(
                f"Duplicate {row['quantity']} row for '{row['entity_id']}' at step {row['step']}"
            )
        for row in df.drop_duplicates(subset=["entity_kind", "entity_id", "quantity"]).itertuples():
            target = HYDRAULIC_QUANTITIES[row.quantity]
            if target == "link":
                entity = net.link(row.entity_id)
                if row.entity_kind not in ("link", entity.kind):
                    raise ValidationError(f"'{row.entity_id}' is a {entity.kind}, not a {row.entity_kind}")
                if row.quantity == "velocity" and entity.kind != "pipe":
                    raise ValidationError(f"Velocity given for non-pipe link '{row.entity_id}'")
            else:
                entity = net.node(row.entity_id)
                if entity.kind != target or row.entity_kind != target:
                    raise ValidationError(f"{row.quantity} requires a {target}, got '{row.entity_id}'")
        n_steps = int(df["step"].max()) + 1
        df["value"] = df["value"] * df["quantity"].map(factors)
        arrays = {}
        for quantity in HYDRAULIC_QUANTITIES:
            sub = df[df["quantity"] == quantity]
            if sub.empty:
                arrays[quantity] = None
                continue
            wide = sub.pivot(index="step", columns="entity_id", values="value")
            wide = wide.reindex(range(n_steps))
            if quantity in ("flow", "volume", "velocity"):
                missing = wide.isna().stack()
                if missing.any():
                    step, entity = missing[missing].index[0]
                    raise ValidationError(f"Missing {quantity} for '{entity}' at step {step}")
            arrays[quantity] = {col: wide[col].fillna(0.0).to_numpy() for col in wide.columns}
        if arrays["flow"] is None:
            raise ValidationError("Hydraulics document has no flow rows")
        tanks = [n.id for n in net.nodes if n.kind == "tank"]
        for tank in tanks:
            if arrays["volume"] is None or tank not in arrays["volume"]:
                raise ValidationError(f"Missing volume for tank '{tank}'")
        flows = {lid: _np.zeros(n_steps) for lid in net.link_ids}
        flows.update(arrays["flow"])
        missing_links = [lid for lid in net.link_ids if lid not in arrays["flow"]]
        if missing_links:
            raise ValidationError(f"Missing flow for link '{missing_links[0]}'")
        return build_profile(
            net, dt_h, flows,
            demands=arrays["demand"], booster_flows=arrays["booster_flow"],
            volumes=arrays["volume"], booster_volumes=arrays["booster_volume"],
            velocities=arrays["velocity"], mass_tolerance=mass_tolerance,
        )
    except ValidationError as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        raise e


def hydraulics_frame(net: WaterNetwork, hyd: HydraulicProfile) -> _pd.DataFrame:
    """Render a HydraulicProfile in the hydraulics CSV layout (SI units)."""
    rows = []
    for k in range(hyd.n_steps):
        for j, link in enumerate(net.links):
            rows.append((k, link.kind, link.id, "flow", hyd.flows[k, j]))
            if link.kind == "pipe":
                rows.append((k, link.kind, link.id, "velocity", hyd.velocities[k, j]))
        for i, node in enumerate(net.nodes):
            if node.kind == "junction":
                rows.append((k, "junction", node.id, "demand", hyd.demands[k, i]))
                if hyd.booster_flows[k, i]:
                    rows.append((k, "junction", node.id, "booster_flow", hyd.booster_flows[k, i]))
            elif node.kind == "tank":
                rows.append((k, "tank", node.id, "volume", hyd.volumes[k, i]))
                if hyd.booster_volumes[k, i]:
                    rows.append((k, "tank", node.id, "booster_volume", hyd.booster_volumes[k, i]))
    return _pd.DataFrame(rows, columns=["step", "entity_kind", "entity_id", "quantity", "value"])


def species_index(species: str | int) -> int:
    """Resolve a species name ('chlorine', 'reactant') or position (0, 1)."""
    if isinstance(species, str):
        if species not in SPECIES:
            raise ValidationError(f"Unknown species '{species}'")
        return SPECIES.index(species)
    if species not in (0, 1):
        raise ValidationError(f"Unknown species index {species}")
    return int(species)


@_dataclass(frozen=True, eq=False)
class Segmentation:
    """Pipe segmentation and the state-vector layout it implies.

    Each species block holds the node states (network order) followed by the
    pipe segments (pipe order); the reactant block follows the chlorine block.
    Courant numbers lie in [0, 1]: a pipe with no flow at a hydraulic step
    records 0 there and its segments only react during that step, and a pipe
    without flow over the whole horizon keeps a single segment.
    """

    node_ids: tuple[str, ...]
    pipe_ids: tuple[str, ...]
    segments: tuple[int, ...]
    dx: tuple[float, ...]
    courant: _np.ndarray
    dt_wq: float
    _offsets: dict = _field(init=False, repr=False)
    _node_pos: dict = _field(init=False, repr=False)

    def __post_init__(self):
        courant = _np.array(self.courant, dtype=float)
        courant.setflags(write=False)
        object.__setattr__(self, "courant", courant)
        offsets, pos = {}, len(self.node_ids)
        for pid, s in zip(self.pipe_ids, self.segments):
            offsets[pid] = pos
            pos += s
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_node_pos", {nid: i for i, nid in enumerate(self.node_ids)})

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_block(self) -> int:
        """States per species: n_N + Σ s_i."""
        return self.n_nodes + sum(self.segments)

    @property
    def n_x(self) -> int:
        return 2 * self.n_block

    def segment_count(self, pipe_id: str) -> int:
        return self.segments[self.pipe_ids.index(pipe_id)]

    def pipe_offset(self, pipe_id: str) -> int:
        """Block-relative position of segment 0 of a pipe."""
        try:
            return self._offsets[pipe_id]
        except KeyError:
            raise ValidationError(f"Unknown pipe '{pipe_id}'") from None

    def index(self, entity: str, species: str | int = 0, segment: int | None = None) -> int:
        """State-vector position of a node, or of one segment of a pipe."""
        base = species_index(species) * self.n_block
        if segment is None:
            if entity not in self._node_pos:
                raise ValidationError(f"Unknown node '{entity}'")
            return base + self._node_pos[entity]
        count = self.segment_count(entity)
        if not 0 <= segment < count:
            raise ValidationError(f"Pipe '{entity}' has no segment {segment}")
        return base + self._offsets[entity] + segment

    def index_map(self) -> dict:
        """Map (node id | (pipe id, segment), species) to state positions."""
        mapping = {}
        for sp in SPECIES:
            for nid in self.node_ids:
                mapping[(nid, sp)] = self.index(nid, sp)
            for pid, s in zip(self.pipe_ids, self.segments):
                for seg in range(s):
                    mapping[((pid, seg), sp)] = self.index(pid, sp, seg)
        return mapping

    def labels(self) -> list[tuple[str, str]]:
        """(entity label, species) per state position; segments read 'pipe#seg'."""
        entities = list(self.node_ids)
        for pid, s in zip(self.pipe_ids, self.segments):
            entities.extend(f"{pid}#{seg}" for seg in range(s))
        return [(entity, sp) for sp in SPECIES for entity in entities]


def segment_pipes(net: WaterNetwork, hyd: HydraulicProfile, dt_wq: float) -> Segmentation:
    """Compute the CFL-safe pipe segmentation from the largest pipe velocity.

    Args:
        - net (WaterNetwork) : Network whose pipes are segmented.
        - hyd (HydraulicProfile) : Velocities for every pipe and hydraulic step.
        - dt_wq (float) : Water quality step Δt_WQ in seconds.

    Returns:
        Segmentation : s_i = max(1, floor(L_i / (v_max·Δt_WQ))) with the Courant
        number of every pipe and hydraulic step recorded, 0 where the pipe
        carries no flow.
    """
    _LOG.debug(f"Executing: segment_pipes(dt_wq={dt_wq})")
    if not dt_wq > 0:
        raise ValidationError("Water quality step dt_wq must be positive")
    pipes = net.pipes
    segments, dx = [], []
    courant = _np.zeros((hyd.n_steps, len(pipes)))
    for p, pipe in enumerate(pipes):
        speed = _np.abs(hyd.velocities[:, net.link_position(pipe.id)])
        v_max = float(speed.max())
        if v_max > 0:
            s = max(1, int(_math.floor(pipe.length / (v_max * dt_wq) + _CFL_SLACK)))
        else:
            s = 1
        seg_len = pipe.length / s
        lam = speed * dt_wq / seg_len
        if lam.max() > 1.0 + _CFL_SLACK:
            k = int(_np.argmax(lam))
            raise CFLError(
                f"CFL condition violated in pipe '{pipe.id}' at hydraulic step {k} "
                f"(Courant number {lam[k]:.4g}); use a smaller dt_wq (at most "
                f"{pipe.length / v_max:.4g} s)"
            )
        segments.append(s)
        dx.append(seg_len)
        courant[:, p] = _np.minimum(lam, 1.0)
    seg = Segmentation(
        node_ids=net.node_ids,
        pipe_ids=tuple(p.id for p in pipes),
        segments=tuple(segments),
        dx=tuple(dx),
        courant=courant,
        dt_wq=float(dt_wq),
    )
    _LOG.info(f"Segmented {len(pipes)} pipes into {sum(segments)} segments (n_x={seg.n_x})")
    return seg
