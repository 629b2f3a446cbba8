#!/usr/bin/env python3

"""Module containing the two-species water quality dynamics.

This module contains the component update laws (junction mixing, tank
CSTR balance, upwind pipe advection with reaction), the scenario data that
drives a simulation, and the assembled step and simulation loop.

Methods:
    - wall_decay_coefficient : Effective first-order pipe decay including wall reaction.
    - reaction_rates : Chlorine and reactant reaction rates.
    - junction_mixing : Flow-weighted complete mixing at a junction.
    - tank_update : CSTR mass balance over one water quality step.
    - pipe_segment_update : Upwind advection-reaction update of a pipe segment.
    - parse_scenario : Build a Scenario from the scenario JSON document.
    - initial_state : Initial SegmentedState of a scenario.
    - sensor_model : Build the selector rows of a SensorModel.
    - build_measurement : Measurement vector of the active sensors.
    - step : Advance the state by one water quality step.
    - simulate : Run a scenario over its full horizon.
    - total_mass : Species mass held in pipes, tanks and junctions.
    - trajectory_frame : Long-format table of a trajectory.
"""

# Standard imports
import json as _json
import numpy as _np
import pandas as _pd
from logging import getLogger as _getLogger
from dataclasses import dataclass as _dataclass, field as _field

# Module imports
from . import _EXIT_MSG, SPECIES
from .common import ParseError, ValidationError
from .network import (
    EPS_FLOW,
    HydraulicProfile,
    Segmentation,
    WaterNetwork,
    segment_pipes,
    species_index,
)

_LOG = _getLogger(__name__)


@_dataclass
class SimulationDiagnostics:
    """Counters for events the model resolves by convention."""

    clamped: int = 0
    stagnant_junctions: int = 0


def wall_decay_coefficient(alpha_b: float, alpha_w: float, alpha_f: float, r_p: float) -> float:
    """Effective first-order pipe decay α^Pw = α_b + 2α_wα_f / (r_P(α_w + α_f)), in 1/s.

    Returns α_b when both α_w and α_f are zero.
    """
    if not r_p > 0:
        raise ValidationError(f"Pipe radius must be positive, got {r_p}")
    if alpha_w == 0 and alpha_f == 0:
        return alpha_b
    if not alpha_w + alpha_f > 0:
        raise ValidationError("alpha_w + alpha_f must be positive")
    return alpha_b + 2.0 * alpha_w * alpha_f / (r_p * (alpha_w + alpha_f))


def reaction_rates(c, c_tilde, alpha: float, alpha_r: float):
    """Chlorine and reactant rates (mg/(L·s)): R_c = −(α + α_r c̃)c, R_c̃ = −α_r c c̃.

    Accepts scalars or numpy arrays of equal shape.
    """
    r_c = -(alpha + alpha_r * c_tilde) * c
    r_ct = -alpha_r * c * c_tilde
    return r_c, r_ct


def junction_mixing(
    inflows: list[tuple[float, float]],
    q_b: float,
    c_b: float,
    q_d: float,
    outflows: list[float],
    previous: float = 0.0,
    diagnostics: SimulationDiagnostics | None = None,
) -> float:
    """Flow-weighted complete mixing at a junction.

    Args:
        - inflows (list[tuple[float, float]]) : (flow m³/s, concentration mg/L) per inflow.
        - q_b (float) : Booster flow in m³/s.
        - c_b (float) : Booster concentration in mg/L.
        - q_d (float) : Demand in m³/s.
        - outflows (list[float]) : Flows leaving the junction in m³/s.
        - previous (float, optional) : Concentration held when the junction is stagnant.
        - diagnostics (SimulationDiagnostics | None, optional) : Collects stagnant events.

    Returns:
        float : (Σ q_in c_in + q_B c_B) / (q_D + Σ q_out), or `previous` when the
        denominator is at most 1e-12.
    """
    denominator = q_d + sum(outflows)
    if denominator <= EPS_FLOW:
        if diagnostics is not None:
            diagnostics.stagnant_junctions += 1
        return previous
    return (sum(q * c for q, c in inflows) + q_b * c_b) / denominator


def tank_update(
    v: float,
    c: float,
    inflows: list[tuple[float, float]],
    v_b: float,
    c_b: float,
    outflow_total: float,
    r: float,
    dt: float,
    v_next: float,
    clamp: bool = True,
) -> float:
    """CSTR mass balance of a tank over one water quality step.

    c(k+1) = [V c + Σ q_in c_in Δt + V_B c_B − Q_out c Δt + R V Δt] / V(k+1)
    """
    if not v_next > 0:
        raise ValidationError(f"Tank volume must stay positive, got {v_next}")
    mass = v * c + sum(q * c_in for q, c_in in inflows) * dt + v_b * c_b
    mass += -outflow_total * c * dt + r * v * dt
    value = mass / v_next
    return max(value, 0.0) if clamp else value


def pipe_segment_update(c_s, c_up, lam: float, r, dt: float, clamp: bool = True):
    """Upwind update (1−λ)c_s + λ c_up + R Δt of one or more pipe segments."""
    if not 0.0 < lam <= 1.0:
        raise ValidationError(f"Courant number {lam} outside (0, 1]")
    value = (1.0 - lam) * c_s + lam * c_up + r * dt
    return _np.maximum(value, 0.0) if clamp else value


@_dataclass(frozen=True)
class BoosterEntry:
    """Injection active over water quality steps [start, stop)."""

    start: int
    stop: int
    concentration: float
    flow_or_volume: float | None = None


@_dataclass(frozen=True)
class Booster:
    node: str
    species: str
    schedule: tuple[BoosterEntry, ...]

    def at(self, k: int) -> BoosterEntry | None:
        for entry in self.schedule:
            if entry.start <= k < entry.stop:
                return entry
        return None


@_dataclass(frozen=True)
class Scenario:
    """One demand-pattern case: horizon, time steps, initial values, boosters."""

    id: str
    ts: float
    dt_wq: float
    dt_h: float
    initial: tuple[tuple[str, str, float], ...] = ()
    boosters: tuple[Booster, ...] = ()
    reaction_overrides: tuple[tuple[str, float], ...] = ()
    hydraulics: str | None = None

    def __post_init__(self):
        if not self.dt_wq > 0 or not self.dt_h > 0 or not self.ts > 0:
            raise ValidationError(f"Scenario '{self.id}': Ts, dt_wq and dt_h must be positive")
        ratio = self.dt_h / self.dt_wq
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValidationError(f"Scenario '{self.id}': dt_h must be an integer multiple of dt_wq")
        n = self.ts / self.dt_wq
        if round(n) < 1 or abs(n - round(n)) > 1e-9 * n:
            raise ValidationError(f"Scenario '{self.id}': Ts/dt_wq must be a positive integer")
        for node, species, value in self.initial:
            species_index(species)
            if not value >= 0:
                raise ValidationError(f"Scenario '{self.id}': negative initial value at '{node}'")
        for booster in self.boosters:
            species_index(booster.species)
            for entry in booster.schedule:
                if not entry.concentration >= 0:
                    raise ValidationError(
                        f"Scenario '{self.id}': negative booster concentration at '{booster.node}'"
                    )

    @property
    def n_steps(self) -> int:
        """Horizon N_s = T_s / Δt_WQ."""
        return int(round(self.ts / self.dt_wq))

    @property
    def steps_per_hydraulic(self) -> int:
        return int(round(self.dt_h / self.dt_wq))

    @property
    def overrides(self) -> dict[str, float]:
        return dict(self.reaction_overrides)


def _number(obj: dict, key: str, path: str, default=None) -> float:
    if key not in obj or obj[key] is None:
        if default is not None:
            return default
        raise ParseError(f"missing required key '{key}'", path)
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"'{key}' must be a number", f"{path}.{key}")
    return float(value)


def parse_scenario(text: str) -> Scenario:
    """Build a Scenario from the scenario JSON document.

    Args:
        - text (str) : JSON with keys id, Ts, dt_wq, dt_h, initial, boosters,
        reaction_overrides and an optional hydraulics path. Booster step ranges
        are half-open [start, stop) in water quality steps.

    Returns:
        Scenario : Validated scenario.
    """
    _LOG.debug(f"Executing: parse_scenario(text=<{len(text)} chars>)")
    try:
        try:
            doc = _json.loads(text)
        except _json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", e.lineno) from e
        if not isinstance(doc, dict) or "id" not in doc:
            raise ParseError("scenario must be an object with an 'id'", "$")
        initial = []
        for i, item in enumerate(doc.get("initial", [])):
            path = f"initial[{i}]"
            if not isinstance(item, dict) or "node" not in item:
                raise ParseError("entry needs 'node', 'species' and 'value'", path)
            initial.append((str(item["node"]), str(item.get("species", "chlorine")), _number(item, "value", path)))
        boosters = []
        for i, item in enumerate(doc.get("boosters", [])):
            path = f"boosters[{i}]"
            if not isinstance(item, dict) or "node" not in item:
                raise ParseError("booster needs 'node' and 'schedule'", path)
            entries = []
            for e_i, entry in enumerate(item.get("schedule", [])):
                e_path = f"{path}.schedule[{e_i}]"
                rng = entry.get("step_range") if isinstance(entry, dict) else None
                if not isinstance(rng, list) or len(rng) != 2:
                    raise ParseError("step_range must be [start, stop]", e_path)
                amount = entry.get("flow_or_volume")
                entries.append(BoosterEntry(
                    start=int(rng[0]), stop=int(rng[1]),
                    concentration=_number(entry, "concentration", e_path),
                    flow_or_volume=None if amount is None else _number(entry, "flow_or_volume", e_path),
                ))
            boosters.append(Booster(
                node=str(item["node"]), species=str(item.get("species", "chlorine")),
                schedule=tuple(entries),
            ))
        overrides = doc.get("reaction_overrides") or {}
        if not isinstance(overrides, dict):
            raise ParseError("reaction_overrides must be an object", "reaction_overrides")
        return Scenario(
            id=str(doc["id"]),
            ts=_number(doc, "Ts", "$"),
            dt_wq=_number(doc, "dt_wq", "$"),
            dt_h=_number(doc, "dt_h", "$"),
            initial=tuple(initial),
            boosters=tuple(boosters),
            reaction_overrides=tuple((str(k), float(v)) for k, v in overrides.items()),
            hydraulics=doc.get("hydraulics"),
        )
    except ValidationError as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        raise e


@_dataclass(frozen=True, eq=False)
class SegmentedState:
    """Concentration vector x(k) (mg/L) laid out by a Segmentation."""

    x: _np.ndarray
    k: int
    segmentation: Segmentation

    def __post_init__(self):
        x = _np.array(self.x, dtype=float)
        if x.shape != (self.segmentation.n_x,):
            raise ValidationError(f"State has shape {x.shape}, expected ({self.segmentation.n_x},)")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    def value(self, entity: str, species: str | int = 0, segment: int | None = None) -> float:
        return float(self.x[self.segmentation.index(entity, species, segment)])

    def block(self, species: str | int) -> _np.ndarray:
        nb = self.segmentation.n_block
        start = species_index(species) * nb
        return self.x[start:start + nb]


def initial_state(scenario: Scenario, seg: Segmentation) -> SegmentedState:
    """Initial state of a scenario; entries naming a pipe fill all of its segments."""
    x = _np.zeros(seg.n_x)
    for entity, species, value in scenario.initial:
        if entity in seg.pipe_ids:
            for s in range(seg.segment_count(entity)):
                x[seg.index(entity, species, s)] = value
        else:
            x[seg.index(entity, species)] = value
    return SegmentedState(x=x, k=0, segmentation=seg)


@_dataclass(frozen=True, eq=False)
class SensorModel:
    """Candidate sensor nodes, measured species and selection vector γ."""

    candidates: tuple[str, ...]
    species: tuple[str, ...]
    rows: tuple[tuple[int, ...], ...]
    gamma: _np.ndarray
    n_x: int

    def __post_init__(self):
        gamma = _np.array(self.gamma, dtype=int)
        if gamma.shape != (len(self.candidates),) or not _np.isin(gamma, (0, 1)).all():
            raise ValidationError("gamma must be a 0/1 vector over the candidates")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)

    @property
    def n_rows(self) -> int:
        """Measurement rows per candidate (one per measured species)."""
        return len(self.species)

    def selector(self, j: int) -> _np.ndarray:
        """Row block c_j, shape (n_rows, n_x), one 1 per measured species."""
        c = _np.zeros((self.n_rows, self.n_x))
        c[_np.arange(self.n_rows), list(self.rows[j])] = 1.0
        return c

    def with_selection(self, selected) -> "SensorModel":
        chosen = set(selected)
        unknown = chosen - set(self.candidates)
        if unknown:
            raise ValidationError(f"Unknown sensor '{sorted(unknown)[0]}'")
        gamma = [1 if cid in chosen else 0 for cid in self.candidates]
        return SensorModel(self.candidates, self.species, self.rows, gamma, self.n_x)


def sensor_model(
    seg: Segmentation,
    candidates: list[str] | None = None,
    species: tuple[str, ...] = ("chlorine",),
    selected: list[str] | None = None,
) -> SensorModel:
    """Build the selector rows for candidate sensor nodes.

    Args:
        - seg (Segmentation) : Layout of the state vector.
        - candidates (list[str] | None, optional) : Candidate node ids, all nodes if None.
        - species (tuple[str, ...], optional) : Measured species, chlorine only by default.
        - selected (list[str] | None, optional) : Active sensors, all candidates if None.

    Returns:
        SensorModel : Sensor model with γ set from `selected`.
    """
    candidates = tuple(seg.node_ids if candidates is None else candidates)
    if len(set(candidates)) != len(candidates):
        raise ValidationError("Candidate sensor ids are not unique")
    species = tuple(SPECIES[species_index(sp)] for sp in species)
    if not species or len(set(species)) != len(species):
        raise ValidationError("Measured species must be a non-empty set")
    rows = tuple(tuple(seg.index(cid, sp) for sp in species) for cid in candidates)
    model = SensorModel(candidates, species, rows, _np.ones(len(candidates), dtype=int), seg.n_x)
    return model if selected is None else model.with_selection(selected)


def build_measurement(sensor: SensorModel, state: SegmentedState) -> _np.ndarray:
    """Stack c_j x(k) over the active sensors, zero rows of ΓC compressed."""
    idx = [i for j, rows in enumerate(sensor.rows) if sensor.gamma[j] for i in rows]
    return state.x[_np.array(idx, dtype=int)].copy()


@_dataclass
class _Window:
    """Flow structure of one hydraulic step."""

    pipes: list[tuple]
    inflows: list[list[tuple[int, float]]]
    outflow: _np.ndarray
    tank_net: _np.ndarray


@_dataclass
class _StepResult:
    raw: _np.ndarray
    hold: _np.ndarray
    tank_volumes: dict = _field(default_factory=dict)


class TransportModel:
    """Compiled network, hydraulics and scenario used to advance states.

    Per hydraulic step the flow structure (upwind neighbors, inflow sources,
    Courant numbers) is built once and cached.
    """

    def __init__(
        self,
        net: WaterNetwork,
        hyd: HydraulicProfile,
        scenario: Scenario,
        seg: Segmentation | None = None,
    ):
        if abs(scenario.dt_h - hyd.dt_h) > 1e-9 * hyd.dt_h:
            raise ValidationError(
                f"Scenario '{scenario.id}' dt_h={scenario.dt_h} differs from hydraulics dt_h={hyd.dt_h}"
            )
        if tuple(hyd.link_ids) != net.link_ids or tuple(hyd.node_ids) != net.node_ids:
            raise ValidationError("Hydraulic profile does not belong to this network")
        self.net, self.hyd, self.scenario = net, hyd, scenario
        self.seg = seg if seg is not None else segment_pipes(net, hyd, scenario.dt_wq)
        if abs(self.seg.dt_wq - scenario.dt_wq) > 1e-12 * scenario.dt_wq:
            raise ValidationError("Segmentation was computed for a different dt_wq")
        self.dt = scenario.dt_wq
        self.per_window = scenario.steps_per_hydraulic
        overrides = scenario.overrides
        self.tank_reactions = net.reactions.with_overrides(overrides)
        self.pipe_alpha = []
        self.pipe_alpha_r = []
        for pipe in net.pipes:
            params = net.reaction_for(pipe.id).with_overrides(overrides)
            self.pipe_alpha.append(
                wall_decay_coefficient(params.alpha_b, params.alpha_w, params.alpha_f, pipe.radius)
            )
            self.pipe_alpha_r.append(params.alpha_r)
        self.boosters: dict[tuple[int, int], Booster] = {}
        for booster in scenario.boosters:
            node = net.node(booster.node)
            if node.kind == "reservoir":
                raise ValidationError(f"Booster at reservoir '{node.id}' is not supported")
            key = (net.node_position(node.id), species_index(booster.species))
            if key in self.boosters:
                raise ValidationError(f"Duplicate booster for '{node.id}' ({booster.species})")
            self.boosters[key] = booster
        self._windows: dict[int, _Window] = {}

    @property
    def n_x(self) -> int:
        return self.seg.n_x

    def hydraulic_step(self, k: int) -> int:
        h = k // self.per_window
        if h >= self.hyd.n_steps:
            raise ValidationError(
                f"No hydraulic data for water quality step {k} (hydraulic step {h})"
            )
        return h

    def window(self, h: int) -> _Window:
        if h in self._windows:
            return self._windows[h]
        net, seg = self.net, self.seg
        n_nodes = len(net.nodes)
        inflows: list[list[tuple[int, float]]] = [[] for _ in range(n_nodes)]
        outflow = _np.zeros(n_nodes)
        pipes = []
        p = 0
        for j, link in enumerate(net.links):
            q = self.hyd.flows[h, j]
            a, b = net.node_position(link.from_node), net.node_position(link.to_node)
            moving = abs(q) > EPS_FLOW
            up, down = (a, b) if q >= 0 else (b, a)
            if link.kind == "pipe":
                offset, s = seg.pipe_offset(link.id), seg.segments[p]
                direction = 0 if not moving else (1 if q > 0 else -1)
                lam = float(seg.courant[h, p]) if moving else 0.0
                if moving and lam <= 0.0:
                    direction = 0
                pipes.append((p, offset, s, lam, direction, up))
                outlet = offset + s - 1 if q > 0 else offset
                p += 1
            else:
                outlet = up
            if moving:
                inflows[down].append((outlet, abs(q)))
                outflow[up] += abs(q)
        tank_net = _np.zeros(n_nodes)
        for i, node in enumerate(net.nodes):
            if node.kind == "tank":
                tank_net[i] = sum(q for _, q in inflows[i]) - outflow[i]
        window = _Window(pipes=pipes, inflows=inflows, outflow=outflow, tank_net=tank_net)
        self._windows[h] = window
        return window

    def booster_input(self, i: int, sp: int, k: int, h: int) -> tuple[float, float]:
        """(concentration, flow or volume) injected at node i for species sp."""
        booster = self.boosters.get((i, sp))
        entry = booster.at(k) if booster is not None else None
        if entry is None:
            return 0.0, 0.0
        if entry.flow_or_volume is not None:
            return entry.concentration, entry.flow_or_volume
        if self.net.nodes[i].kind == "tank":
            return entry.concentration, float(self.hyd.booster_volumes[h, i])
        return entry.concentration, float(self.hyd.booster_flows[h, i])

    def tank_volumes(self, i: int, k: int) -> tuple[float, float]:
        """Tank volume at WQ step k and k+1, following the window's net inflow."""
        h = self.hydraulic_step(k)
        net_in = self.window(h).tank_net[i]
        elapsed = (k - h * self.per_window) * self.dt
        v = float(self.hyd.volumes[h, i]) + net_in * elapsed
        v_next = v + net_in * self.dt
        if not (v > 0 and v_next > 0):
            raise ValidationError(
                f"Tank '{self.net.nodes[i].id}' volume becomes non-positive at step {k}"
            )
        return v, v_next

    def junction_terms(self, i: int, h: int) -> tuple[list[tuple[int, float]], float, float]:
        """Inflow sources, demand and total outflow of a junction.

        A negative demand is a supply point entering with the junction's own
        concentration; its source index is the junction itself.
        """
        window = self.window(h)
        q_d = float(self.hyd.demands[h, i])
        sources = list(window.inflows[i])
        if q_d < 0:
            sources.append((i, -q_d))
        return sources, max(q_d, 0.0), float(window.outflow[i])

    def evaluate(self, x: _np.ndarray, k: int, diagnostics: SimulationDiagnostics | None = None) -> _StepResult:
        """Unclamped update of every state from the step-k snapshot x."""
        h = self.hydraulic_step(k)
        window = self.window(h)
        nb, dt = self.seg.n_block, self.dt
        raw = _np.array(x, dtype=float, copy=True)
        hold = _np.zeros(len(self.net.nodes), dtype=bool)
        for p, offset, s, lam, direction, up in window.pipes:
            alpha, alpha_r = self.pipe_alpha[p], self.pipe_alpha_r[p]
            c = x[offset:offset + s]
            ct = x[nb + offset:nb + offset + s]
            r_c, r_ct = reaction_rates(c, ct, alpha, alpha_r)
            for block, values, rate in ((0, c, r_c), (nb, ct, r_ct)):
                if direction == 0:
                    new = values + rate * dt
                else:
                    upstream = _np.empty(s)
                    if direction > 0:
                        upstream[0] = x[block + up]
                        upstream[1:] = values[:-1]
                    else:
                        upstream[-1] = x[block + up]
                        upstream[:-1] = values[1:]
                    new = pipe_segment_update(values, upstream, lam, rate, dt, clamp=False)
                raw[block + offset:block + offset + s] = new
        result = _StepResult(raw=raw, hold=hold)
        for i, node in enumerate(self.net.nodes):
            if node.kind == "reservoir":
                continue
            if node.kind == "junction":
                sources, q_d, q_out = self.junction_terms(i, h)
                if q_d + q_out <= EPS_FLOW:
                    hold[i] = True
                for sp in (0, 1):
                    block = sp * nb
                    c_b, q_b = self.booster_input(i, sp, k, h)
                    raw[block + i] = junction_mixing(
                        inflows=[(q, x[block + src]) for src, q in sources],
                        q_b=q_b, c_b=c_b, q_d=q_d, outflows=[q_out],
                        previous=x[block + i],
                        diagnostics=diagnostics if sp == 0 else None,
                    )
            else:
                v, v_next = self.tank_volumes(i, k)
                result.tank_volumes[i] = (v, v_next)
                params = self.tank_reactions
                rates = reaction_rates(x[i], x[nb + i], params.alpha_b, params.alpha_r)
                for sp in (0, 1):
                    block = sp * nb
                    c_b, v_b = self.booster_input(i, sp, k, h)
                    raw[block + i] = tank_update(
                        v=v, c=x[block + i],
                        inflows=[(q, x[block + src]) for src, q in window.inflows[i]],
                        v_b=v_b, c_b=c_b, outflow_total=window.outflow[i],
                        r=rates[sp], dt=self.dt, v_next=v_next, clamp=False,
                    )
        return result

    def step(self, state: SegmentedState, diagnostics: SimulationDiagnostics | None = None) -> SegmentedState:
        result = self.evaluate(state.x, state.k, diagnostics)
        negative = result.raw < 0
        if negative.any():
            if diagnostics is not None:
                diagnostics.clamped += int(negative.sum())
            _LOG.debug(f"Clamped {int(negative.sum())} negative concentrations at step {state.k}")
        return SegmentedState(x=_np.maximum(result.raw, 0.0), k=state.k + 1, segmentation=self.seg)

    def simulate(self, diagnostics: SimulationDiagnostics | None = None) -> list[SegmentedState]:
        state = initial_state(self.scenario, self.seg)
        trajectory = [state]
        for _ in range(self.scenario.n_steps - 1):
            state = self.step(state, diagnostics)
            trajectory.append(state)
        return trajectory


def step(
    state: SegmentedState,
    net: WaterNetwork,
    hyd: HydraulicProfile,
    scenario: Scenario,
    k: int | None = None,
) -> SegmentedState:
    """Advance the state by one water quality step.

    Args:
        - state (SegmentedState) : State x(k); its segmentation fixes the layout.
        - net (WaterNetwork) : Network.
        - hyd (HydraulicProfile) : Hydraulics parameterizing the step.
        - scenario (Scenario) : Boosters and reaction overrides.
        - k (int | None, optional) : Step index, `state.k` if None (default).

    Returns:
        SegmentedState : x(k+1), all updates computed from the step-k snapshot.
    """
    if k is not None and k != state.k:
        state = SegmentedState(x=state.x, k=k, segmentation=state.segmentation)
    model = TransportModel(net, hyd, scenario, state.segmentation)
    return model.step(state)


def simulate(
    net: WaterNetwork,
    hyd: HydraulicProfile,
    scenario: Scenario,
    seg: Segmentation | None = None,
    diagnostics: SimulationDiagnostics | None = None,
) -> list[SegmentedState]:
    """Run a scenario over its full horizon.

    Args:
        - net (WaterNetwork) : Network.
        - hyd (HydraulicProfile) : Hydraulic profile of the scenario's demand pattern.
        - scenario (Scenario) : Scenario to run.
        - seg (Segmentation | None, optional) : Segmentation, computed from the
        hydraulics and dt_wq if None (default).
        - diagnostics (SimulationDiagnostics | None, optional) : Collects clamping
        and stagnant-junction counts.

    Returns:
        list[SegmentedState] : x(0) .. x(N_s − 1).
    """
    _LOG.debug(f"Executing: simulate(scenario='{scenario.id}', N_s={scenario.n_steps})")
    diagnostics = diagnostics if diagnostics is not None else SimulationDiagnostics()
    model = TransportModel(net, hyd, scenario, seg)
    trajectory = model.simulate(diagnostics)
    if diagnostics.clamped:
        _LOG.warning(
            f"Scenario '{scenario.id}': {diagnostics.clamped} concentrations clamped at zero"
        )
    if diagnostics.stagnant_junctions:
        _LOG.warning(
            f"Scenario '{scenario.id}': {diagnostics.stagnant_junctions} stagnant junction updates held"
        )
    _LOG.info(f"Simulated scenario '{scenario.id}' over {len(trajectory)} steps")
    return trajectory


def total_mass(
    state: SegmentedState, net: WaterNetwork, hyd: HydraulicProfile, scenario: Scenario
) -> _np.ndarray:
    """Species mass (mg/L · m³) held in pipes, tanks and junctions at step state.k.

    Junctions hold Δt_WQ·(q_D⁺ + Σ q_out) of water, the volume the simultaneous
    update keeps in transit through them. Reservoirs are excluded.
    """
    model = TransportModel(net, hyd, scenario, state.segmentation)
    seg, k = state.segmentation, state.k
    h = model.hydraulic_step(k)
    volumes = _np.zeros(seg.n_block)
    for pipe, dx in zip(net.pipes, seg.dx):
        offset = seg.pipe_offset(pipe.id)
        volumes[offset:offset + seg.segment_count(pipe.id)] = pipe.area * dx
    for i, node in enumerate(net.nodes):
        if node.kind == "tank":
            volumes[i] = model.tank_volumes(i, k)[0]
        elif node.kind == "junction":
            _, q_d, q_out = model.junction_terms(i, h)
            volumes[i] = model.dt * (q_d + q_out)
    return _np.array([volumes @ state.block(0), volumes @ state.block(1)])


def trajectory_frame(trajectory: list[SegmentedState]) -> _pd.DataFrame:
    """Long-format table with columns k, entity, species, value."""
    if not trajectory:
        return _pd.DataFrame(columns=["k", "entity", "species", "value"])
    labels = trajectory[0].segmentation.labels()
    entities = [entity for entity, _ in labels]
    species = [sp for _, sp in labels]
    frames = [
        _pd.DataFrame({"k": state.k, "entity": entities, "species": species, "value": state.x})
        for state in trajectory
    ]
    return _pd.concat(frames, ignore_index=True)
