#!/usr/bin/env python3

"""Module containing the nonlinear observability computations.

This module contains the analytic Jacobian of one water quality step, the
chain-rule propagation of trajectory sensitivities, the per-sensor Gramian
atoms whose subset sums give the observability Gramian of any sensor set,
and the scalar observability measures used for sensor placement.

Methods:
    - step_jacobian : Exact Jacobian of one water quality step.
    - trajectory_jacobians : Sensitivities ∂x_i/∂x_0 along a trajectory.
    - sensitivity_rows : Candidate rows of the sensitivities, one step at a time.
    - gramian_atoms : Per-candidate Gramian atoms from sensitivities.
    - gramian_for_set : Gramian of a sensor set as a sum of atoms.
    - stacked_sensitivity : Stacked output-sequence Jacobian of the active sensors.
    - linear_gramian : Observability Gramian of a time-invariant linear system.
    - finite_difference_jacobian : Central-difference Jacobian of a vector function.
    - measure_trace, measure_logdet, measure_rank, measure_lambda_min :
    Scalar observability measures.
    - logdet_for_set : Regularized log-determinant of a sensor set's Gramian.
    - default_epsilon : Regularization ε of the log-determinant for one scenario.
    - per_scenario_values, robust_objective : Scenario-weighted observability objective.
    - scenario_atoms : Simulate a scenario and build its Gramian atoms.
    - analyze_scenarios : Run scenario_atoms for several scenarios concurrently.
    - atoms_frame : Table of atom factor rows for export.
"""

# Standard imports
import numpy as _np
import pandas as _pd
from time import perf_counter as _perf_counter
from logging import getLogger as _getLogger
from dataclasses import dataclass as _dataclass, field as _field
from concurrent.futures import ThreadPoolExecutor as _ThreadPoolExecutor
from scipy.sparse import coo_matrix as _coo_matrix, csr_matrix as _csr_matrix, diags as _diags

# Module imports
from . import common as _common
from .common import ValidationError
from .network import HydraulicProfile, Segmentation, WaterNetwork, segment_pipes
from .dynamics import (
    Scenario,
    SegmentedState,
    SensorModel,
    SimulationDiagnostics,
    TransportModel,
    sensor_model,
    simulate,
)

_LOG = _getLogger(__name__)

MEASURES = ("trace", "logdet")
DENSE_ATOM_CAP = 2000
_SYMMETRY_TOL = 1.0e-9


def _assemble_jacobian(model: TransportModel, x: _np.ndarray, k: int) -> _csr_matrix:
    result = model.evaluate(x, k)
    h = model.hydraulic_step(k)
    window = model.window(h)
    nb, dt, n = model.seg.n_block, model.dt, model.n_x
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []

    def add(r: int, c: int, v: float) -> None:
        if v != 0.0:
            rows.append(r)
            cols.append(c)
            vals.append(v)

    for p, offset, s, lam, direction, up in window.pipes:
        alpha, alpha_r = model.pipe_alpha[p], model.pipe_alpha_r[p]
        for m in range(s):
            ic, it = offset + m, nb + offset + m
            c, ct = x[ic], x[it]
            add(ic, ic, (1.0 - lam) - (alpha + alpha_r * ct) * dt)
            add(ic, it, -alpha_r * c * dt)
            add(it, it, (1.0 - lam) - alpha_r * c * dt)
            add(it, ic, -alpha_r * ct * dt)
            if direction == 0:
                continue
            if direction > 0:
                src = up if m == 0 else offset + m - 1
            else:
                src = up if m == s - 1 else offset + m + 1
            add(ic, src, lam)
            add(it, nb + src, lam)

    for i, node in enumerate(model.net.nodes):
        if node.kind == "reservoir" or (node.kind == "junction" and result.hold[i]):
            add(i, i, 1.0)
            add(nb + i, nb + i, 1.0)
        elif node.kind == "junction":
            sources, q_d, q_out = model.junction_terms(i, h)
            denominator = q_d + q_out
            for src, q in sources:
                add(i, src, q / denominator)
                add(nb + i, nb + src, q / denominator)
        else:
            v, v_next = result.tank_volumes[i]
            params = model.tank_reactions
            c, ct = x[i], x[nb + i]
            keep = v - window.outflow[i] * dt
            add(i, i, (keep - v * dt * (params.alpha_b + params.alpha_r * ct)) / v_next)
            add(i, nb + i, -v * dt * params.alpha_r * c / v_next)
            add(nb + i, nb + i, (keep - v * dt * params.alpha_r * c) / v_next)
            add(nb + i, i, -v * dt * params.alpha_r * ct / v_next)
            for src, q in window.inflows[i]:
                add(i, src, q * dt / v_next)
                add(nb + i, nb + src, q * dt / v_next)

    jac = _coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    clamped = result.raw < 0
    if clamped.any():
        # the clamp is locally constant, so clamped entries get zero rows
        jac = (_diags((~clamped).astype(float)) @ jac).tocsr()
    return jac


def step_jacobian(
    state: SegmentedState,
    net: WaterNetwork,
    hyd: HydraulicProfile,
    scenario: Scenario,
    k: int | None = None,
) -> _csr_matrix:
    """Exact Jacobian F_k = ∂x(k+1)/∂x(k) of one water quality step.

    Args:
        - state (SegmentedState) : Evaluation point x(k).
        - net (WaterNetwork) : Network.
        - hyd (HydraulicProfile) : Hydraulics parameterizing the step.
        - scenario (Scenario) : Boosters and reaction overrides.
        - k (int | None, optional) : Step index, `state.k` if None (default).

    Returns:
        scipy.sparse.csr_matrix : n_x × n_x Jacobian.
    """
    model = TransportModel(net, hyd, scenario, state.segmentation)
    return _assemble_jacobian(model, state.x, state.k if k is None else k)


@_dataclass(frozen=True, eq=False)
class TrajectoryJacobians:
    """Sensitivities Φ_i = ∂x_i/∂x_0 for i = 0 .. N_s − 1."""

    scenario_id: str
    phis: tuple[_np.ndarray, ...]

    @property
    def n_steps(self) -> int:
        return len(self.phis)

    @property
    def n_x(self) -> int:
        return self.phis[0].shape[0]


def _sensitivities(trajectory, net, hyd, scenario):
    """Validate the trajectory; return n_x and an iterator over Φ_0 = I, Φ_1, ..."""
    if not trajectory:
        raise ValidationError("Trajectory is empty")
    model = TransportModel(net, hyd, scenario, trajectory[0].segmentation)
    for state in trajectory:
        if state.x.shape != (model.n_x,):
            raise ValidationError(
                f"State at step {state.k} has dimension {state.x.shape[0]}, expected {model.n_x}"
            )

    def propagate():
        phi = _np.eye(model.n_x)
        yield phi
        for state in trajectory[:-1]:
            phi = _np.asarray(_assemble_jacobian(model, state.x, state.k) @ phi)
            yield phi

    return model.n_x, propagate()


def trajectory_jacobians(
    trajectory: list[SegmentedState],
    net: WaterNetwork,
    hyd: HydraulicProfile,
    scenario: Scenario,
) -> TrajectoryJacobians:
    """Propagate Φ_{i+1} = F_i Φ_i along a simulated trajectory, Φ_0 = I.

    Args:
        - trajectory (list[SegmentedState]) : Output of `simulate` for the same inputs.
        - net (WaterNetwork) : Network.
        - hyd (HydraulicProfile) : Hydraulics of the scenario.
        - scenario (Scenario) : Scenario that produced the trajectory.

    Returns:
        TrajectoryJacobians : One dense n_x × n_x sensitivity per step.
    """
    _LOG.debug(f"Executing: trajectory_jacobians(scenario='{scenario.id}', steps={len(trajectory)})")
    _, phis = _sensitivities(trajectory, net, hyd, scenario)
    return TrajectoryJacobians(scenario_id=scenario.id, phis=tuple(phis))


def sensitivity_rows(
    trajectory: list[SegmentedState],
    net: WaterNetwork,
    hyd: HydraulicProfile,
    scenario: Scenario,
    sensor: SensorModel,
) -> _np.ndarray:
    """Candidate factor rows c_j Φ_i, gathered while Φ is propagated.

    Only the current Φ_i is held; memory grows with the candidate rows, not
    with N_s · n_x².

    Returns:
        np.ndarray : Shape (n_candidates, N_s, rows per sensor, n_x), the
        layout of `GramianAtoms.factors`.
    """
    _LOG.debug(f"Executing: sensitivity_rows(scenario='{scenario.id}', candidates={len(sensor.candidates)})")
    n_x, phis = _sensitivities(trajectory, net, hyd, scenario)
    if sensor.n_x != n_x:
        raise ValidationError(f"Sensor model has n_x={sensor.n_x}, sensitivities have n_x={n_x}")
    idx = _np.array(sensor.rows, dtype=int).reshape(len(sensor.candidates), sensor.n_rows)
    rows = _np.zeros((len(sensor.candidates), len(trajectory), sensor.n_rows, n_x))
    for i, phi in enumerate(phis):
        rows[:, i] = phi[idx]
    return rows


@_dataclass(frozen=True, eq=False)
class GramianAtoms:
    """Per-candidate Gramian atoms A_j = Σ_i Φ_iᵀ c_jᵀ c_j Φ_i of one scenario.

    Atoms are kept as factor rows ρ_{j,i} = c_j Φ_i, shape
    (n_candidates, N_s, rows per sensor, n_x); dense atoms are materialized
    only when n_x does not exceed `dense_cap`.
    """

    scenario_id: str
    candidates: tuple[str, ...]
    factors: _np.ndarray
    steps_per_window: int = 0
    dense_cap: int = DENSE_ATOM_CAP
    _dense: _np.ndarray | None = _field(init=False, repr=False, default=None)
    _pos: dict = _field(init=False, repr=False, default=None)

    def __post_init__(self):
        factors = _np.array(self.factors, dtype=float)
        if factors.ndim != 4 or factors.shape[0] != len(self.candidates):
            raise ValidationError("Factor rows must have shape (candidates, steps, rows, n_x)")
        factors.setflags(write=False)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "_pos", {cid: j for j, cid in enumerate(self.candidates)})
        if len(self._pos) != len(self.candidates):
            raise ValidationError("Candidate sensor ids are not unique")
        if self.n_x <= self.dense_cap:
            dense = _np.stack([self._expand(j) for j in range(len(self.candidates))]) \
                if self.candidates else _np.zeros((0, self.n_x, self.n_x))
            dense.setflags(write=False)
            object.__setattr__(self, "_dense", dense)

    @property
    def n_x(self) -> int:
        return self.factors.shape[3]

    @property
    def n_steps(self) -> int:
        return self.factors.shape[1]

    @property
    def materialized(self) -> bool:
        return self._dense is not None

    def _expand(self, j: int) -> _np.ndarray:
        rho = self.factors[j].reshape(-1, self.n_x)
        atom = rho.T @ rho
        return 0.5 * (atom + atom.T)

    def position(self, candidate: str) -> int:
        try:
            return self._pos[candidate]
        except KeyError:
            raise ValidationError(f"Unknown sensor '{candidate}'") from None

    def atom(self, candidate: str | int) -> _np.ndarray:
        j = candidate if isinstance(candidate, (int, _np.integer)) else self.position(candidate)
        return self._dense[j] if self._dense is not None else self._expand(j)

    def trace_weights(self) -> _np.ndarray:
        """trace(A_j) = Σ_i ‖ρ_{j,i}‖² per candidate."""
        return _np.einsum("jsmi,jsmi->j", self.factors, self.factors)

    def full_diagonal(self) -> _np.ndarray:
        """Diagonal of the all-candidate Gramian."""
        return _np.einsum("jsmi,jsmi->i", self.factors, self.factors)

    def window(self, start: int, stop: int) -> "GramianAtoms":
        """Atoms restricted to water quality steps [start, stop)."""
        if not 0 <= start < stop <= self.n_steps:
            raise ValidationError(f"Step window [{start}, {stop}) outside 0..{self.n_steps}")
        return GramianAtoms(
            scenario_id=self.scenario_id,
            candidates=self.candidates,
            factors=self.factors[:, start:stop],
            steps_per_window=self.steps_per_window,
            dense_cap=self.dense_cap,
        )


def gramian_atoms(
    jac: TrajectoryJacobians,
    sensor: SensorModel,
    dense_cap: int = DENSE_ATOM_CAP,
    steps_per_window: int = 0,
) -> GramianAtoms:
    """Per-candidate Gramian atoms from trajectory sensitivities.

    Args:
        - jac (TrajectoryJacobians) : Sensitivities of one scenario.
        - sensor (SensorModel) : Candidates and their selector rows.
        - dense_cap (int, optional) : Largest n_x for which atoms are materialized.
        - steps_per_window (int, optional) : WQ steps per hydraulic step, kept for
        per-window placement.

    Returns:
        GramianAtoms : Atom factors for every candidate, whatever γ is.
    """
    _LOG.debug(f"Executing: gramian_atoms(scenario='{jac.scenario_id}', candidates={len(sensor.candidates)})")
    if sensor.n_x != jac.n_x:
        raise ValidationError(f"Sensor model has n_x={sensor.n_x}, sensitivities have n_x={jac.n_x}")
    idx = _np.array(sensor.rows, dtype=int).reshape(len(sensor.candidates), sensor.n_rows)
    factors = _np.stack([phi[idx] for phi in jac.phis], axis=1)
    return GramianAtoms(
        scenario_id=jac.scenario_id,
        candidates=sensor.candidates,
        factors=factors,
        steps_per_window=steps_per_window,
        dense_cap=dense_cap,
    )


def gramian_for_set(atoms: GramianAtoms, sensors) -> _np.ndarray:
    """W(S) = Σ_{j∈S} A_j; the zero matrix for the empty set."""
    positions = sorted({atoms.position(cid) for cid in sensors})
    gramian = _np.zeros((atoms.n_x, atoms.n_x))
    for j in positions:
        gramian += atoms.atom(j)
    return gramian


def stacked_sensitivity(jac: TrajectoryJacobians, sensor: SensorModel) -> _np.ndarray:
    """Stacked output-sequence Jacobian [ΓC Φ_0; ...; ΓC Φ_{N_s−1}], zero rows removed."""
    idx = [i for j, rows in enumerate(sensor.rows) if sensor.gamma[j] for i in rows]
    if not idx:
        return _np.zeros((0, jac.n_x))
    return _np.vstack([phi[idx] for phi in jac.phis])


def linear_gramian(a: _np.ndarray, c: _np.ndarray, n_steps: int) -> _np.ndarray:
    """Σ_{i<N_s} (Aⁱ)ᵀ Cᵀ C Aⁱ for a time-invariant linear system."""
    a, c = _np.asarray(a, dtype=float), _np.atleast_2d(_np.asarray(c, dtype=float))
    power = _np.eye(a.shape[0])
    gramian = _np.zeros_like(power)
    for _ in range(n_steps):
        block = c @ power
        gramian += block.T @ block
        power = a @ power
    return gramian


def finite_difference_jacobian(fn, x: _np.ndarray, h: float = 1.0e-6) -> _np.ndarray:
    """Central-difference Jacobian of a vector function at x."""
    x = _np.asarray(x, dtype=float)
    f0 = _np.asarray(fn(x))
    jac = _np.zeros((f0.size, x.size))
    for i in range(x.size):
        e = _np.zeros_like(x)
        e[i] = h
        jac[:, i] = (_np.asarray(fn(x + e)) - _np.asarray(fn(x - e))) / (2.0 * h)
    return jac


def _symmetric(w: _np.ndarray) -> _np.ndarray:
    w = _np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValidationError(f"Gramian must be square, got shape {w.shape}")
    scale = max(1.0, float(_np.max(_np.abs(w)))) if w.size else 1.0
    if w.size and float(_np.max(_np.abs(w - w.T))) > _SYMMETRY_TOL * scale:
        raise ValidationError("Gramian is not symmetric")
    return 0.5 * (w + w.T)


def measure_trace(w: _np.ndarray) -> float:
    """Average observability energy, trace(W)."""
    return float(_np.trace(_symmetric(w)))


def measure_logdet(w: _np.ndarray, epsilon: float) -> float:
    """Regularized volumetric measure logdet(W + εI) − n log ε (0 for W = 0)."""
    if not epsilon > 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    eigenvalues = _np.clip(_np.linalg.eigvalsh(_symmetric(w)), 0.0, None)
    return float(_np.sum(_np.log1p(eigenvalues / epsilon)))


def measure_rank(w: _np.ndarray, tol: float = 1.0e-10) -> int:
    """Number of eigenvalues above tol·λ_max."""
    eigenvalues = _np.linalg.eigvalsh(_symmetric(w))
    if eigenvalues.size == 0 or eigenvalues[-1] <= 0:
        return 0
    return int(_np.sum(eigenvalues > tol * eigenvalues[-1]))


def measure_lambda_min(w: _np.ndarray) -> float:
    return float(_np.linalg.eigvalsh(_symmetric(w))[0])


def logdet_for_set(atoms: GramianAtoms, positions, epsilon: float) -> float:
    """Regularized logdet of W(S) for candidate positions.

    Without materialized atoms the eigenvalues come from the smaller of the
    two Gram matrices of the stacked factor rows; both share the nonzero spectrum.
    """
    positions = sorted(set(int(j) for j in positions))
    if not positions:
        return measure_logdet(_np.zeros((1, 1)), epsilon)
    if atoms.materialized:
        return measure_logdet(atoms._dense[positions].sum(axis=0), epsilon)
    rows = atoms.factors[positions].reshape(-1, atoms.n_x)
    gram = rows @ rows.T if rows.shape[0] < atoms.n_x else rows.T @ rows
    return measure_logdet(gram, epsilon)


def default_epsilon(atoms: GramianAtoms, scale: float = 1.0e-8) -> float:
    """ε = scale · max(1, mean diagonal of the all-candidate Gramian)."""
    diagonal = atoms.full_diagonal()
    return scale * max(1.0, float(diagonal.mean()) if diagonal.size else 0.0)


def _check_candidates(atoms_by_scenario) -> tuple[str, ...]:
    if not atoms_by_scenario:
        raise ValidationError("At least one scenario is required")
    candidates = atoms_by_scenario[0].candidates
    for atoms in atoms_by_scenario[1:]:
        if atoms.candidates != candidates:
            raise ValidationError(
                f"Scenario '{atoms.scenario_id}' has a different candidate list"
            )
    return candidates


def scenario_weights(weights, d: int) -> _np.ndarray:
    """Normalized nonnegative scenario weights, uniform 1/d when None."""
    if weights is None:
        return _np.full(d, 1.0 / d)
    weights = _np.asarray(weights, dtype=float)
    if weights.shape != (d,) or (weights < 0).any() or weights.sum() <= 0:
        raise ValidationError("Scenario weights must be nonnegative, one per scenario, not all zero")
    return weights / weights.sum()


def scenario_epsilons(atoms_by_scenario, epsilon=None, scale: float = 1.0e-8) -> tuple[float, ...]:
    if epsilon is None:
        return tuple(default_epsilon(atoms, scale) for atoms in atoms_by_scenario)
    values = _np.broadcast_to(_np.asarray(epsilon, dtype=float), (len(atoms_by_scenario),))
    if not (values > 0).all():
        raise ValidationError("epsilon must be positive")
    return tuple(float(v) for v in values)


def per_scenario_values(
    atoms_by_scenario, sensors, measure: str = "trace", epsilon=None
) -> _np.ndarray:
    """measure(W^(κ)(S)) for every scenario κ."""
    if measure not in MEASURES:
        raise ValidationError(f"Unknown measure '{measure}', expected one of {MEASURES}")
    _check_candidates(atoms_by_scenario)
    sensors = list(sensors)
    if measure == "trace":
        values = []
        for atoms in atoms_by_scenario:
            weights = atoms.trace_weights()
            values.append(float(sum(weights[atoms.position(cid)] for cid in set(sensors))))
        return _np.array(values)
    eps = scenario_epsilons(atoms_by_scenario, epsilon)
    return _np.array([
        logdet_for_set(atoms, [atoms.position(cid) for cid in sensors], e)
        for atoms, e in zip(atoms_by_scenario, eps)
    ])


def robust_objective(
    atoms_by_scenario, sensors, measure: str = "trace", epsilon=None, weights=None
) -> float:
    """Scenario-weighted observability objective Σ_κ w_κ measure(W^(κ)(S)).

    Args:
        - atoms_by_scenario (list[GramianAtoms]) : Atoms of each scenario, sharing
        one candidate list.
        - sensors : Sensor set S (candidate ids).
        - measure (str, optional) : 'trace' (default) or 'logdet'.
        - epsilon (float | list[float] | None, optional) : logdet regularization,
        per scenario default if None.
        - weights (list[float] | None, optional) : Scenario weights, 1/d if None.

    Returns:
        float : Robust objective value.
    """
    values = per_scenario_values(atoms_by_scenario, sensors, measure, epsilon)
    return float(scenario_weights(weights, len(atoms_by_scenario)) @ values)


@_dataclass
class ScenarioAnalysis:
    scenario: Scenario
    segmentation: Segmentation
    trajectory: list[SegmentedState]
    atoms: GramianAtoms
    diagnostics: SimulationDiagnostics
    timings: dict[str, float]


def scenario_atoms(
    net: WaterNetwork,
    hyd: HydraulicProfile,
    scenario: Scenario,
    candidates: list[str] | None = None,
    species: tuple[str, ...] = ("chlorine",),
    dense_cap: int = DENSE_ATOM_CAP,
) -> ScenarioAnalysis:
    """Segment, simulate, propagate sensitivities and build atoms for one scenario."""
    _LOG.info(f"Analyzing scenario '{scenario.id}'")
    timings = {}
    start = _perf_counter()
    seg = segment_pipes(net, hyd, scenario.dt_wq)
    diagnostics = SimulationDiagnostics()
    trajectory = simulate(net, hyd, scenario, seg, diagnostics)
    timings["simulate"] = _perf_counter() - start
    start = _perf_counter()
    sensor = sensor_model(seg, candidates=candidates, species=species)
    rows = sensitivity_rows(trajectory, net, hyd, scenario, sensor)
    timings["jacobians"] = _perf_counter() - start
    start = _perf_counter()
    atoms = GramianAtoms(
        scenario_id=scenario.id,
        candidates=sensor.candidates,
        factors=rows,
        steps_per_window=scenario.steps_per_hydraulic,
        dense_cap=dense_cap,
    )
    timings["atoms"] = _perf_counter() - start
    return ScenarioAnalysis(scenario, seg, trajectory, atoms, diagnostics, timings)


def analyze_scenarios(
    net: WaterNetwork,
    jobs: list[tuple[HydraulicProfile, Scenario]],
    candidates: list[str] | None = None,
    species: tuple[str, ...] = ("chlorine",),
    dense_cap: int = DENSE_ATOM_CAP,
    max_workers: int | None = None,
) -> list[ScenarioAnalysis]:
    """Run scenario_atoms for every (hydraulics, scenario) pair, in input order."""
    ids = [scenario.id for _, scenario in jobs]
    if len(set(ids)) != len(ids):
        raise ValidationError("Scenario ids must be unique")
    workers = _common.thread_count(max_workers)

    def run(job):
        hyd, scenario = job
        return scenario_atoms(net, hyd, scenario, candidates, species, dense_cap)

    if workers == 1 or len(jobs) == 1:
        return [run(job) for job in jobs]
    with _ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, jobs))


def atoms_frame(atoms: GramianAtoms) -> _pd.DataFrame:
    """Factor rows ρ_{j,i} as a table keyed (scenario, sensor, step, row)."""
    n_cand, n_steps, m, n_x = atoms.factors.shape
    index = _pd.MultiIndex.from_product(
        [[atoms.scenario_id], list(atoms.candidates), range(n_steps), range(m)],
        names=["scenario", "sensor", "step", "row"],
    )
    frame = _pd.DataFrame(
        atoms.factors.reshape(-1, n_x), index=index, columns=[f"x{i}" for i in range(n_x)]
    )
    return frame.reset_index()
