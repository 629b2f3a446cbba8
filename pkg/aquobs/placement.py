#!/usr/bin/env python3

"""Module containing the sensor placement solvers.

This module contains the cardinality-constrained placement problem over
Gramian atoms, its greedy and brute-force solvers, the (1 − 1/e) guarantee
check and a randomized diminishing-returns probe.

Methods:
    - marginal_gain : Gain O(S ∪ {a}) − O(S) of one candidate.
    - greedy_place : Greedy selection, optionally lazy or threaded.
    - brute_force_place : Exact optimum by enumeration under a size cap.
    - guarantee_check : Greedy/optimum ratio against the 1 − 1/e bound.
    - submodularity_probe : Randomized check of diminishing returns and monotonicity.
    - per_step_placement : Greedy placement per hydraulic window as a 0/1 matrix.
"""

# Standard imports
import heapq as _heapq
import math as _math
import numpy as _np
import pandas as _pd
from time import perf_counter as _perf_counter
from itertools import combinations as _combinations
from logging import getLogger as _getLogger
from dataclasses import asdict as _asdict, dataclass as _dataclass, field as _field
from concurrent.futures import ThreadPoolExecutor as _ThreadPoolExecutor

# Module imports
from . import common as _common
from .common import GuaranteeViolation, ResourceCapError, ValidationError
from .observability import (
    MEASURES,
    GramianAtoms,
    logdet_for_set,
    scenario_epsilons,
    scenario_weights,
)

_LOG = _getLogger(__name__)

GUARANTEE = 1.0 - 1.0 / _math.e
ORACLE_CAP = 2_000_000
_TOL = 1.0e-9


@_dataclass(frozen=True, eq=False)
class PlacementProblem:
    """Robust placement problem: choose r of the candidates, pinned ones included.

    Args:
        - atoms (tuple[GramianAtoms, ...]) : Atoms of each scenario, one candidate list.
        - budget (int) : Number of sensors r, pinned sensors included.
        - pinned (tuple[str, ...], optional) : Candidates forced into the solution.
        - objective (str, optional) : 'logdet' (default) or 'trace'.
        - epsilon (float | tuple[float, ...] | None, optional) : logdet
        regularization, per-scenario default if None.
        - weights (tuple[float, ...] | None, optional) : Scenario weights, uniform if None.
        - epsilon_scale (float, optional) : Scale of the default ε.
    """

    atoms: tuple[GramianAtoms, ...]
    budget: int
    pinned: tuple[str, ...] = ()
    objective: str = "logdet"
    epsilon: float | tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None
    epsilon_scale: float = 1.0e-8
    _eps: tuple[float, ...] = _field(init=False, repr=False, default=())
    _w: _np.ndarray = _field(init=False, repr=False, default=None)
    _trace: _np.ndarray = _field(init=False, repr=False, default=None)

    def __post_init__(self):
        atoms = tuple(self.atoms)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "pinned", tuple(self.pinned))
        if self.objective not in MEASURES:
            raise ValidationError(f"Unknown objective '{self.objective}', expected one of {MEASURES}")
        if not atoms:
            raise ValidationError("At least one scenario is required")
        for other in atoms[1:]:
            if other.candidates != atoms[0].candidates:
                raise ValidationError(f"Scenario '{other.scenario_id}' has a different candidate list")
        n = len(self.candidates)
        if len(set(self.pinned)) != len(self.pinned):
            raise ValidationError("Pinned sensors are not unique")
        for cid in self.pinned:
            atoms[0].position(cid)
        if not isinstance(self.budget, (int, _np.integer)) or not len(self.pinned) <= self.budget <= n:
            raise ValidationError(
                f"Budget r={self.budget} must satisfy |P|={len(self.pinned)} <= r <= |N|={n}"
            )
        object.__setattr__(self, "_w", scenario_weights(self.weights, len(atoms)))
        if self.objective == "logdet":
            object.__setattr__(self, "_eps", scenario_epsilons(atoms, self.epsilon, self.epsilon_scale))
        else:
            object.__setattr__(self, "_trace", _np.stack([a.trace_weights() for a in atoms]))

    @property
    def candidates(self) -> tuple[str, ...]:
        return self.atoms[0].candidates

    @property
    def scenario_ids(self) -> tuple[str, ...]:
        return tuple(a.scenario_id for a in self.atoms)

    @property
    def epsilons(self) -> tuple[float, ...]:
        return self._eps

    def positions(self, sensors) -> list[int]:
        return [self.atoms[0].position(cid) for cid in sensors]

    def per_scenario(self, positions) -> _np.ndarray:
        """measure(W^(κ)(S)) per scenario for candidate positions S."""
        positions = list(positions)
        if self.objective == "trace":
            return self._trace[:, positions].sum(axis=1)
        return _np.array([logdet_for_set(a, positions, e) for a, e in zip(self.atoms, self._eps)])

    def value(self, positions) -> float:
        """Robust objective Σ_κ w_κ measure(W^(κ)(S))."""
        positions = list(positions)
        if self.objective == "trace":
            return float(self._w @ self._trace[:, positions].sum(axis=1))
        return float(self._w @ self.per_scenario(positions))


@_dataclass(frozen=True)
class Selection:
    id: str
    gain: float
    objective_after: float


@_dataclass(frozen=True)
class PlacementResult:
    """Outcome of one placement solve; `timing` is excluded from equality and from `to_dict`."""

    method: str
    objective: str
    budget: int
    pinned: tuple[str, ...]
    selections: tuple[Selection, ...]
    sensors: tuple[str, ...]
    value: float
    scenario_ids: tuple[str, ...]
    per_scenario: tuple[float, ...]
    evaluations: int
    candidates: tuple[str, ...] = ()
    timing: float = _field(default=0.0, compare=False)
    oracle: dict | None = None
    per_hydraulic_step: dict | None = None

    def to_dict(self) -> dict:
        report = {
            "method": self.method,
            "objective": self.objective,
            "budget": self.budget,
            "pinned": list(self.pinned),
            "selections": [_asdict(s) for s in self.selections],
            "sensors": list(self.sensors),
            "value": self.value,
            "per_scenario": dict(zip(self.scenario_ids, self.per_scenario)),
            "evaluations": self.evaluations,
        }
        if self.oracle is not None:
            report["oracle"] = self.oracle
        if self.per_hydraulic_step is not None:
            report["per_hydraulic_step"] = self.per_hydraulic_step
        return report


def marginal_gain(problem: PlacementProblem, sensors, candidate: str) -> float:
    """O(S ∪ {a}) − O(S) under the problem's robust objective.

    Args:
        - problem (PlacementProblem) : Placement problem.
        - sensors : Current set S (candidate ids).
        - candidate (str) : Candidate a, not in S.

    Returns:
        float : Marginal gain of a.
    """
    sensors = list(sensors)
    if candidate in sensors:
        raise ValidationError(f"Candidate '{candidate}' is already selected")
    if len(set(sensors)) != len(sensors):
        raise ValidationError("Sensor set holds duplicate ids")
    base = problem.positions(sensors)
    return problem.value(base + problem.positions([candidate])) - problem.value(base)


def _result(
    problem: PlacementProblem,
    method: str,
    chosen: list[int],
    gains: list[float],
    values: list[float],
    evaluations: int,
    started: float,
) -> PlacementResult:
    n_pinned = len(problem.pinned)
    candidates = problem.candidates
    selections = tuple(
        Selection(id=candidates[j], gain=float(g), objective_after=float(v))
        for j, g, v in zip(chosen[n_pinned:], gains, values)
    )
    return PlacementResult(
        method=method,
        objective=problem.objective,
        budget=int(problem.budget),
        pinned=problem.pinned,
        selections=selections,
        sensors=tuple(candidates[j] for j in chosen),
        value=float(problem.value(chosen)),
        scenario_ids=problem.scenario_ids,
        per_scenario=tuple(float(v) for v in problem.per_scenario(chosen)),
        evaluations=evaluations,
        candidates=candidates,
        timing=_perf_counter() - started,
    )


def greedy_place(
    problem: PlacementProblem, lazy: bool = False, max_workers: int | None = 1
) -> PlacementResult:
    """Greedy maximization of the robust objective starting from the pinned set.

    Each round adds the candidate with the largest marginal gain; ties go to
    the lowest candidate index. The plain variant evaluates every remaining
    candidate once per round, Σ_t (|N| − |P| − t) evaluations in total.

    Args:
        - problem (PlacementProblem) : Placement problem.
        - lazy (bool, optional) : Reuse stale gains as upper bounds from a priority queue.
        - max_workers (int | None, optional) : Threads for the gain evaluations of
        one round, capped by AQUOBS_THREADS; None uses the cap.

    Returns:
        PlacementResult : Ordered selections with their gains.
    """
    _LOG.debug(
        f"Executing: greedy_place(objective='{problem.objective}', r={problem.budget}, lazy={lazy})"
    )
    started = _perf_counter()
    chosen = problem.positions(problem.pinned)
    current = problem.value(chosen)
    remaining = [j for j in range(len(problem.candidates)) if j not in set(chosen)]
    gains: list[float] = []
    values: list[float] = []
    evaluations = 0
    rounds = problem.budget - len(chosen)
    workers = _common.thread_count(max_workers)
    executor = _ThreadPoolExecutor(max_workers=workers) if workers > 1 and not lazy else None

    def evaluate(j: int) -> float:
        return problem.value(chosen + [j])

    try:
        if lazy:
            heap = []
            for j in remaining:
                heap.append((-(evaluate(j) - current), j, 0))
                evaluations += 1
            _heapq.heapify(heap)
            for t in range(rounds):
                while True:
                    neg_gain, j, stamp = _heapq.heappop(heap)
                    if stamp == t:
                        break
                    _heapq.heappush(heap, (-(evaluate(j) - current), j, t))
                    evaluations += 1
                chosen.append(j)
                current -= neg_gain
                gains.append(-neg_gain)
                values.append(current)
        else:
            for _ in range(rounds):
                scores = list(executor.map(evaluate, remaining)) if executor else [evaluate(j) for j in remaining]
                evaluations += len(remaining)
                best = 0
                for idx in range(1, len(remaining)):
                    if scores[idx] > scores[best]:
                        best = idx
                j = remaining.pop(best)
                chosen.append(j)
                gains.append(scores[best] - current)
                current = scores[best]
                values.append(current)
    finally:
        if executor is not None:
            executor.shutdown()
    for before, after in zip(gains, gains[1:]):
        if after > before + _TOL:
            _LOG.warning(f"Greedy gains increased from {before} to {after}; objective is not submodular here")
    result = _result(problem, "lazy-greedy" if lazy else "greedy", chosen, gains, values, evaluations, started)
    _LOG.info(f"Greedy placement {list(result.sensors)} with objective {result.value:.6g}")
    return result


def brute_force_place(problem: PlacementProblem, cap: int = ORACLE_CAP) -> PlacementResult:
    """Exact optimum over every S ⊇ P with |S| = r.

    Ties keep the lexicographically first subset of candidate positions.

    Raises:
        ResourceCapError : C(|N| − |P|, r − |P|) exceeds `cap`.
    """
    _LOG.debug(f"Executing: brute_force_place(objective='{problem.objective}', r={problem.budget}, cap={cap})")
    started = _perf_counter()
    pinned = problem.positions(problem.pinned)
    free = [j for j in range(len(problem.candidates)) if j not in set(pinned)]
    need = problem.budget - len(pinned)
    count = _math.comb(len(free), need)
    if count > cap:
        raise ResourceCapError(
            f"Brute force needs {count} subsets, above the oracle cap of {int(cap)}; use greedy placement"
        )
    best, best_value, evaluations = None, -_math.inf, 0
    for combo in _combinations(free, need):
        value = problem.value(pinned + list(combo))
        evaluations += 1
        if value > best_value:
            best, best_value = list(combo), value
    chosen = list(pinned)
    gains, values = [], []
    current = problem.value(chosen)
    for j in best:
        chosen.append(j)
        after = problem.value(chosen)
        gains.append(after - current)
        values.append(after)
        current = after
    return _result(problem, "brute-force", chosen, gains, values, evaluations, started)


def guarantee_check(greedy: PlacementResult, oracle: PlacementResult) -> float:
    """Ratio O(S_greedy) / O(S*), asserted to be at least 1 − 1/e.

    Returns 1.0 when the optimum is not positive.
    """
    same = (
        greedy.objective == oracle.objective
        and greedy.budget == oracle.budget
        and greedy.pinned == oracle.pinned
        and greedy.scenario_ids == oracle.scenario_ids
        and greedy.candidates == oracle.candidates
    )
    if not same:
        raise ValidationError("Greedy and oracle results belong to different problems")
    ratio = 1.0 if oracle.value <= 0 else greedy.value / oracle.value
    _LOG.info(f"Greedy/optimum ratio {ratio:.6f}")
    if ratio < GUARANTEE - _TOL:
        raise GuaranteeViolation(f"Greedy/optimum ratio {ratio:.6f} is below 1 - 1/e")
    return ratio


@_dataclass(frozen=True)
class ProbeReport:
    trials: int
    min_slack: float | None
    min_gain: float | None
    passed: bool
    vacuous: bool

    def to_dict(self) -> dict:
        return _asdict(self)


def _nested_subsets(rng: _np.random.Generator, others: _np.ndarray) -> tuple[_np.ndarray, _np.ndarray]:
    """Random A ⊊ B ⊆ others; B is never empty and always holds an element outside A."""
    b = others[rng.random(others.size) < 0.5]
    if b.size == 0:
        b = others[[int(rng.integers(others.size))]]
    keep = rng.random(b.size) < 0.5
    if keep.all():
        keep[int(rng.integers(b.size))] = False
    return b[keep], b


def submodularity_probe(problem: PlacementProblem, trials: int = 1000, seed: int = 0) -> ProbeReport:
    """Sample chains A ⊊ B and s ∉ B; record gain_A(s) − gain_B(s) and the gains.

    Args:
        - problem (PlacementProblem) : Problem whose objective is probed over all candidates.
        - trials (int, optional) : Number of sampled triples.
        - seed (int, optional) : Seed of the numpy random generator.

    Returns:
        ProbeReport : Smallest slack and gain; passes if both are at least −1e−9.
    """
    _LOG.debug(f"Executing: submodularity_probe(trials={trials}, seed={seed})")
    if trials < 1:
        raise ValidationError("trials must be at least 1")
    n = len(problem.candidates)
    if n < 2:
        return ProbeReport(trials=trials, min_slack=None, min_gain=None, passed=True, vacuous=True)
    rng = _np.random.default_rng(seed)
    min_slack, min_gain = _math.inf, _math.inf
    for _ in range(trials):
        s = int(rng.integers(n))
        others = _np.array([j for j in range(n) if j != s])
        a, b = _nested_subsets(rng, others)
        gain_a = problem.value(list(a) + [s]) - problem.value(list(a))
        gain_b = problem.value(list(b) + [s]) - problem.value(list(b))
        min_slack = min(min_slack, gain_a - gain_b)
        min_gain = min(min_gain, gain_a, gain_b)
    passed = min_slack >= -_TOL and min_gain >= -_TOL
    if not passed:
        _LOG.warning(f"Probe found slack {min_slack} and gain {min_gain}")
    return ProbeReport(trials=trials, min_slack=float(min_slack), min_gain=float(min_gain),
                       passed=bool(passed), vacuous=False)


def per_step_placement(problem: PlacementProblem, lazy: bool = False) -> _pd.DataFrame:
    """Greedy placement per hydraulic window as a 0/1 matrix, candidates × windows.

    Atoms are sliced to the water quality steps of each window and ε is
    recomputed per window unless the problem fixes it.
    """
    _LOG.debug(f"Executing: per_step_placement(r={problem.budget})")
    spans = {(a.n_steps, a.steps_per_window) for a in problem.atoms}
    if len(spans) != 1:
        raise ValidationError("Scenarios must share the horizon and hydraulic step to place per window")
    n_steps, per_window = spans.pop()
    if per_window < 1:
        raise ValidationError("Atoms carry no hydraulic window length")
    n_windows = -(-n_steps // per_window)
    matrix = _pd.DataFrame(
        0, index=_pd.Index(problem.candidates, name="node"),
        columns=[f"h{w}" for w in range(n_windows)],
    )
    for w in range(n_windows):
        start, stop = w * per_window, min((w + 1) * per_window, n_steps)
        window = PlacementProblem(
            atoms=tuple(a.window(start, stop) for a in problem.atoms),
            budget=problem.budget,
            pinned=problem.pinned,
            objective=problem.objective,
            epsilon=problem.epsilon,
            weights=problem.weights,
            epsilon_scale=problem.epsilon_scale,
        )
        result = greedy_place(window, lazy=lazy)
        matrix.loc[list(result.sensors), f"h{w}"] = 1
    return matrix
