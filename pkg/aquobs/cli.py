#!/usr/bin/env python3

"""Module containing the command-line front end.

This module ties network and hydraulics loading, simulation, observability
and placement into the `simulate`, `place` and `oracle` batch commands.

Methods:
    - load_run : Read the network, scenarios and hydraulics named by a RunConfig.
    - cmd_simulate : Simulate one scenario and write its trajectory and summary.
    - cmd_place : Robust greedy placement over one or more scenarios.
    - cmd_oracle : Greedy against brute force with the guarantee ratio and a probe.
    - build_parser : Argument parser of the `aquobs` command.
    - main : Entry point returning the process exit code.
"""

# Standard imports
import io as _io
import os as _os
import json as _json
import numpy as _np
from logging import getLogger as _getLogger
from argparse import ArgumentParser as _ArgumentParser
from dataclasses import dataclass as _dataclass, field as _field, replace as _replace

# Module imports
from . import common as _common, __version__, _EXIT_MSG, SPECIES
from .common import AquobsError, ValidationError
from .network import (
    HydraulicProfile,
    WaterNetwork,
    load_hydraulics,
    parse_inp_topology,
    parse_network,
    segment_pipes,
)
from .dynamics import Scenario, SimulationDiagnostics, parse_scenario, simulate, trajectory_frame
from .observability import analyze_scenarios, atoms_frame
from .placement import (
    PlacementProblem,
    brute_force_place,
    greedy_place,
    guarantee_check,
    per_step_placement,
    submodularity_probe,
)

_LOG = _getLogger(__name__)


@_dataclass
class RunConfig:
    """Inputs and flags of one command run; unset flags fall back to the settings."""

    network: str
    scenarios: list[str]
    hydraulics: str | None = None
    out_dir: str = "output"
    seed: int = 0
    settings: dict = _field(default_factory=_common.load_settings)
    objective: str | None = None
    sensors: int | None = None
    pins: list[str] = _field(default_factory=list)
    candidates: list[str] | None = None
    species: list[str] | None = None
    epsilon: float | None = None
    oracle_cap: int | None = None
    lazy: bool | None = None
    per_step: bool = False
    export_atoms: bool = False
    binary: bool | None = None

    def __post_init__(self):
        if not self.scenarios:
            raise ValidationError("At least one --scenario is required")
        self.network = _common.validate_textfile(self.network)
        self.scenarios = [_common.validate_textfile(path) for path in self.scenarios]
        if self.hydraulics is not None:
            self.hydraulics = _common.validate_textfile(self.hydraulics)

    def option(self, section: str, key: str, value=None):
        return self.settings[section][key] if value is None else value


def _load_network(path: str) -> WaterNetwork:
    text = _common.read_textfile(path)
    if path.lower().endswith(".inp"):
        return parse_inp_topology(text)
    return parse_network(text)


def load_run(config: RunConfig) -> tuple[WaterNetwork, list[tuple[HydraulicProfile, Scenario]]]:
    """Read the network, scenarios and hydraulics named by a RunConfig.

    A scenario's own `hydraulics` path, relative to the scenario file, takes
    precedence over `--hydraulics`.
    """
    _LOG.debug(f"Executing: load_run(network='{config.network}', scenarios={config.scenarios})")
    net = _load_network(config.network)
    tolerance = float(config.option("hydraulics", "mass_tolerance"))
    default_dt_h = float(config.option("hydraulics", "default_dt_h"))
    cache: dict[str, HydraulicProfile] = {}
    jobs = []
    for path in config.scenarios:
        scenario = parse_scenario(_common.read_textfile(path))
        source = config.hydraulics
        if scenario.hydraulics is not None:
            source = _common.validate_textfile(
                _os.path.join(_os.path.dirname(path), scenario.hydraulics)
            )
        if source is None:
            raise ValidationError(f"Scenario '{scenario.id}' names no hydraulics and --hydraulics is unset")
        if source not in cache:
            cache[source] = load_hydraulics(
                _common.read_textfile(source), net,
                mass_tolerance=tolerance, default_dt_h=default_dt_h,
            )
        jobs.append((cache[source], scenario))
    ids = [scenario.id for _, scenario in jobs]
    if len(set(ids)) != len(ids):
        raise ValidationError("Scenario ids must be unique")
    return net, jobs


def _write_json(path: str, report: dict) -> str:
    return _common.write_atomic(path, _json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_simulate(config: RunConfig) -> dict[str, str]:
    """Simulate one scenario and write its trajectory and a summary JSON.

    Args:
        - config (RunConfig) : Run inputs with exactly one scenario.

    Returns:
        dict[str, str] : Paths of the written files keyed 'trajectory' and 'summary'.
    """
    _LOG.debug("Executing: cmd_simulate()")
    if len(config.scenarios) != 1:
        raise ValidationError("simulate takes exactly one --scenario")
    net, [(hyd, scenario)] = load_run(config)
    seg = segment_pipes(net, hyd, scenario.dt_wq)
    diagnostics = SimulationDiagnostics()
    trajectory = simulate(net, hyd, scenario, seg, diagnostics)
    binary = config.settings["output"]["trajectory_format"] == "npz" if config.binary is None else config.binary
    if binary:
        buffer = _io.BytesIO()
        labels = seg.labels()
        _np.savez(
            buffer,
            k=_np.array([state.k for state in trajectory]),
            x=_np.stack([state.x for state in trajectory]),
            entity=_np.array([entity for entity, _ in labels]),
            species=_np.array([sp for _, sp in labels]),
        )
        trajectory_file = _common.write_atomic(
            _os.path.join(config.out_dir, f"{scenario.id}_trajectory.npz"), buffer.getvalue()
        )
    else:
        trajectory_file = _common.write_atomic(
            _os.path.join(config.out_dir, f"{scenario.id}_trajectory.csv"),
            trajectory_frame(trajectory).to_csv(index=False),
        )
    history = _np.stack([state.x for state in trajectory])
    nodes = {}
    for node_id in net.node_ids:
        entry = {}
        for species in SPECIES:
            column = history[:, seg.index(node_id, species)]
            entry[species] = {
                "min": float(column.min()), "max": float(column.max()), "final": float(column[-1]),
            }
        nodes[node_id] = entry
    summary = {
        "scenario": scenario.id,
        "n_steps": len(trajectory),
        "n_x": seg.n_x,
        "segments": dict(zip(seg.pipe_ids, (int(s) for s in seg.segments))),
        "diagnostics": {
            "clamped": diagnostics.clamped,
            "stagnant_junctions": diagnostics.stagnant_junctions,
        },
        "nodes": nodes,
    }
    summary_file = _write_json(_os.path.join(config.out_dir, f"{scenario.id}_summary.json"), summary)
    _LOG.info(f"Wrote '{trajectory_file}' and '{summary_file}'")
    return {"trajectory": trajectory_file, "summary": summary_file}


def _build_problem(config: RunConfig):
    if config.sensors is None:
        raise ValidationError("--sensors is required")
    net, jobs = load_run(config)
    species = tuple(config.option("observability", "species", config.species))
    analyses = analyze_scenarios(
        net, jobs,
        candidates=config.candidates,
        species=species,
        dense_cap=int(config.option("observability", "dense_atom_cap")),
    )
    problem = PlacementProblem(
        atoms=tuple(a.atoms for a in analyses),
        budget=config.sensors,
        pinned=tuple(config.pins),
        objective=config.option("placement", "objective", config.objective),
        epsilon=config.epsilon,
        epsilon_scale=float(config.option("observability", "epsilon_scale")),
    )
    timings: dict[str, float] = {}
    for analysis in analyses:
        for phase, seconds in analysis.timings.items():
            timings[phase] = timings.get(phase, 0.0) + seconds
    return analyses, problem, timings


def cmd_place(config: RunConfig) -> dict:
    """Robust greedy placement over every scenario of the run.

    Writes `placement.json`, `placement_per_step.csv` when `per_step` is set,
    and the wall-clock seconds per phase to `timing.json`.

    Returns:
        dict : The placement report.
    """
    _LOG.debug("Executing: cmd_place()")
    analyses, problem, timings = _build_problem(config)
    lazy = bool(config.option("placement", "lazy", config.lazy))
    result = greedy_place(problem, lazy=lazy, max_workers=None)
    report = result.to_dict()
    if config.per_step:
        matrix = per_step_placement(problem, lazy=lazy)
        _common.write_atomic(
            _os.path.join(config.out_dir, "placement_per_step.csv"), matrix.to_csv()
        )
        report["per_hydraulic_step"] = {node: row.tolist() for node, row in matrix.iterrows()}
    if config.export_atoms:
        for analysis in analyses:
            _common.write_atomic(
                _os.path.join(config.out_dir, f"{analysis.scenario.id}_atoms.csv"),
                atoms_frame(analysis.atoms).to_csv(index=False),
            )
    timings["placement"] = result.timing
    report["epsilon"] = list(problem.epsilons) or None
    _write_json(_os.path.join(config.out_dir, "placement.json"), report)
    _write_json(_os.path.join(config.out_dir, "timing.json"), timings)
    return report


def cmd_oracle(config: RunConfig) -> dict:
    """Greedy against brute force with the guarantee ratio and a submodularity probe.

    Writes `oracle.json` and `timing.json`.

    Returns:
        dict : The comparison report.
    """
    _LOG.debug("Executing: cmd_oracle()")
    _, problem, timings = _build_problem(config)
    cap = int(config.option("placement", "oracle_cap", config.oracle_cap))
    oracle = brute_force_place(problem, cap=cap)
    greedy = greedy_place(problem, lazy=bool(config.option("placement", "lazy", config.lazy)))
    ratio = guarantee_check(greedy, oracle)
    probe = submodularity_probe(
        problem, trials=int(config.settings["placement"]["probe_trials"]), seed=config.seed
    )
    greedy = _replace(greedy, oracle={"sensors": list(oracle.sensors), "value": oracle.value, "ratio": ratio})
    report = {
        "greedy": greedy.to_dict(),
        "oracle": oracle.to_dict(),
        "ratio": ratio,
        "probe": probe.to_dict(),
    }
    _write_json(_os.path.join(config.out_dir, "oracle.json"), report)
    _write_json(
        _os.path.join(config.out_dir, "timing.json"),
        {**timings, "greedy": greedy.timing, "oracle": oracle.timing},
    )
    return report


def build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(
        prog="aquobs",
        description="Water quality observability and robust sensor placement.",
    )
    parser.add_argument(
        "-V",
        "--version",
        action="version",
        help="Show the aquobs version number and exit.",
        version="%(prog)s : " + __version__,
    )
    shared = _ArgumentParser(add_help=False)
    shared.add_argument("--network", required=True, metavar="FILE",
                        help="Network JSON, or an INP file (.inp).")
    shared.add_argument("--hydraulics", metavar="FILE",
                        help="Hydraulics CSV for scenarios that do not name their own.")
    shared.add_argument("--scenario", dest="scenarios", action="append", required=True,
                        metavar="FILE", help="Scenario JSON (repeatable).")
    shared.add_argument("-c", "--config", dest="config_file", metavar="CONFIG",
                        help="Path to the aquobs settings file.")
    shared.add_argument("--out", dest="out_dir", metavar="DIR", default=_os.path.join(_os.getcwd(), "output"),
                        help="Output directory, defaults to './output'.")
    shared.add_argument("--seed", type=int, default=0, help="Seed of the submodularity probe.")

    placing = _ArgumentParser(add_help=False)
    placing.add_argument("--objective", choices=("trace", "logdet"), help="Observability measure.")
    placing.add_argument("--sensors", type=int, required=True, metavar="R",
                         help="Number of sensors, pinned ones included.")
    placing.add_argument("--pin", dest="pins", action="append", default=[], metavar="ID",
                         help="Candidate forced into the solution (repeatable).")
    placing.add_argument("--candidate", dest="candidates", action="append", metavar="ID",
                         help="Restrict candidates to these nodes (repeatable), all nodes by default.")
    placing.add_argument("--species", action="append", choices=("chlorine", "reactant"),
                         help="Measured species (repeatable), chlorine by default.")
    placing.add_argument("--epsilon", type=float, help="logdet regularization, per-scenario default otherwise.")
    placing.add_argument("--lazy", action="store_true", default=None, help="Use the lazy greedy accelerator.")

    commands = parser.add_subparsers(dest="command", required=True)
    sim = commands.add_parser("simulate", parents=[shared], help="Simulate one scenario.")
    sim.add_argument("--binary", action="store_true", default=None,
                     help="Write the trajectory as a columnar .npz instead of CSV.")
    place = commands.add_parser("place", parents=[shared, placing], help="Robust greedy sensor placement.")
    place.add_argument("--per-step", dest="per_step", action="store_true",
                       help="Also place per hydraulic step and write the 0/1 matrix.")
    place.add_argument("--export-atoms", dest="export_atoms", action="store_true",
                       help="Write the Gramian atom factor rows per scenario.")
    oracle = commands.add_parser("oracle", parents=[shared, placing], help="Greedy against brute force.")
    oracle.add_argument("--oracle-cap", dest="oracle_cap", type=int, metavar="N",
                        help="Largest number of subsets the brute force may enumerate.")
    return parser


_COMMANDS = {"simulate": cmd_simulate, "place": cmd_place, "oracle": cmd_oracle}


def main(argv: list[str] | None = None) -> int:
    """Run one command; returns 0 on success, 1 for I/O, 2 for validation, 3 for resource caps."""
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    _LOG.info(f"Started command: '{command}'")
    try:
        args["settings"] = _common.load_settings(args.pop("config_file"))
        config = RunConfig(**args)
        _COMMANDS[command](config)
        return 0
    except AquobsError as e:
        _LOG.error(f"{type(e).__name__}: {e}")
        _LOG.error(_EXIT_MSG)
        return e.exit_code
    except Exception as e:
        _LOG.exception(e)
        _LOG.error(_EXIT_MSG)
        return 1
    finally:
        _LOG.info(f"Completed command: '{command}'")
