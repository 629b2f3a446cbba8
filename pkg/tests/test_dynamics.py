import os
import pytest
import numpy as np
from dataclasses import replace
from numpy.testing import assert_allclose

from aquobs import _ROOT_DIR, common
from aquobs import dynamics as dyn
from aquobs.network import ReactionParams, build_profile, segment_pipes

from .conftest import line_pipe, make_network, mixed_network, profile, ring_network, scenario

EXAMPLES = os.path.join(_ROOT_DIR, "data", "examples")


@pytest.mark.parametrize(
    "args, expected",
    [
        ((0.1, 0.2, 0.2, 0.5), 0.5),
        ((0.1, 0.0, 0.0, 0.5), 0.1),
        ((0.0, 1e-5, 1e-5, 0.3), 2e-10 / (0.3 * 2e-5)),
    ],
)
def test_wall_decay_coefficient(args, expected) -> None:
    """Test the effective pipe decay coefficient against hand-evaluated values."""
    assert dyn.wall_decay_coefficient(*args) == pytest.approx(expected, rel=1e-12)


def test_wall_decay_coefficient_errors() -> None:
    with pytest.raises(common.ValidationError):
        dyn.wall_decay_coefficient(0.1, 0.2, 0.2, 0.0)


def test_reaction_rates() -> None:
    """Test the bilinear reaction law and its two degenerate limits."""
    r_c, r_ct = dyn.reaction_rates(2.0, 0.3, 0.5, 1.0)
    assert r_c == pytest.approx(-1.6)
    assert r_ct == pytest.approx(-0.6)
    assert dyn.reaction_rates(3.0, 0.0, 0.2, 1.0) == (pytest.approx(-0.6), 0.0)
    r_c, r_ct = dyn.reaction_rates(0.0, 0.7, 0.2, 1.0)
    assert r_c == 0.0 and r_ct == 0.0


def test_junction_mixing() -> None:
    """Test flow-weighted mixing, pass-through, booster-only source and the stagnant hold."""
    assert dyn.junction_mixing([(1.0, 2.0), (3.0, 4.0)], 0.0, 0.0, 1.0, [3.0]) == pytest.approx(3.5)
    assert dyn.junction_mixing([(0.25, 1.7)], 0.0, 0.0, 0.25, []) == pytest.approx(1.7)
    assert dyn.junction_mixing([(1.0, 0.0)], 1.0, 2.0, 2.0, []) == pytest.approx(1.0)
    diagnostics = dyn.SimulationDiagnostics()
    assert dyn.junction_mixing([], 0.0, 0.0, 0.0, [0.0], previous=0.8, diagnostics=diagnostics) == 0.8
    assert diagnostics.stagnant_junctions == 1


def test_tank_update() -> None:
    """Test the CSTR balance: mixing step, identity and pure decay."""
    assert dyn.tank_update(100.0, 1.0, [(10.0, 2.0)], 0.0, 0.0, 10.0, 0.0, 1.0, 100.0) == pytest.approx(1.1)
    assert dyn.tank_update(40.0, 0.6, [], 0.0, 0.0, 0.0, 0.0, 5.0, 40.0) == pytest.approx(0.6)
    assert dyn.tank_update(50.0, 2.0, [], 0.0, 0.0, 0.0, -0.1 * 2.0, 1.0, 50.0) == pytest.approx(1.8)
    with pytest.raises(common.ValidationError):
        dyn.tank_update(50.0, 2.0, [], 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def test_pipe_segment_update() -> None:
    """Test the upwind update for λ = 1, λ = 0.5 and with a reaction term."""
    assert dyn.pipe_segment_update(2.0, 4.0, 1.0, 0.0, 1.0) == pytest.approx(4.0)
    assert dyn.pipe_segment_update(2.0, 4.0, 0.5, 0.0, 1.0) == pytest.approx(3.0)
    r_c, _ = dyn.reaction_rates(2.0, 0.3, 0.5, 1.0)
    assert dyn.pipe_segment_update(2.0, 2.0, 0.5, r_c, 0.1) == pytest.approx(1.84)
    assert dyn.pipe_segment_update(0.1, 0.0, 0.5, -5.0, 1.0) == 0.0
    assert dyn.pipe_segment_update(0.1, 0.0, 0.5, -5.0, 1.0, clamp=False) == pytest.approx(-4.95)
    for lam in (0.0, 1.5):
        with pytest.raises(common.ValidationError, match="Courant"):
            dyn.pipe_segment_update(1.0, 1.0, lam, 0.0, 1.0)


def test_scenario_validation() -> None:
    """Test the step-ratio and horizon checks of a scenario."""
    assert scenario(ts=12.0, dt_wq=1.5, dt_h=6.0).n_steps == 8
    with pytest.raises(common.ValidationError, match="integer multiple"):
        scenario(dt_wq=3.0, dt_h=10.0)
    with pytest.raises(common.ValidationError, match="positive integer"):
        scenario(ts=2.5, dt_wq=1.0)
    with pytest.raises(common.ValidationError, match="negative initial"):
        scenario(initial=(("R1", "chlorine", -1.0),))


def test_parse_scenario() -> None:
    """Test that the example scenarios parse with their boosters and overrides."""
    day = dyn.parse_scenario(common.read_textfile(os.path.join(EXAMPLES, "scenario_day.json")))
    assert (day.id, day.n_steps, day.steps_per_hydraulic) == ("day", 20, 10)
    assert day.hydraulics == "line_hydraulics_day.csv"
    assert ("R1", "reactant", 0.3) in day.initial
    booster = day.boosters[0]
    assert (booster.node, booster.species) == ("J2", "chlorine")
    assert booster.at(9) == dyn.BoosterEntry(0, 10, 2.0, 0.0005)
    assert booster.at(10) is None
    night = dyn.parse_scenario(common.read_textfile(os.path.join(EXAMPLES, "scenario_night.json")))
    assert night.overrides == {"alpha_r_multiplier": 2.0}
    with pytest.raises(common.ParseError, match=r"boosters\[0\]\.schedule\[0\]"):
        dyn.parse_scenario(
            '{"id": "x", "Ts": 4, "dt_wq": 1, "dt_h": 2, '
            '"boosters": [{"node": "J1", "schedule": [{"step_range": 3, "concentration": 1}]}]}'
        )
    with pytest.raises(common.ParseError, match="dt_wq"):
        dyn.parse_scenario('{"id": "x", "Ts": 4, "dt_h": 2}')


def test_reaction_overrides() -> None:
    """Test that a multiplier override scales the reactant coefficient of every pipe."""
    net, hyd = mixed_network()
    model = dyn.TransportModel(net, hyd, scenario(dt_h=4.0, reaction_overrides=(("alpha_r_multiplier", 2.0),)))
    assert model.pipe_alpha_r == [pytest.approx(0.004)] * 4
    assert model.tank_reactions.alpha_r == pytest.approx(0.004)
    with pytest.raises(common.ValidationError, match="Unknown reaction override"):
        dyn.TransportModel(net, hyd, scenario(dt_h=4.0, reaction_overrides=(("alpha_z", 2.0),)))


def test_initial_state_fills_pipes() -> None:
    """Test that an initial value naming a pipe is applied to all of its segments."""
    net, hyd = mixed_network()
    seg = segment_pipes(net, hyd, 1.0)
    state = dyn.initial_state(scenario(dt_h=4.0, initial=(("P2", "reactant", 0.4), ("T1", "chlorine", 1.2))), seg)
    assert [state.value("P2", "reactant", s) for s in range(7)] == [0.4] * 7
    assert state.value("T1") == 1.2
    assert state.block("chlorine").sum() == pytest.approx(1.2)


def test_zero_fixed_point() -> None:
    """Test that the zero state with no boosters stays zero."""
    net, hyd = mixed_network()
    trajectory = dyn.simulate(net, hyd, scenario(ts=8.0, dt_h=4.0))
    assert len(trajectory) == 8
    assert all(not state.x.any() for state in trajectory)


def test_horizon_one() -> None:
    net, hyd = line_pipe()
    sc = scenario(ts=1.0, initial=(("R1", "chlorine", 2.0),))
    trajectory = dyn.simulate(net, hyd, sc)
    assert len(trajectory) == 1 and trajectory[0].k == 0


def test_plug_flow_shift() -> None:
    """Test that with λ = 1 and no reaction the segments shift by one per step."""
    net, hyd = line_pipe(length=2.0, flows=(1.0,))
    sc = scenario(ts=4.0, initial=(("R1", "chlorine", 2.0), ("P1", "chlorine", 0.0)))
    trajectory = dyn.simulate(net, hyd, sc)
    for before, after in zip(trajectory, trajectory[1:]):
        expected = [before.value("R1"), before.value("P1", 0, 0)]
        assert_allclose([after.value("P1", 0, 0), after.value("P1", 0, 1)], expected, atol=1e-12)
    assert trajectory[2].value("P1", 0, 1) == pytest.approx(2.0)
    assert trajectory[3].value("J1") == pytest.approx(2.0)


def test_two_segment_recurrence() -> None:
    """Test two segments at λ = 0.5 fed with 1 mg/L: (0.875, 0.5) after three steps."""
    net, hyd = line_pipe(length=2.0, flows=(0.5, 1.0))
    seg = segment_pipes(net, hyd, 1.0)
    assert seg.segments == (2,)
    trajectory = dyn.simulate(net, hyd, scenario(initial=(("R1", "chlorine", 1.0),)), seg=seg)
    assert_allclose([trajectory[3].value("P1", 0, 0), trajectory[3].value("P1", 0, 1)], [0.875, 0.5], atol=1e-12)
    assert trajectory[3].value("R1") == 1.0


def test_stagnant_pipe_holds_segments() -> None:
    """Test that segments of a pipe without flow keep their values for that hydraulic step."""
    net, hyd = line_pipe(length=2.0, flows=(0.5, 0.0), dt_h=2.0)
    sc = scenario(ts=4.0, dt_h=2.0, initial=(("R1", "chlorine", 1.0),))
    trajectory = dyn.simulate(net, hyd, sc)
    segments = [[state.value("P1", 0, s) for s in range(4)] for state in trajectory]
    assert_allclose(segments[2], [1.0, 1.0, 0.0, 0.0], atol=1e-12)
    assert_allclose(segments[3], segments[2], atol=1e-12)


def test_flow_reversal_switches_upwind_side() -> None:
    """Test that a reversed pipe is fed from its to-node end."""
    net, _ = line_pipe()
    hyd = profile(net, 10.0, 1, {"P1": -1.0}, demands={"J1": -1.0})
    sc = scenario(ts=3.0, initial=(("J1", "chlorine", 3.0),))
    trajectory = dyn.simulate(net, hyd, sc)
    assert trajectory[1].value("P1", 0, 1) == pytest.approx(3.0)
    assert trajectory[1].value("P1", 0, 0) == pytest.approx(0.0)


def test_booster_injection() -> None:
    """Test a flow-paced junction booster over its half-open step range."""
    net, hyd = line_pipe()
    booster = dyn.Booster("J1", "chlorine", (dyn.BoosterEntry(0, 2, 2.0, 0.5),))
    trajectory = dyn.simulate(net, hyd, scenario(boosters=(booster,)))
    assert [state.value("J1") for state in trajectory] == pytest.approx([0.0, 2.0, 2.0, 0.0])
    # no flow_or_volume and no booster_flow data: nothing is injected
    silent = dyn.Booster("J1", "chlorine", (dyn.BoosterEntry(0, 2, 2.0),))
    assert all(not s.x.any() for s in dyn.simulate(net, hyd, scenario(boosters=(silent,))))
    with pytest.raises(common.ValidationError, match="reservoir"):
        dyn.simulate(net, hyd, scenario(boosters=(dyn.Booster("R1", "chlorine", ()),)))


def test_missing_hydraulic_window() -> None:
    net, hyd = line_pipe()
    with pytest.raises(common.ValidationError, match="No hydraulic data"):
        dyn.simulate(net, hyd, scenario(ts=30.0))
    with pytest.raises(common.ValidationError, match="differs from hydraulics"):
        dyn.simulate(net, hyd, scenario(dt_h=5.0))


def test_closed_tank_geometric_decay() -> None:
    """Test that an isolated tank decays by (1 − α_b Δt) per step and keeps its reactant."""
    net = make_network([("T1", "tank")], [], alpha_b=0.01, alpha_r=0.0)
    hyd = build_profile(net, 5.0, np.zeros((1, 0)), volumes={"T1": [10.0]})
    sc = scenario(ts=5.0, dt_h=5.0, initial=(("T1", "chlorine", 2.0), ("T1", "reactant", 0.7)))
    trajectory = dyn.simulate(net, hyd, sc)
    chlorine = np.array([state.value("T1", "chlorine") for state in trajectory])
    assert_allclose(chlorine, 2.0 * 0.99 ** np.arange(5), rtol=1e-12)
    assert [state.value("T1", "reactant") for state in trajectory] == pytest.approx([0.7] * 5)


def test_mass_conservation_closed_loop() -> None:
    """Test that a closed loop without reactions or demands conserves both species."""
    net, hyd = ring_network()
    sc = scenario(
        ts=400.0, dt_wq=0.4, dt_h=400.0,
        initial=(("P1", "chlorine", 1.0), ("T1", "chlorine", 2.0), ("J2", "reactant", 0.5), ("P4", "reactant", 0.2)),
    )
    seg = segment_pipes(net, hyd, 0.4)
    assert seg.courant[0, 0] == pytest.approx(0.4 * 7 / 3.0)
    trajectory = dyn.simulate(net, hyd, sc, seg=seg)
    assert len(trajectory) == 1000
    start = dyn.total_mass(trajectory[0], net, hyd, sc)
    end = dyn.total_mass(trajectory[-1], net, hyd, sc)
    assert_allclose(end, start, rtol=1e-10)


def test_monotone_decay_and_nonnegativity(rng) -> None:
    """Test that total chlorine mass never increases without injections and states stay >= 0."""
    net, hyd = ring_network()
    net = replace(net, reactions=ReactionParams(alpha_b=0.01, alpha_w=0.002, alpha_f=0.004, alpha_r=0.01))
    initial = tuple(
        (entity, species, float(rng.uniform(0.5, 4.0)))
        for entity in ("J1", "J2", "J3", "T1", "P1", "P2", "P3", "P4")
        for species in ("chlorine", "reactant")
    )
    sc = scenario(ts=20.0, dt_wq=0.4, dt_h=400.0, initial=initial)
    diagnostics = dyn.SimulationDiagnostics()
    trajectory = dyn.simulate(net, hyd, sc, diagnostics=diagnostics)
    assert diagnostics.clamped == 0
    masses = [dyn.total_mass(state, net, hyd, sc)[0] for state in trajectory]
    for before, after in zip(masses, masses[1:]):
        assert after <= before + 1e-12 * masses[0]
    assert masses[-1] < masses[0]
    assert all((state.x >= 0).all() for state in trajectory)


def test_clamping_counts_diagnostics() -> None:
    """Test that an overshooting decay is clamped to zero and counted."""
    net, hyd = line_pipe(alpha_b=2.0)
    diagnostics = dyn.SimulationDiagnostics()
    sc = scenario(ts=2.0, initial=(("P1", "chlorine", 1.0),))
    trajectory = dyn.simulate(net, hyd, sc, diagnostics=diagnostics)
    assert diagnostics.clamped >= 1
    assert (trajectory[1].x >= 0).all()


def test_linear_consistency(rng) -> None:
    """Test that with α_r = 0 stepping equals multiplying explicitly assembled step matrices."""
    net, hyd = mixed_network(alpha_r=0.0)
    sc = scenario(ts=8.0, dt_h=4.0)
    seg = segment_pipes(net, hyd, 1.0)
    assert seg.n_x <= 62
    model = dyn.TransportModel(net, hyd, sc, seg)
    x0 = rng.uniform(0.5, 4.0, size=seg.n_x)
    state = dyn.SegmentedState(x=x0, k=0, segmentation=seg)
    expected = x0.copy()
    for k in range(sc.n_steps - 1):
        a_k = np.column_stack([model.evaluate(e_i, k).raw for e_i in np.eye(seg.n_x)])
        expected = a_k @ expected
        state = model.step(state)
        assert_allclose(state.x, expected, rtol=1e-10, atol=1e-12)


def test_species_symmetry(rng) -> None:
    """Test that swapping species with only the bilinear reaction mirrors the trajectory."""
    net, hyd = mixed_network(alpha_b=0.0, alpha_w=0.0, alpha_f=0.0, alpha_r=0.05)
    values = {entity: rng.uniform(0.0, 4.0, size=2) for entity in ("R1", "J1", "T1", "P3")}
    first = tuple((e, sp, float(v[i])) for e, v in values.items() for i, sp in enumerate(("chlorine", "reactant")))
    second = tuple((e, sp, float(v[1 - i])) for e, v in values.items() for i, sp in enumerate(("chlorine", "reactant")))
    a = dyn.simulate(net, hyd, scenario(ts=8.0, dt_h=4.0, initial=first))
    b = dyn.simulate(net, hyd, scenario(ts=8.0, dt_h=4.0, initial=second))
    for sa, sb in zip(a, b):
        assert_allclose(sa.block("chlorine"), sb.block("reactant"), rtol=1e-12, atol=1e-15)
        assert_allclose(sa.block("reactant"), sb.block("chlorine"), rtol=1e-12, atol=1e-15)


def test_step_matches_model() -> None:
    """Test the module-level step against the compiled model, including an explicit k."""
    net, hyd = mixed_network()
    sc = scenario(ts=8.0, dt_h=4.0, initial=(("R1", "chlorine", 1.0),))
    trajectory = dyn.simulate(net, hyd, sc)
    assert_allclose(dyn.step(trajectory[4], net, hyd, sc).x, trajectory[5].x)
    moved = dyn.step(trajectory[1], net, hyd, sc, k=1)
    assert moved.k == 2
    assert_allclose(moved.x, trajectory[2].x)


def test_build_measurement() -> None:
    """Test full, empty and single selections over chlorine node values 1..5."""
    net, hyd = mixed_network()
    seg = segment_pipes(net, hyd, 1.0)
    x = np.zeros(seg.n_x)
    x[:5] = [1.0, 2.0, 3.0, 4.0, 5.0]
    x[seg.n_block:seg.n_block + 5] = 9.0
    state = dyn.SegmentedState(x=x, k=0, segmentation=seg)
    model = dyn.sensor_model(seg)
    assert_allclose(dyn.build_measurement(model, state), [1.0, 2.0, 3.0, 4.0, 5.0])
    assert dyn.build_measurement(model.with_selection([]), state).size == 0
    assert_allclose(dyn.build_measurement(model.with_selection(["J2"]), state), [3.0])
    both = dyn.sensor_model(seg, candidates=["J2", "T1"], species=("chlorine", "reactant"), selected=["T1"])
    assert_allclose(dyn.build_measurement(both, state), [5.0, 9.0])
    assert both.selector(0).sum() == 2.0
    with pytest.raises(common.ValidationError, match="Unknown sensor 'J7'"):
        model.with_selection(["J7"])
    with pytest.raises(common.ValidationError):
        dyn.sensor_model(seg, candidates=["J1", "J1"])


def test_trajectory_frame() -> None:
    """Test the long-format trajectory table layout."""
    net, hyd = line_pipe()
    trajectory = dyn.simulate(net, hyd, scenario(initial=(("R1", "chlorine", 1.0),)))
    frame = dyn.trajectory_frame(trajectory)
    n_x = trajectory[0].segmentation.n_x
    assert list(frame.columns) == ["k", "entity", "species", "value"]
    assert len(frame) == 4 * n_x
    row = frame[(frame["k"] == 0) & (frame["entity"] == "R1") & (frame["species"] == "chlorine")]
    assert row["value"].item() == 1.0
    assert set(frame["entity"]) == {"R1", "J1", "P1#0", "P1#1"}
    assert dyn.trajectory_frame([]).empty
