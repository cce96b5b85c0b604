"""Operator-splitting driver for reactive transport.

One simulation step advects the fluid element amounts with the frozen
pore-velocity field, merges them with the immobile solid amounts, and
re-equilibrates every node at the merged element totals, either by a
full minimization per node (conventional mode) or through the
on-demand learning store (odml mode). Flow is solved once at start-up;
porosity feedback is reported as a diagnostic only.
"""

import concurrent.futures
import dataclasses
import json
import os
import sys
import time

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import chemsys
from .chemsys import load_database
import scipy.optimize

from .equilibrium import (
    EquilibriumInput,
    GemOptions,
    InfeasibleElementAmounts,
    MaxIterationsError,
    equilibrate,
)
from .fields import (
    FieldKind,
    GridField,
    PermeabilityConfig,
    StructuredMesh,
    generate_permeability,
    write_snapshot,
)
from .flow import (
    BcKind,
    BoundaryCondition,
    DarcyProblem,
    pore_velocity,
    solve_darcy,
)
from .odml import OdmlStore, smart_equilibrate, statistics
from .transport import TransportOperator, TransportProblem, cfl_dt

_BUILTIN_DATASETS = {"dolomite"}

# Small negative element amounts produced by transport round-off are
# clamped to zero; anything larger than this relative magnitude aborts.
_NEGATIVE_B_TOL = 1.0e-9


class CouplingError(Exception):
    pass


class ScenarioError(CouplingError):
    pass


class NodeChemistryError(CouplingError):
    """Equilibrium failure at a specific node, with its coordinates."""


@dataclasses.dataclass
class Scenario:
    """Complete description of one simulation run."""

    nx: int
    ny: int
    lx: float
    ly: float
    database: str
    temperature: float
    pressure: float
    p_inlet: float
    p_outlet: float
    mu_fluid: float
    rho: float
    permeability: PermeabilityConfig
    diffusion: float
    cfl: float
    porosity0: float
    cost_multiplier: int
    major_species_fraction: float
    resident_water_kg: float
    resident_molality: dict
    rock: dict
    injected_water_kg: float
    injected_molality: dict
    steps: int
    mode: str
    epsilon: float
    snapshot_every: int
    threads: int

    def __post_init__(self):
        if self.steps < 0:
            raise ScenarioError("steps must be non-negative")
        if self.mode not in ("conventional", "odml"):
            raise ScenarioError("mode must be 'conventional' or 'odml'")
        if not 0.0 < self.porosity0 < 1.0:
            raise ScenarioError("porosity0 must lie in (0, 1)")
        if self.epsilon < 0.0:
            raise ScenarioError("epsilon must be non-negative")
        if self.snapshot_every < 1:
            raise ScenarioError("snapshot_every must be >= 1")
        if self.threads < 1:
            raise ScenarioError("threads must be >= 1")
        for name, recipe in (
            ("resident_molality", self.resident_molality),
            ("rock", self.rock),
            ("injected_molality", self.injected_molality),
        ):
            for key, value in recipe.items():
                if value < 0.0:
                    raise ScenarioError(
                        "%s[%s] must be non-negative" % (name, key)
                    )

    @classmethod
    def from_file(cls, path, overrides=None):
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        if overrides:
            for dotted, value in overrides.items():
                *path, key = dotted.split(".")
                table = raw
                for part in path:
                    table = table.setdefault(part, {})
                table[key] = value
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        try:
            mesh = raw["mesh"]
            thermo = raw["thermo"]
            flow = raw["flow"]
            transport = raw["transport"]
            chem = raw["chemistry"]
            run = raw["run"]
        except KeyError as exc:
            raise ScenarioError("missing scenario section %s" % exc) from exc
        perm_raw = dict(flow.get("permeability", {}))
        known = {f.name for f in dataclasses.fields(PermeabilityConfig)}
        unknown = set(perm_raw) - known
        if unknown:
            raise ScenarioError(
                "unknown permeability keys: %s" % sorted(unknown)
            )
        perm = PermeabilityConfig(**perm_raw)
        try:
            return cls(
                nx=int(mesh["nx"]),
                ny=int(mesh["ny"]),
                lx=float(mesh["lx"]),
                ly=float(mesh["ly"]),
                database=str(thermo["database"]),
                temperature=float(thermo["temperature"]),
                pressure=float(thermo["pressure"]),
                p_inlet=float(flow["p_inlet"]),
                p_outlet=float(flow["p_outlet"]),
                mu_fluid=float(flow.get("mu_fluid", 1.0e-3)),
                rho=float(flow.get("rho", 1000.0)),
                permeability=perm,
                diffusion=float(transport.get("diffusion", 0.0)),
                cfl=float(transport.get("cfl", 0.3)),
                porosity0=float(chem["porosity0"]),
                cost_multiplier=int(chem.get("cost_multiplier", 1)),
                major_species_fraction=float(
                    chem.get("major_species_fraction", 1.0e-6)
                ),
                resident_water_kg=float(chem["resident_fluid"]["water_kg"]),
                resident_molality=dict(
                    chem["resident_fluid"].get("molality", {})
                ),
                rock=dict(chem.get("rock", {})),
                injected_water_kg=float(chem["injected_fluid"]["water_kg"]),
                injected_molality=dict(
                    chem["injected_fluid"].get("molality", {})
                ),
                steps=int(run["steps"]),
                mode=str(run.get("mode", "conventional")),
                epsilon=float(run.get("epsilon", 0.001)),
                snapshot_every=int(run.get("snapshot_every", 50)),
                threads=int(run.get("threads", 1)),
            )
        except KeyError as exc:
            raise ScenarioError("missing scenario key %s" % exc) from exc


def _resolve_database(name):
    if name in _BUILTIN_DATASETS:
        import importlib.resources

        return str(
            importlib.resources.files("odmlrt") / "data" / (name + ".toml")
        )
    return name


def _recipe_amounts(system, water_kg, molality, minerals=None):
    """Species amount vector for a fluid/rock recipe."""
    n = np.zeros(len(system.species))
    index = {sp.name: i for i, sp in enumerate(system.species)}
    n[system.solvent_index] = water_kg / chemsys.M_SOLVENT
    for name, value in molality.items():
        if name not in index:
            raise ScenarioError("unknown species in recipe: %s" % name)
        n[index[name]] += value * water_kg
    for name, value in (minerals or {}).items():
        if name not in index:
            raise ScenarioError("unknown mineral in recipe: %s" % name)
        n[index[name]] += value
    return n


@dataclasses.dataclass
class StepMetrics:
    step: int
    t_transport: float
    t_chemistry: float
    learnings: int
    predictions: int
    max_balance_error: float


@dataclasses.dataclass
class SimulationContext:
    scenario: Scenario
    system: object
    model: object
    mesh: StructuredMesh
    options: GemOptions
    flow_solution: object
    velocity: np.ndarray
    inlet_speed: np.ndarray
    dt: float
    b_hat_inlet: np.ndarray
    b_fluid: np.ndarray  # (n_nodes, E), mol per bulk m^3
    b_solid: np.ndarray
    n_states: np.ndarray  # (n_nodes, N)
    mu_states: np.ndarray  # (n_nodes, N)
    store: object
    transport_op: TransportOperator
    step_index: int = 0
    max_balance_error: float = 0.0


def _split_amounts(system, n_states):
    """Fluid/solid element partition of per-node species amounts."""
    a_matrix = system.formula_matrix_view
    aq = list(system.aqueous_ids)
    mn = list(system.mineral_ids)
    b_fluid = n_states[:, aq] @ a_matrix[:, aq].T
    b_solid = n_states[:, mn] @ a_matrix[:, mn].T
    return b_fluid, b_solid


def initialize(scenario, gem_options=None):
    """Build the simulation context: chemistry, flow, transport setup."""
    system, model = load_database(_resolve_database(scenario.database))
    if scenario.cost_multiplier != 1:
        model = model.with_cost_multiplier(scenario.cost_multiplier)
    mesh = StructuredMesh(scenario.nx, scenario.ny, scenario.lx, scenario.ly)
    options = gem_options or GemOptions()

    n_recipe = _recipe_amounts(
        system,
        scenario.resident_water_kg,
        scenario.resident_molality,
        scenario.rock,
    )
    a_matrix = system.formula_matrix_view
    b_resident = a_matrix @ n_recipe
    inp = EquilibriumInput(scenario.temperature, scenario.pressure, b_resident)
    # Every node starts from the same recipe: solve once and replicate.
    state0 = equilibrate(system, model, inp, options)
    n_nodes = mesh.n_nodes
    n_states = np.tile(state0.n, (n_nodes, 1))
    mu_states = np.tile(state0.mu, (n_nodes, 1))
    b_fluid, b_solid = _split_amounts(system, n_states)

    perm = generate_permeability(mesh, scenario.permeability)
    kappa = perm.values.reshape(mesh.ny, mesh.nx)
    problem = DarcyProblem(
        mesh,
        kappa,
        mu_fluid=scenario.mu_fluid,
        rho=scenario.rho,
        left=BoundaryCondition(BcKind.PRESSURE_DIRICHLET, scenario.p_inlet),
        right=BoundaryCondition(BcKind.PRESSURE_DIRICHLET, scenario.p_outlet),
    )
    flow_solution = solve_darcy(problem)
    velocity = pore_velocity(flow_solution, scenario.porosity0)
    darcy_nodal = flow_solution.nodal_velocity()
    left_nodes = [j * (mesh.nx + 1) for j in range(mesh.ny + 1)]
    # transport advects bulk concentrations with the pore velocity, so the
    # inflow condition uses the pore normal speed and the injected brine
    # converted to mol per bulk m^3 (per-fluid amounts times porosity);
    # the product recovers the Darcy influx u_darcy * bhat_fluid
    inlet_speed = darcy_nodal[left_nodes, 0] / scenario.porosity0
    dt = cfl_dt(velocity, mesh, scenario.cfl)

    n_injected = _recipe_amounts(
        system, scenario.injected_water_kg, scenario.injected_molality
    )
    b_hat_inlet = scenario.porosity0 * (a_matrix @ n_injected)

    transport_problem = TransportProblem(
        mesh,
        velocity,
        scenario.diffusion,
        dt,
        inlet_values=b_hat_inlet,
        inlet_speed=inlet_speed,
    )
    transport_op = TransportOperator(transport_problem)

    store = None
    if scenario.mode == "odml":
        store = OdmlStore(
            scenario.epsilon,
            major_fraction=scenario.major_species_fraction,
        )

    return SimulationContext(
        scenario=scenario,
        system=system,
        model=model,
        mesh=mesh,
        options=options,
        flow_solution=flow_solution,
        velocity=velocity,
        inlet_speed=inlet_speed,
        dt=dt,
        b_hat_inlet=b_hat_inlet,
        b_fluid=b_fluid,
        b_solid=b_solid,
        n_states=n_states,
        mu_states=mu_states,
        store=store,
        transport_op=transport_op,
    )


def _clamp_negative(ctx, b_total):
    """Zero out negative element amounts from the transport step.

    Small negatives are inevitable: round-off on all-zero fields (the
    charge element) and bounded undershoot behind steep advected fronts.
    Clamping is allowed up to _NEGATIVE_B_TOL of the global scale, or up
    to a quarter of the element's own field scale (the undershoot case);
    anything larger indicates an unstable transport solve and aborts
    with the node location.
    """
    # roundoff dust (notably the charge balance, which starts and stays at
    # zero up to transport roundoff) stalls the equilibrium dual iteration;
    # flush any entry far below the node scale, well inside the 1e-12
    # balance audit budget
    row_scale = np.max(np.abs(b_total), axis=1, keepdims=True)
    dust = np.abs(b_total) <= 1.0e-13 * row_scale
    if np.any(dust):
        b_total = np.where(dust, 0.0, b_total)
    neg = b_total < 0.0
    if not np.any(neg):
        return b_total
    scale_global = max(1.0, float(np.max(np.abs(b_total))))
    col_scale = np.maximum(np.max(b_total, axis=0), 0.0)
    depth = np.where(neg, -b_total, 0.0)
    allowed = (depth <= _NEGATIVE_B_TOL * scale_global) | (
        depth <= 0.25 * col_scale[None, :]
    )
    if not np.all(allowed):
        bad = ~allowed
        node = int(np.argmax(np.max(np.where(bad, depth, 0.0), axis=1)))
        x, y = ctx.mesh.node_coords()[node]
        worst = float(np.max(depth[bad]))
        raise NodeChemistryError(
            "negative element amount -%.3e at node %d (x=%.4f, y=%.4f)"
            % (worst, node, x, y)
        )
    out = b_total.copy()
    out[neg] = 0.0
    return out


def _repair_amounts(system, b):
    """Project element amounts onto the achievable cone.

    Independent per-element transport can leave a node's totals very
    slightly outside the set {A n : n >= 0} (relative violations of a
    few 1e-6 at sharp fronts, certified infeasible). The repaired
    vector A x from a row-equilibrated nonnegative least-squares fit is
    the closest achievable composition; the projection is deterministic
    so paired runs stay bitwise comparable.
    """
    a_matrix = system.formula_matrix_view
    scale = float(np.max(np.abs(b)))
    r = np.maximum(np.abs(b), 1.0e-6 * max(scale, 1.0))
    x, _ = scipy.optimize.nnls(a_matrix / r[:, None], b / r)
    out = a_matrix @ x
    # keep exact zeros exact and drop projection dust: entries this far
    # below the node scale destabilize the dual iteration and sit well
    # inside the balance audit budget
    out[np.abs(out) <= 1.0e-13 * scale] = 0.0
    return out


def _solve_once(ctx, inp):
    if ctx.store is not None:
        return smart_equilibrate(
            ctx.store, ctx.system, ctx.model, inp, ctx.options
        ).state
    return equilibrate(ctx.system, ctx.model, inp, ctx.options)


def _conserves(ctx, b_row, state):
    resid = np.max(np.abs(ctx.system.formula_matrix_view @ state.n - b_row))
    return resid <= 1.0e-13 * max(1.0, float(np.max(np.abs(b_row))))


def _solve_node(ctx, node, b_row):
    """Equilibrate one node; returns (possibly repaired b, state)."""
    try:
        repaired = False
        try:
            inp = EquilibriumInput(
                ctx.scenario.temperature, ctx.scenario.pressure, b_row
            )
            state = _solve_once(ctx, inp)
        except (InfeasibleElementAmounts, MaxIterationsError):
            # transported totals can fall slightly outside the achievable
            # cone; an irreducible residual below the infeasibility
            # detection threshold surfaces as non-convergence instead, so
            # both take the projection-and-retry path
            state = None
        if state is None or not _conserves(ctx, b_row, state):
            # small irreducible infeasibility can also hide inside the
            # solver's own residual tolerance; the balance audit demands
            # better, so project and re-solve
            repaired = True
            b_row = _repair_amounts(ctx.system, b_row)
            inp = EquilibriumInput(
                ctx.scenario.temperature, ctx.scenario.pressure, b_row
            )
            state = _solve_once(ctx, inp)
        if repaired and not _conserves(ctx, b_row, state):
            raise NodeChemistryError(
                "element balance residual persists after projection"
            )
        return b_row, state
    except Exception as exc:
        x, y = ctx.mesh.node_coords()[node]
        raise NodeChemistryError(
            "equilibrium failed at node %d (x=%.4f, y=%.4f): %s"
            % (node, x, y, exc)
        ) from exc


def split_step(ctx):
    """Advance one coupled step; returns StepMetrics."""
    if ctx.store is not None:
        ctx.store.begin_step(ctx.step_index + 1)
        learn0 = ctx.store.learnings
        pred0 = ctx.store.predictions

    t0 = time.perf_counter()
    b_fluid_new = ctx.transport_op.step(ctx.b_fluid)
    t_transport = time.perf_counter() - t0

    b_total = _clamp_negative(ctx, b_fluid_new + ctx.b_solid)

    t0 = time.perf_counter()
    nodes = range(ctx.mesh.n_nodes)
    if ctx.scenario.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(
            max_workers=ctx.scenario.threads
        ) as pool:
            results = list(
                pool.map(lambda i: _solve_node(ctx, i, b_total[i]), nodes)
            )
    else:
        results = [_solve_node(ctx, i, b_total[i]) for i in nodes]
    for i, (b_row, st) in enumerate(results):
        b_total[i] = b_row
        ctx.n_states[i] = st.n
        ctx.mu_states[i] = st.mu
    t_chemistry = time.perf_counter() - t0

    a_matrix = ctx.system.formula_matrix_view
    resid = np.abs(ctx.n_states @ a_matrix.T - b_total)
    scale = np.maximum(np.max(np.abs(b_total), axis=1), 1e-300)
    balance = float(np.max(np.max(resid, axis=1) / scale))
    ctx.max_balance_error = max(ctx.max_balance_error, balance)

    ctx.b_fluid, ctx.b_solid = _split_amounts(ctx.system, ctx.n_states)
    ctx.step_index += 1

    if ctx.store is not None:
        learnings = ctx.store.learnings - learn0
        predictions = ctx.store.predictions - pred0
    else:
        learnings = 0
        predictions = 0
    return StepMetrics(
        step=ctx.step_index,
        t_transport=t_transport,
        t_chemistry=t_chemistry,
        learnings=learnings,
        predictions=predictions,
        max_balance_error=balance,
    )


def porosity_diagnostic(ctx):
    """Nodal porosity 1 - sum(mineral amount * molar volume); not fed
    back into flow."""
    mn = list(ctx.system.mineral_ids)
    volumes = ctx.system.molar_volumes[mn]
    solid = ctx.n_states[:, mn] @ volumes
    return GridField(
        ctx.mesh, FieldKind.NODAL_SCALAR, 1.0 - solid, name="porosity"
    )


def ph_field(ctx):
    """Nodal pH from the hydrogen-ion chemical potential of each state.

    mu = mu0 + RT ln a, so pH = -(mu - mu0) / (RT ln 10). Using the
    stored potential rather than recomputing the activity from amounts
    keeps the diagnostic smooth where a trace hydrogen-ion amount was
    rounded to zero.
    """
    system = ctx.system
    ih = [s.name for s in system.species].index("H+")
    rt = chemsys.R * ctx.scenario.temperature
    values = -(ctx.mu_states[:, ih] - system.mu0[ih]) / (rt * np.log(10.0))
    return GridField(ctx.mesh, FieldKind.NODAL_SCALAR, values, name="pH")


def snapshot_fields(ctx):
    """Fields written at snapshot steps: minerals, pH, porosity."""
    fields = []
    for sid in ctx.system.mineral_ids:
        name = ctx.system.species[sid].name
        fields.append(
            GridField(
                ctx.mesh,
                FieldKind.NODAL_SCALAR,
                ctx.n_states[:, sid].copy(),
                name=name,
            )
        )
    fields.append(ph_field(ctx))
    fields.append(porosity_diagnostic(ctx))
    return fields


def _write_metrics(path, metrics):
    lines = ["step,t_transport_s,t_chemistry_s,learnings,predictions"]
    for m in metrics:
        lines.append(
            "%d,%.9f,%.9f,%d,%d"
            % (m.step, m.t_transport, m.t_chemistry, m.learnings, m.predictions)
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def run_simulation(scenario, output_dir, gem_options=None, progress=None):
    """Run the scenario, writing snapshots, metrics and a summary.

    Returns the summary dictionary. Partial outputs are flushed if a
    step fails.
    """
    os.makedirs(output_dir, exist_ok=True)
    wall0 = time.perf_counter()
    ctx = initialize(scenario, gem_options)
    metrics = []
    error = None
    try:
        write_snapshot(snapshot_fields(ctx), 0, output_dir)
        for step in range(1, scenario.steps + 1):
            m = split_step(ctx)
            metrics.append(m)
            if step % scenario.snapshot_every == 0 or step == scenario.steps:
                write_snapshot(snapshot_fields(ctx), step, output_dir)
            if progress is not None:
                progress(m)
    except Exception as exc:
        error = exc
    finally:
        _write_metrics(os.path.join(output_dir, "metrics.csv"), metrics)
        summary = {
            "mode": scenario.mode,
            "epsilon": scenario.epsilon if scenario.mode == "odml" else None,
            "steps_completed": len(metrics),
            "steps_requested": scenario.steps,
            "n_nodes": ctx.mesh.n_nodes,
            "dt_s": ctx.dt,
            "t_transport_total_s": sum(m.t_transport for m in metrics),
            "t_chemistry_total_s": sum(m.t_chemistry for m in metrics),
            "max_balance_error": ctx.max_balance_error,
            "wall_time_s": time.perf_counter() - wall0,
            "completed": error is None,
        }
        if ctx.store is not None:
            stats = statistics(ctx.store)
            summary["learnings"] = stats.learnings
            summary["predictions"] = stats.predictions
            summary["prediction_percentage"] = stats.prediction_percentage
            with open(
                os.path.join(output_dir, "cluster_statistics.tsv"), "w"
            ) as fh:
                fh.write(stats.to_table() + "\n")
            with open(
                os.path.join(output_dir, "cluster_statistics.json"), "w"
            ) as fh:
                fh.write(stats.to_json() + "\n")
            with open(
                os.path.join(output_dir, "learnings_series.txt"), "w"
            ) as fh:
                fh.write(stats.step_series_text() + "\n")
        with open(os.path.join(output_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
            fh.write("\n")
    if error is not None:
        raise error
    return summary
