"""Chemical system definition: elements, species, phases, thermodynamic data.

A ChemicalSystem couples a list of elements (charge included as the
pseudo-element "Z") with a list of species grouped into one aqueous phase
and any number of single-species mineral phases.  The formula matrix A and
the chemical potential function mu(T, P, n) defined here are everything the
equilibrium solver needs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

# Gas constant, J/(mol K), CODATA exact value.
R = 8.31446261815324
# Molar mass of water, kg/mol.
M_SOLVENT = 0.0180153


class DatabaseError(ValueError):
    """Raised when a thermodynamic database document fails validation."""


class PhaseKind(enum.Enum):
    AQUEOUS = "Aqueous"
    MINERAL = "Mineral"


class ModelKind(enum.Enum):
    IDEAL = "Ideal"
    DEBYE_HUCKEL = "DebyeHuckelExtended"


@dataclass(frozen=True)
class Element:
    symbol: str
    molar_mass: float  # kg/mol


@dataclass(frozen=True)
class Species:
    name: str
    phase_id: int
    formula: dict  # element symbol -> signed count, charge under "Z"
    mu0: float  # J/mol at the scenario's fixed (T, P)
    molar_volume: float = 0.0  # m^3/mol, minerals
    ion_size: float = 0.0  # angstrom
    charge: float = 0.0
    is_solvent: bool = False


@dataclass(frozen=True)
class Phase:
    name: str
    kind: PhaseKind
    species_ids: tuple


@dataclass(frozen=True)
class ActivityModel:
    kind: ModelKind = ModelKind.IDEAL
    a_gamma: float = 0.0  # Debye-Huckel slope, natural-log basis
    b_gamma: float = 0.0  # 1/angstrom per sqrt(molal)
    b_dot: float = 0.0  # linear ionic-strength coefficient, ln basis
    cost_multiplier: int = 1

    def __post_init__(self):
        if self.cost_multiplier < 1:
            raise DatabaseError("cost_multiplier must be >= 1")

    def with_cost_multiplier(self, m: int) -> "ActivityModel":
        return ActivityModel(self.kind, self.a_gamma, self.b_gamma,
                             self.b_dot, int(m))


class ChemicalSystem:
    """Immutable container for elements, species, phases and the formula matrix."""

    def __init__(self, elements, species, phases):
        self.elements = tuple(elements)
        self.species = tuple(species)
        self.phases = tuple(phases)
        self.n_elements = len(self.elements)
        self.n_species = len(self.species)
        self._validate()

        self._element_index = {e.symbol: j for j, e in enumerate(self.elements)}
        self._species_index = {s.name: i for i, s in enumerate(self.species)}

        A = np.zeros((self.n_elements, self.n_species))
        for i, s in enumerate(self.species):
            for sym, cnt in s.formula.items():
                A[self._element_index[sym], i] = float(cnt)
        A.setflags(write=False)
        self._A = A
        if np.linalg.matrix_rank(A) < self.n_elements:
            raise DatabaseError(
                "formula matrix rows are linearly dependent; drop the "
                "redundant element (a charge row implied by the others "
                "is the usual culprit)")

        aq = next(p for p in self.phases if p.kind is PhaseKind.AQUEOUS)
        self.aqueous_phase_id = self.phases.index(aq)
        self.aqueous_ids = np.array(aq.species_ids, dtype=int)
        self.mineral_ids = np.array(
            [i for p in self.phases if p.kind is PhaseKind.MINERAL
             for i in p.species_ids], dtype=int)
        solvents = [i for i in aq.species_ids if self.species[i].is_solvent]
        self.solvent_index = solvents[0]
        self.solute_ids = np.array(
            [i for i in aq.species_ids if i != self.solvent_index], dtype=int)
        self.charges = np.array([s.charge for s in self.species])
        self.ion_sizes = np.array([s.ion_size for s in self.species])
        self.mu0 = np.array([s.mu0 for s in self.species])
        self.mu0.setflags(write=False)
        self.molar_volumes = np.array([s.molar_volume for s in self.species])
        # phase id per species, for phase-total bookkeeping
        self.phase_of = np.empty(self.n_species, dtype=int)
        for pid, p in enumerate(self.phases):
            for i in p.species_ids:
                self.phase_of[i] = pid

    def _validate(self):
        symbols = [e.symbol for e in self.elements]
        if len(set(symbols)) != len(symbols):
            raise DatabaseError("duplicate element symbol")
        names = [s.name for s in self.species]
        if len(set(names)) != len(names):
            raise DatabaseError("duplicate species name")
        known = set(symbols)
        for s in self.species:
            if not s.formula:
                raise DatabaseError(f"species {s.name} has an empty formula")
            for sym in s.formula:
                if sym not in known:
                    raise DatabaseError(
                        f"species {s.name} uses undeclared element {sym}")
        aq = [p for p in self.phases if p.kind is PhaseKind.AQUEOUS]
        if len(aq) != 1:
            raise DatabaseError("exactly one aqueous phase is required")
        if not any(self.species[i].is_solvent for i in aq[0].species_ids):
            raise DatabaseError("aqueous phase is missing a solvent species")
        for p in self.phases:
            if p.kind is PhaseKind.MINERAL and len(p.species_ids) != 1:
                raise DatabaseError(
                    f"mineral phase {p.name} must contain exactly one species")

    def element_index(self, symbol: str) -> int:
        return self._element_index[symbol]

    def species_index(self, name: str) -> int:
        return self._species_index[name]

    @property
    def formula_matrix_view(self) -> np.ndarray:
        """Read-only E x N formula matrix (no copy)."""
        return self._A


def formula_matrix(system: ChemicalSystem) -> np.ndarray:
    """E x N matrix; column i holds the element counts of species i."""
    return system.formula_matrix_view.copy()


def load_database(source):
    """Load a system + activity model from a TOML document.

    `source` may be a path, a TOML string, or an already-parsed mapping with
    top-level keys `elements`, `species`, `activity_model`.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = None
        if isinstance(source, Path):
            text = source.read_text()
        elif isinstance(source, str):
            p = Path(source)
            looks_like_path = "\n" not in source and (
                source.endswith(".toml") or p.exists())
            text = p.read_text() if looks_like_path else source
        else:
            raise DatabaseError(f"unsupported database source {type(source)}")
        try:
            doc = _toml.loads(text)
        except _toml.TOMLDecodeError as exc:
            raise DatabaseError(f"database parse error: {exc}") from exc

    try:
        elements = [Element(e["symbol"], float(e.get("molar_mass", 0.0)))
                    for e in doc["elements"]]
        raw_species = doc["species"]
    except KeyError as exc:
        raise DatabaseError(f"database missing key {exc}") from exc

    phase_names = []
    for entry in raw_species:
        ph = entry.get("phase", "Aqueous")
        if ph not in phase_names:
            phase_names.append(ph)
    if "Aqueous" not in phase_names:
        raise DatabaseError("no Aqueous phase declared")

    species = []
    phase_members = {name: [] for name in phase_names}
    for i, entry in enumerate(raw_species):
        try:
            name = entry["name"]
            formula = {k: float(v) for k, v in entry["formula"].items()}
        except KeyError as exc:
            raise DatabaseError(f"species entry missing key {exc}") from exc
        charge = float(entry.get("charge", formula.get("Z", 0.0)))
        sp = Species(
            name=name,
            phase_id=phase_names.index(entry.get("phase", "Aqueous")),
            formula=formula,
            mu0=float(entry["mu0_j_per_mol"]),
            molar_volume=float(entry.get("molar_volume_m3_per_mol", 0.0)),
            ion_size=float(entry.get("ion_size_angstrom", 0.0)),
            charge=charge,
            is_solvent=bool(entry.get("solvent", False)),
        )
        species.append(sp)
        phase_members[entry.get("phase", "Aqueous")].append(i)

    phases = []
    for name in phase_names:
        kind = PhaseKind.AQUEOUS if name == "Aqueous" else PhaseKind.MINERAL
        phases.append(Phase(name, kind, tuple(phase_members[name])))

    am = doc.get("activity_model", {})
    kind = ModelKind(am.get("kind", "Ideal"))
    model = ActivityModel(
        kind=kind,
        a_gamma=float(am.get("a_gamma", 0.0)),
        b_gamma=float(am.get("b_gamma", 0.0)),
        b_dot=float(am.get("b_dot", 0.0)),
        cost_multiplier=int(am.get("cost_multiplier", 1)),
    )
    system = ChemicalSystem(elements, species, phases)
    if kind is ModelKind.DEBYE_HUCKEL:
        bad = [s.name for s in system.species
               if s.charge != 0.0 and s.ion_size < 0.0]
        if bad:
            raise DatabaseError(f"negative ion size for charged species {bad}")
    return system, model


def molalities(system: ChemicalSystem, n: np.ndarray) -> np.ndarray:
    """Solute molalities (mol per kg solvent), aligned with solute_ids."""
    n_w = n[system.solvent_index]
    if n_w <= 0.0:
        raise ValueError("nonpositive solvent amount")
    return n[system.solute_ids] / (n_w * M_SOLVENT)


def ionic_strength(system: ChemicalSystem, n: np.ndarray) -> float:
    m = molalities(system, n)
    z = system.charges[system.solute_ids]
    return 0.5 * float(np.dot(m, z * z))


def _ln_gamma(system: ChemicalSystem, model: ActivityModel,
              m: np.ndarray) -> np.ndarray:
    """ln activity coefficients for solutes; neutrals are ideal."""
    z = system.charges[system.solute_ids]
    if model.kind is ModelKind.IDEAL:
        return np.zeros_like(m)
    I = 0.5 * np.dot(m, z * z)
    if I <= 0.0:
        return np.zeros_like(m)
    sqI = np.sqrt(I)
    a = system.ion_sizes[system.solute_ids]
    ln_g = -model.a_gamma * z * z * sqI / (1.0 + model.b_gamma * a * sqI) \
        + model.b_dot * I
    ln_g[z == 0.0] = 0.0
    return ln_g


def _chemical_potentials_once(system, model, T, P, n):
    RT = R * T
    mu = system.mu0.copy()
    n_w = n[system.solvent_index]
    if n_w <= 0.0:
        raise ValueError("nonpositive solvent amount")
    m = n[system.solute_ids] / (n_w * M_SOLVENT)
    ln_g = _ln_gamma(system, model, m)
    with np.errstate(divide="ignore"):
        mu[system.solute_ids] += RT * (ln_g + np.log(m))
    mu[system.solvent_index] += RT * (-M_SOLVENT * m.sum())
    return mu


def chemical_potentials(system: ChemicalSystem, model: ActivityModel,
                        T: float, P: float, n: np.ndarray) -> np.ndarray:
    """Chemical potentials mu(T, P, n), J/mol.

    Aqueous solutes: mu0 + RT ln(gamma m); solvent: mu0 + RT ln a_w with the
    osmotic approximation ln a_w = -M_w sum(m); minerals: mu0 (unit
    activity).  The evaluation repeats cost_multiplier times, discarding all
    but the last result, to emulate expensive activity models in benchmarks;
    returned values never depend on cost_multiplier.
    """
    if T <= 0.0 or P <= 0.0:
        raise ValueError("T and P must be positive")
    mu = None
    for _ in range(model.cost_multiplier):
        mu = _chemical_potentials_once(system, model, T, P, n)
    return mu
