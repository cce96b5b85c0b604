"""Structured mesh, grid fields, permeability generation, snapshot I/O."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FieldKind(enum.Enum):
    NODAL_SCALAR = "NodalScalar"
    NODAL_VECTOR = "NodalVector"
    CELL_SCALAR = "CellScalar"


@dataclass(frozen=True)
class StructuredMesh:
    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("nx and ny must be >= 1")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain lengths must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def node_coords(self):
        """(n_nodes, 2) coordinates, x fastest (lexicographic node order)."""
        x = np.linspace(0.0, self.lx, self.nx + 1)
        y = np.linspace(0.0, self.ly, self.ny + 1)
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def cell_centers(self):
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    def cell_nodes(self, ci: int, cj: int):
        """Node ids of cell (ci, cj), counterclockwise from lower-left."""
        n00 = cj * (self.nx + 1) + ci
        return (n00, n00 + 1, n00 + self.nx + 2, n00 + self.nx + 1)


@dataclass
class GridField:
    mesh: StructuredMesh
    kind: FieldKind
    values: np.ndarray
    name: str = "field"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        expected = {
            FieldKind.NODAL_SCALAR: (self.mesh.n_nodes,),
            FieldKind.NODAL_VECTOR: (self.mesh.n_nodes, 2),
            FieldKind.CELL_SCALAR: (self.mesh.n_cells,),
        }[self.kind]
        if v.shape != expected:
            raise ValueError(
                f"field {self.name}: shape {v.shape}, expected {expected}")
        self.values = v


@dataclass(frozen=True)
class PermeabilityConfig:
    mean_log10_k: float = -13.0
    variance: float = 0.25  # variance of log10 k
    correlation_length_x: float = 0.3
    correlation_length_y: float = 0.15
    seed: int = 2023
    n_modes: int = 1000
    channel: bool = False
    channel_y_center: float = 0.5  # fraction of Ly
    channel_half_width: float = 0.1  # fraction of Ly
    channel_boost_log10: float = 0.5

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be >= 0")
        if self.correlation_length_x <= 0 or self.correlation_length_y <= 0:
            raise ValueError("correlation lengths must be positive")


def generate_permeability(mesh: StructuredMesh,
                          config: PermeabilityConfig) -> GridField:
    """Cell permeability field, m^2, from a randomized-spectral Gaussian field.

    log10(k) is Gaussian with exponential covariance
    exp(-sqrt((r_x/l_x)^2 + (r_y/l_y)^2)) approximated by n_modes random
    cosine modes; wavevector radii follow the exact exponential-covariance
    spectral radius law (inverse CDF sampling).  Deterministic per seed.
    An optional channel band adds a fixed log10 boost, mimicking a
    preferential flow path.
    """
    pts = mesh.cell_centers()
    logk = np.full(mesh.n_cells, config.mean_log10_k)
    if config.variance > 0.0:
        rng = np.random.default_rng(config.seed)
        M = config.n_modes
        u = rng.random(M)
        radius = np.sqrt((1.0 - u) ** -2 - 1.0)  # |k|*l, exponential cov
        theta = rng.random(M) * 2.0 * np.pi
        phase = rng.random(M) * 2.0 * np.pi
        kx = radius * np.cos(theta) / config.correlation_length_x
        ky = radius * np.sin(theta) / config.correlation_length_y
        modes = np.cos(pts[:, 0, None] * kx[None, :]
                       + pts[:, 1, None] * ky[None, :] + phase[None, :])
        logk = logk + np.sqrt(2.0 * config.variance / M) * modes.sum(axis=1)
    if config.channel:
        yc = config.channel_y_center * mesh.ly
        hw = config.channel_half_width * mesh.ly
        band = np.abs(pts[:, 1] - yc) <= hw
        logk = logk + config.channel_boost_log10 * band
    return GridField(mesh, FieldKind.CELL_SCALAR, 10.0 ** logk,
                     name="permeability")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_snapshot(fields, step: int, directory) -> list:
    """Write VTK (legacy ASCII) + CSV files for one or several fields.

    Filenames are `<name>-step<k>.vtk/.csv` with the step zero-padded to six
    digits.  Returns the list of paths written.
    """
    if isinstance(fields, GridField):
        fields = [fields]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = f"step{step:06d}"
    written = []
    for f in fields:
        base = directory / f"{f.name}-{tag}"
        try:
            _write_vtk(f, base.with_suffix(".vtk"))
            _write_csv(f, base.with_suffix(".csv"))
        except OSError as exc:
            raise OSError(f"snapshot write failed at {base}: {exc}") from exc
        written += [base.with_suffix(".vtk"), base.with_suffix(".csv")]
    return written


def _field_points(f: GridField):
    if f.kind is FieldKind.CELL_SCALAR:
        return f.mesh.cell_centers(), (f.mesh.nx, f.mesh.ny)
    return f.mesh.node_coords(), (f.mesh.nx + 1, f.mesh.ny + 1)


def _write_vtk(f: GridField, path: Path):
    pts, (npx, npy) = _field_points(f)
    mesh = f.mesh
    origin = (0.0, 0.0) if f.kind is not FieldKind.CELL_SCALAR \
        else (0.5 * mesh.dx, 0.5 * mesh.dy)
    lines = [
        "# vtk DataFile Version 3.0",
        f.name,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {npx} {npy} 1",
        f"ORIGIN {_fmt(origin[0])} {_fmt(origin[1])} 0",
        f"SPACING {_fmt(mesh.dx)} {_fmt(mesh.dy)} 1",
        f"POINT_DATA {npx * npy}",
    ]
    if f.kind is FieldKind.NODAL_VECTOR:
        lines.append(f"VECTORS {f.name} double")
        lines += [f"{_fmt(v[0])} {_fmt(v[1])} 0" for v in f.values]
    else:
        lines.append(f"SCALARS {f.name} double")
        lines.append("LOOKUP_TABLE default")
        lines += [_fmt(v) for v in f.values]
    path.write_text("\n".join(lines) + "\n")


def _write_csv(f: GridField, path: Path):
    pts, _ = _field_points(f)
    if f.kind is FieldKind.NODAL_VECTOR:
        header = "x,y,vx,vy"
        rows = (f"{_fmt(p[0])},{_fmt(p[1])},{_fmt(v[0])},{_fmt(v[1])}"
                for p, v in zip(pts, f.values))
    else:
        header = "x,y,value"
        rows = (f"{_fmt(p[0])},{_fmt(p[1])},{_fmt(v)}"
                for p, v in zip(pts, f.values))
    path.write_text(header + "\n" + "\n".join(rows) + "\n")


def read_snapshot_csv(path) -> np.ndarray:
    """Values (last column or vx,vy pair) from a snapshot CSV, file order."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.ndim == 1:
        data = data[None, :]
    return data[:, 2] if data.shape[1] == 3 else data[:, 2:4]


def compare_fields(a: GridField, b: GridField, floor: float = 1e-30) -> dict:
    """Relative error metrics between two fields on the same mesh/kind."""
    if a.mesh != b.mesh or a.kind is not b.kind:
        raise ValueError("fields live on different meshes or kinds")
    va, vb = a.values.ravel(), b.values.ravel()
    rel = np.abs(va - vb) / np.maximum(np.abs(va), floor)
    denom = np.linalg.norm(va)
    amax = float(np.max(np.abs(va))) if va.size else 0.0
    return {
        "linf_rel": float(np.max(rel)) if rel.size else 0.0,
        "linf_field": float(np.max(np.abs(va - vb)) / max(amax, floor))
        if va.size else 0.0,
        "l2_rel": float(np.linalg.norm(va - vb) / max(denom, floor)),
        "per_node": rel,
    }
