"""Darcy flow solver based on a stabilized dual hybrid mixed method.

The velocity/pressure pair is approximated element-by-element with
equal-order bilinear polynomials, while pressure traces (Lagrange
multipliers) live on the mesh skeleton. Static condensation reduces
the problem to a global sparse system in the edge multipliers only;
velocity and pressure are then recovered per element. The scheme is
locally conservative: the condensed flux rho*u.n + kappa*beta*(lambda - p)
balances the source term on every element up to round-off.
"""

import enum
import dataclasses

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .fields import StructuredMesh


class FlowError(Exception):
    """Base class for Darcy solver failures."""


class SingularLocalMatrix(FlowError):
    """An element block could not be factorized."""


class SingularGlobalSystem(FlowError):
    """The condensed multiplier system could not be factorized."""


class NonConvergedLinearSolve(FlowError):
    """The global solve produced non-finite values."""


class BcKind(enum.Enum):
    PRESSURE_DIRICHLET = "pressure_dirichlet"
    FLUX_NEUMANN = "flux_neumann"


@dataclasses.dataclass(frozen=True)
class BoundaryCondition:
    """One condition on a domain side.

    For PRESSURE_DIRICHLET the value is a pressure in Pa. For
    FLUX_NEUMANN it is the outward normal Darcy flux u.n in m/s
    (zero for an impermeable side).
    """

    kind: BcKind
    value: float = 0.0


def no_flow():
    return BoundaryCondition(BcKind.FLUX_NEUMANN, 0.0)


@dataclasses.dataclass(frozen=True)
class DarcyProblem:
    """Problem data for a single steady Darcy solve.

    kappa is the per-cell isotropic permeability in m^2, shaped
    (ny, nx). f is the mass source per cell in kg/(m^3 s) and may be
    a scalar, an (ny, nx) array, or a callable f(x, y) evaluated at
    quadrature points. Boundary sides are named left, right, bottom,
    top.
    """

    mesh: StructuredMesh
    kappa: np.ndarray
    mu_fluid: float = 1.0e-3
    rho: float = 1000.0
    f: object = 0.0
    left: BoundaryCondition = dataclasses.field(default_factory=no_flow)
    right: BoundaryCondition = dataclasses.field(default_factory=no_flow)
    bottom: BoundaryCondition = dataclasses.field(default_factory=no_flow)
    top: BoundaryCondition = dataclasses.field(default_factory=no_flow)

    def __post_init__(self):
        kappa = np.asarray(self.kappa, dtype=float)
        if kappa.shape != (self.mesh.ny, self.mesh.nx):
            raise ValueError(
                "kappa must have shape (ny, nx) = (%d, %d), got %s"
                % (self.mesh.ny, self.mesh.nx, kappa.shape)
            )
        if not np.all(np.isfinite(kappa)) or np.any(kappa <= 0.0):
            raise ValueError("kappa must be positive and finite everywhere")
        object.__setattr__(self, "kappa", kappa)
        if self.mu_fluid <= 0.0:
            raise ValueError("mu_fluid must be positive")
        if self.rho <= 0.0:
            raise ValueError("rho must be positive")


@dataclasses.dataclass(frozen=True)
class SdhmOptions:
    """Discretization knobs.

    delta1 is the (negative) weight of the mass balance least-squares
    residual; delta2 and delta3 scale with the squared element size and
    are computed per element. beta0 sets the edge stabilization
    beta = beta0 / h; the method is stable for any beta0 >= 0.
    """

    poly_degree: int = 1
    beta0: float = 1.0
    delta1: float = -0.5

    def __post_init__(self):
        if self.poly_degree != 1:
            raise NotImplementedError("only bilinear elements are implemented")
        if self.beta0 < 0.0:
            raise ValueError("beta0 must be non-negative")


# Reference bilinear basis on [-1, 1]^2 with corners ordered
# counter-clockwise starting at (-1, -1).
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

_GP3 = np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
_GW3 = np.array([5.0, 8.0, 5.0]) / 9.0


def _basis_at(xi, eta):
    n = 0.25 * (1.0 + _CORNERS[:, 0] * xi) * (1.0 + _CORNERS[:, 1] * eta)
    dxi = 0.25 * _CORNERS[:, 0] * (1.0 + _CORNERS[:, 1] * eta)
    deta = 0.25 * _CORNERS[:, 1] * (1.0 + _CORNERS[:, 0] * xi)
    return n, dxi, deta


def _volume_rule(dx, dy):
    """3x3 Gauss data: weights, basis, physical gradients, ref points."""
    pts = []
    wts = []
    nv = []
    gx = []
    gy = []
    jac = 0.25 * dx * dy
    for j, etaj in enumerate(_GP3):
        for i, xii in enumerate(_GP3):
            n, dxi, deta = _basis_at(xii, etaj)
            pts.append((xii, etaj))
            wts.append(_GW3[i] * _GW3[j] * jac)
            nv.append(n)
            gx.append(dxi * 2.0 / dx)
            gy.append(deta * 2.0 / dy)
    return (
        np.array(wts),
        np.array(nv),
        np.array(gx),
        np.array(gy),
        np.array(pts),
    )


# Element edge bookkeeping. Edges are listed bottom, right, top, left.
# Each edge carries two multiplier dofs whose 1D linear basis is ordered
# along the increasing coordinate (x for horizontal edges, y for
# vertical ones), so both elements sharing an edge agree on the dof
# meaning.
_EDGE_NORMALS = np.array([[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])


def _edge_rule(dx, dy):
    """Per-edge quadrature: for each of the 4 edges, a list of
    (weight*ds, trace basis N4, edge basis L2) over 3 Gauss points."""
    edges = []
    for e in range(4):
        if e == 0:  # bottom, eta = -1, t = xi
            param = [(t, -1.0) for t in _GP3]
            jac = 0.5 * dx
        elif e == 1:  # right, xi = 1, t = eta
            param = [(1.0, t) for t in _GP3]
            jac = 0.5 * dy
        elif e == 2:  # top, eta = 1, t = xi
            param = [(t, 1.0) for t in _GP3]
            jac = 0.5 * dx
        else:  # left, xi = -1, t = eta
            param = [(-1.0, t) for t in _GP3]
            jac = 0.5 * dy
        rows = []
        for gp, (xii, etaj) in zip(_GP3, param):
            n, _, _ = _basis_at(xii, etaj)
            ell = np.array([0.5 * (1.0 - gp), 0.5 * (1.0 + gp)])
            rows.append((jac, n, ell))
        wts = np.array([_GW3[k] * rows[k][0] for k in range(3)])
        nv = np.array([rows[k][1] for k in range(3)])
        lv = np.array([rows[k][2] for k in range(3)])
        edges.append((wts, nv, lv))
    return edges


def _edge_ids(mesh, ci, cj):
    """Global edge indices (bottom, right, top, left) of cell (ci, cj)."""
    nx, ny = mesh.nx, mesh.ny
    n_h = nx * (ny + 1)
    bottom = cj * nx + ci
    top = (cj + 1) * nx + ci
    left = n_h + cj * (nx + 1) + ci
    right = n_h + cj * (nx + 1) + ci + 1
    return np.array([bottom, right, top, left])


def _n_edges(mesh):
    return mesh.nx * (mesh.ny + 1) + (mesh.nx + 1) * mesh.ny


def _source_values(problem, xq, yq, cell_value):
    if callable(problem.f):
        return np.array([problem.f(x, y) for x, y in zip(xq, yq)])
    return np.full(xq.shape, cell_value)


class _LocalSolver:
    """Equilibrated LU solve of one element block.

    The untransformed block mixes entries spanning twenty orders of
    magnitude (momentum mass matrix versus edge stabilization), so it is
    row/column scaled before factorization and every solve performs one
    iterative refinement pass against the original matrix.
    """

    def __init__(self, a_loc, ci, cj):
        self.a = a_loc
        row_max = np.max(np.abs(a_loc), axis=1)
        if np.any(row_max == 0.0) or not np.all(np.isfinite(row_max)):
            raise SingularLocalMatrix(
                "element (%d, %d) block is singular" % (ci, cj)
            )
        self.dr = 1.0 / row_max
        scaled = a_loc * self.dr[:, None]
        col_max = np.max(np.abs(scaled), axis=0)
        if np.any(col_max == 0.0):
            raise SingularLocalMatrix(
                "element (%d, %d) block is singular" % (ci, cj)
            )
        self.dc = 1.0 / col_max
        scaled = scaled * self.dc[None, :]
        try:
            self.lu = scipy.linalg.lu_factor(scaled)
        except scipy.linalg.LinAlgError as exc:
            raise SingularLocalMatrix(
                "element (%d, %d) block is singular" % (ci, cj)
            ) from exc
        if not np.all(np.isfinite(self.lu[0])):
            raise SingularLocalMatrix(
                "element (%d, %d) block is singular" % (ci, cj)
            )

    def solve(self, rhs):
        one_dim = rhs.ndim == 1
        b = rhs[:, None] if one_dim else rhs
        x = self.dc[:, None] * scipy.linalg.lu_solve(
            self.lu, self.dr[:, None] * b
        )
        resid = self.a @ x - b
        x -= self.dc[:, None] * scipy.linalg.lu_solve(
            self.lu, self.dr[:, None] * resid
        )
        return x[:, 0] if one_dim else x


def _local_blocks(problem, options, ci, cj, vol_rule, edge_rule):
    """Assemble one element.

    Returns (a_loc 12x12, b_loc 12x8, f_loc 12, c_loc 8x12, d_loc 8x8)
    with local unknowns X = [ux(4), uy(4), p(4)] and multiplier dofs
    ordered per edge (bottom, right, top, left) x (2,).
    """
    mesh = problem.mesh
    dx, dy = mesh.dx, mesh.dy
    kappa = problem.kappa[cj, ci]
    muf = problem.mu_fluid
    rho = problem.rho
    h2 = dx * dy
    delta1 = options.delta1
    delta2 = 0.5 * h2
    delta3 = 0.5 * h2
    beta = options.beta0 / np.sqrt(h2)
    kb = kappa * beta

    wts, nv, gx, gy, pts = vol_rule
    a_loc = np.zeros((12, 12))
    b_loc = np.zeros((12, 8))
    f_loc = np.zeros(12)
    c_loc = np.zeros((8, 12))
    d_loc = np.zeros((8, 8))

    mass = (nv * wts[:, None]).T @ nv
    kxx = (gx * wts[:, None]).T @ gx
    kyy = (gy * wts[:, None]).T @ gy
    kxy = (gx * wts[:, None]).T @ gy  # (dN/dx, dN/dy) pairing
    nx_mat = (nv * wts[:, None]).T @ gx  # (N_a, dN_b/dx)
    ny_mat = (nv * wts[:, None]).T @ gy

    ux = slice(0, 4)
    uy = slice(4, 8)
    pp = slice(8, 12)

    # Momentum equations, test functions N_a e_x and N_a e_y.
    a_loc[ux, ux] += (muf / kappa) * (1.0 - delta2) * mass
    a_loc[uy, uy] += (muf / kappa) * (1.0 - delta2) * mass
    a_loc[ux, pp] += -nx_mat.T - delta2 * nx_mat
    a_loc[uy, pp] += -ny_mat.T - delta2 * ny_mat

    # Mass balance least-squares residual (div-div, weighted by 1/kappa).
    cmb = delta1 * rho * rho / kappa
    a_loc[ux, ux] += cmb * kxx
    a_loc[ux, uy] += cmb * kxy
    a_loc[uy, ux] += cmb * kxy.T
    a_loc[uy, uy] += cmb * kyy

    # Curl of Darcy's law least-squares residual (scalar curl in 2D).
    ccr = delta3 * muf * muf / kappa
    a_loc[ux, ux] += ccr * kyy
    a_loc[ux, uy] += -ccr * kxy.T
    a_loc[uy, ux] += -ccr * kxy
    a_loc[uy, uy] += ccr * kxx

    # Continuity equation, test functions N_a.
    a_loc[pp, ux] += -rho * nx_mat + delta2 * nx_mat.T
    a_loc[pp, uy] += -rho * ny_mat + delta2 * ny_mat.T
    a_loc[pp, pp] += delta2 * (kappa / muf) * (kxx + kyy)

    # Source term: appears in the continuity equation and in the mass
    # balance residual (with the divergence of the test function).
    xq = (ci + 0.5 * (pts[:, 0] + 1.0)) * dx
    yq = (cj + 0.5 * (pts[:, 1] + 1.0)) * dy
    cell_f = 0.0
    if not callable(problem.f):
        farr = np.asarray(problem.f, dtype=float)
        cell_f = float(farr) if farr.ndim == 0 else float(farr[cj, ci])
    fq = _source_values(problem, xq, yq, cell_f)
    if np.any(fq != 0.0):
        f_loc[pp] += -(nv * wts[:, None]).T @ fq
        f_loc[ux] += delta1 * (rho / kappa) * (gx * wts[:, None]).T @ fq
        f_loc[uy] += delta1 * (rho / kappa) * (gy * wts[:, None]).T @ fq

    # Edge couplings: multiplier terms in the momentum equations, the
    # edge stabilization in the continuity equation, and the
    # transmission rows enforcing flux continuity.
    for e in range(4):
        ewts, env, elv = edge_rule[e]
        nxn, nyn = _EDGE_NORMALS[e]
        lam = slice(2 * e, 2 * e + 2)
        nl = (env * ewts[:, None]).T @ elv  # (N_a, L_i) 4x2
        nn = (env * ewts[:, None]).T @ env  # (N_a, N_b) 4x4
        ll = (elv * ewts[:, None]).T @ elv  # (L_i, L_j) 2x2
        if nxn != 0.0:
            b_loc[ux, lam] += nxn * nl
            c_loc[lam, ux] += nxn * nl.T
        if nyn != 0.0:
            b_loc[uy, lam] += nyn * nl
            c_loc[lam, uy] += nyn * nl.T
        a_loc[pp, pp] += kb * nn
        b_loc[pp, lam] += -kb * nl
        c_loc[lam, pp] += -kb * nl.T
        d_loc[lam, lam] += kb * ll

    return a_loc, b_loc, f_loc, c_loc, d_loc


def _boundary_edge_dofs(mesh):
    """Maps side name -> array of (edge_dof, coordinate, weight_len)
    rows describing the multiplier dofs on that side."""
    nx, ny = mesh.nx, mesh.ny
    n_h = nx * (ny + 1)
    sides = {}
    sides["bottom"] = np.array([0 * nx + ci for ci in range(nx)])
    sides["top"] = np.array([ny * nx + ci for ci in range(nx)])
    sides["left"] = np.array([n_h + cj * (nx + 1) + 0 for cj in range(ny)])
    sides["right"] = np.array([n_h + cj * (nx + 1) + nx for cj in range(ny)])
    lengths = {
        "bottom": mesh.dx,
        "top": mesh.dx,
        "left": mesh.dy,
        "right": mesh.dy,
    }
    return sides, lengths


@dataclasses.dataclass
class FlowSolution:
    """Recovered Darcy solution.

    velocity and pressure hold per-element corner values shaped
    (n_cells, 4) (corner order counter-clockwise from the lower-left
    node); multipliers hold two pressure-trace dofs per mesh edge.
    The solver works on a nondimensionalized system internally;
    pressure_scale and velocity_scale record the factors used, and the
    conservation audit evaluates fluxes in those scaled units so that
    the balance identity holds to round-off.
    """

    problem: DarcyProblem
    options: SdhmOptions
    velocity_x: np.ndarray
    velocity_y: np.ndarray
    pressure: np.ndarray
    multipliers: np.ndarray
    pressure_scale: float = 1.0
    velocity_scale: float = 1.0
    scaled_kappa: np.ndarray = None

    def mass_residuals(self):
        """Per-element imbalance of the condensed boundary flux,
        reported in kg/s.

        The locally conservative flux on each edge combines the normal
        mass flux with the edge-stabilization correction
        rho*(kappa/mu)*beta*(lambda - p); its integral over the element
        boundary matches the integrated source term by construction.
        """
        mesh = self.problem.mesh
        dx, dy = mesh.dx, mesh.dy
        edge_rule = _edge_rule(dx, dy)
        beta = self.options.beta0 / np.sqrt(dx * dy)
        rho = self.problem.rho
        pscale = self.pressure_scale
        uscale = self.velocity_scale
        kappa_hat = self.scaled_kappa
        if kappa_hat is None:
            kappa_hat = self.problem.kappa / self.problem.mu_fluid
        residuals = np.zeros(mesh.n_cells)
        vol_rule = _volume_rule(dx, dy)
        wts, nv, _, _, pts = vol_rule
        for cj in range(mesh.ny):
            for ci in range(mesh.nx):
                cell = cj * mesh.nx + ci
                kb = kappa_hat[cj, ci] * beta
                eids = _edge_ids(mesh, ci, cj)
                flux = 0.0
                for e in range(4):
                    ewts, env, elv = edge_rule[e]
                    nxn, nyn = _EDGE_NORMALS[e]
                    un = env @ (
                        nxn * self.velocity_x[cell] + nyn * self.velocity_y[cell]
                    )
                    lam = elv @ self.multipliers[2 * eids[e] : 2 * eids[e] + 2]
                    ptrace = env @ self.pressure[cell]
                    flux += np.sum(
                        ewts
                        * rho
                        * (un + kb * uscale * (lam - ptrace) / pscale)
                    )
                if callable(self.problem.f):
                    xq = (ci + 0.5 * (pts[:, 0] + 1.0)) * dx
                    yq = (cj + 0.5 * (pts[:, 1] + 1.0)) * dy
                    src = np.sum(wts * _source_values(self.problem, xq, yq, 0.0))
                else:
                    farr = np.asarray(self.problem.f, dtype=float)
                    cell_f = float(farr) if farr.ndim == 0 else float(farr[cj, ci])
                    src = cell_f * dx * dy
                residuals[cell] = flux - src
        return residuals

    def nodal_velocity(self):
        """Darcy flux averaged onto mesh nodes, shaped (n_nodes, 2)."""
        mesh = self.problem.mesh
        acc = np.zeros((mesh.n_nodes, 2))
        cnt = np.zeros(mesh.n_nodes)
        for cj in range(mesh.ny):
            for ci in range(mesh.nx):
                cell = cj * mesh.nx + ci
                nodes = mesh.cell_nodes(ci, cj)
                for a, node in enumerate(nodes):
                    acc[node, 0] += self.velocity_x[cell, a]
                    acc[node, 1] += self.velocity_y[cell, a]
                    cnt[node] += 1.0
        acc /= cnt[:, None]
        return acc

    def nodal_pressure(self):
        """Pressure averaged onto mesh nodes, shaped (n_nodes,)."""
        mesh = self.problem.mesh
        acc = np.zeros(mesh.n_nodes)
        cnt = np.zeros(mesh.n_nodes)
        for cj in range(mesh.ny):
            for ci in range(mesh.nx):
                cell = cj * mesh.nx + ci
                nodes = mesh.cell_nodes(ci, cj)
                for a, node in enumerate(nodes):
                    acc[node] += self.pressure[cell, a]
                    cnt[node] += 1.0
        return acc / cnt


def _scale_bc(bc, pstar, ustar):
    if bc.kind is BcKind.PRESSURE_DIRICHLET:
        return BoundaryCondition(bc.kind, bc.value / pstar)
    return BoundaryCondition(bc.kind, bc.value / ustar)


def solve_darcy(problem, options=None):
    """Solve the steady Darcy problem and recover element fields.

    The raw system mixes pascals, m^2 permeabilities, and Pa*s
    viscosities, which drives the condensed matrix condition number
    past 1e13. The solve therefore runs on a nondimensionalized copy
    (unit density and viscosity, order-one mobility and pressure) and
    the recovered fields are scaled back afterwards.
    """
    if options is None:
        options = SdhmOptions()
    mobility = problem.kappa / problem.mu_fluid
    mstar = float(np.max(mobility))
    pvals = [
        abs(bc.value)
        for bc in (problem.left, problem.right, problem.bottom, problem.top)
        if bc.kind is BcKind.PRESSURE_DIRICHLET
    ]
    pstar = max(pvals) if pvals else 0.0
    if pstar == 0.0:
        gvals = [
            abs(bc.value)
            for bc in (problem.left, problem.right, problem.bottom, problem.top)
            if bc.kind is BcKind.FLUX_NEUMANN
        ]
        span = max(problem.mesh.lx, problem.mesh.ly)
        pstar = max(gvals) * span / mstar if gvals else 0.0
    if pstar == 0.0:
        pstar = 1.0
    ustar = mstar * pstar

    if callable(problem.f):
        raw_f = problem.f
        rho = problem.rho
        f_hat = lambda x, y, _f=raw_f, _s=rho * ustar: _f(x, y) / _s
    else:
        f_hat = np.asarray(problem.f, dtype=float) / (problem.rho * ustar)
    scaled = dataclasses.replace(
        problem,
        kappa=mobility / mstar,
        mu_fluid=1.0,
        rho=1.0,
        f=f_hat,
        left=_scale_bc(problem.left, pstar, ustar),
        right=_scale_bc(problem.right, pstar, ustar),
        bottom=_scale_bc(problem.bottom, pstar, ustar),
        top=_scale_bc(problem.top, pstar, ustar),
    )
    sol = _solve_scaled(scaled, options)
    return FlowSolution(
        problem=problem,
        options=options,
        velocity_x=sol.velocity_x * ustar,
        velocity_y=sol.velocity_y * ustar,
        pressure=sol.pressure * pstar,
        multipliers=sol.multipliers * pstar,
        pressure_scale=pstar,
        velocity_scale=ustar,
        scaled_kappa=scaled.kappa,
    )


def _solve_scaled(problem, options):
    mesh = problem.mesh
    vol_rule = _volume_rule(mesh.dx, mesh.dy)
    edge_rule = _edge_rule(mesh.dx, mesh.dy)

    n_lam = 2 * _n_edges(mesh)
    rows = []
    cols = []
    vals = []
    rhs = np.zeros(n_lam)
    local_data = []

    for cj in range(mesh.ny):
        for ci in range(mesh.nx):
            a_loc, b_loc, f_loc, c_loc, d_loc = _local_blocks(
                problem, options, ci, cj, vol_rule, edge_rule
            )
            solver = _LocalSolver(a_loc, ci, cj)
            ainv_b = solver.solve(b_loc)
            ainv_f = solver.solve(f_loc)
            s_loc = d_loc - c_loc @ ainv_b
            g_loc = -c_loc @ ainv_f
            eids = _edge_ids(mesh, ci, cj)
            gdofs = np.empty(8, dtype=int)
            gdofs[0::2] = 2 * eids
            gdofs[1::2] = 2 * eids + 1
            rows.append(np.repeat(gdofs, 8))
            cols.append(np.tile(gdofs, 8))
            vals.append(s_loc.ravel())
            np.add.at(rhs, gdofs, g_loc)
            local_data.append((solver, b_loc, f_loc, gdofs))

    sides, lengths = _boundary_edge_dofs(mesh)
    bcs = {
        "left": problem.left,
        "right": problem.right,
        "bottom": problem.bottom,
        "top": problem.top,
    }
    dirichlet = np.zeros(n_lam, dtype=bool)
    dirichlet_value = np.zeros(n_lam)
    for side, bc in bcs.items():
        edge_idx = sides[side]
        dofs = np.concatenate([2 * edge_idx, 2 * edge_idx + 1])
        if bc.kind is BcKind.PRESSURE_DIRICHLET:
            dirichlet[dofs] = True
            dirichlet_value[dofs] = bc.value
        else:
            # Outward flux g = u.n enters the transmission rows as the
            # integral of g against the edge basis: g * len / 2 per dof.
            rhs[dofs] += bc.value * lengths[side] * 0.5

    matrix = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_lam, n_lam),
    ).tocsr()

    if np.any(dirichlet):
        scale = max(np.max(np.abs(matrix.data)), 1.0)
        coo = matrix.tocoo()
        mask = ~dirichlet[coo.row]
        matrix = scipy.sparse.coo_matrix(
            (coo.data[mask], (coo.row[mask], coo.col[mask])), shape=coo.shape
        )
        didx = np.nonzero(dirichlet)[0]
        ident = scipy.sparse.coo_matrix(
            (np.full(didx.size, scale), (didx, didx)), shape=coo.shape
        )
        matrix = (matrix + ident).tocsc()
        rhs[didx] = scale * dirichlet_value[didx]
    else:
        matrix = matrix.tocsc()

    try:
        factor = scipy.sparse.linalg.splu(matrix)
    except RuntimeError as exc:
        raise SingularGlobalSystem(str(exc)) from exc
    lam = factor.solve(rhs)
    lam -= factor.solve(matrix @ lam - rhs)
    if not np.all(np.isfinite(lam)):
        raise NonConvergedLinearSolve("multiplier solve returned non-finite values")

    velocity_x = np.zeros((mesh.n_cells, 4))
    velocity_y = np.zeros((mesh.n_cells, 4))
    pressure = np.zeros((mesh.n_cells, 4))
    for cell, (solver, b_loc, f_loc, gdofs) in enumerate(local_data):
        x_loc = solver.solve(f_loc - b_loc @ lam[gdofs])
        velocity_x[cell] = x_loc[0:4]
        velocity_y[cell] = x_loc[4:8]
        pressure[cell] = x_loc[8:12]

    return FlowSolution(
        problem=problem,
        options=options,
        velocity_x=velocity_x,
        velocity_y=velocity_y,
        pressure=pressure,
        multipliers=lam,
    )


def pore_velocity(solution, porosity0):
    """Nodal pore velocity v = u / porosity0, shaped (n_nodes, 2)."""
    if not 0.0 < porosity0 < 1.0:
        raise ValueError("porosity0 must lie in (0, 1)")
    return solution.nodal_velocity() / porosity0
