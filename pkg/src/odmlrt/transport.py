"""SUPG-stabilized backward-Euler advection-diffusion on bilinear quads.

One transport step solves, for each transported field b,

    B(b^{k+1}, eta) = F(b^k, eta)

with B = mass + dt*advection + dt*diffusion + inlet flux + stabilization S,
where S tests the residual against v.grad(eta) on advection-dominated
elements (tau_K > 0).  The inlet carries a total-flux condition
(v b - D grad b).n = -u bhat, the outlet is a do-nothing (free outflow)
boundary, and the remaining sides are zero total flux.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .fields import StructuredMesh


class ZeroVelocityField(ValueError):
    pass


class LinearSolveFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SupgOptions:
    poly_degree: int = 1
    c_inv: float = 24.0
    solver_tol: float = 1e-12

    def __post_init__(self):
        if self.poly_degree != 1:
            raise ValueError("only bilinear elements are supported")
        if self.c_inv <= 0:
            raise ValueError("c_inv must be positive")


@dataclass
class TransportProblem:
    mesh: StructuredMesh
    velocity: np.ndarray  # nodal, (n_nodes, 2), m/s (pore velocity)
    diffusion: float  # molecular diffusion alpha_mol, m^2/s
    dt: float
    alpha_l: float = 0.0
    alpha_t: float = 0.0
    inlet_values: Optional[np.ndarray] = None  # inflow concentration per field,
    # in the same (bulk) units as the transported fields; inlet closed if None
    inlet_speed: Optional[np.ndarray] = None  # transport normal speed per left node

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float)
        if self.velocity.shape != (self.mesh.n_nodes, 2):
            raise ValueError("velocity must be nodal (n_nodes, 2)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.diffusion < 0:
            raise ValueError("diffusion must be >= 0")
        if self.inlet_values is not None:
            self.inlet_values = np.asarray(self.inlet_values, dtype=float)
            if self.inlet_speed is None:
                raise ValueError("inlet_values requires inlet_speed")
            self.inlet_speed = np.asarray(self.inlet_speed, dtype=float)
            if self.inlet_speed.shape != (self.mesh.ny + 1,):
                raise ValueError("inlet_speed must have ny+1 entries")


def cfl_dt(velocity: np.ndarray, mesh: StructuredMesh, cfl: float) -> float:
    """dt = cfl / max(max|vx|/dx, max|vy|/dy)."""
    v = np.asarray(velocity, dtype=float)
    rate = max(np.max(np.abs(v[..., 0])) / mesh.dx,
               np.max(np.abs(v[..., 1])) / mesh.dy)
    if rate == 0.0:
        raise ZeroVelocityField("velocity field is identically zero")
    return cfl / rate


def dispersion_tensor(v: np.ndarray, alpha_mol: float, alpha_l: float,
                      alpha_t: float) -> np.ndarray:
    """Dispersion tensor (alpha_mol + alpha_t |v|) I + (alpha_l - alpha_t) vv^T/|v|."""
    speed = float(np.hypot(v[0], v[1]))
    D = (alpha_mol + alpha_t * speed) * np.eye(2)
    if speed > 0.0:
        D += (alpha_l - alpha_t) * np.outer(v, v) / speed
    return D


def element_h(mesh: StructuredMesh, v_nodes: np.ndarray) -> float:
    """Streamline element length: the edge length for axis-aligned flow."""
    ax = np.max(np.abs(v_nodes[:, 0]))
    ay = np.max(np.abs(v_nodes[:, 1]))
    vinf = max(ax, ay)
    if vinf == 0.0:
        return float(np.hypot(mesh.dx, mesh.dy))
    return vinf / (ax / mesh.dx + ay / mesh.dy)


def tau_supg(mesh: StructuredMesh, v_nodes: np.ndarray, diffusion: float,
             options: SupgOptions = SupgOptions()) -> float:
    """Stabilization time-scale tau_K; zero on diffusion-dominated elements.

    Pe_K = d_K m_K |v|_inf h_K / D_K^2 with d_K = alpha_mol,
    D_K^2 = 2 alpha_mol^2, m_K = (2/3) min(1/2, c_inv); pure advection
    (alpha_mol = 0) counts as Pe = infinity.
    """
    v_nodes = np.atleast_2d(np.asarray(v_nodes, dtype=float))
    vinf = float(np.max(np.abs(v_nodes)))
    if vinf == 0.0:
        return 0.0
    h = element_h(mesh, v_nodes)
    if diffusion == 0.0:
        return h / (2.0 * vinf)
    m_k = (2.0 / 3.0) * min(0.5, options.c_inv)
    pe = diffusion * m_k * vinf * h / (2.0 * diffusion * diffusion)
    return h / (2.0 * vinf) if pe >= 1.0 else 0.0


def _reference_basis():
    """3x3 Gauss points: values and reference gradients of the Q1 basis."""
    g = np.sqrt(3.0 / 5.0)
    pts1 = np.array([-g, 0.0, g])
    w1 = np.array([5.0, 8.0, 5.0]) / 9.0
    XI, ETA = np.meshgrid(pts1, pts1)
    xi = XI.ravel()
    eta = ETA.ravel()
    w = np.outer(w1, w1).ravel()
    xn = np.array([-1.0, 1.0, 1.0, -1.0])
    yn = np.array([-1.0, -1.0, 1.0, 1.0])
    N = 0.25 * (1 + xi[:, None] * xn[None, :]) * (1 + eta[:, None] * yn[None, :])
    dNdxi = 0.25 * xn[None, :] * (1 + eta[:, None] * yn[None, :])
    dNdeta = 0.25 * yn[None, :] * (1 + xi[:, None] * xn[None, :])
    return w, N, dNdxi, dNdeta


_W9, _N9, _DXI9, _DETA9 = _reference_basis()
# 2-point Gauss on an edge segment, for inlet integrals
_EG = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_EW = np.array([1.0, 1.0])


class TransportOperator:
    """Assembled and factorized operator for repeated transport steps."""

    def __init__(self, problem: TransportProblem,
                 options: SupgOptions = SupgOptions()):
        self.problem = problem
        self.options = options
        self._assemble()

    def _assemble(self):
        p = self.problem
        mesh = p.mesh
        dt = p.dt
        nn = mesh.n_nodes
        dNdx = _DXI9 * (2.0 / mesh.dx)
        dNdy = _DETA9 * (2.0 / mesh.dy)
        detJ = mesh.dx * mesh.dy / 4.0
        wj = _W9 * detJ
        use_tensor = (p.alpha_l != 0.0) or (p.alpha_t != 0.0)

        rows, cols, lhs_vals, rhs_vals = [], [], [], []
        inlet_load = np.zeros(nn)  # per unit bhat
        for cj in range(mesh.ny):
            for ci in range(mesh.nx):
                nodes = np.array(mesh.cell_nodes(ci, cj))
                ve = p.velocity[nodes]  # 4 x 2
                vg = _N9 @ ve  # 9 x 2
                tau = tau_supg(mesh, ve, p.diffusion, self.options)

                Me = np.einsum("g,ga,gb->ab", wj, _N9, _N9)
                vgradb = vg[:, 0:1] * dNdx + vg[:, 1:2] * dNdy  # 9 x 4
                Ce = np.einsum("g,ga,gb->ab", wj, _N9, vgradb)
                if use_tensor:
                    Ke = np.zeros((4, 4))
                    for g in range(9):
                        D = dispersion_tensor(vg[g], p.diffusion,
                                              p.alpha_l, p.alpha_t)
                        gr = np.stack([dNdx[g], dNdy[g]])  # 2 x 4
                        Ke += wj[g] * gr.T @ D @ gr
                else:
                    Ke = p.diffusion * np.einsum(
                        "g,ga,gb->ab", wj, dNdx, dNdx) \
                        + p.diffusion * np.einsum(
                        "g,ga,gb->ab", wj, dNdy, dNdy)
                S_mass = tau * np.einsum("g,ga,gb->ab", wj, vgradb, _N9)
                S_adv = tau * dt * np.einsum("g,ga,gb->ab", wj, vgradb, vgradb)

                lhs = Me + dt * Ce + dt * Ke + S_mass + S_adv
                rhs = Me + S_mass

                if p.inlet_values is not None and ci == 0:
                    u0, u1 = p.inlet_speed[cj], p.inlet_speed[cj + 1]
                    lhs_e, load_e = _inlet_edge_terms(mesh, ve, tau, dt,
                                                     u0, u1)
                    lhs += lhs_e
                    inlet_load[nodes] += load_e

                idx = np.repeat(nodes, 4)
                jdx = np.tile(nodes, 4)
                rows.append(idx)
                cols.append(jdx)
                lhs_vals.append(lhs.ravel())
                rhs_vals.append(rhs.ravel())

        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        B = scipy.sparse.csc_matrix(
            (np.concatenate(lhs_vals), (rows, cols)), shape=(nn, nn))
        self._rhs_matrix = scipy.sparse.csr_matrix(
            (np.concatenate(rhs_vals), (rows, cols)), shape=(nn, nn))
        self._inlet_load = inlet_load
        try:
            self._lu = scipy.sparse.linalg.splu(B)
        except RuntimeError as exc:
            raise LinearSolveFailure(f"factorization failed: {exc}") from exc
        self._B = B

    def step(self, b_old: np.ndarray) -> np.ndarray:
        """Advance fields one dt; b_old is (n_nodes,) or (n_nodes, m)."""
        p = self.problem
        rhs = self._rhs_matrix @ b_old
        if p.inlet_values is not None:
            if b_old.ndim == 1:
                rhs = rhs + self._inlet_load * float(p.inlet_values)
            else:
                rhs = rhs + np.outer(self._inlet_load, p.inlet_values)
        try:
            out = self._lu.solve(rhs)
        except RuntimeError as exc:
            raise LinearSolveFailure(str(exc)) from exc
        if not np.all(np.isfinite(out)):
            raise LinearSolveFailure("non-finite transport solution")
        return out


def _inlet_edge_terms(mesh, ve, tau, dt, u0, u1):
    """Boundary terms on one left-boundary element edge (xi = -1).

    The total-flux inlet condition (v b - D grad b).n = -u bhat yields
    + dt <u b, eta> on the left-hand side and + dt <u bhat, eta> on the
    right-hand side; the stabilization tests the same boundary residual
    u (b - bhat) against tau v.grad(eta), so a uniform b = bhat state is
    preserved exactly.  u is the transport normal speed (the same speed
    that advects b) interpolated between the two edge nodes (local 0
    bottom, local 3 top), and bhat carries the same units as b.
    """
    jac = mesh.dy / 2.0
    lhs = np.zeros((4, 4))
    load = np.zeros(4)
    for gp, gw in zip(_EG, _EW):
        N_edge = np.zeros(4)
        N_edge[0] = 0.5 * (1 - gp)
        N_edge[3] = 0.5 * (1 + gp)
        u = 0.5 * (1 - gp) * u0 + 0.5 * (1 + gp) * u1
        vgp = N_edge @ ve
        dNdx = np.array([-(1 - gp), (1 - gp), (1 + gp), -(1 + gp)]) \
            * 0.25 * (2.0 / mesh.dx)
        dNdy = np.array([-0.5, 0.0, 0.0, 0.5]) * (2.0 / mesh.dy)
        test = N_edge + tau * (vgp[0] * dNdx + vgp[1] * dNdy)
        lhs += gw * jac * dt * u * np.outer(test, N_edge)
        load += gw * jac * dt * u * test
    return lhs, load


def step_transport(problem: TransportProblem, b_old: np.ndarray,
                   options: SupgOptions = SupgOptions()) -> np.ndarray:
    """One-shot transport step (assembles, factorizes, solves)."""
    return TransportOperator(problem, options).step(b_old)
