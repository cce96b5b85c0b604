"""Chemical equilibrium by Gibbs energy minimization.

Solves  min  sum_i n_i mu_i(T, P, n)   s.t.  A n = b,  n >= n_min
with an interior-point Newton method on the perturbed KKT conditions

    mu(n) - A^T lam - z = 0,    A n = b,    n_i z_i = tau,

driving the barrier parameter tau to tol_kkt * RT.  The same KKT
linearization, restricted to stable species, yields the sensitivity of the
solution with respect to (T, P, b).  The Gaussian-elimination ordering of
the amount-scaled formula matrix gives the primary-species sequence used to
cluster states.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .chemsys import R, ActivityModel, ChemicalSystem, chemical_potentials


class EquilibriumError(RuntimeError):
    pass


class MaxIterationsError(EquilibriumError):
    pass


class InfeasibleElementAmounts(EquilibriumError):
    pass


class NumericalBreakdown(EquilibriumError):
    pass


class SingularKktMatrix(EquilibriumError):
    pass


class RankDeficientError(EquilibriumError):
    pass


@dataclass(frozen=True)
class EquilibriumInput:
    T: float  # K
    P: float  # Pa
    b: np.ndarray  # mol per element, length E

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        object.__setattr__(self, "b", b)
        if not np.all(np.isfinite(b)):
            raise ValueError("element amounts must be finite")
        if not np.any(b != 0.0):
            raise ValueError("element amounts are all zero")

    def as_vector(self) -> np.ndarray:
        """The full input vector x = [T; P; b]."""
        return np.concatenate(([self.T, self.P], self.b))


@dataclass
class ChemicalState:
    T: float
    P: float
    n: np.ndarray  # mol per species
    mu: np.ndarray  # J/mol per species
    primary: tuple  # ordered E species indices
    stable_mask: np.ndarray  # bool per species


@dataclass
class EquilibriumSensitivity:
    dndT: np.ndarray  # length N
    dndP: np.ndarray  # length N
    dndb: np.ndarray  # N x E


@dataclass(frozen=True)
class GemOptions:
    tol_kkt: float = 1e-10
    # mineral nucleation (a pure phase growing from the lower bound into
    # the stable assemblage) converges linearly in the endgame and can
    # take several hundred iterations at tight tolerance; each iteration
    # is a small dense solve, so a generous cap is cheap insurance
    max_iters: int = 2000
    n_min: float = 1e-40
    barrier_reduction: float = 0.1
    stability_threshold: float = 1e-12

    def __post_init__(self):
        if not (0.0 < self.barrier_reduction < 1.0):
            raise ValueError("barrier_reduction must lie in (0, 1)")
        if min(self.tol_kkt, self.max_iters, self.n_min,
               self.stability_threshold) <= 0:
            raise ValueError("all options must be positive")


_DEFAULT_OPTIONS = GemOptions()


def _mu_jacobian(system: ChemicalSystem, T: float, n: np.ndarray) -> np.ndarray:
    """Ideal-part d(mu)/d(n), N x N, activity coefficients held fixed.

    Exact for the Ideal model including the osmotic solvent coupling;
    for Debye-Huckel it is the quasi-Newton approximation with gamma lagged.
    The matrix is symmetric positive semidefinite with null space spanned by
    the aqueous amounts (scale invariance); mineral rows are zero.
    """
    RT = R * T
    N = system.n_species
    J = np.zeros((N, N))
    s = system.solute_ids
    w = system.solvent_index
    J[s, s] = RT / n[s]
    J[s, w] = -RT / n[w]
    J[w, s] = -RT / n[w]
    J[w, w] = RT * n[s].sum() / (n[w] * n[w])
    return J


def _subsystem(system: ChemicalSystem, active: np.ndarray) -> ChemicalSystem:
    """Reduced system over the active species columns.

    Elements whose rows vanish on the active set are dropped; the kept-row
    mask is exposed as `element_keep` for mapping b vectors.
    """
    import dataclasses

    keep_e = np.any(system.formula_matrix_view[:, active] != 0.0, axis=1)
    kept_elements = [e for e, k in zip(system.elements, keep_e) if k]
    act_ids = np.flatnonzero(active)
    keep_phases = [pid for pid, p in enumerate(system.phases)
                   if any(active[i] for i in p.species_ids)]
    species = []
    phase_members = {pid: [] for pid in keep_phases}
    for new_i, i in enumerate(act_ids):
        sp = system.species[i]
        new_pid = keep_phases.index(sp.phase_id)
        species.append(dataclasses.replace(sp, phase_id=new_pid))
        phase_members[sp.phase_id].append(new_i)
    from .chemsys import Phase
    phases = [Phase(system.phases[pid].name, system.phases[pid].kind,
                    tuple(phase_members[pid])) for pid in keep_phases]
    sub = ChemicalSystem(kept_elements, species, phases)
    sub.element_keep = keep_e
    return sub


def _initial_guess(A, b, scale_b):
    try:
        n0, rnorm = scipy.optimize.nnls(A, b)
    except Exception as exc:  # pragma: no cover - scipy internal failure
        raise NumericalBreakdown(f"initial guess failed: {exc}") from exc
    if rnorm > 1e-9 * scale_b:
        # even a tiny irreducible residual makes the dual iteration diverge,
        # so flag it here rather than burning the iteration budget
        raise InfeasibleElementAmounts(
            f"no nonnegative composition reproduces b (residual {rnorm:.3e})")
    total = n0.sum()
    if total <= 0.0:
        raise InfeasibleElementAmounts("element amounts give an empty system")
    return np.maximum(n0, 1e-10 * total)


def _kkt_step(H, A, rd, rp, n):
    """Newton step for [H -A^T; A 0] [dn; dlam] = [-rd; -rp].

    Solved as one dense LU of the full saddle system; forming the Schur
    complement explicitly squares the (huge) grading between abundant and
    trace species and destroys the trace-species step components.  The
    grading is tamed by the substitution dn = n dn_rel plus row/column
    equilibration, with iterative refinement against the original system.
    """
    E, N = A.shape
    K = np.zeros((N + E, N + E))
    K[:N, :N] = H
    K[:N, N:] = -A.T
    K[N:, :N] = A
    rhs = np.concatenate([-rd, -rp])
    d = np.concatenate([n, np.ones(E)])
    Ks = K * d[None, :] * d[:, None]
    # row equilibration only: normalizing the columns as well would let the
    # solver route constraint corrections through vanishing species, which
    # produces wild relative steps in the trace amounts
    rmax = np.max(np.abs(Ks), axis=1)
    rw = 1.0 / np.where(rmax > 0.0, rmax, 1.0)
    Ks *= rw[:, None]
    cw = np.ones(N + E)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(Ks, check_finite=False)

            def _solve(r):
                y = scipy.linalg.lu_solve((lu, piv), rw * (d * r),
                                          check_finite=False)
                return d * (cw * y)

            sol = _solve(rhs)
            for _ in range(2):
                sol -= _solve(K @ sol - rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalBreakdown("singular KKT system") from exc
    if not np.all(np.isfinite(sol)):
        # rank-deficient A rows: fall back to a minimum-norm step
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:N], sol[N:]


def equilibrate(system: ChemicalSystem, model: ActivityModel,
                inp: EquilibriumInput, options: GemOptions = None) -> ChemicalState:
    """Solve the constrained Gibbs minimization for one (T, P, b) input."""
    opts = options or _DEFAULT_OPTIONS
    A_full = system.formula_matrix_view
    b_full = inp.b
    if b_full.shape != (system.n_elements,):
        raise ValueError("element amount vector has wrong length")
    T, P = inp.T, inp.P
    RT = R * T

    # presolve: a species that contains an element whose total is zero and
    # whose row is sign-definite can only have n = 0; pin it at the floor and
    # solve the reduced problem (keeps the barrier term finite)
    nonneg_row = np.all(A_full >= 0.0, axis=1)
    zero_row = (b_full == 0.0) & nonneg_row
    active = ~np.any(A_full[zero_row] != 0.0, axis=0)
    if not np.all(active):
        n_full = np.full(system.n_species, opts.n_min)
        sub = _subsystem(system, active)
        sub_inp = EquilibriumInput(T, P, b_full[sub.element_keep])
        st = equilibrate(sub, model, sub_inp, options)
        n_full[active] = st.n
        mu = chemical_potentials(system, model, T, P, n_full)
        stable = _stable_mask(system, n_full, opts)
        primary = primary_species_from_amounts(system, n_full, opts)
        return ChemicalState(T=T, P=P, n=n_full, mu=mu, primary=primary,
                             stable_mask=stable)

    A = A_full
    b = b_full
    scale_b = max(1.0, float(np.max(np.abs(b))))

    n = _initial_guess(A, b, scale_b)
    mu = chemical_potentials(system, model, T, P, n)
    lam = np.linalg.lstsq(A.T, mu, rcond=None)[0]

    # The complementarity criterion |n_i z_i| <= tol RT permits any final
    # barrier below tol; drive tau near machine epsilon so trace-species
    # amounts carry no barrier bias (they feel z_i = tau/n_i directly).
    tau_final = 0.5 * min(opts.tol_kkt, 1e-15) * RT
    tau = 0.01 * RT
    iters = 0
    converged = False
    while not converged:
        mu = chemical_potentials(system, model, T, P, n)
        rd = mu - tau / n - A.T @ lam
        rp = A @ n - b
        at_final = tau <= tau_final
        if at_final:
            # species pinned at the boundary (n ~ tau / z) keep a dual
            # residual at the noise floor of the graded linear solves;
            # their Gibbs-error product n |rd| sits near tau_final, many
            # orders below that of any materially unconverged species, so
            # accept through the product bound; for free species the plain
            # bound is the binding one
            rd_ok = (np.abs(rd) <= opts.tol_kkt * RT) | (
                np.abs(rd) * n <= 1.0e-6 * opts.tol_kkt * RT * n.sum())
            ok_d = bool(np.all(rd_ok))
            ok_p = np.max(np.abs(rp)) <= opts.tol_kkt * scale_b
            if ok_d and ok_p:
                converged = True
                break
        iters += 1
        if iters > opts.max_iters:
            raise MaxIterationsError(
                f"no convergence in {opts.max_iters} iterations")
        H = _mu_jacobian(system, T, n) + np.diag(tau / (n * n))
        dn, dlam = _kkt_step(H, A, rd, rp, n)
        if not (np.all(np.isfinite(dn)) and np.all(np.isfinite(dlam))):
            raise NumericalBreakdown("non-finite Newton step")
        neg = dn < 0.0
        alpha = 1.0
        if np.any(neg):
            alpha = min(1.0, 0.9995 * np.min(-n[neg] / dn[neg]))
        n = np.maximum(n + alpha * dn, opts.n_min)
        lam = lam + alpha * dlam
        if not at_final:
            # two corrector steps per level early on, one when the central
            # path is already well tracked
            steps_per_level = 1 if tau <= 1e-4 * RT else 2
            if iters % steps_per_level == 0:
                tau = max(tau * opts.barrier_reduction, tau_final)

    # feasibility polish: push ||An - b|| toward machine precision so that
    # downstream conservation audits at 1e-12 hold with margin
    for _ in range(5):
        rp = A @ n - b
        if np.max(np.abs(rp)) <= 1e-15 * scale_b:
            break
        H = _mu_jacobian(system, T, n) + np.diag(tau_final / (n * n))
        rd = np.zeros(system.n_species)
        dn, _ = _kkt_step(H, A, rd, rp, n)
        neg = dn < 0.0
        alpha = 1.0
        if np.any(neg):
            alpha = min(1.0, 0.9995 * np.min(-n[neg] / dn[neg]))
        n = np.maximum(n + alpha * dn, opts.n_min)

    mu = chemical_potentials(system, model, T, P, n)
    stable = _stable_mask(system, n, opts)
    primary = primary_species_from_amounts(system, n, opts)
    return ChemicalState(T=T, P=P, n=n, mu=mu, primary=primary,
                         stable_mask=stable)


def _stable_mask(system, n, opts):
    thr = opts.stability_threshold
    stable = np.zeros(system.n_species, dtype=bool)
    aq = system.aqueous_ids
    stable[aq] = n[aq] > thr * n[aq].sum()
    mi = system.mineral_ids
    if mi.size:
        stable[mi] = n[mi] > thr * n.sum()
    return stable


def primary_species_from_amounts(system: ChemicalSystem, n: np.ndarray,
                                 options: GemOptions = None) -> tuple:
    """Ordered primary-species indices from amount-scaled pivoting.

    Gaussian elimination on A diag(n): at each of the E steps pick the
    remaining column whose largest (eliminated) entry is maximal, lowest
    species index on ties, then eliminate its pivot row.  The pivot column
    sequence is the result; it is the cluster key for the learning store.
    """
    opts = options or _DEFAULT_OPTIONS
    A = system.formula_matrix_view
    E, N = A.shape
    if N < E:
        raise RankDeficientError("fewer species than elements")
    nn = np.maximum(n, opts.n_min)
    M = A * nn[None, :]
    drop_tol = 1e-12 * max(np.abs(M).max(), opts.n_min)
    row_active = np.ones(E, dtype=bool)
    col_remaining = np.ones(N, dtype=bool)
    order = []
    for _ in range(E):
        sub = np.abs(M[row_active][:, col_remaining])
        if sub.size == 0 or sub.max() <= drop_tol:
            break
        col_best = sub.max(axis=0)
        jj = int(np.argmax(col_best))  # first max = lowest species index
        j = np.flatnonzero(col_remaining)[jj]
        rr = int(np.argmax(np.abs(M[row_active, j])))
        r = np.flatnonzero(row_active)[rr]
        piv = M[r, j]
        for r2 in np.flatnonzero(row_active):
            if r2 != r:
                M[r2, :] -= (M[r2, j] / piv) * M[r, :]
        row_active[r] = False
        col_remaining[j] = False
        order.append(j)
    if len(order) < E:
        # dependent remainder: pad deterministically with the largest of the
        # still-unpicked columns (floor species first by amount, then index)
        rest = np.flatnonzero(col_remaining)
        rest = rest[np.lexsort((rest, -nn[rest]))]
        order.extend(int(j) for j in rest[:E - len(order)])
    return tuple(order)


def primary_species(system: ChemicalSystem, state: ChemicalState) -> tuple:
    return primary_species_from_amounts(system, state.n)


def sensitivity(system: ChemicalSystem, model: ActivityModel,
                state: ChemicalState, options: GemOptions = None) -> EquilibriumSensitivity:
    """Derivatives of the equilibrium amounts with respect to (T, P, b).

    Solves the KKT linearization restricted to stable species,
        [H_ss A_s^T; A_s 0] [dn_s; dlam] = rhs,
    with rhs = [0; e_j] per element amount, [-dmu/dT; 0] for temperature and
    zero for pressure (standard potentials are (T, P)-constants here).  Rows
    of unstable (pinned) species are exactly zero.
    """
    opts = options or _DEFAULT_OPTIONS
    A = system.formula_matrix_view
    E, N = A.shape
    s = np.flatnonzero(state.stable_mask)
    ns = s.size
    # elements carried only by unstable species have a zero constraint row
    # on the stable set; they are treated separately below
    keep = np.flatnonzero(np.any(A[:, s] != 0.0, axis=1))
    absent = np.setdiff1d(np.arange(E), keep)
    nk = keep.size
    H = _mu_jacobian(system, state.T, state.n)
    Hs = H[np.ix_(s, s)]
    As = A[np.ix_(keep, s)]
    M = np.zeros((ns + nk, ns + nk))
    M[:ns, :ns] = Hs
    M[:ns, ns:] = As.T
    M[ns:, :ns] = As

    dmudT = (state.mu - system.mu0) / state.T  # R ln a_i, gamma lagged
    rhs = np.zeros((ns + nk, nk + 2))
    rhs[ns:, :nk] = np.eye(nk)
    rhs[:ns, nk] = -dmudT[s]
    # column nk+1 (pressure) stays zero

    # diagonal scaling by the species amounts (dn = n dn_rel) followed by
    # row/column equilibration; without both, the grading between trace
    # and abundant stable species makes the LU solution useless
    d = np.concatenate([state.n[s], np.ones(nk)])
    Ms = M * d[None, :] * d[:, None]
    rw = np.ones(ns + nk)
    cw = np.ones(ns + nk)
    for _ in range(2):
        rmax = np.max(np.abs(Ms), axis=1)
        rw_k = 1.0 / np.where(rmax > 0.0, np.sqrt(rmax), 1.0)
        Ms = Ms * rw_k[:, None]
        rw *= rw_k
        cmax = np.max(np.abs(Ms), axis=0)
        cw_k = 1.0 / np.where(cmax > 0.0, np.sqrt(cmax), 1.0)
        Ms = Ms * cw_k[None, :]
        cw *= cw_k
    try:
        lu, piv = scipy.linalg.lu_factor(Ms, check_finite=False)

        def _solve(r):
            y = scipy.linalg.lu_solve((lu, piv), rw[:, None] * (d[:, None] * r),
                                      check_finite=False)
            return d[:, None] * (cw[:, None] * y)

        sol = _solve(rhs)
        # iterative refinement tightens A dndb - I to ~machine precision
        for _ in range(3):
            sol -= _solve(M @ sol - rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SingularKktMatrix(str(exc)) from exc
    if not np.all(np.isfinite(sol)):
        raise SingularKktMatrix("non-finite sensitivity solution")

    dndb = np.zeros((N, E))
    dndb[np.ix_(s, keep)] = sol[:ns, :nk]
    dndT = np.zeros(N)
    dndT[s] = sol[:ns, nk]
    dndP = np.zeros(N)
    dndP[s] = sol[:ns, nk + 1]

    if absent.size:
        # a unit amount of an absent element goes to its largest carrier
        # species; the stable set re-adjusts to keep the other element
        # totals fixed, and a final cross-coupling solve makes the columns
        # exactly consistent (A dndb = I) even when carriers share several
        # absent elements
        cols = np.zeros((N, absent.size))
        for j, e in enumerate(absent):
            carriers = np.flatnonzero(A[e] != 0.0)
            c = carriers[np.argmax(state.n[carriers])]
            col = np.zeros(N)
            col[c] = 1.0 / A[e, c]
            col -= dndb[:, keep] @ (A[np.ix_(keep, [c])].ravel() / A[e, c])
            cols[:, j] = col
        G = A[absent] @ cols
        try:
            cols = cols @ np.linalg.inv(G)
        except np.linalg.LinAlgError as exc:
            raise SingularKktMatrix(
                "dependent absent-element carriers") from exc
        dndb[:, absent] = cols

    # exact conservation projection: downstream consumers extrapolate
    # amounts as n + dndb db and audit A n = b at 1e-12, so A dndb = I must
    # hold to machine precision even at degenerate states where the KKT
    # solve above is only approximate (a no-op at regular states)
    gram = A @ A.T
    dndb -= A.T @ np.linalg.solve(gram, A @ dndb - np.eye(E))
    resid = A @ dndb - np.eye(E)
    dndb -= A.T @ np.linalg.solve(gram, resid)
    return EquilibriumSensitivity(dndT=dndT, dndP=dndP, dndb=dndb)
