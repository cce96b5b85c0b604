"""On-demand learning layer for chemical equilibrium queries.

Solved equilibrium states are stored as records grouped into clusters
keyed by the ordered tuple of primary species. A new query is first
answered by first-order Taylor extrapolation from stored records,
scanned in descending priority-rank order; only when no extrapolation
passes the acceptance test is a full minimization performed and the
result learned. Every returned state, predicted or learned, conserves
element amounts to near machine precision.
"""

import dataclasses
import json
import threading

import numpy as np

from .equilibrium import (
    ChemicalState,
    EquilibriumInput,
    EquilibriumSensitivity,
    equilibrate,
    sensitivity,
)

# Acceptance tolerances are relative to a floored reference amount
# max(n_i, major_fraction * scale_i): species above the floor obey a
# relative-change bound, species below it an absolute one, since trace
# relative changes are unbounded and irrelevant to transport.
DEFAULT_MAJOR_FRACTION = 1.0e-6

# Conservation budget for returned states, relative to max(1, |b|_inf).
_CONSERVATION_TOL = 1.0e-13

# Records are scanned in rank order in vectorized chunks of this size,
# so a hit near the front of a large cluster stays cheap.
_SCAN_CHUNK = 64


class OdmlError(Exception):
    pass


class InconsistentRecord(OdmlError):
    """state and sensitivity disagree (A * dndb far from identity)."""


@dataclasses.dataclass
class LearnedRecord:
    """One stored equilibrium solution with its input sensitivities."""

    input: EquilibriumInput
    state: ChemicalState
    sens: EquilibriumSensitivity
    rank: int = 0


class Cluster:
    """Records sharing one ordered primary-species tuple.

    Keeps stacked array views of the record data for vectorized
    prediction; the stacks are rebuilt lazily after inserts. Ranks are
    mirrored in a mutable array so that successful predictions do not
    force a rebuild.
    """

    def __init__(self, key):
        self.key = tuple(int(k) for k in key)
        self.records = []
        self.frequency = 0
        self._ranks = np.zeros(0, dtype=np.int64)
        self._dirty = True
        self._stacks = None

    @property
    def rank(self):
        return int(self._ranks.sum()) if self._ranks.size else 0

    def add(self, record):
        if tuple(record.state.primary) != self.key:
            raise ValueError("record primary ordering does not match cluster key")
        self.records.append(record)
        self._ranks = np.append(self._ranks, record.rank)
        self._dirty = True

    def bump(self, idx):
        self._ranks[idx] += 1
        self.records[idx].rank = int(self._ranks[idx])
        self.frequency += 1

    def stacks(self):
        if self._dirty:
            n0 = np.array([r.state.n for r in self.records])
            self._stacks = {
                "T": np.array([r.input.T for r in self.records]),
                "P": np.array([r.input.P for r in self.records]),
                "b": np.array([r.input.b for r in self.records]),
                "n0": n0,
                "dndT": np.array([r.sens.dndT for r in self.records]),
                "dndP": np.array([r.sens.dndP for r in self.records]),
                "dndb": np.array([r.sens.dndb for r in self.records]),
                "scale": np.array(
                    [
                        getattr(r, "_tol_scale", r.state.n)
                        for r in self.records
                    ]
                ),
            }
            self._dirty = False
        return self._stacks

    def order(self):
        """Record indices in descending rank, ties by insertion order."""
        return np.argsort(-self._ranks, kind="stable")


@dataclasses.dataclass
class OdmlOutcome:
    state: ChemicalState
    kind: str  # "predicted" or "learned"
    cluster_id: int
    record_id: int = -1


class OdmlStore:
    """Clustered record store with priority-rank search.

    epsilon is the acceptance tolerance on the relative change of major
    species; epsilon = 0 degenerates to conventional mode (only exact
    input repeats are predicted). major_fraction sets the phase-amount
    cutoff below which species are treated as trace.
    """

    def __init__(self, epsilon, major_fraction=DEFAULT_MAJOR_FRACTION):
        if epsilon < 0.0:
            raise ValueError("epsilon must be non-negative")
        if not 0.0 < major_fraction < 1.0:
            raise ValueError("major_fraction must lie in (0, 1)")
        self.epsilon = float(epsilon)
        self.major_fraction = float(major_fraction)
        self.clusters = []
        self._key_to_cluster = {}
        self.predictions = 0
        self.learnings = 0
        self.species_names = None
        self.step_series = []
        self._lock = threading.Lock()

    @property
    def queries(self):
        return self.predictions + self.learnings

    def begin_step(self, step):
        """Open a per-step learning counter bucket."""
        with self._lock:
            self.step_series.append([int(step), 0])

    def cluster_order(self):
        ranks = np.array([c.rank for c in self.clusters], dtype=np.int64)
        return np.argsort(-ranks, kind="stable")

    def insert(self, record, system=None, check_tol=1.0e-6):
        """Add a solved record, verifying state/sensitivity consistency."""
        matrix = None
        if system is not None:
            matrix = system.formula_matrix_view
            _attach_phase_data(system, record, self.major_fraction)
            if self.species_names is None:
                self.species_names = [sp.name for sp in system.species]
        return self._insert_checked(record, matrix, check_tol)

    def _insert_checked(self, record, formula_matrix, check_tol):
        if formula_matrix is not None:
            stable = record.state.stable_mask
            resid = formula_matrix @ record.sens.dndb - np.eye(
                formula_matrix.shape[0]
            )
            if np.any(stable) and np.max(np.abs(resid)) > check_tol:
                raise InconsistentRecord(
                    "A*dndb deviates from identity by %.3e"
                    % np.max(np.abs(resid))
                )
        key = tuple(record.state.primary)
        with self._lock:
            cluster = self._key_to_cluster.get(key)
            if cluster is None:
                cluster = Cluster(key)
                self.clusters.append(cluster)
                self._key_to_cluster[key] = cluster
            cluster.add(record)
            self.learnings += 1
            if self.step_series:
                self.step_series[-1][1] += 1
        return cluster


def _phase_totals(system, n):
    """Per-species total amount of the phase the species belongs to."""
    totals = np.empty_like(n)
    for phase in system.phases:
        ids = list(phase.species_ids)
        totals[ids] = np.sum(n[ids])
    return totals


def _amount_scales(system, n):
    """Per-species reference amount for tolerance scaling.

    Species in multi-species phases are scaled by their phase total.
    A single-species phase is its own total, which would make every
    pure mineral a major species no matter how vanishing its amount,
    so those species are scaled by the total amount in the system.
    """
    grand = float(np.sum(n))
    scales = np.empty_like(n)
    for phase in system.phases:
        ids = list(phase.species_ids)
        if len(ids) == 1:
            scales[ids] = grand
        else:
            scales[ids] = np.sum(n[ids])
    return scales


def predict(record, input, system=None, epsilon=0.0):
    """First-order Taylor extrapolation of a stored state.

    Returns (candidate ChemicalState, clip_ok). Negative extrapolated
    amounts are clipped to zero; if any clipped magnitude exceeds
    epsilon times the species' phase total the candidate is flagged
    un-acceptable. Chemical potentials are copied from the record (the
    transport step consumes amounts only).
    """
    dT = input.T - record.input.T
    dP = input.P - record.input.P
    db = input.b - record.input.b
    n0 = record.state.n
    if dT == 0.0 and dP == 0.0 and not np.any(db):
        n_new = n0.copy()
    else:
        n_new = (
            n0
            + record.sens.dndT * dT
            + record.sens.dndP * dP
            + record.sens.dndb @ db
        )
    clip_ok = True
    neg = n_new < 0.0
    if np.any(neg):
        if system is not None:
            scale = _tolerance_scale(record, system)
            clip_ok = bool(np.all(-n_new[neg] <= epsilon * scale[neg]))
        n_new = np.where(neg, 0.0, n_new)
    if system is not None and clip_ok and np.any(db):
        # Clipping and rounding of the matrix-vector extrapolation both
        # leave small element-balance errors; project them out.
        n_new = _restore_balance(system, n_new, input.b)
    state = ChemicalState(
        T=input.T,
        P=input.P,
        n=n_new,
        mu=record.state.mu.copy(),
        primary=record.state.primary,
        stable_mask=record.state.stable_mask.copy(),
    )
    return state, clip_ok


def _restore_balance(system, n, b):
    """Redistribute a tiny element imbalance over abundant species.

    Clipping negative extrapolated amounts to zero leaves an element
    balance error of the clipped magnitude. The amount-weighted
    least-squares correction puts it back onto the dominant carriers,
    shifting each positive species by a relative amount of the order of
    the clip over the phase total, far below the acceptance tolerance.
    """
    a_matrix = system.formula_matrix_view
    out = n
    tol = 1.0e-15 * max(1.0, float(np.max(np.abs(b))))
    for _ in range(8):
        r = a_matrix @ out - b
        if np.max(np.abs(r)) <= tol:
            break
        gram = (a_matrix * out[None, :]) @ a_matrix.T
        y, *_ = np.linalg.lstsq(gram, r, rcond=None)
        # Clamping inside the loop lets the next pass absorb whatever
        # balance error the nonnegativity projection reintroduces.
        upd = out * (1.0 - a_matrix.T @ y)
        out = np.where(upd < 0.0, 0.0, upd)
    return out


def accept(record, candidate, input, epsilon,
           major_fraction=DEFAULT_MAJOR_FRACTION, clip_ok=True):
    """Acceptance test for one extrapolated candidate.

    True iff no un-acceptable clipping occurred and every species
    changed by at most epsilon relative to a floored reference amount
    max(n_i in the learned state, major_fraction * reference scale).
    Major species therefore obey a relative-change bound of epsilon;
    trace species obey the absolute bound epsilon * major_fraction *
    scale instead of an unattainable relative one. epsilon = 0 accepts
    only exact input repeats.
    """
    if not clip_ok:
        return False
    dx = input.as_vector() - record.input.as_vector()
    if epsilon == 0.0:
        return not np.any(dx)
    n0 = record.state.n
    scale = _tolerance_scale(record)
    return bool(np.all(np.abs(candidate.n - n0) <= epsilon * scale))


def _tolerance_scale(record, system=None):
    cached = getattr(record, "_tol_scale", None)
    if cached is not None:
        return cached
    if system is None:
        raise OdmlError(
            "record lacks tolerance scales; pass system to accept() callers"
        )
    n0 = record.state.n
    return np.maximum(
        n0, DEFAULT_MAJOR_FRACTION * _amount_scales(system, n0)
    )


def _attach_phase_data(system, record, major_fraction):
    n0 = record.state.n
    record._tol_scale = np.maximum(
        n0, major_fraction * _amount_scales(system, n0)
    )


def smart_equilibrate(store, system, model, input, options=None):
    """Answer an equilibrium query from the store, learning on miss.

    Clusters are scanned in descending cluster rank, records within
    each cluster in descending record rank; the first accepted
    extrapolation wins. Otherwise a full minimization runs and the
    solved record is inserted into the cluster with the matching
    primary-species key. The returned state always satisfies
    |A n - b|_inf <= 1e-12 * max(1, |b|_inf).
    """
    eps = store.epsilon
    a_matrix = system.formula_matrix_view
    b_query = input.b
    cons_budget = _CONSERVATION_TOL * max(1.0, np.max(np.abs(b_query)))

    hit = _scan(store, system, input, eps, cons_budget)
    if hit is not None:
        state, cid, rid = hit
        with store._lock:
            store.clusters[cid].bump(rid)
            store.predictions += 1
        return OdmlOutcome(state=state, kind="predicted",
                           cluster_id=cid, record_id=int(rid))

    state = equilibrate(system, model, input, options)
    sens = sensitivity(system, model, state, options)
    record = LearnedRecord(input=input, state=state, sens=sens)
    _attach_phase_data(system, record, store.major_fraction)
    if store.species_names is None:
        store.species_names = [sp.name for sp in system.species]
    cluster = store._insert_checked(record, a_matrix, 1.0e-6)
    cid = store.clusters.index(cluster)
    return OdmlOutcome(state=state, kind="learned", cluster_id=cid)


def _scan(store, system, input, eps, cons_budget):
    """Find the best-ranked accepted extrapolation, or None."""
    for cid in store.cluster_order():
        cluster = store.clusters[cid]
        if not cluster.records:
            continue
        stacks = cluster.stacks()
        order = cluster.order()
        dT_all = input.T - stacks["T"]
        dP_all = input.P - stacks["P"]
        db_all = input.b[None, :] - stacks["b"]
        for start in range(0, order.size, _SCAN_CHUNK):
            idx = order[start:start + _SCAN_CHUNK]
            rid = _scan_chunk(
                store, system, cluster, stacks, idx,
                dT_all, dP_all, db_all, eps,
            )
            if rid is not None:
                record = cluster.records[rid]
                state, clip_ok = predict(record, input, system, eps)
                resid = system.formula_matrix_view @ state.n - input.b
                if np.max(np.abs(resid)) > cons_budget:
                    continue
                return state, int(cid), rid
    return None


def _scan_chunk(store, system, cluster, stacks, idx,
                dT_all, dP_all, db_all, eps):
    """Acceptance test over a chunk of records; first hit in order."""
    dT = dT_all[idx]
    dP = dP_all[idx]
    db = db_all[idx]
    if eps == 0.0:
        exact = (dT == 0.0) & (dP == 0.0) & np.all(db == 0.0, axis=1)
        hits = np.nonzero(exact)[0]
        return int(idx[hits[0]]) if hits.size else None
    n0 = stacks["n0"][idx]
    n_new = (
        n0
        + stacks["dndT"][idx] * dT[:, None]
        + stacks["dndP"][idx] * dP[:, None]
        + np.einsum("rne,re->rn", stacks["dndb"][idx], db)
    )
    scales = stacks["scale"][idx]
    budget = eps * scales
    # Clipping a negative amount to zero and exceeding the per-species
    # change tolerance are the same test against the floored scale.
    dev = np.abs(n_new - n0)
    ok = np.all(dev <= budget, axis=1)
    for k in np.nonzero(ok)[0]:
        return int(idx[k])
    return None


@dataclasses.dataclass
class ClusterRow:
    index: int
    primary_names: tuple
    frequency: int
    n_records: int
    rank: int


@dataclasses.dataclass
class OdmlStatistics:
    rows: list
    predictions: int
    learnings: int
    queries: int
    prediction_percentage: float
    step_series: list

    def to_table(self, delimiter="\t"):
        """Delimited text table, one row per cluster."""
        lines = [
            delimiter.join(
                ["cluster", "primary_species", "frequency", "records", "rank"]
            )
        ]
        for row in self.rows:
            lines.append(
                delimiter.join(
                    [
                        str(row.index),
                        " ".join(row.primary_names),
                        str(row.frequency),
                        str(row.n_records),
                        str(row.rank),
                    ]
                )
            )
        lines.append(
            delimiter.join(
                [
                    "total",
                    "",
                    str(self.predictions),
                    str(self.learnings),
                    "%.4f" % self.prediction_percentage,
                ]
            )
        )
        return "\n".join(lines)

    def as_dict(self):
        return {
            "clusters": [dataclasses.asdict(r) for r in self.rows],
            "predictions": self.predictions,
            "learnings": self.learnings,
            "queries": self.queries,
            "prediction_percentage": self.prediction_percentage,
            "step_series": [list(s) for s in self.step_series],
        }

    def to_json(self, indent=2):
        return json.dumps(self.as_dict(), indent=indent)

    def step_series_text(self):
        """Two-column series: step index, learnings in that step."""
        return "\n".join(
            "%d %d" % (step, count) for step, count in self.step_series
        )


def statistics(store):
    """Per-cluster usage report ordered by descending cluster rank."""
    names = store.species_names or []
    rows = []
    for pos, cid in enumerate(store.cluster_order()):
        cluster = store.clusters[cid]
        if names:
            primary = tuple(names[k] for k in cluster.key)
        else:
            primary = tuple(str(k) for k in cluster.key)
        rows.append(
            ClusterRow(
                index=pos + 1,
                primary_names=primary,
                frequency=cluster.frequency,
                n_records=len(cluster.records),
                rank=cluster.rank,
            )
        )
    queries = store.queries
    pct = 100.0 * store.predictions / queries if queries else 0.0
    return OdmlStatistics(
        rows=rows,
        predictions=store.predictions,
        learnings=store.learnings,
        queries=queries,
        prediction_percentage=pct,
        step_series=list(store.step_series),
    )
