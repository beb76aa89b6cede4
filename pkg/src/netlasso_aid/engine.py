"""Graph-coupled training: the network-lasso objective and its ADMM solver.

The problem over an undirected weighted graph ``G = (V, E)`` is

    minimise  sum_t l_t(w_t, b_t) + lambda * sum_{(j,k) in E} a_jk * ||w_j - w_k||_2

where ``l_t`` is the node loss from :mod:`netlasso_aid.ocsvm`.  Only the
weight vectors are coupled through the edge penalty; each bias ``b_t`` stays
local to its node.

ADMM decomposition (scaled form): every edge (j, k) carries two consensus
copies ``z_jk, z_kj`` and two scaled duals ``u_jk, u_kj``.  One iteration is

    w_t  <- argmin l_t(w_t) + sum_{i in N(t)} (rho/2)*||w_t - (z_ti - u_ti)||^2
    z    <- closed-form edge minimiser (see :func:`z_update_edge`)
    u_ti <- u_ti + w_t - z_ti

stopping when the primal residual (stacked ``w_t - z_ti``) and the dual
residual (``rho`` times the stacked z-step) both fall below their
tolerances.  All node updates within a phase are independent, so results do
not depend on how many workers execute them.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, SolverFailureError
from .ocsvm import LocalSubproblem, LossConfig, ModelParams, ProxTerm, primal_objective

TERM_CONVERGED = "converged"
TERM_MAX_ITER = "max_iter"


def ordered_pair(j, k):
    """Canonical (smaller, larger) orientation of an undirected edge."""
    try:
        return (j, k) if j <= k else (k, j)
    except TypeError:
        return (j, k) if str(j) <= str(k) else (k, j)


def _sorted_ids(ids):
    try:
        return sorted(ids)
    except TypeError:
        return sorted(ids, key=str)


@dataclass(frozen=True)
class GraphNode:
    """One node: identifier, local training windows, and loss settings."""

    node_id: object
    data: np.ndarray
    cfg: LossConfig

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2 or data.shape[0] == 0:
            raise InvalidInputError(f"node {self.node_id}: data must be (N, d)")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class ProblemGraph:
    """Validated coupling graph: unique nodes, undirected weighted edges."""

    nodes: tuple
    edges: tuple

    def __init__(self, nodes: Sequence[GraphNode], edges: Sequence[tuple]):
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("duplicate node ids")
        id_set = set(ids)
        dims = {n.data.shape[1] for n in nodes}
        if len(dims) > 1:
            raise InvalidInputError(f"inconsistent feature dimensions: {sorted(dims)}")
        seen = set()
        norm_edges = []
        for j, k, a in edges:
            if j == k:
                raise InvalidInputError(f"self-loop at node {j}")
            if j not in id_set or k not in id_set:
                raise InvalidInputError(f"edge ({j}, {k}) references unknown node")
            key = ordered_pair(j, k)
            if key in seen:
                raise InvalidInputError(f"duplicate edge ({j}, {k})")
            seen.add(key)
            if not (a > 0.0):
                raise InvalidInputError(f"edge ({j}, {k}) weight must be > 0, got {a}")
            norm_edges.append((key[0], key[1], float(a)))
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "edges", tuple(norm_edges))

    @property
    def node_ids(self):
        return [n.node_id for n in self.nodes]

    @property
    def dim(self) -> int:
        return self.nodes[0].data.shape[1]


@dataclass(frozen=True)
class EdgeState:
    """Consensus copies and scaled duals of one edge."""

    z_jk: np.ndarray
    z_kj: np.ndarray
    u_jk: np.ndarray
    u_kj: np.ndarray

    def __post_init__(self):
        for name in ("z_jk", "z_kj", "u_jk", "u_kj"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"edge state {name} must be finite")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class SolverConfig:
    """ADMM settings; tolerances default to the 1e-3 operating point."""

    lam: float = 0.0
    rho: float = 1.0
    eps_primal: float = 1e-3
    eps_dual: float = 1e-3
    max_iter: int = 2000
    inner_tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0.0:
            raise InvalidInputError(f"lambda must be >= 0, got {self.lam}")
        if not (self.rho > 0.0):
            raise InvalidInputError(f"rho must be > 0, got {self.rho}")
        if not (self.eps_primal > 0.0 and self.eps_dual > 0.0):
            raise InvalidInputError("residual tolerances must be > 0")
        if self.max_iter < 1:
            raise InvalidInputError("max_iter must be >= 1")
        if not (self.inner_tol > 0.0):
            raise InvalidInputError("inner_tol must be > 0")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    r_primal: float
    r_dual: float
    objective: float
    wall_ms: float


@dataclass
class SolveTrace:
    """Per-iteration residuals/objective and the termination reason.

    Wall-clock entries are measurement metadata; equality of the numeric
    optimisation content is what :meth:`numeric_records` compares.
    """

    records: list = field(default_factory=list)
    termination: str = TERM_MAX_ITER

    def numeric_records(self):
        return [(r.iteration, r.r_primal, r.r_dual, r.objective) for r in self.records]

    @property
    def iterations(self) -> int:
        return len(self.records)


def edge_penalty(models: dict, graph: ProblemGraph, lam: float) -> float:
    """The coupling term ``lambda * sum a_jk * ||w_j - w_k||_2``."""
    total = 0.0
    for j, k, a in graph.edges:
        total += a * float(np.linalg.norm(models[j].w - models[k].w))
    return lam * total


def network_objective(models: dict, graph: ProblemGraph, lam: float) -> float:
    """Full objective: node losses plus the weighted edge penalty."""
    missing = [n.node_id for n in graph.nodes if n.node_id not in models]
    if missing:
        raise InvalidInputError(f"missing models for nodes: {missing}")
    total = 0.0
    for node in graph.nodes:
        total += primal_objective(models[node.node_id], node.data, node.cfg)
    return total + edge_penalty(models, graph, lam)


def z_update_edge(p, q, c: float, rho: float):
    """Exact minimiser of ``c*||z1 - z2|| + (rho/2)*(||p - z1||^2 + ||q - z2||^2)``.

    Fuses both copies to the midpoint when ``rho*||p - q|| <= 2c``; otherwise
    interpolates with ``theta = 1 - c/(rho*||p - q||) in (0.5, 1]``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InvalidInputError("z-update inputs must be finite")
    if c < 0.0 or not (rho > 0.0):
        raise InvalidInputError("z-update requires c >= 0 and rho > 0")
    diff = p - q
    dist = float(np.linalg.norm(diff))
    if rho * dist <= 2.0 * c:
        mid = 0.5 * (p + q)
        return mid.copy(), mid.copy()
    theta = 1.0 - c / (rho * dist)
    return theta * p + (1.0 - theta) * q, (1.0 - theta) * p + theta * q


def u_update_edge(u, w, z):
    """Scaled dual ascent step ``u + w - z``."""
    return np.asarray(u, dtype=float) + np.asarray(w, dtype=float) - np.asarray(z, dtype=float)


def residual_norms(w_stack, z_stack, z_prev_stack, rho: float):
    """Euclidean norms of the stacked primal and dual residuals.

    ``w_stack``/``z_stack`` hold one row per node-edge incidence with the
    incident node's weight vector and the matching consensus copy;
    ``z_prev_stack`` holds the previous iteration's copies.
    """
    w_stack = np.asarray(w_stack, dtype=float)
    z_stack = np.asarray(z_stack, dtype=float)
    z_prev_stack = np.asarray(z_prev_stack, dtype=float)
    if w_stack.size == 0:
        return 0.0, 0.0
    r_p = float(np.linalg.norm(w_stack - z_stack))
    r_s = float(rho * np.linalg.norm(z_stack - z_prev_stack))
    return r_p, r_s


class _AdmmRun:
    """Mutable solver state reused across a regularisation path."""

    def __init__(self, graph: ProblemGraph, cfg: SolverConfig):
        self.graph = graph
        self.cfg = cfg
        self.ids = graph.node_ids
        self.index = {nid: i for i, nid in enumerate(self.ids)}
        self.m = len(self.ids)
        self.d = graph.dim
        self.edges = graph.edges
        self.ne = len(self.edges)
        # incidences[t] = list of (edge_index, side) with side 0 for j, 1 for k
        self.incidences = [[] for _ in range(self.m)]
        for e, (j, k, _a) in enumerate(self.edges):
            self.incidences[self.index[j]].append((e, 0))
            self.incidences[self.index[k]].append((e, 1))
        self.solvers = [
            LocalSubproblem(node.data, node.cfg, cfg.rho * len(self.incidences[i]))
            for i, node in enumerate(graph.nodes)
        ]
        self.W = np.zeros((self.m, self.d))
        self.B = np.zeros(self.m)
        self.Z = np.zeros((self.ne, 2, self.d))
        self.U = np.zeros((self.ne, 2, self.d))

    def _update_node(self, i: int) -> None:
        rho = self.cfg.rho
        prox = [
            ProxTerm(self.Z[e, side] - self.U[e, side], rho)
            for e, side in self.incidences[i]
        ]
        try:
            params, _ = self.solvers[i].solve(prox, self.cfg.inner_tol)
        except SolverFailureError as err:
            raise SolverFailureError(
                f"node {self.ids[i]}: {err}", params=err.params, gap=err.gap
            ) from err
        self.W[i] = params.w
        self.B[i] = params.b

    def models(self) -> dict:
        return {nid: ModelParams(self.W[i], self.B[i]) for nid, i in self.index.items()}

    def edge_states(self) -> dict:
        out = {}
        for e, (j, k, _a) in enumerate(self.edges):
            out[(j, k)] = EdgeState(
                self.Z[e, 0], self.Z[e, 1], self.U[e, 0], self.U[e, 1]
            )
        return out

    def run(self, lam: float, workers: int = 1) -> SolveTrace:
        cfg = self.cfg
        trace = SolveTrace()
        pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            for it in range(1, cfg.max_iter + 1):
                t0 = time.perf_counter()
                if pool is None:
                    for i in range(self.m):
                        self._update_node(i)
                else:
                    # each task writes only its own W/B slot, so scheduling
                    # order cannot change the result
                    list(pool.map(self._update_node, range(self.m)))

                z_prev = self.Z.copy()
                for e, (j, k, a) in enumerate(self.edges):
                    p = self.W[self.index[j]] + self.U[e, 0]
                    q = self.W[self.index[k]] + self.U[e, 1]
                    z1, z2 = z_update_edge(p, q, lam * a, cfg.rho)
                    self.Z[e, 0] = z1
                    self.Z[e, 1] = z2
                for e, (j, k, _a) in enumerate(self.edges):
                    self.U[e, 0] += self.W[self.index[j]] - self.Z[e, 0]
                    self.U[e, 1] += self.W[self.index[k]] - self.Z[e, 1]

                if self.ne:
                    w_stack = np.empty((2 * self.ne, self.d))
                    for e, (j, k, _a) in enumerate(self.edges):
                        w_stack[2 * e] = self.W[self.index[j]]
                        w_stack[2 * e + 1] = self.W[self.index[k]]
                    z_stack = self.Z.reshape(-1, self.d)
                    zp_stack = z_prev.reshape(-1, self.d)
                else:
                    w_stack = z_stack = zp_stack = np.empty((0, self.d))
                r_p, r_s = residual_norms(w_stack, z_stack, zp_stack, cfg.rho)
                obj = network_objective(self.models(), self.graph, lam)
                trace.records.append(
                    IterationRecord(it, r_p, r_s, obj, (time.perf_counter() - t0) * 1e3)
                )
                if r_p <= cfg.eps_primal and r_s <= cfg.eps_dual:
                    trace.termination = TERM_CONVERGED
                    break
            else:
                trace.termination = TERM_MAX_ITER
        finally:
            if pool is not None:
                pool.shutdown()
        return trace


def admm_solve(graph: ProblemGraph, cfg: SolverConfig, workers: int = 1):
    """Run the ADMM loop from the zero initialisation.

    Returns ``(models, edge_states, trace)``; hitting ``max_iter`` is
    reported through ``trace.termination``, not an exception.
    """
    run = _AdmmRun(graph, cfg)
    trace = run.run(cfg.lam, workers=workers)
    return run.models(), run.edge_states(), trace


def regularization_path(graph: ProblemGraph, lambda_grid, cfg: SolverConfig, workers: int = 1):
    """Solve along an ascending lambda grid, warm-starting each solve.

    Returns ``{lambda: (models, edge_states, trace)}`` in grid order.
    """
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise InvalidInputError("lambda grid must be non-empty")
    if any(v < 0 for v in grid):
        raise InvalidInputError("lambda grid must be non-negative")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise InvalidInputError("lambda grid must be ascending")
    run = _AdmmRun(graph, cfg)
    out = {}
    for lam in grid:
        trace = run.run(lam, workers=workers)
        out[lam] = (run.models(), run.edge_states(), trace)
    return out


def cluster_assignments(models: dict, tol: float):
    """Single-linkage grouping of nodes by ``||w_j - w_k|| <= tol``.

    Returns ``(clusters, count)`` where clusters is a list of node-id lists
    (each sorted, ordered by first member).  Biases are ignored.
    """
    if tol < 0.0:
        raise InvalidInputError(f"tol must be >= 0, got {tol}")
    ids = list(models)
    parent = {i: i for i in ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a_idx, a in enumerate(ids):
        for b in ids[a_idx + 1 :]:
            if np.linalg.norm(models[a].w - models[b].w) <= tol:
                parent[find(a)] = find(b)
    groups = {}
    for nid in ids:
        groups.setdefault(find(nid), []).append(nid)
    clusters = sorted((_sorted_ids(g) for g in groups.values()), key=lambda g: str(g[0]))
    return clusters, len(clusters)


# -- solution snapshot serialisation -----------------------------------------
#
# Columnar text, one record per line, 17 significant digits (lossless for
# float64):
#   node <node_id> <b> <w_1> ... <w_d>
#   edge <j> <k> <z_jk...> <z_kj...> <u_jk...> <u_kj...>   (d values each)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_snapshot(path, models: dict, edge_states: dict) -> None:
    """Write the node/edge solution state to a columnar text file."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for nid in _sorted_ids(models):
            if any(ch.isspace() for ch in str(nid)):
                raise InvalidInputError(f"node id {nid!r} contains whitespace")
            m = models[nid]
            fh.write(f"node {nid} {_fmt(m.b)} " + " ".join(_fmt(x) for x in m.w) + "\n")
        for (j, k) in sorted(edge_states, key=lambda e: (str(e[0]), str(e[1]))):
            st = edge_states[(j, k)]
            vals = np.concatenate([st.z_jk, st.z_kj, st.u_jk, st.u_kj])
            fh.write(f"edge {j} {k} " + " ".join(_fmt(x) for x in vals) + "\n")


def load_snapshot(path):
    """Read a snapshot written by :func:`save_snapshot`.

    Node ids come back as strings; returns ``(models, edge_states)``.
    """
    models = {}
    edge_states = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "node":
                nid = parts[1]
                b = float(parts[2])
                w = np.array([float(x) for x in parts[3:]])
                models[nid] = ModelParams(w, b)
            elif parts[0] == "edge":
                j, k = parts[1], parts[2]
                vals = np.array([float(x) for x in parts[3:]])
                if vals.size % 4 != 0:
                    raise InvalidInputError(f"{path}:{lineno}: malformed edge record")
                d = vals.size // 4
                edge_states[(j, k)] = EdgeState(
                    vals[:d], vals[d : 2 * d], vals[2 * d : 3 * d], vals[3 * d :]
                )
            else:
                raise InvalidInputError(f"{path}:{lineno}: unknown record {parts[0]!r}")
    return models, edge_states
