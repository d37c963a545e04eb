"""Builds the cost graph from predicted or profiled costs and solves the
primitive-selection problem: assign one primitive per layer minimizing the
total of node (primitive) and edge (layout transformation) costs.

Solvers: exact dynamic programming on chains, the standard reduction scheme
(isolated, degree-1 and degree-2 folds plus a greedy step for what remains)
on general DAGs, and exhaustive enumeration as the testing oracle.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import (
    Assignment,
    CostGraph,
    CoverageError,
    NetworkGraph,
    ShapeError,
    SizeError,
    applicable_primitives,
    get_spec,
    total_cost,
)

BRUTE_FORCE_LIMIT = 10 ** 6


@dataclass
class SolveReport:
    """Solver result; `optimal` is True when the method is exact for the
    instance it was given."""

    assignment: Assignment
    method: str  # chain-dp | pbqp-heuristic | brute-force
    optimal: bool


# ---------------------------------------------------------------------------
# Cost graph construction
# ---------------------------------------------------------------------------

def build_cost_graph(net: NetworkGraph,
                     prim_costs: Mapping[str, Mapping[str, float]],
                     dlt_costs: Mapping[tuple[int, int], np.ndarray]) -> CostGraph:
    """Assemble node vectors and edge matrices for a network.

    prim_costs: node id -> primitive id -> seconds, covering every applicable
    primitive of every layer. dlt_costs: (c, im) -> 3x3 matrix in layout order
    (chw, hcw, hwc), covering every consumer data size crossed by an edge.
    Edge entry (i, j) is the transform cost from producer primitive i's output
    layout to consumer primitive j's input layout; equal layouts cost 0.
    """
    gaps: list[str] = []
    choices: dict[str, tuple[str, ...]] = {}
    node_costs: dict[str, np.ndarray] = {}
    for node, cfg in net.layers:
        prims = applicable_primitives(cfg)
        choices[node] = prims
        have = prim_costs.get(node, {})
        vec = np.empty(len(prims))
        for i, prim in enumerate(prims):
            if prim not in have:
                gaps.append(f"node {node}: missing cost for {prim}")
                continue
            vec[i] = have[prim]
        node_costs[node] = vec

    layout_index = {"chw": 0, "hcw": 1, "hwc": 2}
    edge_costs: dict[tuple[str, str], np.ndarray] = {}
    for u, v in net.edges:
        cfg_v = net.config_of(v)
        size = (cfg_v.c, cfg_v.im)
        table = dlt_costs.get(size)
        if table is None:
            gaps.append(f"edge ({u}, {v}): missing transform costs for "
                        f"(c={size[0]}, im={size[1]})")
            continue
        table = np.asarray(table, dtype=np.float64)
        mat = np.zeros((len(choices[u]), len(choices[v])))
        for i, pu in enumerate(choices[u]):
            out_lay = get_spec(pu).output_layout
            for j, pv in enumerate(choices[v]):
                in_lay = get_spec(pv).input_layout
                if out_lay == in_lay:
                    continue
                mat[i, j] = table[layout_index[out_lay.value],
                                  layout_index[in_lay.value]]
        edge_costs[(u, v)] = mat
    if gaps:
        raise CoverageError(f"{len(gaps)} missing cost entries", gaps)
    return CostGraph(net.node_ids(), choices, node_costs, edge_costs)


def profile_cost_tables(dataset, dlt_records) -> tuple[dict, dict]:
    """Lookup tables (prim_costs, dlt_costs) from profiled datasets, keyed the
    way build_cost_graph wants them. Node keys are config tuples; use
    network_cost_inputs for a per-node mapping."""
    by_cfg = {rec.config.as_tuple(): dict(rec.times) for rec in dataset.records}
    dlt = {(r.c, r.im): r.matrix for r in dlt_records}
    return by_cfg, dlt


def network_cost_inputs(net: NetworkGraph, table) -> dict[str, dict[str, float]]:
    """Per-node cost mapping from a CostTable aligned with the network's
    layers (or from a config-keyed dict of primitive times)."""
    out: dict[str, dict[str, float]] = {}
    if isinstance(table, dict):
        for node, cfg in net.layers:
            out[node] = dict(table.get(cfg.as_tuple(), {}))
        return out
    for i, (node, _) in enumerate(net.layers):
        out[node] = table.row_dict(i)
    return out


# ---------------------------------------------------------------------------
# Exact chain solver
# ---------------------------------------------------------------------------

def _chain_order(graph: CostGraph) -> list[str]:
    if not graph.nodes:
        return []
    indeg = {n: 0 for n in graph.nodes}
    succ: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for (u, v) in graph.edge_costs:
        indeg[v] += 1
        succ[u].append(v)
    if len(graph.edge_costs) != len(graph.nodes) - 1:
        raise ShapeError("graph is not a simple path")
    heads = [n for n in graph.nodes if indeg[n] == 0]
    if len(heads) != 1:
        raise ShapeError("graph is not a simple path")
    order = [heads[0]]
    while succ[order[-1]]:
        nxt = succ[order[-1]]
        if len(nxt) != 1 or indeg[nxt[0]] != 1:
            raise ShapeError("graph is not a simple path")
        order.append(nxt[0])
    if len(order) != len(graph.nodes):
        raise ShapeError("graph is not a simple path")
    return order


def solve_chain(graph: CostGraph) -> SolveReport:
    """Exact minimum on a path graph by forward dynamic programming; ties
    break toward the lower primitive index at every step."""
    order = _chain_order(graph)
    if not order:
        return SolveReport(Assignment({}, 0.0), "chain-dp", True)
    first = order[0]
    best = graph.node_costs[first].copy()
    parents: list[np.ndarray] = []
    for prev, node in zip(order, order[1:]):
        mat = graph.edge_costs[(prev, node)]
        through = best[:, None] + mat  # (n_prev, n_node)
        parent = np.argmin(through, axis=0)  # first (lowest) index on ties
        best = through[parent, np.arange(mat.shape[1])] + graph.node_costs[node]
        parents.append(parent)
    last_choice = int(np.argmin(best))
    picks = [last_choice]
    for parent in reversed(parents):
        picks.append(int(parent[picks[-1]]))
    picks.reverse()
    choice = {node: graph.choices[node][i] for node, i in zip(order, picks)}
    return SolveReport(Assignment(choice, total_cost(graph, choice)),
                       "chain-dp", True)


# ---------------------------------------------------------------------------
# PBQP-style reduction solver
# ---------------------------------------------------------------------------

def _check_acyclic(graph: CostGraph) -> None:
    indeg = {n: 0 for n in graph.nodes}
    succ: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for (u, v) in graph.edge_costs:
        indeg[v] += 1
        succ[u].append(v)
    queue = [n for n in graph.nodes if indeg[n] == 0]
    seen = 0
    while queue:
        node = queue.pop()
        seen += 1
        for nxt in succ[node]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                queue.append(nxt)
    if seen != len(graph.nodes):
        raise ShapeError("cost graph contains a cycle")


class _Reduction:
    """Mutable undirected view of a cost graph during reduction. Edge
    matrices are stored under a lexicographically ordered node pair."""

    def __init__(self, graph: CostGraph):
        self.vectors = {n: graph.node_costs[n].copy() for n in graph.nodes}
        self.alive = list(graph.nodes)
        self.edges: dict[tuple[str, str], np.ndarray] = {}
        for (u, v), mat in graph.edge_costs.items():
            self._add_edge(u, v, mat)

    def _add_edge(self, u: str, v: str, mat: np.ndarray) -> None:
        a, b = (u, v) if u < v else (v, u)
        m = mat if u < v else mat.T
        if (a, b) in self.edges:
            self.edges[(a, b)] = self.edges[(a, b)] + m
        else:
            self.edges[(a, b)] = m.copy()

    def matrix(self, x: str, other: str) -> np.ndarray:
        """Edge matrix oriented (choices of x, choices of other)."""
        if x < other:
            return self.edges[(x, other)]
        return self.edges[(other, x)].T

    def neighbors(self, x: str) -> list[str]:
        out = []
        for (a, b) in self.edges:
            if a == x:
                out.append(b)
            elif b == x:
                out.append(a)
        return sorted(out)

    def degree(self, x: str) -> int:
        return len(self.neighbors(x))

    def drop_node(self, x: str) -> None:
        self.alive.remove(x)
        for key in [k for k in self.edges if x in k]:
            del self.edges[key]


def solve_pbqp(graph: CostGraph) -> SolveReport:
    """Reduction-based solver for acyclic cost graphs.

    Applies, until none fires: isolated-node selection (R0), folding a
    degree-1 node's costs into its neighbor's vector (RI), and folding a
    degree-2 node into a direct edge between its two neighbors (RII). Any
    remaining node is fixed greedily (RN: locally minimal primitive on the
    highest-degree node) and its edge rows pushed into the neighbors.
    Choices of reduced nodes are back-propagated in reverse order; the result
    is exact when no RN step occurred.
    """
    _check_acyclic(graph)
    red = _Reduction(graph)
    trail: list[tuple] = []
    choice: dict[str, str] = {}
    optimal = True
    while red.alive:
        node = None
        for cand in red.alive:  # R0 first
            if red.degree(cand) == 0:
                node = cand
                break
        if node is not None:
            trail.append(("r0", node, red.vectors[node]))
            red.drop_node(node)
            continue
        node = next((c for c in red.alive if red.degree(c) == 1), None)
        if node is not None:
            (nb,) = red.neighbors(node)
            mat = red.matrix(node, nb)  # (n_node, n_nb)
            folded = red.vectors[node][:, None] + mat
            red.vectors[nb] = red.vectors[nb] + folded.min(axis=0)
            trail.append(("r1", node, red.vectors[node], nb, mat))
            red.drop_node(node)
            continue
        node = next((c for c in red.alive if red.degree(c) == 2), None)
        if node is not None:
            u, v = red.neighbors(node)
            mu = red.matrix(node, u)
            mv = red.matrix(node, v)
            stack = (red.vectors[node][:, None, None] + mu[:, :, None]
                     + mv[:, None, :])
            delta = stack.min(axis=0)  # (n_u, n_v)
            trail.append(("r2", node, red.vectors[node], u, mu, v, mv))
            red.drop_node(node)
            red._add_edge(u, v, delta)
            continue
        # RN: greedy fix on the highest-degree remaining node.
        optimal = False
        node = max(red.alive, key=red.degree)
        nbs = red.neighbors(node)
        local = red.vectors[node].copy()
        for nb in nbs:
            local = local + red.matrix(node, nb).min(axis=1)
        pick = int(np.argmin(local))
        choice[node] = graph.choices[node][pick]
        for nb in nbs:
            red.vectors[nb] = red.vectors[nb] + red.matrix(node, nb)[pick, :]
        red.drop_node(node)

    for step in reversed(trail):
        if step[0] == "r0":
            _, node, vec = step
            choice[node] = graph.choices[node][int(np.argmin(vec))]
        elif step[0] == "r1":
            _, node, vec, nb, mat = step
            j = graph.choices[nb].index(choice[nb])
            choice[node] = graph.choices[node][int(np.argmin(vec + mat[:, j]))]
        else:
            _, node, vec, u, mu, v, mv = step
            i = graph.choices[u].index(choice[u])
            j = graph.choices[v].index(choice[v])
            choice[node] = graph.choices[node][
                int(np.argmin(vec + mu[:, i] + mv[:, j]))]

    return SolveReport(Assignment(choice, total_cost(graph, choice)),
                       "pbqp-heuristic", optimal)


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------

def brute_force(graph: CostGraph, limit: int = BRUTE_FORCE_LIMIT) -> SolveReport:
    """Enumerate every assignment; exact by construction. Fails when the
    product of per-node choice counts exceeds `limit`."""
    counts = [len(graph.choices[n]) for n in graph.nodes]
    space = 1
    for c in counts:
        space *= c
        if space > limit:
            raise SizeError(f"assignment space exceeds limit {limit}")
    if not graph.nodes:
        return SolveReport(Assignment({}, 0.0), "brute-force", True)
    nodes = graph.nodes
    node_vecs = [graph.node_costs[n] for n in nodes]
    pos = {n: i for i, n in enumerate(nodes)}
    edges = [(pos[u], pos[v], mat) for (u, v), mat in graph.edge_costs.items()]
    best_total = np.inf
    best_pick: tuple[int, ...] | None = None
    for pick in itertools.product(*[range(c) for c in counts]):
        t = 0.0
        for i, vec in enumerate(node_vecs):
            t += vec[pick[i]]
        for iu, iv, mat in edges:
            t += mat[pick[iu], pick[iv]]
        if t < best_total:
            best_total = t
            best_pick = pick
    assert best_pick is not None
    choice = {n: graph.choices[n][best_pick[i]] for i, n in enumerate(nodes)}
    return SolveReport(Assignment(choice, total_cost(graph, choice)),
                       "brute-force", True)


# ---------------------------------------------------------------------------
# Assignment wire format
# ---------------------------------------------------------------------------

def assignment_json(graph: CostGraph, report: SolveReport) -> dict:
    """Assignment plus total and per-layer/per-edge cost breakdown."""
    choice = dict(report.assignment.choice)
    per_layer = {}
    for node in graph.nodes:
        i = graph.choice_index(node, choice[node])
        per_layer[node] = float(graph.node_costs[node][i])
    per_edge = {}
    for (u, v), mat in graph.edge_costs.items():
        i = graph.choice_index(u, choice[u])
        j = graph.choice_index(v, choice[v])
        per_edge[f"{u}->{v}"] = float(mat[i, j])
    return {
        "assignment": choice,
        "total_cost": report.assignment.total_cost,
        "method": report.method,
        "optimal": report.optimal,
        "per_layer_cost": per_layer,
        "per_edge_cost": per_edge,
    }


def save_assignment(graph: CostGraph, report: SolveReport, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(assignment_json(graph, report), fh, indent=2)
        fh.write("\n")
