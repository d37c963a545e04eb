"""Shared domain model: layer configurations, data layouts, primitive identities,
network graphs, and cost accounting for primitive selection."""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class PrimselError(Exception):
    """Base class for every error raised by this package."""


class InvalidConfigError(PrimselError, ValueError):
    """A layer configuration or network description violates its invariants."""


class UnknownPrimitiveError(PrimselError, KeyError):
    """Primitive id not present in the registry."""


class ApplicabilityError(PrimselError, ValueError):
    """A primitive was asked to run on a configuration it does not support."""


class LayoutError(PrimselError, ValueError):
    """Tensor layout does not match what the operation expects."""


class ShapeError(PrimselError, ValueError):
    """Dimension mismatch (tensors) or wrong graph shape (solvers)."""


class InvalidAssignmentError(PrimselError, ValueError):
    """An assignment references a missing node or an inapplicable primitive."""


class CoverageError(PrimselError, ValueError):
    """Required cost entries are missing; carries the list of gaps."""

    def __init__(self, message: str, gaps: Sequence[str] = ()):
        super().__init__(message)
        self.gaps = list(gaps)


class SizeError(PrimselError, ValueError):
    """Input too small or combinatorial limit exceeded."""


class DomainError(PrimselError, ValueError):
    """Value outside the mathematical domain (e.g. log of a non-positive)."""


class EmptyMaskError(PrimselError, ValueError):
    """Masked loss evaluated with no unmasked entries."""


class TrainingDivergedError(PrimselError, ArithmeticError):
    """Training loss became non-finite."""


class CompatibilityError(PrimselError, ValueError):
    """Model and dataset disagree on schema (primitive list or input fields)."""


# ---------------------------------------------------------------------------
# Layouts
# ---------------------------------------------------------------------------

class Layout(str, Enum):
    """Physical ordering of a (channels, height, width) tensor."""

    CHW = "chw"
    HCW = "hcw"
    HWC = "hwc"

    @property
    def axes(self) -> tuple[int, int, int]:
        """Permutation mapping logical (c, h, w) axes to this layout's order."""
        return _LAYOUT_AXES[self]

    def shape(self, c: int, im: int) -> tuple[int, int, int]:
        logical = (c, im, im)
        return tuple(logical[a] for a in self.axes)


_LAYOUT_AXES = {
    Layout.CHW: (0, 1, 2),
    Layout.HCW: (1, 0, 2),
    Layout.HWC: (1, 2, 0),
}

LAYOUTS: tuple[Layout, ...] = (Layout.CHW, Layout.HCW, Layout.HWC)


# ---------------------------------------------------------------------------
# Layer configuration
# ---------------------------------------------------------------------------

# Common parameter ranges seen across popular CNNs; advisory only, used for
# grid generation, never enforced on arbitrary inputs.
COMMON_RANGES = {
    "k": (1, 2048),
    "c": (1, 2048),
    "im": (7, 299),
    "s": (1, 2, 4),
    "f": (1, 3, 5, 7, 9, 11),
}


@dataclass(frozen=True)
class LayerConfig:
    """One convolutional layer: k kernels over a c x im x im square input,
    square f x f kernels, stride s, valid (unpadded) convolution."""

    k: int
    c: int
    im: int
    f: int
    s: int

    def __post_init__(self):
        for name in ("k", "c", "im", "f", "s"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise InvalidConfigError(f"{name} must be an integer, got {v!r}")
            if v < 1:
                raise InvalidConfigError(f"{name} must be >= 1, got {v}")
        if self.f % 2 == 0:
            raise InvalidConfigError(f"kernel size must be odd, got f={self.f}")
        if self.f > self.im:
            raise InvalidConfigError(
                f"kernel size f={self.f} exceeds input size im={self.im}")
        if self.s > self.im:
            raise InvalidConfigError(
                f"stride s={self.s} exceeds input size im={self.im}")

    def in_common_range(self) -> bool:
        """Whether this config falls inside the usual CNN parameter ranges."""
        lo_k, hi_k = COMMON_RANGES["k"]
        lo_c, hi_c = COMMON_RANGES["c"]
        lo_im, hi_im = COMMON_RANGES["im"]
        return (lo_k <= self.k <= hi_k and lo_c <= self.c <= hi_c
                and lo_im <= self.im <= hi_im
                and self.s in COMMON_RANGES["s"] and self.f in COMMON_RANGES["f"])

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.k, self.c, self.im, self.f, self.s)


def output_dims(config: LayerConfig) -> int:
    """Output spatial size of a valid convolution: floor((im - f) / s) + 1."""
    if config.f > config.im:
        raise InvalidConfigError(
            f"kernel size f={config.f} exceeds input size im={config.im}")
    return (config.im - config.f) // config.s + 1


# ---------------------------------------------------------------------------
# Primitive identities
# ---------------------------------------------------------------------------

FAMILIES: tuple[str, ...] = (
    "direct", "im2", "kn2", "wino3", "wino5", "conv-1x1", "mec")


def family_applicable(family: str, config: LayerConfig) -> bool:
    """Applicability is a pure function of (family, config)."""
    if family == "wino3":
        return config.f == 3 and config.s == 1
    if family == "wino5":
        return config.f == 5 and config.s == 1
    if family == "conv-1x1":
        return config.f == 1
    if family == "kn2":
        return config.s == 1 and config.f <= config.im
    if family in ("direct", "im2", "mec"):
        return config.f <= config.im
    raise UnknownPrimitiveError(f"unknown primitive family {family!r}")


@dataclass(frozen=True)
class PrimitiveSpec:
    """Identity and static metadata of one convolution primitive."""

    id: str
    family: str
    input_layout: Layout
    output_layout: Layout

    def applicable(self, config: LayerConfig) -> bool:
        return family_applicable(self.family, config)


# One representative implementation per sub-family. Order is canonical: it is
# the column order of datasets, the output order of models, and the
# tie-breaking order of solvers.
PRIMITIVES: tuple[PrimitiveSpec, ...] = (
    PrimitiveSpec("direct-sum2d", "direct", Layout.CHW, Layout.CHW),
    PrimitiveSpec("im2col-copy", "im2", Layout.CHW, Layout.CHW),
    PrimitiveSpec("im2row-copy", "im2", Layout.HWC, Layout.HWC),
    PrimitiveSpec("kn2row", "kn2", Layout.CHW, Layout.CHW),
    PrimitiveSpec("kn2col", "kn2", Layout.HWC, Layout.HWC),
    PrimitiveSpec("winograd-2x2-3x3", "wino3", Layout.CHW, Layout.CHW),
    PrimitiveSpec("winograd-2x2-5x5", "wino5", Layout.CHW, Layout.CHW),
    PrimitiveSpec("conv-1x1-gemm", "conv-1x1", Layout.CHW, Layout.CHW),
    PrimitiveSpec("mec-col", "mec", Layout.HCW, Layout.HWC),
)

PRIMITIVE_IDS: tuple[str, ...] = tuple(p.id for p in PRIMITIVES)
_BY_ID = {p.id: p for p in PRIMITIVES}


def get_spec(primitive_id: str) -> PrimitiveSpec:
    try:
        return _BY_ID[primitive_id]
    except KeyError:
        raise UnknownPrimitiveError(
            f"unknown primitive id {primitive_id!r}") from None


def applicable(primitive_id: str, config: LayerConfig) -> bool:
    """Whether the registered primitive supports this layer configuration."""
    return get_spec(primitive_id).applicable(config)


def applicable_primitives(config: LayerConfig) -> tuple[str, ...]:
    """Applicable primitive ids in canonical registry order."""
    return tuple(p.id for p in PRIMITIVES if p.applicable(config))


# ---------------------------------------------------------------------------
# Network graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetworkGraph:
    """A DAG of convolutional layers; edges run producer -> consumer."""

    layers: tuple[tuple[str, LayerConfig], ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "layers",
                           tuple((str(i), cfg) for i, cfg in self.layers))
        object.__setattr__(self, "edges",
                           tuple((str(u), str(v)) for u, v in self.edges))
        ids = [i for i, _ in self.layers]
        if len(set(ids)) != len(ids):
            raise InvalidConfigError("duplicate layer ids in network")
        known = set(ids)
        for u, v in self.edges:
            if u not in known or v not in known:
                raise InvalidConfigError(f"edge ({u}, {v}) references unknown layer")
            if u == v:
                raise InvalidConfigError(f"self-loop on layer {u}")
        self._check_acyclic()
        by_id = dict(self.layers)
        for u, v in self.edges:
            cu, cv = by_id[u], by_id[v]
            out = output_dims(cu)
            if cv.c != cu.k or cv.im != out:
                raise InvalidConfigError(
                    f"edge ({u}, {v}): consumer expects (c={cv.c}, im={cv.im}) "
                    f"but producer outputs (c={cu.k}, im={out})")

    def _check_acyclic(self):
        indeg = {i: 0 for i, _ in self.layers}
        succ = {i: [] for i, _ in self.layers}
        for u, v in self.edges:
            indeg[v] += 1
            succ[u].append(v)
        queue = [i for i, _ in self.layers if indeg[i] == 0]
        seen = 0
        while queue:
            node = queue.pop()
            seen += 1
            for nxt in succ[node]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    queue.append(nxt)
        if seen != len(self.layers):
            raise InvalidConfigError("network graph contains a cycle")

    # -- accessors ----------------------------------------------------------

    def node_ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self.layers)

    def config_of(self, node_id: str) -> LayerConfig:
        for i, cfg in self.layers:
            if i == node_id:
                return cfg
        raise InvalidConfigError(f"unknown layer id {node_id!r}")

    @classmethod
    def chain(cls, configs: Sequence[LayerConfig],
              ids: Sequence[str] | None = None) -> "NetworkGraph":
        """Build a simple path network from consecutive layer configs."""
        if ids is None:
            ids = [f"layer{i}" for i in range(len(configs))]
        layers = tuple(zip(ids, configs))
        edges = tuple((ids[i], ids[i + 1]) for i in range(len(configs) - 1))
        return cls(layers, edges)

    # -- JSON wire format ----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "layers": [
                {"id": i, "k": c.k, "c": c.c, "im": c.im, "f": c.f, "s": c.s}
                for i, c in self.layers
            ],
            "edges": [[u, v] for u, v in self.edges],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "NetworkGraph":
        try:
            layers = tuple(
                (str(entry["id"]),
                 LayerConfig(k=int(entry["k"]), c=int(entry["c"]),
                             im=int(entry["im"]), f=int(entry["f"]),
                             s=int(entry["s"])))
                for entry in obj["layers"])
            edges = tuple((str(u), str(v)) for u, v in obj.get("edges", []))
        except (KeyError, TypeError) as exc:
            raise InvalidConfigError(f"malformed network description: {exc}") from exc
        return cls(layers, edges)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "NetworkGraph":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# Cost graph and assignments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostGraph:
    """Per-node primitive cost vectors and per-edge transformation cost
    matrices, in seconds. Inapplicable primitives are absent from the node's
    choice list, never encoded as zero cost. Treat instances as immutable."""

    nodes: tuple[str, ...]
    choices: Mapping[str, tuple[str, ...]]
    node_costs: Mapping[str, np.ndarray]
    edge_costs: Mapping[tuple[str, str], np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(str(n) for n in self.nodes))
        choices: dict[str, tuple[str, ...]] = {}
        node_costs: dict[str, np.ndarray] = {}
        for node in self.nodes:
            if node not in self.choices or node not in self.node_costs:
                raise InvalidConfigError(f"node {node!r} missing choices or costs")
            opts = tuple(self.choices[node])
            vec = np.asarray(self.node_costs[node], dtype=np.float64)
            if vec.ndim != 1 or len(vec) != len(opts):
                raise ShapeError(f"node {node!r}: cost vector does not match choices")
            if len(vec) == 0:
                raise InvalidConfigError(f"node {node!r} has no applicable primitive")
            if not np.all(np.isfinite(vec)) or np.any(vec < 0):
                raise InvalidConfigError(f"node {node!r}: costs must be finite and >= 0")
            choices[node] = opts
            node_costs[node] = vec
        known = set(self.nodes)
        edge_costs: dict[tuple[str, str], np.ndarray] = {}
        for (u, v), mat in self.edge_costs.items():
            if u not in known or v not in known:
                raise InvalidConfigError(f"edge ({u}, {v}) references unknown node")
            m = np.asarray(mat, dtype=np.float64)
            want = (len(choices[u]), len(choices[v]))
            if m.shape != want:
                raise ShapeError(f"edge ({u}, {v}): matrix shape {m.shape} != {want}")
            if not np.all(np.isfinite(m)) or np.any(m < 0):
                raise InvalidConfigError(f"edge ({u}, {v}): costs must be finite and >= 0")
            edge_costs[(u, v)] = m
        object.__setattr__(self, "choices", choices)
        object.__setattr__(self, "node_costs", node_costs)
        object.__setattr__(self, "edge_costs", edge_costs)

    def choice_index(self, node: str, primitive_id: str) -> int:
        try:
            return self.choices[node].index(primitive_id)
        except (KeyError, ValueError):
            raise InvalidAssignmentError(
                f"primitive {primitive_id!r} is not a choice at node {node!r}") from None


@dataclass(frozen=True)
class Assignment:
    """A chosen primitive per node plus the total cost of that choice."""

    choice: Mapping[str, str]
    total_cost: float


def total_cost(graph: CostGraph, assignment: Assignment | Mapping[str, str]) -> float:
    """Sum of node costs and edge costs under the assignment.

    Deterministic summation order (nodes, then edges, in graph order) so that
    re-evaluation reproduces solver-reported totals bit for bit.
    """
    choice = assignment.choice if isinstance(assignment, Assignment) else assignment
    index: dict[str, int] = {}
    for node in graph.nodes:
        if node not in choice:
            raise InvalidAssignmentError(f"node {node!r} has no assigned primitive")
        index[node] = graph.choice_index(node, choice[node])
    total = 0.0
    for node in graph.nodes:
        total += float(graph.node_costs[node][index[node]])
    for (u, v), mat in graph.edge_costs.items():
        total += float(mat[index[u], index[v]])
    return total
