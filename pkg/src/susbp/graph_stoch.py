"""Stochastized derivatives on scalar computation DAGs.

A derivative between two nodes is a sum over directed paths of products of
edge partials. Multiplying each edge partial by an upweighting Bernoulli
mask (value 1/q with probability q, else 0) leaves the expectation intact
as long as no path uses one random variable twice. This module carries the
scalar formalism plus exact enumeration oracles on small graphs; the
matrix-valued attention case lives in `attention_core` / `sus_backprop`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from susbp.numerics import RngStream

Edge = tuple[str, str]

ENUMERATION_EDGE_LIMIT = 20


@dataclass(frozen=True)
class Node:
    """One scalar node: a function of its parents plus its partials.

    Input nodes have no parents and `fn=None`; their values come from the
    `inputs` mapping. `partials[k]` evaluates d(node)/d(parents[k]) at the
    parent values.
    """

    name: str
    parents: tuple[str, ...] = ()
    fn: Callable[..., float] | None = None
    partials: tuple[Callable[..., float], ...] = ()


class DagGraph:
    """Immutable scalar DAG given in topological order."""

    def __init__(self, nodes: Sequence[Node]):
        seen: set[str] = set()
        for node in nodes:
            if node.name in seen:
                raise ValueError(f"duplicate node name {node.name!r}")
            if len(set(node.parents)) != len(node.parents):
                raise ValueError(f"node {node.name!r} lists a parent twice")
            for p in node.parents:
                if p not in seen:
                    raise ValueError(
                        f"node {node.name!r} depends on {p!r} which is not defined earlier"
                    )
            if node.parents and node.fn is None:
                raise ValueError(f"node {node.name!r} has parents but no function")
            if len(node.partials) != len(node.parents):
                raise ValueError(
                    f"node {node.name!r} has {len(node.parents)} parents but "
                    f"{len(node.partials)} partials"
                )
            seen.add(node.name)
        self._nodes = tuple(nodes)
        self._by_name = {n.name: n for n in self._nodes}
        self._children: dict[str, list[str]] = {n.name: [] for n in self._nodes}
        for n in self._nodes:
            for p in n.parents:
                self._children[p].append(n.name)

    @property
    def nodes(self) -> tuple[Node, ...]:
        return self._nodes

    def node(self, name: str) -> Node:
        if name not in self._by_name:
            raise KeyError(f"unknown node {name!r}")
        return self._by_name[name]

    def edges(self) -> list[Edge]:
        """All (parent, child) edges, in topological child order."""
        return [(p, n.name) for n in self._nodes for p in n.parents]

    def children(self, name: str) -> list[str]:
        self.node(name)
        return list(self._children[name])

    def forward(self, inputs: Mapping[str, float]) -> dict[str, float]:
        values: dict[str, float] = {}
        for node in self._nodes:
            if node.fn is None:
                if node.name not in inputs:
                    raise KeyError(f"missing input value for node {node.name!r}")
                values[node.name] = float(inputs[node.name])
            else:
                args = [values[p] for p in node.parents]
                values[node.name] = float(node.fn(*args))
        return values


@dataclass(frozen=True)
class EdgeMaskPolicy:
    """Per-edge acceptance probabilities, each in (0, 1]."""

    q: Mapping[Edge, float]

    def __post_init__(self) -> None:
        for edge, qe in self.q.items():
            if not (0.0 < qe <= 1.0):
                raise ValueError(f"edge {edge}: acceptance probability {qe} outside (0, 1]")

    @classmethod
    def uniform(cls, g: DagGraph, q: float) -> "EdgeMaskPolicy":
        return cls({e: q for e in g.edges()})

    def q_for(self, edge: Edge) -> float:
        if edge not in self.q:
            raise ValueError(f"policy does not cover edge {edge}")
        return self.q[edge]


def _edge_partials(g: DagGraph, values: Mapping[str, float]) -> dict[Edge, float]:
    out: dict[Edge, float] = {}
    for node in g.nodes:
        args = [values[p] for p in node.parents]
        for p, dfn in zip(node.parents, node.partials):
            out[(p, node.name)] = float(dfn(*args))
    return out


def _adjoint_sweep(
    g: DagGraph,
    partials: Mapping[Edge, float],
    source: str,
    sink: str,
    edge_mult: Mapping[Edge, float] | None = None,
) -> float:
    # Reverse accumulation; linear in each edge partial, so per-edge
    # multipliers reproduce the masked path sum exactly.
    adjoint = {n.name: 0.0 for n in g.nodes}
    adjoint[sink] = 1.0
    for node in reversed(g.nodes):
        a = adjoint[node.name]
        if a == 0.0:
            continue
        for p in node.parents:
            edge = (p, node.name)
            val = partials[edge]
            if edge_mult is not None:
                val *= edge_mult.get(edge, 1.0)
            adjoint[p] += a * val
    return adjoint[source]


def path_sum_derivative(
    g: DagGraph, source: str, sink: str, inputs: Mapping[str, float]
) -> float:
    """Full derivative d(sink)/d(source): sum over paths of edge-partial products."""
    g.node(source)
    g.node(sink)
    if source == sink:
        return 1.0
    values = g.forward(inputs)
    partials = _edge_partials(g, values)

    total = 0.0
    stack: list[tuple[str, float]] = [(source, 1.0)]
    while stack:
        name, prod = stack.pop()
        if name == sink:
            total += prod
            continue
        for child in g.children(name):
            stack.append((child, prod * partials[(name, child)]))
    return total


def reverse_mode_derivative(
    g: DagGraph, source: str, sink: str, inputs: Mapping[str, float]
) -> float:
    """d(sink)/d(source) by reverse accumulation (one adjoint sweep)."""
    g.node(source)
    g.node(sink)
    if source == sink:
        return 1.0
    values = g.forward(inputs)
    return _adjoint_sweep(g, _edge_partials(g, values), source, sink)


def stochastic_backprop(
    g: DagGraph,
    policy: EdgeMaskPolicy,
    source: str,
    sink: str,
    inputs: Mapping[str, float],
    rng: RngStream,
) -> float:
    """One sample of the derivative with every edge masked independently.

    Each edge gets a single Bernoulli draw per call and the same draw is
    reused on every path through that edge; a DAG path never traverses one
    edge twice, so the estimate stays unbiased.
    """
    edges = g.edges()
    for e in edges:
        policy.q_for(e)
    values = g.forward(inputs)
    partials = _edge_partials(g, values)
    gen = rng.generator()
    u = gen.random(len(edges))
    mult: dict[Edge, float] = {}
    for e, ue in zip(edges, u):
        qe = policy.q_for(e)
        mult[e] = 1.0 / qe if ue < qe else 0.0
    return _adjoint_sweep(g, partials, source, sink, mult)


def exact_mask_expectation(
    g: DagGraph,
    policy: EdgeMaskPolicy,
    source: str,
    sink: str,
    inputs: Mapping[str, float],
    share: Mapping[Edge, int] | None = None,
) -> float:
    """Exact E over all mask configurations of the stochastic estimate.

    Enumerates every on/off configuration weighted by its probability.
    `share` optionally assigns edges to shared random variables (same group
    id = one Bernoulli draw serves all of them); the default is one
    independent variable per edge. Sharing across edges that can lie on a
    common path deliberately breaks unbiasedness and is supported so that
    the failure is testable.
    """
    edges = g.edges()
    for e in edges:
        policy.q_for(e)
    if share is None:
        groups: dict[int, list[Edge]] = {i: [e] for i, e in enumerate(edges)}
        group_q = {i: policy.q_for(e) for i, e in enumerate(edges)}
    else:
        groups = {}
        for e in edges:
            gid = share.get(e)
            if gid is None:
                raise ValueError(f"share map does not cover edge {e}")
            groups.setdefault(gid, []).append(e)
        group_q = {}
        for gid, es in groups.items():
            qs = {policy.q_for(e) for e in es}
            if len(qs) != 1:
                raise ValueError(f"edges sharing variable {gid} have differing q values")
            group_q[gid] = qs.pop()
    if len(edges) > ENUMERATION_EDGE_LIMIT:
        raise ValueError(
            f"{len(edges)} edges exceeds the enumeration limit of {ENUMERATION_EDGE_LIMIT}"
        )

    values = g.forward(inputs)
    partials = _edge_partials(g, values)
    gids = sorted(groups)
    expectation = 0.0
    for config in itertools.product((True, False), repeat=len(gids)):
        prob = 1.0
        mult: dict[Edge, float] = {}
        for gid, keep in zip(gids, config):
            qe = group_q[gid]
            prob *= qe if keep else (1.0 - qe)
            m = 1.0 / qe if keep else 0.0
            for e in groups[gid]:
                mult[e] = m
        if prob == 0.0:
            continue
        expectation += prob * _adjoint_sweep(g, partials, source, sink, mult)
    return expectation


def chain_graph() -> DagGraph:
    """x -> u = sin(x) -> y = u^2, a single-path test graph."""
    return DagGraph(
        [
            Node("x"),
            Node("u", ("x",), np.sin, (np.cos,)),
            Node("y", ("u",), lambda u: u * u, (lambda u: 2.0 * u,)),
        ]
    )


def diamond_graph() -> DagGraph:
    """x -> (a = 2x, b = 3x) -> y = a*b, the two-path test graph."""
    return DagGraph(
        [
            Node("x"),
            Node("a", ("x",), lambda x: 2.0 * x, (lambda x: 2.0,)),
            Node("b", ("x",), lambda x: 3.0 * x, (lambda x: 3.0,)),
            Node(
                "y",
                ("a", "b"),
                lambda a, b: a * b,
                (lambda a, b: b, lambda a, b: a),
            ),
        ]
    )


def random_polynomial_dag(seed: int, extra_nodes: int = 5) -> DagGraph:
    """Random DAG of low-order polynomial nodes rooted at input "x".

    Every non-input node is a0*p0 + a1*p1 + a2*p0*p1 (+ quadratic term for
    single-parent nodes) with seeded coefficients, so all partials are
    exact closed forms.
    """
    gen = RngStream(seed, stream_id=101).generator()
    nodes = [Node("x")]
    names = ["x"]
    for i in range(extra_nodes):
        k = 1 if len(names) == 1 else int(gen.integers(1, 3))
        parents = tuple(
            names[j] for j in sorted(gen.choice(len(names), size=k, replace=False))
        )
        coef = gen.uniform(-1.0, 1.0, size=3)
        a0, a1, a2 = (float(c) for c in coef)
        if k == 1:
            fn = lambda p, a0=a0, a2=a2: a0 * p + a2 * p * p
            partials = (lambda p, a0=a0, a2=a2: a0 + 2.0 * a2 * p,)
        else:
            fn = lambda p, q, a0=a0, a1=a1, a2=a2: a0 * p + a1 * q + a2 * p * q
            partials = (
                lambda p, q, a0=a0, a2=a2: a0 + a2 * q,
                lambda p, q, a1=a1, a2=a2: a1 + a2 * p,
            )
        name = f"n{i}"
        nodes.append(Node(name, parents, fn, partials))
        names.append(name)
    return DagGraph(nodes)
