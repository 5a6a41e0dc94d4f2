"""DC electricity network model: PTDF matrix and line flows.

Flows follow the standard DC (linearized) power-flow approximation: line
susceptances 1/x, net nodal injections mapped to flows through the PTDF
matrix computed against a slack node. The slack column of the PTDF is zero;
nodal prices remain slack-invariant through the lambda + Psi'rho
decomposition, so the chosen slack is recorded on the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Line:
    from_node: str
    to_node: str
    reactance: float   # per unit, > 0
    capacity: float    # MW, > 0

    def __post_init__(self):
        if self.reactance <= 0:
            raise ValueError(f"line {self.from_node}-{self.to_node}: reactance must be > 0")
        if self.capacity <= 0:
            raise ValueError(f"line {self.from_node}-{self.to_node}: capacity must be > 0")


@dataclass
class Network:
    nodes: list[str]
    lines: list[Line]
    slack_node: str | None = None
    ptdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node ids")
        if self.slack_node is None:
            self.slack_node = self.nodes[0]
        if self.slack_node not in self.nodes:
            raise ValueError(f"slack node {self.slack_node!r} not in node list")
        for ln in self.lines:
            if ln.from_node not in self.nodes or ln.to_node not in self.nodes:
                raise ValueError(f"line {ln.from_node}-{ln.to_node} references unknown node")
        self.ptdf = compute_ptdf(self.nodes, self.lines, self.slack_node)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_lines(self) -> int:
        return len(self.lines)

    def node_index(self, node: str) -> int:
        return self.nodes.index(node)

    @property
    def capacities(self) -> np.ndarray:
        return np.array([ln.capacity for ln in self.lines])

    def with_capacity_overrides(self, overrides: dict[tuple[str, str], float]) -> "Network":
        """New network with per-line capacity overrides, keyed (from, to) or (to, from)."""
        remaining = dict(overrides)
        new_lines = []
        for ln in self.lines:
            key, rkey = (ln.from_node, ln.to_node), (ln.to_node, ln.from_node)
            cap = remaining.pop(key, remaining.pop(rkey, ln.capacity))
            new_lines.append(Line(ln.from_node, ln.to_node, ln.reactance, cap))
        if remaining:
            raise ValueError(f"overrides for unknown lines: {sorted(remaining)}")
        return Network(list(self.nodes), new_lines, self.slack_node)


def compute_ptdf(nodes: list[str], lines: list[Line], slack_node: str) -> np.ndarray:
    """L x N PTDF matrix; column = sensitivity of flows to injection at that node.

    Psi = B_line @ Ainc @ inv(Ainc' B_line Ainc) restricted to non-slack nodes,
    with a zero slack column. Raises on a disconnected graph (singular reduced
    susceptance matrix).
    """
    n, l = len(nodes), len(lines)
    idx = {node: k for k, node in enumerate(nodes)}
    if slack_node not in idx:
        raise ValueError("slack node not in node list")
    _check_connected(nodes, lines, idx)

    inc = np.zeros((l, n))
    b_diag = np.zeros(l)
    for k, ln in enumerate(lines):
        inc[k, idx[ln.from_node]] = 1.0
        inc[k, idx[ln.to_node]] = -1.0
        b_diag[k] = 1.0 / ln.reactance
    b_line = b_diag[:, None] * inc              # L x N, susceptance-weighted incidence
    b_bus = inc.T @ b_line                      # N x N nodal susceptance
    keep = [k for k in range(n) if k != idx[slack_node]]
    b_red = b_bus[np.ix_(keep, keep)]
    try:
        inv_red = np.linalg.inv(b_red)
    except np.linalg.LinAlgError as exc:
        raise ValueError("reduced susceptance matrix is singular") from exc
    ptdf = np.zeros((l, n))
    ptdf[:, keep] = b_line[:, keep] @ inv_red
    return ptdf


def _check_connected(nodes, lines, idx):
    if not lines and len(nodes) > 1:
        raise ValueError("network graph is disconnected")
    adj = {k: set() for k in range(len(nodes))}
    for ln in lines:
        a, b = idx[ln.from_node], idx[ln.to_node]
        adj[a].add(b)
        adj[b].add(a)
    seen, stack = {0}, [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != len(nodes):
        raise ValueError("network graph is disconnected")


def line_flows(ptdf: np.ndarray, injections: np.ndarray) -> np.ndarray:
    """L x T flows from N x T net nodal injections (MW), per hour."""
    injections = np.atleast_2d(np.asarray(injections, dtype=float))
    if injections.shape[0] != ptdf.shape[1]:
        raise ValueError(
            f"injection rows {injections.shape[0]} != ptdf columns {ptdf.shape[1]}"
        )
    return ptdf @ injections
