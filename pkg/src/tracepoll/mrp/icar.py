"""Area adjacency handling for the spatial prior.

The intrinsic CAR term penalizes squared differences across neighboring
areas. It is improper (constant shift per connected component is free), so
the effect is parametrized through an orthonormal sum-to-zero basis per
component, and its typical marginal variance is normalized by a per-component
scaling factor so the mixing weight is interpretable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class GraphError(Exception):
    pass


@dataclass(frozen=True)
class AreaGraph:
    """Undirected adjacency over n areas, stored as i<j edge pairs."""

    n: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n < 1:
            raise GraphError("graph needs at least one node")
        for i, j in self.edges:
            if i == j:
                raise GraphError(f"self-loop at node {i}")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError(f"edge ({i},{j}) outside 0..{self.n - 1}")

    @classmethod
    def from_pairs(cls, n: int, pairs: Sequence[Sequence[int]]) -> "AreaGraph":
        norm = {(min(i, j), max(i, j)) for i, j in pairs}
        return cls(n=n, edges=tuple(sorted(norm)))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def laplacian(self) -> np.ndarray:
        q = np.zeros((self.n, self.n))
        for i, j in self.edges:
            q[i, i] += 1
            q[j, j] += 1
            q[i, j] -= 1
            q[j, i] -= 1
        return q

    def components(self) -> list[list[int]]:
        """Connected components, each sorted, ordered by smallest member."""
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = [False] * self.n
        comps = []
        for start in range(self.n):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                node = stack.pop()
                comp.append(node)
                for nb in adj[node]:
                    if not seen[nb]:
                        seen[nb] = True
                        stack.append(nb)
            comps.append(sorted(comp))
        return comps

    def isolated_nodes(self) -> list[int]:
        return [c[0] for c in self.components() if len(c) == 1]


def helmert_basis(m: int) -> np.ndarray:
    """Orthonormal (m, m-1) basis of the sum-to-zero subspace."""
    basis = np.zeros((m, m - 1))
    for k in range(1, m):
        norm = np.sqrt(k * (k + 1))
        basis[:k, k - 1] = 1.0 / norm
        basis[k, k - 1] = -k / norm
    return basis


@dataclass(frozen=True)
class IcarStructure:
    """Everything the log-density needs, precomputed from the graph.

    basis maps free coordinates to node values (zero rows on isolated nodes);
    inv_sqrt_eps holds 1/sqrt(epsilon) per node, zero on isolated nodes.
    """

    graph: AreaGraph
    basis: np.ndarray  # (n, n_free)
    laplacian: np.ndarray  # (n, n)
    inv_sqrt_eps: np.ndarray  # (n,)
    eps_by_component: tuple[float, ...]
    isolated: tuple[int, ...]

    @property
    def n_free(self) -> int:
        return self.basis.shape[1]


def component_scaling_factor(q_comp: np.ndarray) -> float:
    """Geometric mean of the marginal variances of the component's ICAR,
    i.e. of the diagonal of the precision's generalized inverse on the
    sum-to-zero subspace."""
    m = q_comp.shape[0]
    if m < 2:
        raise GraphError("scaling factor undefined for a single node")
    evals, evecs = np.linalg.eigh(q_comp)
    # one zero eigenvalue per connected component (the constant vector)
    inv = np.zeros_like(evals)
    tol = 1e-10 * max(1.0, float(evals[-1]))
    nonzero = evals > tol
    inv[nonzero] = 1.0 / evals[nonzero]
    variances = np.einsum("ij,j,ij->i", evecs, inv, evecs)
    return float(np.exp(np.mean(np.log(variances))))


def build_icar(graph: AreaGraph) -> IcarStructure:
    q = graph.laplacian()
    comps = graph.components()
    basis_cols = []
    inv_sqrt_eps = np.zeros(graph.n)
    eps_list = []
    isolated = []
    for comp in comps:
        if len(comp) == 1:
            isolated.append(comp[0])
            continue
        sub = q[np.ix_(comp, comp)]
        eps = component_scaling_factor(sub)
        eps_list.append(eps)
        inv_sqrt_eps[comp] = 1.0 / np.sqrt(eps)
        local = helmert_basis(len(comp))
        col = np.zeros((graph.n, len(comp) - 1))
        col[comp, :] = local
        basis_cols.append(col)
    basis = (
        np.concatenate(basis_cols, axis=1) if basis_cols else np.zeros((graph.n, 0))
    )
    return IcarStructure(
        graph=graph,
        basis=basis,
        laplacian=q,
        inv_sqrt_eps=inv_sqrt_eps,
        eps_by_component=tuple(eps_list),
        isolated=tuple(isolated),
    )


def icar_scaling_factor(graph: AreaGraph) -> tuple[float, ...]:
    """Scaling factor per connected component with >= 2 nodes; isolated nodes
    carry no spatially structured term and are excluded."""
    return build_icar(graph).eps_by_component
