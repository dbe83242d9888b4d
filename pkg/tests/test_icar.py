import numpy as np
import pytest

from tracepoll.mrp import AreaGraph, build_icar, icar_scaling_factor
from tracepoll.mrp.icar import GraphError, component_scaling_factor, helmert_basis


def pinv_scaling_oracle(q_comp: np.ndarray) -> float:
    """Independent oracle: Moore-Penrose pseudo-inverse of the component
    Laplacian; geometric mean of its diagonal."""
    v = np.linalg.pinv(q_comp)
    return float(np.exp(np.mean(np.log(np.diag(v)))))


def _random_connected_graph(rng: np.random.Generator, n: int) -> AreaGraph:
    edges = {(i, i + 1) for i in range(n - 1)}  # spanning path keeps it connected
    extra = rng.integers(0, n * (n - 1) // 2 + 1)
    for _ in range(extra):
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        edges.add((i, j))
    return AreaGraph.from_pairs(n, list(edges))


class TestScalingFactor:
    def test_two_node_path_matches_oracle(self):
        graph = AreaGraph.from_pairs(2, [(0, 1)])
        eps = icar_scaling_factor(graph)
        oracle = pinv_scaling_oracle(graph.laplacian())
        assert eps[0] == pytest.approx(oracle, abs=1e-10)

    def test_complete_graph_k3_matches_oracle(self):
        graph = AreaGraph.from_pairs(3, [(0, 1), (0, 2), (1, 2)])
        eps = icar_scaling_factor(graph)
        assert eps[0] == pytest.approx(pinv_scaling_oracle(graph.laplacian()), abs=1e-10)

    def test_ten_random_graphs_match_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            n = int(rng.integers(2, 13))
            graph = _random_connected_graph(rng, n)
            eps = icar_scaling_factor(graph)
            assert len(eps) == 1
            assert eps[0] == pytest.approx(
                pinv_scaling_oracle(graph.laplacian()), abs=1e-10
            )

    def test_isolated_node_excluded_and_flagged(self):
        graph = AreaGraph.from_pairs(4, [(0, 1), (1, 2)])  # node 3 isolated
        icar = build_icar(graph)
        assert icar.isolated == (3,)
        assert len(icar.eps_by_component) == 1
        assert icar.inv_sqrt_eps[3] == 0.0
        # the connected part matches the oracle on its subgraph
        sub = graph.laplacian()[np.ix_([0, 1, 2], [0, 1, 2])]
        assert icar.eps_by_component[0] == pytest.approx(
            pinv_scaling_oracle(sub), abs=1e-10
        )

    def test_two_components_get_separate_factors(self):
        graph = AreaGraph.from_pairs(5, [(0, 1), (2, 3), (3, 4)])
        eps = icar_scaling_factor(graph)
        assert len(eps) == 2
        assert eps[0] != eps[1]

    def test_single_node_component_rejected_directly(self):
        with pytest.raises(GraphError):
            component_scaling_factor(np.zeros((1, 1)))


class TestBasis:
    def test_helmert_columns_orthonormal_and_sum_zero(self):
        for m in (2, 3, 7):
            b = helmert_basis(m)
            assert np.allclose(b.T @ b, np.eye(m - 1), atol=1e-12)
            assert np.allclose(b.sum(axis=0), 0.0, atol=1e-12)

    def test_structure_basis_spans_components_only(self):
        graph = AreaGraph.from_pairs(4, [(0, 1), (1, 2)])
        icar = build_icar(graph)
        assert icar.basis.shape == (4, 2)  # 3-node component -> 2 free coords
        assert np.allclose(icar.basis[3, :], 0.0)  # isolated node carries nothing
        psi = icar.basis @ np.random.default_rng(0).normal(size=(2, 5))
        assert np.allclose(psi[:3].sum(axis=0), 0.0, atol=1e-12)


class TestGraph:
    def test_components(self):
        graph = AreaGraph.from_pairs(6, [(0, 1), (2, 3), (3, 4)])
        assert graph.components() == [[0, 1], [2, 3, 4], [5]]

    def test_degrees_and_laplacian_agree(self):
        graph = AreaGraph.from_pairs(4, [(0, 1), (1, 2), (1, 3)])
        q = graph.laplacian()
        assert np.allclose(np.diag(q), graph.degrees())
        assert np.allclose(q.sum(axis=1), 0.0)

    def test_self_loop_rejected(self):
        with pytest.raises(GraphError):
            AreaGraph(2, ((0, 0),))
