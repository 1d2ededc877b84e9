from __future__ import annotations

import pytest
import torch

from dataset import GaussianSpec, Graph, generate_csbm_graph, make_loc_split
from diff import DTYPE


@pytest.fixture
def path2() -> Graph:
    """Due nodi collegati da un arco, una feature per nodo."""
    return Graph.from_edges(
        torch.tensor([[1.0], [-1.0]], dtype=DTYPE),
        torch.tensor([0]),
        torch.tensor([1]),
        torch.tensor([0, 1]),
        2,
    )


@pytest.fixture
def two_cliques() -> Graph:
    # due cricche disgiunte con feature separabili
    return generate_csbm_graph(GaussianSpec.isotropic(2, 6.0), 30, 1.0, 0.0, ood_classes=(), seed=0)


@pytest.fixture
def small_csbm() -> Graph:
    return generate_csbm_graph(GaussianSpec.isotropic(4, 4.0), 40, 0.15, 0.01, seed=3, num_id_classes=3, ood_size=40)


@pytest.fixture
def small_split(small_csbm: Graph):
    return make_loc_split(small_csbm, (3,), per_class_train=10, test_fraction=0.3, seed=0)
