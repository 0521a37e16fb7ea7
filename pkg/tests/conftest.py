import numpy as np
import pytest
import torch

from model.dgmrf import DGMRF
from utils.graph import ObservationMask, SparseGraph, generate_delaunay_graph, generate_mask
from utils.params import Params


def delaunay(n, seed=0, weighted=False):
    return generate_delaunay_graph(n, seed, weighted=weighted)[0]


def random_dgmrf(graph, n_layers, seed=0, sigma=0.5):
    ''' DGMRF with random but well conditioned parameters and biases. '''
    rng = np.random.default_rng(seed)
    alphas = rng.uniform(0.8, 1.6, n_layers)
    betas = alphas * rng.uniform(-0.9, 0.9, n_layers)
    gammas = rng.uniform(0.1, 0.9, n_layers)
    biases = rng.normal(0.0, 0.5, n_layers)
    return DGMRF.from_values(graph, alphas, betas, gammas=gammas, biases=biases, sigma=sigma)


def dense_layer(graph, alpha, beta, gamma):
    A = graph.to_dense()
    d = graph.degrees
    return alpha * torch.diag(d ** gamma) + beta * torch.diag(d ** (gamma - 1.0)) @ A


@pytest.fixture
def edge_graph():
    return SparseGraph.from_edges(2, [(0, 1)])


@pytest.fixture
def triangle():
    return SparseGraph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def path_graph():
    return SparseGraph.from_edges(3, [(0, 1), (1, 2)])


@pytest.fixture
def small_graph():
    return delaunay(30, seed=1)


@pytest.fixture
def medium_graph():
    return delaunay(100, seed=2)


@pytest.fixture
def half_mask():
    def make(n, seed=0):
        return generate_mask(n, 0.5, seed)
    return make


@pytest.fixture
def full_mask():
    def make(n):
        return ObservationMask(np.ones(n, dtype=bool))
    return make


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def params(tmp_path):
    def make(**kwargs):
        values = dict(output_root=str(tmp_path / 'output'), iterations=30, n_layers=1, n_nodes=120,
                      n_mc_samples=4, n_posterior_samples=10, log_every=10, checkpoint_every=10)
        values.update(kwargs)
        return Params(**values)
    return make
