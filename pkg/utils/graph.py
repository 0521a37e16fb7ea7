import hashlib
import logging

import numpy as np
import pandas as pd
import scipy.sparse as sp
import torch
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, QhullError

from utils.errors import DimensionError, GraphParseError, GraphValidationError, NodeBoundsError, ValidationError

logger = logging.getLogger(__name__)

# Distance offset for inverse-distance weights, keeps coincident points finite
DEFAULT_WEIGHT_EPS = 1e-6


class SparseGraph:
    '''
    Undirected weighted graph stored as a symmetric CSR matrix, both directions
    of every edge explicit and column indices sorted within each row.
    '''

    def __init__(self, row_offsets, col_indices, weights, validate=True):
        self.row_offsets = torch.as_tensor(np.asarray(row_offsets), dtype=torch.long)
        self.col_indices = torch.as_tensor(np.asarray(col_indices), dtype=torch.long)
        self.weights = torch.as_tensor(np.asarray(weights), dtype=torch.float64)
        self.n_nodes = self.row_offsets.shape[0] - 1

        counts = self.row_offsets[1:] - self.row_offsets[:-1]
        self.row_indices = torch.repeat_interleave(torch.arange(self.n_nodes), counts)
        self.degrees = torch.zeros(self.n_nodes, dtype=torch.float64).index_add(0, self.row_indices, self.weights)
        self.log_degrees = torch.log(self.degrees)
        self._hash = None

        if validate:
            self.validate()

    @classmethod
    def from_scipy(cls, matrix, validate=True):
        csr = sp.csr_matrix(matrix, dtype=np.float64)
        csr.eliminate_zeros()
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.indptr, csr.indices, csr.data, validate=validate)

    @classmethod
    def from_edges(cls, n_nodes, edges, weights=None, validate=True):
        '''
        Builds the graph from an undirected edge list. Self-loops are dropped and
        for duplicated pairs (in either orientation) the first occurrence wins.
        '''
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        weights = np.ones(len(edges)) if weights is None else np.asarray(weights, dtype=np.float64)

        keep = edges[:, 0] != edges[:, 1]
        edges, weights = edges[keep], weights[keep]

        pairs = np.sort(edges, axis=1)
        _, first = np.unique(pairs, axis=0, return_index=True)
        first = np.sort(first)
        pairs, weights = pairs[first], weights[first]

        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        data = np.concatenate([weights, weights])
        matrix = sp.coo_matrix((data, (rows, cols)), shape=(n_nodes, n_nodes))
        return cls.from_scipy(matrix, validate=validate)

    def validate(self):
        matrix = self.to_scipy()
        if (self.weights <= 0).any():
            raise GraphValidationError('edge weights must be strictly positive')
        if (self.row_indices == self.col_indices).any():
            raise GraphValidationError('graph contains self-loops')
        if (self.row_offsets[1:] < self.row_offsets[:-1]).any():
            raise GraphValidationError('row offsets are not monotone')
        if (matrix != matrix.T).nnz != 0:
            raise GraphValidationError('adjacency matrix is not symmetric')
        isolated = torch.nonzero(self.degrees <= 0).flatten()
        if len(isolated) > 0:
            raise GraphValidationError(f'{len(isolated)} isolated node(s), first is {isolated[0].item()}')
        n_components, _ = connected_components(matrix, directed=False)
        if n_components != 1:
            raise GraphValidationError(f'graph is disconnected ({n_components} components)')

    @property
    def n_edges(self):
        return self.col_indices.shape[0] // 2

    def check_vector(self, v):
        if v.shape[0] != self.n_nodes:
            raise DimensionError(f'vector of length {v.shape[0]} on a graph with {self.n_nodes} nodes')

    def adjacency_apply(self, v):
        ''' Computes A v for v of shape (n,) or (n, samples), one pass over the edges. '''
        self.check_vector(v)
        w = self.weights.view(-1, *([1] * (v.dim() - 1)))
        return torch.zeros_like(v).index_add(0, self.row_indices, w * v[self.col_indices])

    def degree_power(self, exponent):
        return torch.exp(exponent * self.log_degrees)

    def to_scipy(self):
        return sp.csr_matrix((self.weights.numpy(), self.col_indices.numpy(), self.row_offsets.numpy()),
                             shape=(self.n_nodes, self.n_nodes))

    def to_dense(self):
        return torch.as_tensor(self.to_scipy().toarray(), dtype=torch.float64)

    def edge_list(self):
        ''' Each undirected edge once as (i, j, w) with i < j. '''
        upper = self.row_indices < self.col_indices
        return self.row_indices[upper], self.col_indices[upper], self.weights[upper]

    def graph_hash(self):
        ''' Digest of the CSR arrays, computed on first use; the arrays never change after construction. '''
        if self._hash is None:
            digest = hashlib.sha256()
            for array in (self.row_offsets, self.col_indices, self.weights):
                digest.update(array.numpy().tobytes())
            self._hash = digest.hexdigest()[:16]
        return self._hash

    def __repr__(self):
        return f'SparseGraph(n_nodes={self.n_nodes}, n_edges={self.n_edges})'


class ObservationMask:
    def __init__(self, observed):
        self.observed = torch.as_tensor(np.asarray(observed), dtype=torch.bool)
        if self.m_count < 1:
            raise ValidationError('observation mask has no observed nodes')

    @property
    def m_count(self):
        return int(self.observed.sum().item())

    @property
    def unobserved(self):
        return ~self.observed

    def as_float(self):
        return self.observed.to(torch.float64)

    def __len__(self):
        return self.observed.shape[0]


def load_edge_list(path, n_nodes):
    edges, weights = [], []
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            content = line.split('#', 1)[0].strip()
            if not content:
                continue
            fields = content.split()
            if len(fields) not in (2, 3):
                raise GraphParseError(path, line_number, line)
            try:
                u, v = int(fields[0]), int(fields[1])
                w = float(fields[2]) if len(fields) == 3 else 1.0
            except ValueError:
                raise GraphParseError(path, line_number, line)
            for node in (u, v):
                if node < 0 or node >= n_nodes:
                    raise NodeBoundsError(f'{path}:{line_number}: node {node} outside [0, {n_nodes})')
            edges.append((u, v))
            weights.append(w)

    graph = SparseGraph.from_edges(n_nodes, edges, weights)
    logger.info('loaded %s from %s', graph, path)
    return graph


def save_edge_list(path, graph):
    rows, cols, weights = graph.edge_list()
    with open(path, 'w') as f:
        f.write(f'# n_nodes={graph.n_nodes}\n')
        for u, v, w in zip(rows.tolist(), cols.tolist(), weights.tolist()):
            f.write(f'{u} {v} {w!r}\n')


def normalized_adjacency_apply(graph, v):
    ''' Computes D^-1/2 A D^-1/2 v without forming the matrix. '''
    scale = graph.degree_power(-0.5).view(-1, *([1] * (v.dim() - 1)))
    return scale * graph.adjacency_apply(scale * v)


def k_hop_graph(graph, k):
    ''' Unweighted graph connecting all node pairs within k hops (edge weights ignored). '''
    if k < 1:
        raise ValidationError(f'k must be at least 1, got {k}')
    pattern = graph.to_scipy().astype(bool).astype(np.int64) + sp.identity(graph.n_nodes, dtype=np.int64, format='csr')
    reach = pattern.copy()
    for _ in range(k - 1):
        reach = reach @ pattern
        reach.data[:] = 1
    reach = sp.csr_matrix(reach, dtype=np.float64)
    reach.setdiag(0)
    reach.eliminate_zeros()
    reach.data[:] = 1.0
    return SparseGraph.from_scipy(reach)


def delaunay_graph(points, weighted=False, eps=DEFAULT_WEIGHT_EPS):
    '''
    Graph of the Delaunay triangulation of 2D points. With weighted=True each
    edge gets w_ij = 1 / (|p_i - p_j| + eps).
    '''
    points = np.asarray(points, dtype=np.float64)
    triangulation = Delaunay(points)
    simplices = triangulation.simplices
    edges = np.concatenate([simplices[:, [0, 1]], simplices[:, [1, 2]], simplices[:, [0, 2]]])
    weights = None
    if weighted:
        distances = np.linalg.norm(points[edges[:, 0]] - points[edges[:, 1]], axis=1)
        weights = 1.0 / (distances + eps)
    return SparseGraph.from_edges(len(points), edges, weights)


def generate_delaunay_graph(n, seed, weighted=False, eps=DEFAULT_WEIGHT_EPS, max_attempts=100):
    '''
    Samples n points uniformly on the unit square and triangulates them.
    Degenerate draws (collinear points, points Qhull drops) are resampled from
    the same generator, so the result is a deterministic function of the seed.
    '''
    if n < 3:
        raise ValidationError(f'Delaunay graph needs at least 3 nodes, got {n}')
    rng = np.random.default_rng(seed)
    for attempt in range(max_attempts):
        points = rng.uniform(0.0, 1.0, size=(n, 2))
        try:
            return delaunay_graph(points, weighted=weighted, eps=eps), points
        except (QhullError, GraphValidationError) as e:
            logger.warning('degenerate Delaunay sample (attempt %d): %s', attempt + 1, e)
    raise GraphValidationError(f'no valid triangulation after {max_attempts} attempts')


def _observation_order(n, seed):
    return np.random.default_rng(seed).permutation(n)


def generate_mask(n, fraction_unobserved, seed):
    '''
    Marks round(fraction * n) nodes unobserved, uniformly without replacement.
    Masks drawn with the same seed are nested: the observed set of a smaller
    fraction_unobserved contains the observed set of any larger one.
    '''
    if not 0.0 < fraction_unobserved < 1.0:
        raise ValidationError(f'fraction_unobserved must be in (0, 1), got {fraction_unobserved}')
    n_observed = n - int(round(fraction_unobserved * n))
    if n_observed < 1:
        raise ValidationError(f'masking {fraction_unobserved} of {n} nodes leaves none observed')
    observed = np.zeros(n, dtype=bool)
    observed[_observation_order(n, seed)[:n_observed]] = True
    return ObservationMask(observed)


def generate_nested_masks(n, observed_fractions, seed):
    return [generate_mask(n, 1.0 - fraction, seed) for fraction in sorted(observed_fractions)]


def load_node_vector(path):
    return torch.as_tensor(np.loadtxt(path, dtype=np.float64, ndmin=1), dtype=torch.float64)


def save_node_vector(path, values):
    np.savetxt(path, np.asarray(values, dtype=np.float64), fmt='%.17g')


def load_mask(path):
    return ObservationMask(np.loadtxt(path, ndmin=1).astype(bool))


def save_mask(path, mask):
    np.savetxt(path, mask.observed.numpy().astype(np.int64), fmt='%d')


def save_points(path, points):
    points = np.asarray(points)
    pd.DataFrame({'id': np.arange(len(points)), 'x': points[:, 0], 'y': points[:, 1]}) \
        .to_csv(path, index=False, float_format='%.17g')


def load_points(path):
    return pd.read_csv(path, float_precision='round_trip').sort_values('id')[['x', 'y']].to_numpy()
