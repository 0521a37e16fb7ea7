import logging
import math
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from utils.errors import BackendMismatchError, NumericError, ValidationError
from utils.graph import normalized_adjacency_apply
from utils.linalg import DEFAULT_EIGEN_CAP, make_generator, rng_rademacher, symmetric_eigenvalues

logger = logging.getLogger(__name__)

PREPROCESS_VERSION = 1
DEFAULT_K = 50
DEFAULT_PROBES = 1000
BACKENDS = ('auto', 'eigen', 'power_series')


@dataclass
class EigPreprocess:
    lambda_prime: torch.Tensor
    sum_log_degrees: float
    graph_hash: str

    method = 'eigen'

    @property
    def n_nodes(self):
        return self.lambda_prime.shape[0]


@dataclass
class TracePreprocess:
    traces: torch.Tensor
    std_errors: torch.Tensor
    n_probes: int
    n_nodes: int
    sum_log_degrees: float
    graph_hash: str
    seed: int

    method = 'power_series'

    @property
    def K(self):
        return self.traces.shape[0]


def precompute_eigen(graph, cap=DEFAULT_EIGEN_CAP, cache_dir=None):
    if cache_dir is not None:
        path = eigen_cache_path(cache_dir, graph.graph_hash())
        if os.path.isfile(path):
            logger.info('reusing eigenvalues from %s', path)
            return load_preprocess(path)

    pre = EigPreprocess(lambda_prime=symmetric_eigenvalues(graph, cap=cap),
                        sum_log_degrees=float(graph.log_degrees.sum()),
                        graph_hash=graph.graph_hash())
    if cache_dir is not None:
        save_preprocess(eigen_cache_path(cache_dir, pre.graph_hash), pre)
    return pre


def precompute_traces(graph, K=DEFAULT_K, n_probes=DEFAULT_PROBES, seed=0, cache_dir=None, probe_batch=100):
    '''
    Hutchinson estimates of tr(A~^k), k = 1..K, with Rademacher probes.
    Every probe is pushed through A~ K times, each power reusing the previous
    product, so A~^k is never formed.
    '''
    if K < 1 or n_probes < 1:
        raise ValidationError(f'need K >= 1 and n_probes >= 1, got K={K}, n_probes={n_probes}')
    if cache_dir is not None:
        path = trace_cache_path(cache_dir, graph.graph_hash(), K, n_probes, seed)
        if os.path.isfile(path):
            logger.info('reusing trace estimates from %s', path)
            return load_preprocess(path)

    generator = make_generator(seed, 'trace_probes')
    sums = torch.zeros(K, dtype=torch.float64)
    squares = torch.zeros(K, dtype=torch.float64)
    remaining = n_probes
    while remaining > 0:
        batch = min(probe_batch, remaining)
        u = rng_rademacher((graph.n_nodes, batch), generator=generator)
        v = u
        for k in range(K):
            v = normalized_adjacency_apply(graph, v)
            estimates = (u * v).sum(0)
            sums[k] += estimates.sum()
            squares[k] += (estimates ** 2).sum()
        remaining -= batch

    traces = sums / n_probes
    if n_probes > 1:
        variance = torch.clamp(squares - n_probes * traces ** 2, min=0.0) / (n_probes - 1)
        std_errors = torch.sqrt(variance / n_probes)
    else:
        std_errors = torch.full_like(traces, float('inf'))

    pre = TracePreprocess(traces=traces, std_errors=std_errors, n_probes=n_probes, n_nodes=graph.n_nodes,
                          sum_log_degrees=float(graph.log_degrees.sum()), graph_hash=graph.graph_hash(), seed=seed)
    if cache_dir is not None:
        save_preprocess(trace_cache_path(cache_dir, pre.graph_hash, K, n_probes, seed), pre)
    return pre


def layer_logdet_eigen(pre, alpha, beta, gamma):
    ''' log|det G_l| = gamma sum_i log d_i + sum_i log|alpha + beta lambda'_i|, exact. '''
    values = alpha + beta * pre.lambda_prime
    if bool((values == 0).any()):
        raise NumericError('singular layer: alpha + beta * lambda is zero', term='layer_logdet_eigen')
    return gamma * pre.sum_log_degrees + torch.log(torch.abs(values)).sum()


def layer_logdet_power_series(pre, alpha, beta, gamma):
    ''' N log alpha + gamma sum_i log d_i + log det(I + beta/alpha A~) with the series cut at K. '''
    ks = torch.arange(1, pre.K + 1, dtype=torch.float64)
    powers = torch.cumprod((-beta / alpha).expand(pre.K), dim=0)
    series = (-(1.0 / ks) * powers * pre.traces).sum()
    return pre.n_nodes * torch.log(alpha) + gamma * pre.sum_log_degrees + series


def layer_logdet(pre, alpha, beta, gamma):
    if isinstance(pre, EigPreprocess):
        return layer_logdet_eigen(pre, alpha, beta, gamma)
    if isinstance(pre, TracePreprocess):
        return layer_logdet_power_series(pre, alpha, beta, gamma)
    raise BackendMismatchError(f'unknown pre-process {type(pre).__name__}')


def truncation_bound(alpha, beta, n, K):
    ''' Upper bound on the error of the power series cut after K terms. '''
    ratio = abs(float(beta) / float(alpha))
    if ratio >= 1.0:
        raise ValidationError(f'|beta/alpha| must be < 1, got {ratio}')
    if ratio == 0.0:
        return 0.0
    partial = sum(ratio ** k / k for k in range(1, K + 1))
    return n * max(-math.log1p(-ratio) - partial, 0.0)


def truncation_bound_curve(ratios=(0.1, 0.3, 0.5, 0.7, 0.9, 0.95, 0.99), max_K=100):
    ''' Per-node bound factor against K, one column per |beta/alpha|. '''
    table = {'K': np.arange(1, max_K + 1)}
    for ratio in ratios:
        table[f'ratio_{ratio}'] = [truncation_bound(1.0, ratio, 1, K) for K in table['K']]
    return pd.DataFrame(table)


def total_logdet(layers, pre):
    ''' Sum of the per-layer log|det|; an empty layer list has log-determinant 0. '''
    layers = list(layers)
    if not layers:
        return torch.zeros((), dtype=torch.float64)
    graph = layers[0].graph
    if pre.n_nodes != graph.n_nodes or pre.graph_hash != graph.graph_hash():
        raise BackendMismatchError(f'{pre.method} pre-process does not belong to {graph}')
    return torch.stack([layer.log_det(pre) for layer in layers]).sum()


def select_backend(graph, backend='auto', cap=DEFAULT_EIGEN_CAP, cache_dir=None):
    if backend not in BACKENDS:
        raise ValidationError(f'unknown log-determinant backend "{backend}", expected one of {BACKENDS}')
    if backend != 'auto':
        return backend
    if cache_dir is not None and os.path.isfile(eigen_cache_path(cache_dir, graph.graph_hash())):
        return 'eigen'
    return 'eigen' if graph.n_nodes <= cap else 'power_series'


def make_preprocess(graph, backend='auto', K=DEFAULT_K, n_probes=DEFAULT_PROBES, seed=0,
                    cap=DEFAULT_EIGEN_CAP, cache_dir=None):
    backend = select_backend(graph, backend, cap, cache_dir)
    logger.info('log-determinant backend: %s', backend)
    if backend == 'eigen':
        return precompute_eigen(graph, cap=cap, cache_dir=cache_dir)
    return precompute_traces(graph, K=K, n_probes=n_probes, seed=seed, cache_dir=cache_dir)


def eigen_cache_path(cache_dir, graph_hash):
    return os.path.join(cache_dir, f'{graph_hash}_eigen.txt')


def trace_cache_path(cache_dir, graph_hash, K, n_probes, seed):
    return os.path.join(cache_dir, f'{graph_hash}_traces_K{K}_P{n_probes}_s{seed}.txt')


def save_preprocess(path, pre):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    header = {'version': PREPROCESS_VERSION, 'method': pre.method, 'graph_hash': pre.graph_hash,
              'sum_log_degrees': repr(pre.sum_log_degrees)}
    if isinstance(pre, EigPreprocess):
        header['n'] = pre.n_nodes
        values = pre.lambda_prime.numpy()
    else:
        header.update({'n': pre.n_nodes, 'K': pre.K, 'n_probes': pre.n_probes, 'seed': pre.seed})
        values = np.stack([pre.traces.numpy(), pre.std_errors.numpy()], axis=1)
    np.savetxt(path, values, fmt='%.17g', header='\n'.join(f'{k}={v}' for k, v in header.items()))


def load_preprocess(path):
    header = {}
    with open(path) as f:
        for line in f:
            if not line.startswith('#'):
                break
            key, _, value = line[1:].strip().partition('=')
            header[key] = value
    if int(header.get('version', -1)) != PREPROCESS_VERSION:
        raise BackendMismatchError(f'{path}: unsupported pre-process version {header.get("version")}')

    values = np.loadtxt(path, dtype=np.float64, ndmin=1)
    if header['method'] == 'eigen':
        return EigPreprocess(lambda_prime=torch.as_tensor(values, dtype=torch.float64),
                             sum_log_degrees=float(header['sum_log_degrees']), graph_hash=header['graph_hash'])
    values = values.reshape(-1, 2)
    return TracePreprocess(traces=torch.as_tensor(values[:, 0].copy(), dtype=torch.float64),
                           std_errors=torch.as_tensor(values[:, 1].copy(), dtype=torch.float64),
                           n_probes=int(header['n_probes']), n_nodes=int(header['n']),
                           sum_log_degrees=float(header['sum_log_degrees']), graph_hash=header['graph_hash'],
                           seed=int(header['seed']))
