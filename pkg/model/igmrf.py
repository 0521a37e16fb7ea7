import logging
import math

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from model.posterior import DEFAULT_POSTERIOR_SAMPLES, posterior_summary
from utils.errors import NumericError
from utils.utility import observed_targets

logger = logging.getLogger(__name__)

# Search grid: four noise levels, 20 log-spaced precisions
DEFAULT_SIGMAS = (0.001, 0.01, 0.1, 1.0)
DEFAULT_KAPPAS = tuple(np.logspace(-2, 3, 20))
# 1e-4 was used on dense social graphs, 1e-6 everywhere else
DEFAULT_EPSILON = 1e-6
DENSE_GRAPH_EPSILON = 1e-4


def recipe_epsilon(recipe):
    return DENSE_GRAPH_EPSILON if recipe == 'dense' else DEFAULT_EPSILON


def _cholesky(matrix, term):
    factor, info = torch.linalg.cholesky_ex(matrix)
    if int(info) != 0:
        raise NumericError('precision matrix is not positive definite, increase epsilon', term=term)
    return factor


class IGMRF(nn.Module):
    ''' Zero-mean GMRF with Q = kappa (D - A) + epsilon I and Gaussian noise sigma. '''

    def __init__(self, graph, kappa=1.0, sigma=1.0, epsilon=DEFAULT_EPSILON):
        super(IGMRF, self).__init__()
        self.graph = graph
        self.register_buffer('kappa', torch.tensor(float(kappa), dtype=torch.float64))
        self.register_buffer('sigma', torch.tensor(float(sigma), dtype=torch.float64))
        self.epsilon = epsilon
        self.edge_rows, self.edge_cols, edge_weights = graph.edge_list()
        self.edge_scale = torch.sqrt(edge_weights)

    @property
    def n_nodes(self):
        return self.graph.n_nodes

    def precision_apply(self, v):
        shape = (-1, *([1] * (v.dim() - 1)))
        laplacian = self.graph.degrees.view(shape) * v - self.graph.adjacency_apply(v)
        return self.kappa * laplacian + self.epsilon * v

    def precision_mean_product(self):
        return torch.zeros(self.n_nodes, dtype=torch.float64)

    @property
    def noise_dim(self):
        return self.graph.n_edges + self.n_nodes

    def precision_noise(self, z):
        '''
        sqrt(kappa) B^T z_edges + sqrt(epsilon) z_nodes, with B the weighted
        incidence matrix (B^T B = D - A), so the result has covariance Q.
        '''
        n_edges = self.graph.n_edges
        z_edges, z_nodes = z[:n_edges], z[n_edges:]
        weighted = self.edge_scale.view(-1, *([1] * (z.dim() - 1))) * z_edges
        incidence = torch.zeros_like(z_nodes).index_add(0, self.edge_rows, weighted).index_add(0, self.edge_cols, -weighted)
        return torch.sqrt(self.kappa) * incidence + math.sqrt(self.epsilon) * z_nodes

    def dense_precision(self):
        laplacian = torch.diag(self.graph.degrees) - self.graph.to_dense()
        return self.kappa * laplacian + self.epsilon * torch.eye(self.n_nodes, dtype=torch.float64)

    def log_marginal_likelihood(self, y, mask, x_prime=None):
        '''
        log p(y_m) = log p(y_m | x') + log p(x') - log p(x' | y_m), valid for any
        x'; defaults to the posterior mean. Dense Cholesky, small graphs only.
        '''
        n = self.n_nodes
        m = mask.as_float()
        y_m = observed_targets(y, mask)
        sigma = self.sigma
        precision = self.dense_precision()
        posterior_precision = precision + torch.diag(m) / sigma ** 2
        prior_factor = _cholesky(precision, 'prior precision')
        posterior_factor = _cholesky(posterior_precision, 'posterior precision')
        mean = torch.cholesky_solve((y_m / sigma ** 2).unsqueeze(1), posterior_factor).squeeze(1)
        x = mean if x_prime is None else x_prime

        log_2pi = math.log(2.0 * math.pi)
        residual = m * (y_m - x)
        log_likelihood = -0.5 * mask.m_count * log_2pi - mask.m_count * torch.log(sigma) \
            - 0.5 * (residual ** 2).sum() / sigma ** 2
        log_prior = -0.5 * n * log_2pi + torch.log(torch.diagonal(prior_factor)).sum() - 0.5 * x @ precision @ x
        centred = x - mean
        log_posterior = -0.5 * n * log_2pi + torch.log(torch.diagonal(posterior_factor)).sum() \
            - 0.5 * centred @ posterior_precision @ centred
        return log_likelihood + log_prior - log_posterior


def igmrf_fit(graph, y, mask, sigmas=DEFAULT_SIGMAS, kappas=DEFAULT_KAPPAS, epsilon=DEFAULT_EPSILON):
    '''
    Grid search over (sigma, kappa) for the highest log marginal likelihood.
    Returns the fitted model and the full grid as a DataFrame.
    '''
    rows = []
    for sigma in sigmas:
        for kappa in kappas:
            model = IGMRF(graph, kappa=kappa, sigma=sigma, epsilon=epsilon)
            with torch.no_grad():
                lml = float(model.log_marginal_likelihood(y, mask))
            rows.append({'sigma': float(sigma), 'kappa': float(kappa), 'log_marginal_likelihood': lml})
            logger.debug('IGMRF sigma=%g kappa=%g lml=%.6f', sigma, kappa, lml)

    grid = pd.DataFrame(rows)
    best = grid.loc[grid['log_marginal_likelihood'].idxmax()]
    logger.info('IGMRF best sigma=%g kappa=%g lml=%.6f', best['sigma'], best['kappa'], best['log_marginal_likelihood'])
    return IGMRF(graph, kappa=best['kappa'], sigma=best['sigma'], epsilon=epsilon), grid


def igmrf_posterior(model, y, mask, n_samples=DEFAULT_POSTERIOR_SAMPLES, seed=0, tol=1e-7, max_iter=None):
    return posterior_summary(model, y, mask, n_samples=n_samples, seed=seed, tol=tol, max_iter=max_iter)
