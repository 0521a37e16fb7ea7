import logging

import numpy as np
import torch

from dataset.graph_dataset import GraphDataset
from model.dgmrf import DGMRF
from model.dgmrf_layer import GAMMA_SATURATION
from model.posterior import dense_posterior
from utils.errors import ValidationError
from utils.graph import generate_delaunay_graph, generate_mask, k_hop_graph
from utils.linalg import (DEFAULT_CG_TOL, LinearOperator, conjugate_gradient, derive_seed, jacobi_preconditioner,
                          make_generator)
from utils.metrics import rmse

logger = logging.getLogger(__name__)

# Ground-truth DGMRF layers: alpha = 1.2, beta = -1, gamma = 1 (saturated), no bias
TRUE_ALPHA = 1.2
TRUE_BETA = -1.0
TRUE_NOISE_STD = 0.01
# Exact posteriors are only stored up to this many nodes
TRUE_POSTERIOR_CAP = 5000


def sample_dgmrf_prior(dgmrf, seed=0, tol=DEFAULT_CG_TOL, max_iter=None, z=None, method='layerwise',
                       n_samples=None):
    '''
    Draws x with g(x) = z, z ~ N(0, I).

    method='layerwise' inverts one layer at a time: G_l = D^(gamma-1) (alpha D + beta A)
    and alpha D + beta A is SPD, so each step is a well conditioned CG solve.
    method='normal_equations' solves G^T G x = G^T (z - b) in one CG run.
    z (or n_samples) may hold several draws as columns. Returns (x, reports).
    '''
    graph = dgmrf.graph
    with torch.no_grad():
        if z is None:
            shape = graph.n_nodes if n_samples is None else (graph.n_nodes, n_samples)
            z = torch.randn(shape, generator=make_generator(seed, 'prior_sample'), dtype=torch.float64)
        column = (-1, *([1] * (z.dim() - 1)))
        target = z - dgmrf.bias_offset().view(column)

        if method == 'normal_equations':
            x, report = conjugate_gradient(LinearOperator(graph.n_nodes, dgmrf.precision_apply),
                                           dgmrf.transpose(target), tol=tol, max_iter=max_iter)
            return x, [report]
        if method != 'layerwise':
            raise ValidationError(f'unknown prior sampling method "{method}"')

        reports = []
        h = target
        for layer in reversed(dgmrf.layers):
            alpha, beta, gamma = layer.reparametrize()

            def symmetric_part(v, alpha=alpha, beta=beta):
                return alpha * graph.degrees.view(-1, *([1] * (v.dim() - 1))) * v + beta * graph.adjacency_apply(v)

            h, report = conjugate_gradient(LinearOperator(graph.n_nodes, symmetric_part),
                                           graph.degree_power(1.0 - gamma).view(column) * h, tol=tol,
                                           max_iter=max_iter,
                                           preconditioner=jacobi_preconditioner(alpha * graph.degrees))
            reports.append(report)
        return h, reports


def _true_dgmrf(graph, n_layers, alphas=None, betas=None):
    alphas = [TRUE_ALPHA] * n_layers if alphas is None else alphas
    betas = [TRUE_BETA] * n_layers if betas is None else betas
    return DGMRF.from_values(graph, alphas, betas, theta3=GAMMA_SATURATION, sigma=TRUE_NOISE_STD)


def _observe(x, seed, fraction_unobserved, noise_std):
    n = x.shape[0]
    noise = torch.randn(n, generator=make_generator(seed, 'observation_noise'), dtype=torch.float64)
    y = x + noise_std * noise
    mask = generate_mask(n, fraction_unobserved, derive_seed(seed, 'mask'))
    return y, mask


def _with_truth(graph, x, y, mask, precision, noise_std, name, points, provenance, posterior_cap):
    true_mean = true_std = None
    if graph.n_nodes <= posterior_cap:
        true_mean, true_std = dense_posterior(precision(), y, mask, noise_std)
        provenance['true_posterior_rmse'] = rmse(true_mean, y, mask.unobserved)
    else:
        logger.info('%d nodes above the true posterior cap %d, storing y, x and mask only',
                    graph.n_nodes, posterior_cap)
    return GraphDataset(graph, y, mask, name=name, x=x, true_mean=true_mean, true_std=true_std, points=points,
                        provenance=provenance)


def make_synth_dgmrf(n=3000, n_layers=1, seed=0, fraction_unobserved=0.25, noise_std=TRUE_NOISE_STD,
                     posterior_cap=TRUE_POSTERIOR_CAP, tol=DEFAULT_CG_TOL):
    ''' Sample of an n_layers DGMRF with fixed parameters on a random Delaunay graph, plus noise. '''
    graph, points = generate_delaunay_graph(n, derive_seed(seed, 'graph'))
    true_model = _true_dgmrf(graph, n_layers)
    x, reports = sample_dgmrf_prior(true_model, seed=seed, tol=tol)
    y, mask = _observe(x, seed, fraction_unobserved, noise_std)
    provenance = {'recipe': 'dgmrf', 'seed': seed, 'true_layers': n_layers, 'alpha': TRUE_ALPHA, 'beta': TRUE_BETA,
                  'theta3': GAMMA_SATURATION, 'noise_std': noise_std, 'fraction_unobserved': fraction_unobserved,
                  'sample_converged': all(r.converged for r in reports)}
    with torch.no_grad():
        return _with_truth(graph, x, y, mask, true_model.dense_precision, noise_std, f'dgmrf_L{n_layers}', points,
                           provenance, posterior_cap)


def make_dense(n=3000, seed=0, fraction_unobserved=0.25, noise_std=TRUE_NOISE_STD, hops=3,
               posterior_cap=TRUE_POSTERIOR_CAP, tol=DEFAULT_CG_TOL):
    ''' One-layer DGMRF on the 3-hop graph of a Delaunay graph; the dataset keeps the base graph. '''
    graph, points = generate_delaunay_graph(n, derive_seed(seed, 'graph'))
    true_model = _true_dgmrf(k_hop_graph(graph, hops), 1)
    x, reports = sample_dgmrf_prior(true_model, seed=seed, tol=tol)
    y, mask = _observe(x, seed, fraction_unobserved, noise_std)
    provenance = {'recipe': 'dense', 'seed': seed, 'hops': hops, 'alpha': TRUE_ALPHA, 'beta': TRUE_BETA,
                  'theta3': GAMMA_SATURATION, 'noise_std': noise_std, 'fraction_unobserved': fraction_unobserved,
                  'sample_converged': all(r.converged for r in reports)}
    with torch.no_grad():
        return _with_truth(graph, x, y, mask, true_model.dense_precision, noise_std, 'dense', points, provenance,
                           posterior_cap)


def mix_precision(graph, seed, n_components=4, max_attempts=100):
    '''
    Q = sum_i G_i^T G_i where G_i is a gamma = 1 layer on the i-hop graph with
    alpha ~ U[0.5, 1.5], beta ~ U[-1.1, -0.1]. Draws with |beta| >= alpha, or a
    Q that fails Cholesky, are redrawn. Returns (Q, cholesky factor, parameters).
    '''
    rng = np.random.default_rng(derive_seed(seed, 'mix_parameters'))
    hop_graphs = [k_hop_graph(graph, i) for i in range(1, n_components + 1)]
    for attempt in range(max_attempts):
        parameters = []
        while len(parameters) < n_components:
            alpha, beta = rng.uniform(0.5, 1.5), rng.uniform(-1.1, -0.1)
            if abs(beta) < alpha:
                parameters.append((alpha, beta))
        with torch.no_grad():
            precision = torch.zeros((graph.n_nodes, graph.n_nodes), dtype=torch.float64)
            for hop_graph, (alpha, beta) in zip(hop_graphs, parameters):
                G = DGMRF.from_values(hop_graph, [alpha], [beta], theta3=GAMMA_SATURATION).to_dense()
                precision += G.T @ G
                del G
        factor, info = torch.linalg.cholesky_ex(precision)
        if int(info) == 0:
            return precision, factor, parameters
        logger.warning('Mix precision draw %d is not positive definite, redrawing', attempt + 1)
    raise ValidationError(f'no positive definite Mix precision after {max_attempts} draws')


def make_mix(n=5000, seed=0, fraction_unobserved=0.5, noise_std=TRUE_NOISE_STD, posterior_cap=TRUE_POSTERIOR_CAP):
    ''' Zero-mean GMRF with a mixture precision over 1..4-hop graphs, sampled through dense Cholesky. '''
    graph, points = generate_delaunay_graph(n, derive_seed(seed, 'graph'))
    precision, factor, parameters = mix_precision(graph, seed)
    z = torch.randn(n, generator=make_generator(seed, 'prior_sample'), dtype=torch.float64)
    x = torch.linalg.solve_triangular(factor.T, z.unsqueeze(1), upper=True).squeeze(1)
    y, mask = _observe(x, seed, fraction_unobserved, noise_std)
    provenance = {'recipe': 'mix', 'seed': seed, 'noise_std': noise_std, 'fraction_unobserved': fraction_unobserved,
                  'mix_alphas': ' '.join(f'{a:.6f}' for a, _ in parameters),
                  'mix_betas': ' '.join(f'{b:.6f}' for _, b in parameters)}
    return _with_truth(graph, x, y, mask, lambda: precision, noise_std, 'mix', points, provenance, posterior_cap)


def _recipe_kwargs(params):
    # unset values fall back to each recipe's own defaults
    kwargs = {}
    if params.n_nodes is not None:
        kwargs['n'] = params.n_nodes
    if params.fraction_unobserved is not None:
        kwargs['fraction_unobserved'] = params.fraction_unobserved
    return kwargs


RECIPES = {
    'dgmrf': lambda params, seed: make_synth_dgmrf(n_layers=params.true_layers, seed=seed, **_recipe_kwargs(params)),
    'dense': lambda params, seed: make_dense(seed=seed, **_recipe_kwargs(params)),
    'mix': lambda params, seed: make_mix(seed=seed, **_recipe_kwargs(params)),
}


def make_dataset(params, seed=None):
    if params.recipe not in RECIPES:
        raise ValidationError(f'unknown recipe "{params.recipe}", expected one of {sorted(RECIPES)}')
    return RECIPES[params.recipe](params, params.seed if seed is None else seed)
