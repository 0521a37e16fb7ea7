import math

import torch

from utils.errors import NumericError


def observed_targets(y, mask):
    ''' y with unobserved entries zeroed (y_m), so NaN placeholders never leak. '''
    return torch.where(mask.observed, torch.nan_to_num(y), torch.zeros_like(y))


def _check_finite(value, term):
    if not bool(torch.isfinite(value).all()):
        raise NumericError('non-finite ELBO', term=term)
    return value


def elbo_constant(n_nodes, m_count):
    ''' The additive constants left out of calculate_elbo: -M/2 log(2 pi) + N/2. '''
    return -0.5 * m_count * math.log(2.0 * math.pi) + 0.5 * n_nodes


def calculate_elbo(dgmrf, vi, y, mask, pre, n_samples=10, generator=None, r=None,
                   per_node=True, include_constants=False):
    '''
    Monte Carlo ELBO of the DGMRF with Gaussian likelihood under q.

    Draws n_samples from q (or uses the fixed standard normal r) and returns
    E_q[log p(y_m, x)] + H[q]. The 2 pi and entropy constants are dropped unless
    include_constants is set. With per_node the value is divided by N.
    '''
    x = vi.sample(n_samples, generator=generator, r=r)
    y_m = observed_targets(y, mask).unsqueeze(1)
    m = mask.as_float().unsqueeze(1)
    sigma = dgmrf.sigma

    prior_quad = _check_finite((dgmrf(x) ** 2).sum(0).mean(), 'g(x)^T g(x)')
    obs_quad = _check_finite((m * (y_m - x) ** 2).sum(0).mean(), 'observation residual')
    log_det = _check_finite(dgmrf.log_det(pre), 'log|det G|')
    entropy = _check_finite(vi.entropy(pre), 'entropy of q')

    elbo = -0.5 * (prior_quad + obs_quad / sigma ** 2) + log_det - mask.m_count * dgmrf.theta_sigma + entropy
    _check_finite(elbo, 'elbo')
    if include_constants:
        elbo = elbo + elbo_constant(dgmrf.n_nodes, mask.m_count)
    if per_node:
        elbo = elbo / dgmrf.n_nodes
    return elbo


def trainable_parameters(*modules):
    return [p for module in modules for p in module.parameters() if p.requires_grad]


def flat_gradient(objective, parameters):
    ''' Reverse-mode gradient of a scalar objective, flattened over the parameter list. '''
    grads = torch.autograd.grad(objective, parameters, allow_unused=True)
    return torch.cat([torch.zeros_like(p).flatten() if g is None else g.flatten()
                      for p, g in zip(parameters, grads)])


def adam_step(optimizer, parameters, grads):
    ''' One Adam update from a flat gradient vector (descent direction: gradient of the loss). '''
    offset = 0
    for p in parameters:
        size = p.numel()
        p.grad = grads[offset:offset + size].view_as(p).clone()
        offset += size
    optimizer.step()
    return optimizer


def elbo_estimate(dgmrf, vi, data, params, pre, generator=None):
    ''' calculate_elbo with the sample count of params; data is (y, mask). '''
    y, mask = data
    return calculate_elbo(dgmrf, vi, y, mask, pre, n_samples=params.n_mc_samples, generator=generator)
