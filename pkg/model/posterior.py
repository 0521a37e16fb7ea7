import logging
from dataclasses import dataclass, field

import torch

from utils.errors import ValidationError
from utils.linalg import DEFAULT_CG_TOL, LinearOperator, conjugate_gradient, make_generator
from utils.utility import observed_targets

logger = logging.getLogger(__name__)

DEFAULT_POSTERIOR_SAMPLES = 100


@dataclass
class PosteriorSummary:
    mean: torch.Tensor
    marginal_std: torch.Tensor
    n_samples_used: int
    cg_reports: list = field(default_factory=list)

    @property
    def converged(self):
        return all(report.converged for report in self.cg_reports)


def _posterior_operator(prior, mask):
    ''' Q~ = Q + sigma^-2 I_m for any prior exposing precision_apply and sigma. '''
    m = mask.as_float()
    sigma2 = prior.sigma.detach() ** 2

    def apply(v):
        return prior.precision_apply(v) + m.view(-1, *([1] * (v.dim() - 1))) * v / sigma2

    return LinearOperator(prior.n_nodes, apply)


def _posterior_rhs(prior, y, mask):
    return prior.precision_mean_product() + observed_targets(y, mask) / prior.sigma.detach() ** 2


def posterior_mean(prior, y, mask, tol=DEFAULT_CG_TOL, max_iter=None, x0=None):
    ''' Solves Q~ mu~ = Q mu + sigma^-2 y_m with CG; returns (mu~, report). '''
    with torch.no_grad():
        return conjugate_gradient(_posterior_operator(prior, mask), _posterior_rhs(prior, y, mask),
                                  tol=tol, max_iter=max_iter, x0=x0)


def posterior_sample(prior, y, mask, n_samples=1, seed=None, generator=None, noise=None,
                     tol=DEFAULT_CG_TOL, max_iter=None, x0=None):
    '''
    Exact posterior draws by perturbation: with z1, z2 standard normal solve
        Q~ x = Q mu + sigma^-2 y_m + P z1 + sigma^-1 I_m z2
    where P z1 has covariance Q (G^T z1 for a DGMRF). Then x ~ N(mu~, Q~^-1).
    noise=(z1, z2) fixes the perturbation; returns an (n, n_samples) tensor and the report.
    '''
    with torch.no_grad():
        if noise is None:
            generator = make_generator(seed, 'posterior_samples') if generator is None else generator
            z1 = torch.randn((prior.noise_dim, n_samples), generator=generator, dtype=torch.float64)
            z2 = torch.randn((prior.n_nodes, n_samples), generator=generator, dtype=torch.float64)
        else:
            z1, z2 = noise
        m = mask.as_float().unsqueeze(1)
        rhs = (_posterior_rhs(prior, y, mask).unsqueeze(1) + prior.precision_noise(z1)
               + m * z2 / prior.sigma.detach())
        return conjugate_gradient(_posterior_operator(prior, mask), rhs, tol=tol, max_iter=max_iter, x0=x0)


def marginal_variances(prior, y, mask, n_samples=DEFAULT_POSTERIOR_SAMPLES, seed=0, tol=DEFAULT_CG_TOL,
                       max_iter=None, mean=None, batch_size=20):
    '''
    Unbiased sample variance per node over n_samples posterior draws. Each CG
    solve is warm-started from the posterior mean.
    Returns (variances, reports).
    '''
    if n_samples < 2:
        raise ValidationError(f'marginal variances need at least 2 samples, got {n_samples}')
    reports = []
    if mean is None:
        mean, report = posterior_mean(prior, y, mask, tol=tol, max_iter=max_iter)
        reports.append(report)

    generator = make_generator(seed, 'posterior_samples')
    samples = []
    remaining = n_samples
    while remaining > 0:
        batch = min(batch_size, remaining)
        draws, report = posterior_sample(prior, y, mask, n_samples=batch, generator=generator,
                                         tol=tol, max_iter=max_iter, x0=mean)
        samples.append(draws)
        reports.append(report)
        remaining -= batch

    samples = torch.cat(samples, dim=1)
    if not all(r.converged for r in reports):
        logger.warning('posterior sampling: %d of %d CG solves did not converge',
                       sum(not r.converged for r in reports), len(reports))
    return samples.var(dim=1, unbiased=True), reports


def posterior_summary(prior, y, mask, n_samples=DEFAULT_POSTERIOR_SAMPLES, seed=0, tol=DEFAULT_CG_TOL,
                      max_iter=None):
    mean, report = posterior_mean(prior, y, mask, tol=tol, max_iter=max_iter)
    variances, reports = marginal_variances(prior, y, mask, n_samples=n_samples, seed=seed, tol=tol,
                                            max_iter=max_iter, mean=mean)
    return PosteriorSummary(mean=mean, marginal_std=torch.sqrt(variances), n_samples_used=n_samples,
                            cg_reports=[report] + reports)


def dense_posterior(precision, y, mask, sigma, prior_mean=None):
    '''
    Exact posterior mean and marginal std from a dense prior precision via
    Cholesky. Used for synthetic ground truth and as a test oracle.
    '''
    n = precision.shape[0]
    prior_mean = torch.zeros(n, dtype=torch.float64) if prior_mean is None else prior_mean
    sigma = float(sigma)
    posterior_precision = precision + torch.diag(mask.as_float()) / sigma ** 2
    factor = torch.linalg.cholesky(posterior_precision)
    rhs = precision @ prior_mean + observed_targets(y, mask) / sigma ** 2
    mean = torch.cholesky_solve(rhs.unsqueeze(1), factor).squeeze(1)
    std = torch.sqrt(torch.diagonal(torch.cholesky_inverse(factor)))
    return mean, std
