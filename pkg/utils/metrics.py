import numpy as np
import sklearn.metrics as metrics
from scipy.stats import norm

from utils.errors import ValidationError


def _as_numpy(values):
    return values.detach().cpu().numpy() if hasattr(values, 'detach') else np.asarray(values)


def _select(pred, truth, eval_mask):
    pred, truth = _as_numpy(pred), _as_numpy(truth)
    selected = np.ones(len(pred), dtype=bool) if eval_mask is None else _as_numpy(eval_mask).astype(bool)
    if not selected.any():
        raise ValidationError('evaluation mask is empty')
    return pred[selected], truth[selected]


def rmse(pred, truth, eval_mask=None):
    pred, truth = _select(pred, truth, eval_mask)
    return float(np.sqrt(metrics.mean_squared_error(truth, pred)))


def mae(pred, truth, eval_mask=None):
    pred, truth = _select(pred, truth, eval_mask)
    return float(metrics.mean_absolute_error(truth, pred))


def crps_gaussian(mu, sigma, y):
    '''
    Closed-form CRPS of N(mu, sigma^2) at y, lower is better:
    sigma * [z (2 Phi(z) - 1) + 2 phi(z) - 1 / sqrt(pi)], z = (y - mu) / sigma.
    '''
    mu, sigma, y = _as_numpy(mu), _as_numpy(sigma), _as_numpy(y)
    if np.any(sigma <= 0):
        raise ValidationError('CRPS needs a strictly positive standard deviation')
    z = (y - mu) / sigma
    return sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / np.sqrt(np.pi))


def crps(mu, sigma, y, eval_mask=None):
    ''' Mean Gaussian CRPS over the evaluation mask. '''
    mu, sigma, y = _as_numpy(mu), _as_numpy(sigma), _as_numpy(y)
    selected = np.ones(len(mu), dtype=bool) if eval_mask is None else _as_numpy(eval_mask).astype(bool)
    if not selected.any():
        raise ValidationError('evaluation mask is empty')
    return float(np.mean(crps_gaussian(mu[selected], sigma[selected], y[selected])))
