import torch
import torch.nn as nn

from model.dgmrf_layer import DGMRFLayer
from model.logdet import total_logdet
from utils.linalg import make_generator


def initial_mean(y, mask):
    ''' y on observed nodes, the observed mean everywhere else. '''
    observed = mask.observed
    fill = y[observed].mean()
    return torch.where(observed, torch.nan_to_num(y), fill)


class VariationalDist(nn.Module):
    '''
    Gaussian q(x) = N(nu, S S^T) with S = diag(xi) G~ diag(tau), where G~ is a
    stack of bias-free DGMRF layers. No layers gives the mean-field case.
    '''

    def __init__(self, graph, n_layers=1, y=None, mask=None):
        super(VariationalDist, self).__init__()
        self.graph = graph
        n = graph.n_nodes
        nu = initial_mean(y, mask) if y is not None else torch.zeros(n, dtype=torch.float64)
        self.nu = nn.Parameter(nu.clone().to(torch.float64))
        self.log_xi = nn.Parameter(torch.zeros(n, dtype=torch.float64))
        self.log_tau = nn.Parameter(torch.zeros(n, dtype=torch.float64))
        self.layers = nn.ModuleList([DGMRFLayer(graph, use_bias=False) for _ in range(n_layers)])

    def scale_apply(self, r):
        ''' S r for r of shape (n,) or (n, samples). '''
        shape = (-1, *([1] * (r.dim() - 1)))
        h = torch.exp(self.log_tau).view(shape) * r
        for layer in self.layers:
            h = layer(h, include_bias=False)
        return torch.exp(self.log_xi).view(shape) * h

    def sample(self, n_samples=1, generator=None, r=None):
        ''' Reparametrized draws x = S r + nu as columns of an (n, n_samples) tensor. '''
        if r is None:
            r = torch.randn((self.graph.n_nodes, n_samples), generator=generator, dtype=torch.float64)
        return self.scale_apply(r) + self.nu.view(-1, *([1] * (r.dim() - 1)))

    def entropy(self, pre):
        ''' log|det S| = log|det G~| + sum log xi + sum log tau, constants dropped. '''
        return total_logdet(self.layers, pre) + self.log_xi.sum() + self.log_tau.sum()

    def to_dense(self):
        return self.scale_apply(torch.eye(self.graph.n_nodes, dtype=torch.float64))


def sample_q(vp, n_samples, seed):
    return vp.sample(n_samples, generator=make_generator(seed, 'q_samples'))


def q_entropy(vp, pre):
    return vp.entropy(pre)
