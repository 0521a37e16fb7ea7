import math

import torch
import torch.nn as nn

from model.dgmrf_layer import DGMRFLayer, inverse_reparametrize
from model.logdet import total_logdet
from utils.errors import ValidationError


def _mask_values(mask):
    return mask.as_float() if hasattr(mask, 'as_float') else mask.to(torch.float64)


def _broadcast(values, like):
    return values.view(-1, *([1] * (like.dim() - 1)))


class DGMRF(nn.Module):
    '''
    Deep GMRF prior z = g(x) = G_L(... G_1 x + b_1 ...) + b_L, z ~ N(0, I),
    together with the Gaussian observation noise sigma = exp(theta_sigma).
    '''

    def __init__(self, graph, n_layers, gamma_mode='trainable', sigma=1.0):
        super(DGMRF, self).__init__()
        if n_layers < 1:
            raise ValidationError(f'a DGMRF needs at least one layer, got {n_layers}')
        self.graph = graph
        self.layers = nn.ModuleList([DGMRFLayer(graph, gamma_mode=gamma_mode) for _ in range(n_layers)])
        self.theta_sigma = nn.Parameter(torch.tensor(math.log(sigma), dtype=torch.float64))

    @classmethod
    def from_values(cls, graph, alphas, betas, gammas=None, theta3=None, biases=None, sigma=1.0):
        ''' Model with hand-set layer parameters, e.g. the ground truth of a synthetic dataset. '''
        model = cls(graph, len(alphas), sigma=sigma)
        biases = [0.0] * len(alphas) if biases is None else biases
        theta3 = 0.0 if gammas is None and theta3 is None else theta3
        with torch.no_grad():
            for i, layer in enumerate(model.layers):
                t1, t2, t3 = inverse_reparametrize(alphas[i], betas[i],
                                                   gamma=None if gammas is None else gammas[i],
                                                   theta3=theta3 if gammas is None else None)
                layer.theta1.fill_(t1)
                layer.theta2.fill_(t2)
                layer.theta3.fill_(t3)
                layer.bias.fill_(biases[i])
        return model

    @property
    def n_nodes(self):
        return self.graph.n_nodes

    @property
    def sigma(self):
        return torch.exp(self.theta_sigma)

    def forward(self, x, include_bias=True):
        h = x
        for layer in self.layers:
            h = layer(h, include_bias=include_bias)
        return h

    def transpose(self, z):
        ''' G^T z, the layers in reverse order, no biases. '''
        h = z
        for layer in reversed(self.layers):
            h = layer(h, transpose=True)
        return h

    def bias_offset(self):
        ''' Accumulated offset b of the composed affine map, g(0). '''
        return self.forward(torch.zeros(self.n_nodes, dtype=torch.float64))

    def precision_apply(self, v):
        return self.transpose(self.forward(v, include_bias=False))

    def posterior_precision_apply(self, v, mask):
        return self.precision_apply(v) + _broadcast(_mask_values(mask), v) * v / self.sigma ** 2

    def precision_mean_product(self):
        ''' Q mu with mu = -G^-1 b, i.e. -G^T b. '''
        return -self.transpose(self.bias_offset())

    @property
    def noise_dim(self):
        return self.n_nodes

    def precision_noise(self, z):
        ''' Maps standard normal z to G^T z, which has covariance Q. '''
        return self.transpose(z)

    def log_det(self, pre):
        return total_logdet(self.layers, pre)

    def to_dense(self):
        ''' Dense G, column j is G e_j. Test and small-graph use only. '''
        return self.forward(torch.eye(self.n_nodes, dtype=torch.float64), include_bias=False)

    def dense_precision(self):
        G = self.to_dense()
        return G.T @ G


def g_apply(params, x):
    return params(x)


def g_transpose_apply(params, z):
    return params.transpose(z)


def precision_apply(params, v):
    return params.precision_apply(v)


def posterior_precision_apply(params, mask, v):
    return params.posterior_precision_apply(v, mask)
