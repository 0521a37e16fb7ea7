import math

import torch
import torch.nn as nn

from model.logdet import layer_logdet
from utils.errors import ValidationError

# |theta3| used to pin gamma to (numerically) 0 or 1; sigmoid(30) = 1 - 9.4e-14
GAMMA_SATURATION = 30.0
GAMMA_MODES = ('trainable', 'fixed_0', 'fixed_1')


def _scalar(value):
    return torch.tensor(float(value), dtype=torch.float64)


def inverse_reparametrize(alpha, beta, gamma=None, theta3=None):
    ''' Free parameters (theta1, theta2, theta3) giving alpha, beta and gamma (or theta3 directly). '''
    if alpha <= 0 or abs(beta) >= alpha:
        raise ValidationError(f'need alpha > 0 and |beta| < alpha, got alpha={alpha}, beta={beta}')
    if theta3 is None:
        theta3 = math.log(gamma / (1.0 - gamma))
    return math.log(alpha), math.atanh(beta / alpha), theta3


class DGMRFLayer(nn.Module):
    '''
    Affine graph layer h -> G h + b 1 with G = alpha D^gamma + beta D^(gamma-1) A.

    Parametrized as alpha = exp(theta1), beta = alpha tanh(theta2),
    gamma = sigmoid(theta3), which keeps alpha > 0, |beta| < alpha and
    gamma in (0, 1) for any real theta.
    '''

    def __init__(self, graph, gamma_mode='trainable', theta=(0.0, 0.0, 0.0), bias=0.0, use_bias=True):
        super(DGMRFLayer, self).__init__()
        if gamma_mode not in GAMMA_MODES:
            raise ValidationError(f'unknown gamma mode "{gamma_mode}", expected one of {GAMMA_MODES}')
        self.graph = graph
        self.gamma_mode = gamma_mode

        theta3 = {'trainable': theta[2], 'fixed_0': -GAMMA_SATURATION, 'fixed_1': GAMMA_SATURATION}[gamma_mode]
        self.theta1 = nn.Parameter(_scalar(theta[0]))
        self.theta2 = nn.Parameter(_scalar(theta[1]))
        self.theta3 = nn.Parameter(_scalar(theta3), requires_grad=gamma_mode == 'trainable')
        if use_bias:
            self.bias = nn.Parameter(_scalar(bias))
        else:
            self.register_buffer('bias', _scalar(0.0))

    def reparametrize(self):
        alpha = torch.exp(self.theta1)
        beta = alpha * torch.tanh(self.theta2)
        gamma = torch.sigmoid(self.theta3)
        return alpha, beta, gamma

    def forward(self, h, transpose=False, include_bias=True):
        self.graph.check_vector(h)
        alpha, beta, gamma = self.reparametrize()
        shape = (-1, *([1] * (h.dim() - 1)))
        self_weight = alpha * self.graph.degree_power(gamma).view(shape)
        neighbour_scale = self.graph.degree_power(gamma - 1.0).view(shape)

        if transpose:
            return self_weight * h + beta * self.graph.adjacency_apply(neighbour_scale * h)

        out = self_weight * h + beta * neighbour_scale * self.graph.adjacency_apply(h)
        if include_bias:
            out = out + self.bias
        return out

    def log_det(self, pre):
        alpha, beta, gamma = self.reparametrize()
        return layer_logdet(pre, alpha, beta, gamma)

    def extra_repr(self):
        return f'gamma_mode={self.gamma_mode}'


def reparametrize(layer):
    return layer.reparametrize()


def layer_apply(graph, layer, h, transpose=False, include_bias=True):
    if layer.graph is not graph:
        raise ValidationError('layer was built on a different graph')
    return layer(h, transpose=transpose, include_bias=include_bias)
