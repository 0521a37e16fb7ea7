import os

import numpy as np
import pandas as pd
import torch

from utils.errors import ValidationError
from utils.graph import (ObservationMask, generate_mask, load_edge_list, load_mask, load_node_vector, load_points,
                         save_edge_list, save_points)
from utils.params import parse_value


def _column(values):
    return None if values is None else values.detach().cpu().numpy()


class GraphDataset:
    '''
    Node targets y on a graph with the observation mask used for training.
    Unobserved entries of y are kept as held-out truth (NaN when unknown).
    Synthetic datasets also carry the latent field x and the exact posterior.
    '''

    def __init__(self, graph, y, mask, name='dataset', x=None, true_mean=None, true_std=None, points=None,
                 provenance=None):
        graph.check_vector(y)
        if len(mask) != graph.n_nodes:
            raise ValidationError(f'mask of length {len(mask)} on a graph with {graph.n_nodes} nodes')
        if not bool(torch.isfinite(y[mask.observed]).all()):
            raise ValidationError('y must be finite on every observed node')
        self.graph = graph
        self.y = y.to(torch.float64)
        self.mask = mask
        self.name = name
        self.x = x
        self.true_mean = true_mean
        self.true_std = true_std
        self.points = points
        self.provenance = dict(provenance or {})

    @property
    def synthetic(self):
        return self.x is not None

    @property
    def has_true_posterior(self):
        return self.true_mean is not None and self.true_std is not None

    @property
    def eval_mask(self):
        ''' Unobserved nodes with a known target. '''
        return self.mask.unobserved & torch.isfinite(self.y)

    def with_mask(self, mask, name=None):
        ''' Same targets under another mask. The stored true posterior belongs to the old mask and is dropped. '''
        return GraphDataset(self.graph, self.y, mask, name=name or self.name, x=self.x, points=self.points,
                            provenance=self.provenance)

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        save_edge_list(os.path.join(directory, 'edges.txt'), self.graph)
        nodes = pd.DataFrame({'node': np.arange(self.graph.n_nodes), 'y': _column(self.y),
                              'observed': self.mask.observed.numpy().astype(int)})
        for column, values in (('x', self.x), ('true_mean', self.true_mean), ('true_std', self.true_std)):
            if values is not None:
                nodes[column] = _column(values)
        nodes.to_csv(os.path.join(directory, 'nodes.csv'), index=False, float_format='%.17g')
        if self.points is not None:
            save_points(os.path.join(directory, 'points.csv'), self.points)
        with open(os.path.join(directory, 'provenance.txt'), 'w') as f:
            f.write(f'name={self.name}\n')
            f.write(f'n_nodes={self.graph.n_nodes}\n')
            f.write(f'graph_hash={self.graph.graph_hash()}\n')
            for key, value in self.provenance.items():
                f.write(f'{key}={value!r}\n' if isinstance(value, float) else f'{key}={value}\n')

    @classmethod
    def load(cls, directory):
        provenance = {}
        with open(os.path.join(directory, 'provenance.txt')) as f:
            for line in f:
                key, _, value = line.strip().partition('=')
                if key:
                    provenance[key] = value if key == 'graph_hash' else parse_value(value)
        name = str(provenance.pop('name'))
        n_nodes = int(provenance.pop('n_nodes'))
        graph_hash = str(provenance.pop('graph_hash'))

        graph = load_edge_list(os.path.join(directory, 'edges.txt'), n_nodes)
        if graph.graph_hash() != graph_hash:
            raise ValidationError(f'{directory}: edge list does not match the recorded graph hash')
        nodes = pd.read_csv(os.path.join(directory, 'nodes.csv'), float_precision='round_trip').sort_values('node')

        def column(key):
            return torch.as_tensor(nodes[key].to_numpy(dtype=np.float64)) if key in nodes else None

        points_path = os.path.join(directory, 'points.csv')
        return cls(graph, column('y'), ObservationMask(nodes['observed'].to_numpy().astype(bool)), name=name,
                   x=column('x'), true_mean=column('true_mean'), true_std=column('true_std'),
                   points=load_points(points_path) if os.path.isfile(points_path) else None, provenance=provenance)

    @classmethod
    def from_files(cls, edge_path, n_nodes, y_path, mask_path=None, fraction_unobserved=0.5, seed=0,
                   log_targets=False, name=None):
        ''' Real-data dataset from an edge list and one-value-per-line node files; n_nodes defaults to len(y). '''
        y = load_node_vector(y_path)
        graph = load_edge_list(edge_path, len(y) if n_nodes is None else n_nodes)
        if log_targets:
            y = torch.log(y)
        mask = load_mask(mask_path) if mask_path is not None else generate_mask(graph.n_nodes, fraction_unobserved, seed)
        name = name or os.path.splitext(os.path.basename(y_path))[0]
        return cls(graph, y, mask, name=name, provenance={'recipe': 'files', 'edge_path': edge_path,
                                                          'y_path': y_path, 'log_targets': log_targets,
                                                          'mask_seed': seed})
