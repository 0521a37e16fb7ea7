import torch

from model.dgmrf import DGMRF
from model.variational import VariationalDist
from utils.errors import ValidationError
from utils.params import parse_value

CHECKPOINT_VERSION = 1


def save_checkpoint(path, dgmrf, vi, **header):
    '''
    Plain-text checkpoint: '# key=value' header lines, then one
    'prior.<name> = v ...' or 'q.<name> = v ...' line per tensor.
    '''
    header = {'version': CHECKPOINT_VERSION, 'n_layers': len(dgmrf.layers), 'vi_layers': len(vi.layers),
              'n_nodes': dgmrf.n_nodes, 'graph_hash': dgmrf.graph.graph_hash(),
              'gamma_mode': dgmrf.layers[0].gamma_mode, **header}
    with open(path, 'w') as f:
        for key, value in header.items():
            f.write(f'# {key}={value}\n')
        for prefix, module in (('prior', dgmrf), ('q', vi)):
            for name, tensor in module.state_dict().items():
                values = ' '.join(repr(v) for v in tensor.detach().flatten().tolist())
                f.write(f'{prefix}.{name} = {values}\n')


def read_checkpoint(path):
    header, tensors = {}, {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith('#'):
                key, _, value = line[1:].strip().partition('=')
                header[key] = value if key == 'graph_hash' else parse_value(value)
                continue
            key, _, values = line.partition(' = ')
            tensors[key] = torch.tensor([float(v) for v in values.split()], dtype=torch.float64)
    if header.get('version') != CHECKPOINT_VERSION:
        raise ValidationError(f'{path}: unsupported checkpoint version {header.get("version")}')
    return header, tensors


def load_checkpoint(path, graph):
    ''' Rebuilds (dgmrf, vi, header) on graph, which must match the recorded hash. '''
    header, tensors = read_checkpoint(path)
    if header['graph_hash'] != graph.graph_hash():
        raise ValidationError(f'{path} was trained on graph {header["graph_hash"]}, not {graph.graph_hash()}')
    dgmrf = DGMRF(graph, header['n_layers'], gamma_mode=header['gamma_mode'])
    vi = VariationalDist(graph, header['vi_layers'])
    for prefix, module in (('prior', dgmrf), ('q', vi)):
        state = module.state_dict()
        module.load_state_dict({name: tensors[f'{prefix}.{name}'].view_as(value) for name, value in state.items()})
    return dgmrf, vi, header
