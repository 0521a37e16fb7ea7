import os
import glob
import hashlib
import logging


def parse_value(text):
    ''' Config values: int, float, bool, None or plain string. '''
    text = text.strip()
    lowered = text.lower()
    if lowered in ('true', 'false'):
        return lowered == 'true'
    if lowered in ('none', ''):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if len(text) >= 2 and text[0] == text[-1] and text[0] in '\'"':
        return text[1:-1]
    return text


def read_config(path):
    values = {}
    with open(path) as f:
        for line in f:
            content = line.split('#', 1)[0].strip()
            if not content:
                continue
            key, separator, value = content.partition('=')
            if not separator:
                raise ValueError(f'{path}: expected key=value, got "{content}"')
            values[key.strip()] = parse_value(value)
    return values


class Params:
    def __init__(self, **kwargs):
        ## Model
        self.model='DGMRF'
        self.n_layers=3
        self.vi_layers=1 # layers of G~ in q, 0 is mean field
        self.gamma_mode='trainable' # trainable, fixed_0 or fixed_1

        ## Training
        self.iterations=50000
        self.lr=0.01
        self.n_mc_samples=10
        self.seed=0
        self.deterministic=False

        ## Log-determinant
        self.logdet_backend='auto' # auto, eigen or power_series
        self.K=50 # power series terms
        self.n_probes=1000 # Hutchinson probes
        self.eigen_cap=20000
        self.cache_dir=None

        ## Inference
        self.cg_tol=1e-7
        self.cg_max_iter=None # None means 2n
        self.n_posterior_samples=100

        ## IGMRF baseline
        self.igmrf_epsilon=None # None: 1e-4 on the dense recipe, 1e-6 otherwise
        self.igmrf_sigmas=None # comma separated, None keeps the default grid
        self.igmrf_kappas=None

        # DataSet
        self.dataset='synthetic'
        self.dataset_dir=None
        self.recipe='dgmrf'
        self.n_nodes=None # None keeps the recipe default; required for real data
        self.true_layers=1
        self.fraction_unobserved=None # None keeps the recipe default
        self.log_targets=False
        self.edge_path=None # real data: edge list, y and optional mask files
        self.y_path=None
        self.mask_path=None

        ## Logging and history
        self.output_root='./tmp/output'
        self.dump_file=True
        self.dry_run=False
        self.log_every=100
        self.checkpoint_every=1000

        for attr_name in kwargs.keys():
            setattr(self,attr_name,kwargs[attr_name])

        self.output_dir=f"{self.output_root}/{self.model}"
        self.execution_id=self.generate_execution_id(self.output_dir, self.dataset)
        self.logger=logging.getLogger('dgmrf')
        self.setup_log_structure()

    @classmethod
    def from_file(cls, path, **overrides):
        values = read_config(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self):
        return {k: v for k, v in vars(self).items() if k not in ('logger', 'output_dir', 'execution_id')}

    def config_hash(self):
        content = '\n'.join(f'{k}={v}' for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(content.encode()).hexdigest()[:16]

    def generate_execution_id(self, path, dataset):
        executions = [f for f in glob.glob(f'{path}/{dataset}/execution_*.log')]
        return f'execution_{"{:04d}".format(len(executions) + 1)}'

    def base_dir(self):
        return f'{self.output_dir}/{self.dataset}'

    def setup_log_structure(self):
        if not self.dump_file:
            return
        os.makedirs(f'{self.base_dir()}/checkpoints/{self.execution_id}', exist_ok=True)
        # one execution log at a time, shared by every module logger
        root = logging.getLogger()
        for handler in [h for h in root.handlers if isinstance(h, logging.FileHandler)]:
            root.removeHandler(handler)
            handler.close()
        handler = logging.FileHandler(f'{self.base_dir()}/{self.execution_id}.log')
        handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
        root.addHandler(handler)
        root.setLevel(logging.INFO)

    def execution_dir(self):
        return f'{self.base_dir()}/{self.execution_id}'

    def last_checkpoint(self):
        checkpoints = self.list_checkpoints()
        return '' if len(checkpoints) == 0 else checkpoints[-1]

    def list_checkpoints(self):
        return sorted(glob.glob(f'{self.base_dir()}/checkpoints/{self.execution_id}/model_*.ckpt'))

    def checkpoints_count(self):
        return len(self.list_checkpoints())

    def checkpoint_path(self):
        return f'{self.base_dir()}/checkpoints/{self.execution_id}/model_{"{:04d}".format(self.checkpoints_count() + 1)}.ckpt'

    def best_checkpoint(self):
        return f'{self.base_dir()}/checkpoints/{self.execution_id}/best_model.ckpt'

    def log(self, content, p=True, level=logging.INFO):
        if p:
            print(content)
        self.logger.log(level, content)

    def csv_path(self):
        return f'{self.base_dir()}/{self.execution_id}.csv'

    def csv(self, iteration, elbo, time):
        self.log('Train: %d, time: %.6f, elbo: %.6f' % (iteration, time, elbo), p=False)

        if self.dump_file:
            print_header = not os.path.isfile(self.csv_path())

            with open(self.csv_path(), "a") as f:
                if print_header:
                    f.write("iteration,elbo,time\n")
                f.write(f'{iteration},{elbo!r},{time}\n')

    def print_summary(self, **results):
        if self.dump_file:
            summary_path = f'{self.base_dir()}/summary.txt'
            columns = ['execution_id', 'model', 'dataset', 'n_layers', 'vi_layers', 'gamma_mode', 'iterations',
                       'lr', 'n_mc_samples', 'logdet_backend', 'seed']
            print_header = not os.path.isfile(summary_path)
            with open(summary_path, "a") as f:
                if print_header:
                    f.write(','.join(columns + list(results.keys())) + '\n')
                values = [getattr(self, c) if c != 'execution_id' else self.execution_id for c in columns]
                f.write(','.join(str(v) for v in values + list(results.values())) + '\n')
