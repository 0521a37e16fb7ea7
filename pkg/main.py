#!/usr/bin/env python

from utils.params import Params

import os
import sys
import json
import math
import time
import logging
import argparse
import pandas as pd
import torch

from dataset.graph_dataset import GraphDataset
from dataset.synthetic import make_dataset

from model.checkpoint import load_checkpoint, save_checkpoint
from model.dgmrf import DGMRF
from model.igmrf import DEFAULT_KAPPAS, DEFAULT_SIGMAS, igmrf_fit, igmrf_posterior, recipe_epsilon
from model.label_propagation import label_propagation
from model.logdet import make_preprocess, select_backend, truncation_bound_curve
from model.posterior import posterior_summary
from model.variational import VariationalDist

from utils.errors import DgmrfError, NumericError, StageError, TrainingDivergedError, ValidationError
from utils.graph import generate_nested_masks
from utils.linalg import derive_seed, make_generator, set_deterministic
from utils.metrics import crps, mae, rmse
from utils.utility import adam_step, calculate_elbo, flat_gradient, trainable_parameters

BASELINES = ('LP', 'IGMRF')
METRICS = ('rmse', 'mae', 'crps', 'mae_mean', 'mae_std')


def load_dataset(params, seed=None):
    seed = params.seed if seed is None else seed
    if params.dataset_dir is not None:
        return GraphDataset.load(params.dataset_dir)
    if params.edge_path is not None:
        return GraphDataset.from_files(params.edge_path, params.n_nodes, params.y_path, params.mask_path,
                                       fraction_unobserved=params.fraction_unobserved or 0.5,
                                       seed=derive_seed(seed, 'mask'), log_targets=params.log_targets)
    return make_dataset(params, seed)


def preprocess(params, graph):
    pre = make_preprocess(graph, backend=params.logdet_backend, K=params.K, n_probes=params.n_probes,
                          seed=params.seed, cap=params.eigen_cap, cache_dir=params.cache_dir)
    if pre.method == 'power_series' and params.dump_file:
        truncation_bound_curve(max_K=max(params.K, 100)).to_csv(f'{params.execution_dir()}_truncation_bound.csv',
                                                                 index=False)
    return pre


def _state(dgmrf, vi):
    state = {f'prior.{k}': v.detach().clone() for k, v in dgmrf.state_dict().items()}
    state.update({f'q.{k}': v.detach().clone() for k, v in vi.state_dict().items()})
    return state


def train(params, dataset, pre=None, resume=None):
    '''
    Fits the DGMRF and q by maximizing the ELBO with Adam. Returns (dgmrf, vi, trace)
    where trace holds the ELBO per node at every iteration.
    '''
    graph, y, mask = dataset.graph, dataset.y, dataset.mask
    pre = preprocess(params, graph) if pre is None else pre

    start = 0
    if resume:
        dgmrf, vi, header = load_checkpoint(resume, graph)
        start = int(header.get('iteration', 0))
        if params.iterations <= start:
            raise ValidationError(f'{resume} is already at iteration {start}, '
                                  f'raise iterations above {params.iterations} to continue')
        params.log(f'Resuming {resume} at iteration {start}')
    else:
        dgmrf = DGMRF(graph, params.n_layers, gamma_mode=params.gamma_mode)
        vi = VariationalDist(graph, params.vi_layers, y=y, mask=mask)
    params.log(str(dgmrf), False)

    parameters = trainable_parameters(dgmrf, vi)
    opt = torch.optim.Adam(parameters, lr=params.lr)
    generator = make_generator(params.seed, 'train' if start == 0 else f'train_resume_{start}')

    trace = []
    best_elbo = -math.inf
    last_state = _state(dgmrf, vi)
    ts = time.time()
    for iteration in range(start + 1, params.iterations + 1):
        opt.zero_grad()
        try:
            elbo = calculate_elbo(dgmrf, vi, y, mask, pre, n_samples=params.n_mc_samples, generator=generator)
            grads = flat_gradient(-elbo, parameters)
        except NumericError as e:
            raise TrainingDivergedError(iteration, last_state, term=e.term) from e
        if not bool(torch.isfinite(grads).all()):
            raise TrainingDivergedError(iteration, last_state, term='gradient')
        adam_step(opt, parameters, grads)

        value = float(elbo)
        trace.append((iteration, value))
        last_state = _state(dgmrf, vi)

        if iteration % params.log_every == 0 or iteration == params.iterations or params.dry_run:
            params.csv(iteration, value, time.time() - ts)
            ts = time.time()
            if value > best_elbo:
                best_elbo = value
                if params.dump_file:
                    save_checkpoint(params.best_checkpoint(), dgmrf, vi, iteration=iteration, elbo=value,
                                    seed=params.seed)
        if params.dump_file and iteration % params.checkpoint_every == 0:
            save_checkpoint(params.checkpoint_path(), dgmrf, vi, iteration=iteration, elbo=value, seed=params.seed)

        if params.dry_run:
            break

    if params.dump_file and trace:
        save_checkpoint(params.checkpoint_path(), dgmrf, vi, iteration=trace[-1][0], elbo=trace[-1][1],
                        seed=params.seed)
    return dgmrf, vi, pd.DataFrame(trace, columns=['iteration', 'elbo'])


def infer(params, dataset, model):
    summary = posterior_summary(model, dataset.y, dataset.mask, n_samples=params.n_posterior_samples,
                                seed=params.seed, tol=params.cg_tol, max_iter=params.cg_max_iter)
    if not summary.converged:
        params.log('Posterior CG did not converge for every solve', level=logging.WARNING)
    return summary


def _grid(values, default):
    ''' Grid values from Params: None, a single number, a comma separated string or a sequence. '''
    if values is None:
        return default
    if isinstance(values, str):
        return tuple(_list(values, float))
    if isinstance(values, (int, float)):
        return (float(values),)
    return tuple(float(v) for v in values)


def baseline(params, dataset, name):
    ''' Returns (mean, std or None, extras) for the LP or IGMRF baseline. '''
    name = name.upper()
    if name == 'LP':
        mean, report = label_propagation(dataset.graph, dataset.y, dataset.mask, tol=params.cg_tol,
                                         max_iter=params.cg_max_iter)
        return mean, None, {'cg_converged': report is None or report.converged}
    if name == 'IGMRF':
        epsilon = params.igmrf_epsilon
        if epsilon is None:
            epsilon = recipe_epsilon(dataset.provenance.get('recipe'))
        sigmas = _grid(params.igmrf_sigmas, DEFAULT_SIGMAS)
        kappas = _grid(params.igmrf_kappas, DEFAULT_KAPPAS)
        model, grid = igmrf_fit(dataset.graph, dataset.y, dataset.mask, sigmas=sigmas, kappas=kappas, epsilon=epsilon)
        if params.dump_file:
            grid.to_csv(f'{params.execution_dir()}_igmrf_grid.csv', index=False)
        summary = igmrf_posterior(model, dataset.y, dataset.mask, n_samples=params.n_posterior_samples,
                                  seed=params.seed, tol=params.cg_tol, max_iter=params.cg_max_iter)
        return summary.mean, summary.marginal_std, {'kappa': float(model.kappa), 'sigma': float(model.sigma),
                                                    'epsilon': epsilon, 'cg_converged': summary.converged}
    raise ValidationError(f'unknown baseline "{name}", expected one of {BASELINES}')


def evaluate(dataset, mean, std=None):
    ''' Scores on unobserved nodes with a known target, plus the true-posterior errors on synthetic data. '''
    eval_mask = dataset.eval_mask
    report = {'n_eval': int(eval_mask.sum()),
              'rmse': rmse(mean, dataset.y, eval_mask),
              'mae': mae(mean, dataset.y, eval_mask)}
    if std is not None:
        report['crps'] = crps(mean, std, dataset.y, eval_mask)
    if dataset.has_true_posterior:
        unobserved = dataset.mask.unobserved
        report['mae_mean'] = mae(mean, dataset.true_mean, unobserved)
        if std is not None:
            report['mae_std'] = mae(std, dataset.true_std, unobserved)
        report['true_rmse'] = rmse(dataset.true_mean, dataset.y, eval_mask)
        report['true_mae'] = mae(dataset.true_mean, dataset.y, eval_mask)
        report['true_crps'] = crps(dataset.true_mean, dataset.true_std, dataset.y, eval_mask)
    return report


def write_posterior(path, dataset, mean, std=None):
    table = pd.DataFrame({'node': range(dataset.graph.n_nodes), 'mean': mean.detach().numpy()})
    table['std'] = float('nan') if std is None else std.detach().numpy()
    table['observed'] = dataset.mask.observed.numpy().astype(int)
    table.to_csv(path, index=False, float_format='%.17g')


def read_posterior(path):
    table = pd.read_csv(path, float_precision='round_trip').sort_values('node')
    mean = torch.as_tensor(table['mean'].to_numpy(dtype='float64'))
    std = torch.as_tensor(table['std'].to_numpy(dtype='float64'))
    return mean, None if bool(torch.isnan(std).all()) else std


def _stage(name, function, *args, **kwargs):
    try:
        return function(*args, **kwargs)
    except Exception as e:
        raise StageError(name, e) from e


def run_experiment(params, dataset=None, pre=None):
    '''
    generate -> preprocess -> train -> infer -> evaluate, or the baseline in place of
    the DGMRF stages. The result bundle is written next to the execution log; a failing
    stage marks it failed instead of raising.
    '''
    set_deterministic(params.deterministic)
    bundle = {'execution_id': params.execution_id, 'model': params.model, 'dataset': params.dataset,
              'seed': params.seed, 'n_layers': params.n_layers, 'config_hash': params.config_hash(),
              'status': 'ok'}
    report = {}
    try:
        if dataset is None:
            dataset = _stage('generate', load_dataset, params)
        bundle['graph_hash'] = dataset.graph.graph_hash()
        bundle['provenance'] = {k: str(v) for k, v in dataset.provenance.items()}

        if params.model.upper() in BASELINES:
            mean, std, extras = _stage('baseline', baseline, params, dataset, params.model)
            bundle.update(extras)
        else:
            if pre is None:
                pre = _stage('preprocess', preprocess, params, dataset.graph)
            bundle['logdet_backend'] = pre.method
            dgmrf, vi, trace = _stage('train', train, params, dataset, pre)
            bundle['final_elbo'] = float(trace['elbo'].iloc[-1]) if len(trace) else None
            summary = _stage('infer', infer, params, dataset, dgmrf)
            mean, std = summary.mean, summary.marginal_std
            bundle['cg_converged'] = summary.converged
        if params.dump_file:
            write_posterior(f'{params.execution_dir()}_posterior.csv', dataset, mean, std)
        report = _stage('evaluate', evaluate, dataset, mean, std)
        bundle.update(report)
    except StageError as e:
        bundle.update(status='failed', failed_stage=e.stage, error=f'{type(e.cause).__name__}: {e.cause}')
        if isinstance(e.cause, TrainingDivergedError):
            bundle['diverged_at'] = e.cause.iteration
        params.log(f'Experiment failed in stage {e.stage}: {e.cause}', level=logging.ERROR)

    if params.dump_file:
        with open(f'{params.execution_dir()}_result.json', 'w') as f:
            json.dump(bundle, f, indent=2, default=str)
        if bundle['status'] == 'ok':
            params.print_summary(**{k: report[k] for k in METRICS if k in report})
    params.log('====================================================================')
    params.log('RESULT:: ' + ', '.join(f'{k}: {bundle[k]}' for k in ('status',) + METRICS if k in bundle))
    return bundle


def sweep(params, seeds=5, layers=(1, 2, 3, 4, 5), observed=None, out_dir=None):
    '''
    Repeats run_experiment over seeds, layer counts and (optionally) nested observed
    fractions. Writes the per-run table, mean/std per setting and layers_<metric>.csv.
    '''
    out_dir = out_dir or f'{params.execution_dir()}_sweep'
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for seed in range(seeds):
        dataset = load_dataset(params, seed)
        if observed:
            fractions = sorted(observed)
            masks = generate_nested_masks(dataset.graph.n_nodes, fractions, derive_seed(seed, 'mask'))
            settings = [(f, dataset.with_mask(m, name=f'{dataset.name}_obs{f}')) for f, m in zip(fractions, masks)]
        else:
            settings = [(None, dataset)]
        pre = None
        for fraction, data in settings:
            for n_layers in layers:
                run_params = Params(**{**params.to_dict(), 'n_layers': n_layers, 'seed': seed})
                if pre is None and run_params.model.upper() not in BASELINES:
                    pre = preprocess(run_params, data.graph)
                bundle = run_experiment(run_params, data, pre)
                bundle.pop('provenance', None)
                rows.append({**bundle, 'observed': fraction})

    runs = pd.DataFrame(rows)
    runs.to_csv(os.path.join(out_dir, 'sweep_runs.csv'), index=False)
    ok = runs[runs['status'] == 'ok']
    keys = ['n_layers'] + (['observed'] if observed else [])
    metrics = [m for m in METRICS if m in ok and ok[m].notna().any()]
    if ok.empty or not metrics:
        params.log('Sweep produced no successful runs', level=logging.WARNING)
        return runs, None

    summary = ok.groupby(keys)[metrics].agg(['mean', 'std'])
    summary.columns = [f'{metric}_{stat}' for metric, stat in summary.columns]
    summary = summary.reset_index()
    summary.to_csv(os.path.join(out_dir, 'sweep_summary.csv'), index=False)

    for metric in metrics:
        curve = summary[keys + [f'{metric}_mean', f'{metric}_std']] \
            .rename(columns={f'{metric}_mean': 'mean', f'{metric}_std': 'std'})
        floor = f'true_{metric}'
        if floor in ok and ok[floor].notna().any():
            curve = curve.merge(ok.groupby(keys[1:] or ['n_layers'])[floor].mean().rename('true_posterior')
                                .reset_index(), how='left')
        curve.to_csv(os.path.join(out_dir, f'layers_{metric}.csv'), index=False)
    return runs, summary


def _list(text, cast):
    if text is None:
        return None
    if '..' in text:
        low, high = text.split('..')
        return list(range(int(low), int(high) + 1))
    return [cast(v) for v in text.split(',') if v.strip()]


def _params(args, **overrides):
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, 'config', None):
        return Params.from_file(args.config, **overrides)
    return Params(**overrides)


def build_parser():
    parser = argparse.ArgumentParser(prog='dgmrf', description='Deep GMRFs on general graphs')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('generate', help='write a synthetic dataset')
    p.add_argument('--recipe', default='dgmrf', choices=['dgmrf', 'dense', 'mix'])
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--n-nodes', type=int)
    p.add_argument('--true-layers', type=int, default=1)
    p.add_argument('--fraction-unobserved', type=float)
    p.add_argument('--out', required=True)

    p = commands.add_parser('preprocess', help='log-determinant pre-processing of a dataset graph')
    p.add_argument('--data', required=True)
    p.add_argument('--backend', default='auto', choices=['auto', 'eigen', 'power_series'])
    p.add_argument('--K', type=int, default=50)
    p.add_argument('--probes', type=int, default=1000)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)

    p = commands.add_parser('train', help='fit a DGMRF')
    p.add_argument('--config')
    p.add_argument('--data')
    p.add_argument('--resume', help='checkpoint to continue from')

    p = commands.add_parser('infer', help='posterior mean and std from a checkpoint')
    p.add_argument('--config')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--samples', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--out', default='posterior.csv')

    p = commands.add_parser('evaluate', help='score a posterior CSV')
    p.add_argument('--predictions', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--out')

    p = commands.add_parser('baseline', help='label propagation or IGMRF')
    p.add_argument('--model', required=True, choices=['lp', 'igmrf'])
    p.add_argument('--config')
    p.add_argument('--data', required=True)
    p.add_argument('--out', default='posterior.csv')

    p = commands.add_parser('sweep', help='repeat experiments over seeds, layers and observed fractions')
    p.add_argument('--config')
    p.add_argument('--data')
    p.add_argument('--seeds', type=int, default=5)
    p.add_argument('--layers', default='1..5')
    p.add_argument('--observed', help='comma separated observed fractions, e.g. 0.05,0.2,0.4')
    p.add_argument('--out')

    p = commands.add_parser('run', help='generate, train, infer and evaluate from one config')
    p.add_argument('--config')
    p.add_argument('--data')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)

    if args.command == 'generate':
        params = Params(dump_file=False, recipe=args.recipe, seed=args.seed, n_nodes=args.n_nodes,
                        true_layers=args.true_layers, fraction_unobserved=args.fraction_unobserved)
        dataset = make_dataset(params)
        dataset.save(args.out)
        params.log(f'{dataset.name}: {dataset.graph} saved to {args.out}')

    elif args.command == 'preprocess':
        dataset = GraphDataset.load(args.data)
        os.makedirs(args.out, exist_ok=True)
        pre = make_preprocess(dataset.graph, backend=args.backend, K=args.K, n_probes=args.probes, seed=args.seed,
                              cache_dir=args.out)
        if select_backend(dataset.graph, args.backend) == 'power_series':
            truncation_bound_curve(max_K=max(args.K, 100)).to_csv(os.path.join(args.out, 'truncation_bound.csv'),
                                                                  index=False)
        print(f'{pre.method} pre-process of {dataset.graph} cached in {args.out}')

    elif args.command == 'train':
        params = _params(args, dataset_dir=args.data)
        set_deterministic(params.deterministic)
        dataset = load_dataset(params)
        dgmrf, vi, trace = train(params, dataset, resume=args.resume)
        params.log(f'Final ELBO per node: {trace["elbo"].iloc[-1]:.6f}, checkpoint {params.last_checkpoint()}')

    elif args.command == 'infer':
        params = _params(args, dump_file=False, n_posterior_samples=args.samples, seed=args.seed)
        dataset = GraphDataset.load(args.data)
        dgmrf, _, _ = load_checkpoint(args.checkpoint, dataset.graph)
        summary = infer(params, dataset, dgmrf)
        write_posterior(args.out, dataset, summary.mean, summary.marginal_std)
        params.log(f'Posterior written to {args.out}')

    elif args.command == 'evaluate':
        dataset = GraphDataset.load(args.data)
        mean, std = read_posterior(args.predictions)
        report = {'dataset': dataset.name, 'predictions': args.predictions, **evaluate(dataset, mean, std)}
        text = json.dumps(report, indent=2)
        if args.out:
            with open(args.out, 'w') as f:
                f.write(text + '\n')
        print(text)

    elif args.command == 'baseline':
        params = _params(args, dump_file=False, model=args.model.upper())
        dataset = GraphDataset.load(args.data)
        mean, std, extras = baseline(params, dataset, args.model)
        write_posterior(args.out, dataset, mean, std)
        print(json.dumps({'model': params.model, **extras, **evaluate(dataset, mean, std)}, indent=2))

    elif args.command == 'sweep':
        params = _params(args, dataset_dir=args.data)
        runs, _ = sweep(params, seeds=args.seeds, layers=_list(args.layers, int),
                        observed=_list(args.observed, float), out_dir=args.out)
        return 0 if (runs['status'] == 'ok').all() else 1

    elif args.command == 'run':
        params = _params(args, dataset_dir=args.data)
        return 0 if run_experiment(params)['status'] == 'ok' else 1
    return 0


if __name__ == "__main__":
    try:
        sys.exit(main())
    except DgmrfError as e:
        print(f'error: {e}', file=sys.stderr)
        sys.exit(2)
