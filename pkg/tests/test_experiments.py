import json
import os

import numpy as np
import pandas as pd
import pytest
import torch

import main
from conftest import delaunay, random_dgmrf
from dataset.graph_dataset import GraphDataset
from dataset.synthetic import (TRUE_NOISE_STD, make_dataset, make_dense, make_mix, make_synth_dgmrf, mix_precision,
                               sample_dgmrf_prior)
from model.checkpoint import save_checkpoint
from model.dgmrf import DGMRF
from model.dgmrf_layer import GAMMA_SATURATION
from model.posterior import dense_posterior
from model.variational import VariationalDist
from utils.errors import ValidationError
from utils.graph import generate_delaunay_graph, save_edge_list, save_node_vector
from utils.linalg import derive_seed
from utils.params import Params


def test_identity_prior_sample_is_the_noise(small_graph, generator):
    model = DGMRF.from_values(small_graph, [1.0], [0.0], theta3=-GAMMA_SATURATION)
    z = torch.randn(small_graph.n_nodes, generator=generator, dtype=torch.float64)
    x, reports = sample_dgmrf_prior(model, z=z)
    assert all(report.converged for report in reports)
    assert torch.allclose(x, z, atol=1e-6)


def test_single_prior_draw_is_a_node_vector(medium_graph):
    model = random_dgmrf(medium_graph, 2, seed=22)
    x, reports = sample_dgmrf_prior(model, seed=3)
    assert x.shape == (100,)
    assert len(reports) == 2 and all(report.converged for report in reports)
    for dataset in (make_synth_dgmrf(n=60, seed=0), make_dense(n=60, seed=0), make_mix(n=60, seed=0)):
        assert dataset.x.shape == (60,)
        assert dataset.true_mean.shape == (60,)


def test_prior_samples_have_the_model_moments():
    graph = delaunay(20, seed=40)
    model = random_dgmrf(graph, 2, seed=20)
    n_samples = 20_000
    x, _ = sample_dgmrf_prior(model, seed=1, n_samples=n_samples, tol=1e-10)
    with torch.no_grad():
        mean = -torch.linalg.solve(model.to_dense(), model.bias_offset())
        covariance = torch.linalg.inv(model.dense_precision())
    variances = torch.diagonal(covariance)
    assert bool((torch.abs(x.mean(dim=1) - mean) <= 4.5 * torch.sqrt(variances / n_samples)).all())

    centred = x - x.mean(dim=1, keepdim=True)
    empirical = centred @ centred.T / (n_samples - 1)
    std_error = torch.sqrt((torch.outer(variances, variances) + covariance ** 2) / n_samples)
    assert bool((torch.abs(empirical - covariance) <= 5.0 * std_error).all())


def test_prior_sampling_methods_agree(medium_graph, generator):
    model = DGMRF.from_values(medium_graph, [1.3], [-0.6], gammas=[0.5], biases=[0.2])
    z = torch.randn(100, generator=generator, dtype=torch.float64)
    layerwise, _ = sample_dgmrf_prior(model, z=z, tol=1e-12)
    normal, _ = sample_dgmrf_prior(model, z=z, tol=1e-12, method='normal_equations', max_iter=5000)
    assert torch.allclose(layerwise, normal, atol=1e-6)


def test_layerwise_sample_inverts_the_stack(medium_graph, generator):
    model = random_dgmrf(medium_graph, 3, seed=21)
    z = torch.randn(100, generator=generator, dtype=torch.float64)
    x, _ = sample_dgmrf_prior(model, z=z, tol=1e-12)
    with torch.no_grad():
        assert torch.allclose(model(x), z, atol=1e-8)
    with pytest.raises(ValidationError):
        sample_dgmrf_prior(model, z=z, method='cholesky')


def test_synthetic_dataset_is_reproducible():
    first, second = make_synth_dgmrf(n=200, seed=3), make_synth_dgmrf(n=200, seed=3)
    assert first.graph.graph_hash() == second.graph.graph_hash()
    assert torch.equal(first.x, second.x)
    assert torch.equal(first.y, second.y)
    assert torch.equal(first.mask.observed, second.mask.observed)
    assert not torch.equal(first.y, make_synth_dgmrf(n=200, seed=4).y)


def test_true_posterior_recomputed():
    dataset = make_synth_dgmrf(n=200, seed=5)
    truth = DGMRF.from_values(dataset.graph, [1.2], [-1.0], theta3=GAMMA_SATURATION, sigma=TRUE_NOISE_STD)
    with torch.no_grad():
        mean, std = dense_posterior(truth.dense_precision(), dataset.y, dataset.mask, TRUE_NOISE_STD)
    assert torch.allclose(dataset.true_mean, mean, atol=1e-10)
    assert torch.allclose(dataset.true_std, std, atol=1e-12)
    assert dataset.provenance['true_posterior_rmse'] > 0.0
    assert dataset.provenance['sample_converged']


def test_observation_noise_level():
    dataset = make_synth_dgmrf(n=1000, seed=6)
    assert (dataset.y - dataset.x).std().item() == pytest.approx(TRUE_NOISE_STD, rel=0.1)
    assert int(dataset.mask.unobserved.sum()) == 250


def test_dense_recipe_keeps_the_base_graph():
    dataset = make_dense(n=150, seed=2)
    base, _ = generate_delaunay_graph(150, derive_seed(2, 'graph'))
    assert dataset.graph.graph_hash() == base.graph_hash()
    assert dataset.provenance['hops'] == 3
    assert dataset.has_true_posterior


def test_mix_precision(small_graph):
    precision, factor, parameters = mix_precision(small_graph, seed=0)
    assert torch.allclose(precision, precision.T)
    assert torch.allclose(factor @ factor.T, precision, atol=1e-10)
    assert len(parameters) == 4
    for alpha, beta in parameters:
        assert 0.5 <= alpha <= 1.5
        assert -1.1 <= beta <= -0.1
        assert abs(beta) < alpha


def test_mix_dataset():
    dataset = make_mix(n=150, seed=1)
    assert dataset.name == 'mix'
    assert len(dataset.provenance['mix_alphas'].split()) == 4
    assert int(dataset.mask.unobserved.sum()) == 75
    assert dataset.has_true_posterior


def test_unknown_recipe():
    with pytest.raises(ValidationError):
        make_dataset(Params(dump_file=False, recipe='grid'))


def test_recipe_defaults_follow_params():
    dataset = make_dataset(Params(dump_file=False, recipe='dgmrf', n_nodes=90, fraction_unobserved=0.5))
    assert dataset.graph.n_nodes == 90
    assert int(dataset.mask.unobserved.sum()) == 45


def test_dataset_round_trip(tmp_path):
    dataset = make_synth_dgmrf(n=120, seed=7)
    dataset.save(tmp_path / 'data')
    loaded = GraphDataset.load(tmp_path / 'data')
    assert loaded.name == dataset.name
    assert loaded.graph.graph_hash() == dataset.graph.graph_hash()
    for attribute in ('y', 'x', 'true_mean', 'true_std'):
        assert torch.equal(getattr(loaded, attribute), getattr(dataset, attribute))
    assert torch.equal(loaded.mask.observed, dataset.mask.observed)
    assert np.allclose(loaded.points, dataset.points)
    assert loaded.provenance['alpha'] == 1.2
    assert loaded.provenance['true_posterior_rmse'] == dataset.provenance['true_posterior_rmse']


def test_dataset_from_files(tmp_path, small_graph):
    values = torch.exp(torch.linspace(0.0, 2.0, small_graph.n_nodes, dtype=torch.float64))
    save_edge_list(tmp_path / 'edges.txt', small_graph)
    save_node_vector(tmp_path / 'y.txt', values)
    dataset = GraphDataset.from_files(str(tmp_path / 'edges.txt'), None, str(tmp_path / 'y.txt'), log_targets=True)
    assert dataset.name == 'y'
    assert dataset.graph.graph_hash() == small_graph.graph_hash()
    assert torch.allclose(dataset.y, torch.log(values))
    assert int(dataset.mask.unobserved.sum()) == 15
    assert not dataset.synthetic


def test_evaluate_perfect_prediction():
    dataset = make_synth_dgmrf(n=120, seed=8)
    report = main.evaluate(dataset, dataset.y, torch.full((120,), 0.1, dtype=torch.float64))
    assert report['rmse'] == 0.0
    assert report['mae'] == 0.0
    assert report['n_eval'] == 30
    assert {'crps', 'mae_mean', 'mae_std', 'true_rmse', 'true_crps'} <= set(report)


def test_posterior_csv_round_trip(tmp_path):
    dataset = make_synth_dgmrf(n=120, seed=9)
    std = torch.rand(120, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    main.write_posterior(tmp_path / 'posterior.csv', dataset, dataset.true_mean, std)
    mean, loaded_std = main.read_posterior(tmp_path / 'posterior.csv')
    assert torch.equal(mean, dataset.true_mean)
    assert torch.equal(loaded_std, std)
    main.write_posterior(tmp_path / 'lp.csv', dataset, dataset.true_mean)
    assert main.read_posterior(tmp_path / 'lp.csv')[1] is None


def test_run_experiment(params):
    p = params()
    bundle = main.run_experiment(p)
    assert bundle['status'] == 'ok'
    assert bundle['logdet_backend'] == 'eigen'
    assert np.isfinite(bundle['rmse']) and np.isfinite(bundle['crps'])
    assert os.path.isfile(f'{p.execution_dir()}_posterior.csv')
    with open(f'{p.execution_dir()}_result.json') as f:
        assert json.load(f)['config_hash'] == p.config_hash()
    assert os.path.isfile(f'{p.base_dir()}/summary.txt')


def test_run_baseline_experiment(params):
    bundle = main.run_experiment(params(model='LP'))
    assert bundle['status'] == 'ok'
    assert bundle['cg_converged']
    assert 'crps' not in bundle


def test_failed_stage_is_recorded(params):
    p = params(logdet_backend='lanczos')
    bundle = main.run_experiment(p)
    assert bundle['status'] == 'failed'
    assert bundle['failed_stage'] == 'preprocess'
    assert bundle['error'].startswith('ValidationError')
    with open(f'{p.execution_dir()}_result.json') as f:
        assert json.load(f)['status'] == 'failed'


def test_sweep(params, tmp_path):
    runs, summary = main.sweep(params(iterations=10, n_nodes=80), seeds=2, layers=(1, 2), out_dir=tmp_path / 'sweep')
    assert len(runs) == 4
    assert (runs['status'] == 'ok').all()
    assert {'rmse_mean', 'rmse_std', 'crps_mean'} <= set(summary.columns)
    curve = pd.read_csv(tmp_path / 'sweep' / 'layers_rmse.csv')
    assert list(curve['n_layers']) == [1, 2]
    assert {'mean', 'std', 'true_posterior'} <= set(curve.columns)
    assert os.path.isfile(tmp_path / 'sweep' / 'sweep_runs.csv')


def test_observed_sweep(params, tmp_path):
    runs, summary = main.sweep(params(model='LP', n_nodes=80), seeds=1, layers=(1,), observed=[0.5, 0.2],
                               out_dir=tmp_path / 'sweep')
    assert sorted(runs['observed']) == [0.2, 0.5]
    assert list(summary['observed']) == [0.2, 0.5]


def test_list_arguments():
    assert main._list('1..3', int) == [1, 2, 3]
    assert main._list('0.05,0.2', float) == [0.05, 0.2]
    assert main._list(None, int) is None


def test_command_line(tmp_path, small_graph):
    data = str(tmp_path / 'data')
    assert main.main(['generate', '--recipe', 'dgmrf', '--n-nodes', '100', '--seed', '2', '--out', data]) == 0
    assert os.path.isfile(os.path.join(data, 'edges.txt'))

    predictions = str(tmp_path / 'lp.csv')
    assert main.main(['baseline', '--model', 'lp', '--data', data, '--out', predictions]) == 0
    report_path = str(tmp_path / 'report.json')
    assert main.main(['evaluate', '--predictions', predictions, '--data', data, '--out', report_path]) == 0
    with open(report_path) as f:
        report = json.load(f)
    assert report['n_eval'] == 25
    assert report['rmse'] > 0.0

    cache = str(tmp_path / 'cache')
    assert main.main(['preprocess', '--data', data, '--backend', 'power_series', '--K', '5', '--probes', '10',
                      '--out', cache]) == 0
    assert os.path.isfile(os.path.join(cache, 'truncation_bound.csv'))


def test_infer_command(tmp_path):
    data = str(tmp_path / 'data')
    dataset = make_synth_dgmrf(n=100, seed=1)
    dataset.save(data)
    checkpoint = str(tmp_path / 'model.ckpt')
    save_checkpoint(checkpoint, DGMRF(dataset.graph, 2), VariationalDist(dataset.graph, 1), iteration=0, seed=0)
    out = str(tmp_path / 'posterior.csv')
    assert main.main(['infer', '--checkpoint', checkpoint, '--data', data, '--samples', '5', '--out', out]) == 0
    mean, std = main.read_posterior(out)
    assert mean.shape == (100,)
    assert bool((std > 0).all())


def fitted_report(dataset, n_layers, seed):
    params = Params(dump_file=False, iterations=10000, n_layers=n_layers, seed=seed, n_posterior_samples=100)
    dgmrf, _, _ = main.train(params, dataset)
    summary = main.infer(params, dataset, dgmrf)
    return main.evaluate(dataset, summary.mean, summary.marginal_std)


@pytest.mark.slow
@pytest.mark.parametrize('seed', range(3))
def test_deep_model_tracks_a_deep_truth(seed):
    dataset = make_synth_dgmrf(n=1000, n_layers=3, seed=seed, fraction_unobserved=0.25)
    shallow = fitted_report(dataset, 1, seed)['mae_mean']
    deep = fitted_report(dataset, 3, seed)['mae_mean']
    assert deep <= 0.6 * shallow


@pytest.mark.slow
def test_mix_rmse_falls_with_depth():
    rmse_by_layers = {n_layers: [] for n_layers in (1, 2, 3)}
    floors = []
    for seed in range(3):
        dataset = make_mix(n=2000, seed=seed)
        floors.append(dataset.provenance['true_posterior_rmse'])
        for n_layers in rmse_by_layers:
            rmse_by_layers[n_layers].append(fitted_report(dataset, n_layers, seed)['rmse'])
    means = [np.mean(rmse_by_layers[n_layers]) for n_layers in (1, 2, 3)]
    assert all(later <= earlier + 0.002 for earlier, later in zip(means, means[1:]))
    assert means[-1] <= 1.15 * np.mean(floors)
