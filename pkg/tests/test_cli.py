import os

import pandas as pd
import pytest

from cli import EXIT_DIVERGED, EXIT_INVALID, EXIT_IO, EXIT_OK, build_config, main, parse_args
from conftest import make_dataset
from dataset import IDX_IMAGES_NAME, IDX_LABELS_NAME, LabeledDataset, NoiseLedger, write_idx
from evaluation import EvaluationReport
from utils import DATA_DIR_ENV, read_key_values, sha256_file

TINY_MODEL = ['--latent_dim', '4', '--epochs', '1', '--batch_size', '16']


@pytest.fixture(autouse=True)
def no_data_env(monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)


@pytest.fixture
def source(tmp_path):
    directory = tmp_path / 'data'
    directory.mkdir()
    dataset = make_dataset(n_per_class=20, num_classes=3, shape=(8, 8, 1), seed=3)
    write_idx(dataset, str(directory / IDX_IMAGES_NAME), str(directory / IDX_LABELS_NAME))
    return str(directory)


def run(command, run_dir, *extra, seed='1'):
    argv = [command, '--run_dir', str(run_dir), '--no_progress']
    if seed is not None:
        argv += ['--seed', seed]
    return main(argv + list(extra))


def pipeline(source, run_dir):
    assert run('inject', run_dir, '--data_dir', source, '--rate', '0.15') == EXIT_OK
    assert run('train', run_dir, *TINY_MODEL) == EXIT_OK
    assert run('detect', run_dir) == EXIT_OK
    assert run('evaluate', run_dir) == EXIT_OK


class TestPipeline:
    def test_full_chain(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        pipeline(source, run_dir)
        for name in ('noised', 'ledger.csv', 'checkpoint.ljt', 'history.csv', 'detection.txt', 'report.txt',
                     'cleaned/removal_manifest.csv', 'plots/latent_scatter.csv', 'plots/kdistance/class_0.csv',
                     'plots/clusters/class_2.csv', 'run_train.log', 'manifest_evaluate.txt'):
            assert (run_dir / name).exists(), name
        assert len(NoiseLedger.load(str(run_dir / 'ledger.csv'))) == 9
        report = EvaluationReport.load(str(run_dir / 'report.txt'))
        assert report.n_samples == 60
        assert report.jaccard_noised == pytest.approx(0.85)
        assert report.noise_rate == 0.15
        assert report.mean_psnr is not None
        assert 'data_dir' not in report.config and report.config['seed'] == '1'
        detection = read_key_values(str(run_dir / 'detection.txt'))
        assert detection['class.0.name'] == '0'
        assert int(detection['removed']) + int(detection['retained']) == 60

    def test_report_carries_the_training_config(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        assert run('inject', run_dir, '--data_dir', source) == EXIT_OK
        assert run('train', run_dir, *TINY_MODEL, '--kl_formula', 'literal') == EXIT_OK
        assert run('detect', run_dir, '--min_points', '4') == EXIT_OK
        assert run('evaluate', run_dir, '--min_points', '4') == EXIT_OK
        report = EvaluationReport.load(str(run_dir / 'report.txt'))
        assert report.kl_formula == 'literal'
        assert report.config['kl_formula'] == 'literal'
        assert (report.config['epochs'], report.config['latent_dim']) == ('1', '4')
        assert report.config['min_points'] == '4'

    def test_class_names_follow_the_kind(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        assert run('inject', run_dir, '--data_dir', source, '--kind', 'fashion-mnist') == EXIT_OK
        assert run('train', run_dir, *TINY_MODEL, '--kind', 'fashion-mnist') == EXIT_OK
        assert run('detect', run_dir, '--kind', 'fashion-mnist') == EXIT_OK
        detection = read_key_values(str(run_dir / 'detection.txt'))
        assert [detection[f'class.{c}.name'] for c in range(3)] == ['T-shirt/top', 'Trouser', 'Pullover']

    def test_report_is_reproducible(self, tmp_path, source):
        pipeline(source, tmp_path / 'first')
        pipeline(source, tmp_path / 'second')
        assert (tmp_path / 'first' / 'report.txt').read_bytes() == (tmp_path / 'second' / 'report.txt').read_bytes()

    def test_baseline(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        assert run('inject', run_dir, '--data_dir', source) == EXIT_OK
        assert run('baseline', run_dir, '--fraction', '0.5', '--k', '3', '--n_components', '4') == EXIT_OK
        scores = read_key_values(str(run_dir / 'baseline.txt'))
        assert set(scores) == {f'{name}.{metric}' for name in ('knn', 'eigen')
                               for metric in ('accuracy', 'agreement_with_input', 'changed')}
        assert (run_dir / 'baseline_knn' / 'relabel_manifest.csv').exists()
        assert run('evaluate', run_dir) != EXIT_OK

    def test_sweep(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        assert run('inject', run_dir, '--data_dir', source) == EXIT_OK
        assert run('sweep', run_dir, '--budgets', '1,2', '--latent_dim', '4', '--batch_size', '16') == EXIT_OK
        frame = pd.read_csv(run_dir / 'plots' / 'sweep.csv')
        assert frame['epochs'].tolist() == [1, 2]
        assert read_key_values(str(run_dir / 'sweep_summary.txt'))['budgets'] == '1,2'

    def test_report_over_runs(self, tmp_path, source):
        pipeline(source, tmp_path / 'a')
        assert run('report', tmp_path / 'summary', str(tmp_path / 'a'), str(tmp_path / 'a'), seed=None) == EXIT_OK
        summary = pd.read_csv(tmp_path / 'summary' / 'summary.csv', index_col='metric')
        assert summary.loc['jaccard_noised', 'runs'] == 2
        assert summary.loc['jaccard_noised', 'min'] == summary.loc['jaccard_noised', 'max']


class TestManifest:
    def test_inject_manifest(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        assert run('inject', run_dir, '--data_dir', source) == EXIT_OK
        manifest = read_key_values(str(run_dir / 'manifest_inject.txt'))
        assert manifest['command'] == 'inject'
        assert manifest['seed'] == '1'
        assert manifest['config.noise_rate'] == '0.15'
        assert manifest['artifact.ledger.csv'] == sha256_file(str(run_dir / 'ledger.csv'))
        assert len(manifest['config_hash']) == 64


class TestExitCodes:
    def test_divergence(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        assert run('inject', run_dir, '--data_dir', source) == EXIT_OK
        assert run('train', run_dir, '--latent_dim', '4', '--epochs', '3', '--lr', '1e6') == EXIT_DIVERGED

    def test_detect_without_checkpoint(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        assert run('inject', run_dir, '--data_dir', source) == EXIT_OK
        assert run('detect', run_dir) == EXIT_INVALID

    def test_rate_out_of_range(self, tmp_path, source):
        assert run('inject', tmp_path / 'run', '--data_dir', source, '--rate', '1.5') == EXIT_INVALID

    def test_missing_seed(self, tmp_path, source):
        assert run('inject', tmp_path / 'run', '--data_dir', source, seed=None) == EXIT_INVALID

    def test_evaluate_without_ledger(self, tmp_path, source):
        run_dir = tmp_path / 'run'
        assert run('inject', run_dir, '--data_dir', source) == EXIT_OK
        os.remove(run_dir / 'ledger.csv')
        assert run('evaluate', run_dir) == EXIT_INVALID

    def test_subset_with_a_single_member_class(self, tmp_path):
        directory = tmp_path / 'data'
        directory.mkdir()
        dataset = make_dataset(n_per_class=20, num_classes=3, shape=(8, 8, 1), seed=3)
        labels = dataset.labels.copy()
        labels[0] = 3
        lonely = LabeledDataset(images=dataset.images, labels=labels, true_labels=labels, num_classes=4)
        write_idx(lonely, str(directory / IDX_IMAGES_NAME), str(directory / IDX_LABELS_NAME))
        assert run('inject', tmp_path / 'run', '--data_dir', str(directory), '--subset', '30') == EXIT_INVALID

    def test_missing_source(self, tmp_path):
        assert run('inject', tmp_path / 'run', '--data_dir', str(tmp_path / 'nowhere')) == EXIT_INVALID

    def test_run_dir_is_a_file(self, tmp_path, source):
        blocker = tmp_path / 'blocker'
        blocker.write_text('')
        assert run('inject', blocker, '--data_dir', source) == EXIT_IO

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as info:
            main(['inject', '--speed', '3'])
        assert info.value.code == 2


class TestConfiguration:
    def test_precedence(self, tmp_path, monkeypatch):
        config = tmp_path / 'run.cfg'
        config.write_text('# desk run\nepochs = 3\nlatent_dim = 6\nbudgets = 2,4\n')
        monkeypatch.setenv(DATA_DIR_ENV, '/data')
        cfg = build_config(parse_args(['train', '--config', str(config), '--epochs', '2', '--seed', '5']))
        assert (cfg.epochs, cfg.latent_dim, cfg.budgets, cfg.seed) == (2, 6, (2, 4), 5)
        assert cfg.data_dir == '/data'
        assert cfg.beta_kl == 1e-3

    def test_flag_beats_environment(self, monkeypatch):
        monkeypatch.setenv(DATA_DIR_ENV, '/data')
        assert build_config(parse_args(['inject', '--data_dir', '/elsewhere'])).data_dir == '/elsewhere'

    def test_unknown_key_in_file(self, tmp_path):
        config = tmp_path / 'run.cfg'
        config.write_text('speed = 3\n')
        assert main(['inject', '--config', str(config), '--seed', '1', '--run_dir', str(tmp_path / 'r')]) == EXIT_INVALID

    def test_hash_ignores_nothing_but_order(self):
        first = build_config(parse_args(['train', '--seed', '1', '--epochs', '2']))
        second = build_config(parse_args(['train', '--epochs', '2', '--seed', '1']))
        third = build_config(parse_args(['train', '--epochs', '3', '--seed', '1']))
        assert first.hash() == second.hash() != third.hash()
