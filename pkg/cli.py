"""
-----------------------------------------------------------------------------------
Description: command line for the label-noise pipeline
             inject -> train -> detect -> evaluate, plus baseline, sweep & report.
             Every command writes its artifacts and a manifest under --run_dir.
"""
import argparse
import configparser
import dataclasses
import glob
import logging
import os
import sys
from dataclasses import dataclass

import pandas as pd
import torch

from baselines import eigen_relabel, knn_relabel, select_representatives, write_relabeled
from dataset import (NoiseLedger, dataset_files, inject_noise, load_dataset, read_cifar10, read_idx,
                     restore_true_labels, save_dataset, stratified_subset)
from denoise import EPS_MODES, detect_and_remove, load_detection, write_cleaned
from errors import ArgumentError, ArtifactIOError, LabelCleanError, MissingArtifactError, TrainingDivergedError
from evaluation import (EvaluationReport, aggregate_reports, evaluate, psnr_accuracy_sweep, relabel_scores,
                        sweep_correlation)
from model.model import KL_FORMULAS, build_architecture, project
from model.autodiff import load_parameters
from train import TrainingConfig, load_checkpoint, save_checkpoint, save_history, train
from utils import (DATA_DIR_ENV, DATASET_KINDS, format_value, get_label_name, read_key_values, seed_everything,
                   setup_logging, sha256_file, sha256_text, write_key_values)
from visualization import PlotDataExporter

EXIT_OK = 0
EXIT_DIVERGED = 1
EXIT_INVALID = 2
EXIT_IO = 3

# run directory layout
NOISED_DIR = 'noised'
CLEANED_DIR = 'cleaned'
PLOTS_DIR = 'plots'
LEDGER_FILE = 'ledger.csv'
CHECKPOINT_FILE = 'checkpoint.ljt'
HISTORY_FILE = 'history.csv'
DETECTION_FILE = 'detection.txt'
REPORT_FILE = 'report.txt'
BASELINE_FILE = 'baseline.txt'
SWEEP_SUMMARY_FILE = 'sweep_summary.txt'
SUMMARY_FILE = 'summary.csv'

# left out of reports so that runs in different directories compare equal
PATH_FIELDS = ('data_dir', 'images', 'labels', 'batches', 'run_dir')
# taken from the evaluate command itself, everything else from the checkpoint
CLUSTERING_FIELDS = ('min_points', 'eps_mode', 'epsilon', 'window')


@dataclass
class RunConfig:
    kind: str = 'mnist'
    data_dir: str = None
    images: str = None
    labels: str = None
    batches: tuple = None
    run_dir: str = 'runs/default'
    subset: int = None
    noise_rate: float = 0.15
    seed: int = None
    latent_dim: int = 24
    beta_kl: float = 1e-3
    kl_formula: str = 'standard'
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    l1: float = 1e-5
    l2: float = 1e-5
    min_points: int = 5
    eps_mode: str = 'per-class'
    epsilon: float = None
    window: int = 11
    fraction: float = 0.1
    k: int = 11
    n_components: int = 24
    budgets: tuple = (5, 15, 30, 60)
    threads: int = 1
    tensorboard: bool = False
    progress: bool = True

    @property
    def source_format(self):
        return 'cifar10' if self.kind == 'cifar10' else 'idx'

    def validate(self, command):
        if self.kind not in DATASET_KINDS:
            raise ArgumentError(f'kind must be one of {DATASET_KINDS}, got {self.kind!r}')
        if command != 'report' and self.seed is None:
            raise ArgumentError('--seed is mandatory')
        if self.kl_formula not in KL_FORMULAS:
            raise ArgumentError(f'kl_formula must be one of {KL_FORMULAS}, got {self.kl_formula!r}')
        if self.eps_mode not in EPS_MODES:
            raise ArgumentError(f'eps_mode must be one of {EPS_MODES}, got {self.eps_mode!r}')
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ArgumentError(f'noise rate must lie in [0, 1], got {self.noise_rate}')
        if self.threads < 1:
            raise ArgumentError(f'threads must be >= 1, got {self.threads}')
        if self.subset is not None and self.subset < 1:
            raise ArgumentError(f'subset must be >= 1, got {self.subset}')

    def echo(self, paths=True):
        return [(f.name, format_value(getattr(self, f.name))) for f in dataclasses.fields(self)
                if paths or f.name not in PATH_FIELDS]

    def hash(self):
        return sha256_text('\n'.join(f'{k}={v}' for k, v in self.echo()))

    def training(self) -> TrainingConfig:
        return TrainingConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.lr,
                              beta_kl=self.beta_kl, rng_seed=self.seed, kl_formula=self.kl_formula,
                              l1=self.l1, l2=self.l2, progress_bar=self.progress,
                              tensorboard_dir=os.path.join(self.run_dir, 'tensorboard') if self.tensorboard else None)

    def architecture(self, image_shape):
        return build_architecture(image_shape, latent_dim=self.latent_dim, beta_kl=self.beta_kl,
                                  l1=self.l1, l2=self.l2)


# ============================ configuration ============================

def _to_bool(text):
    value = str(text).strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ArgumentError(f'expected a boolean, got {text!r}')


def _to_int_tuple(text):
    return tuple(int(v) for v in str(text).split(',') if v.strip())


def _to_str_tuple(text):
    return tuple(v.strip() for v in str(text).split(',') if v.strip())


_CONVERTERS = {
    str: str, int: int, float: float, bool: _to_bool,
}
_TUPLE_CONVERTERS = {'budgets': _to_int_tuple, 'batches': _to_str_tuple}


def convert_field(name, text):
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    if name not in fields:
        raise ArgumentError(f'unknown configuration key {name!r}')
    if text is None or text == '':
        return None
    if name in _TUPLE_CONVERTERS:
        return _TUPLE_CONVERTERS[name](text) if isinstance(text, str) else tuple(text)
    try:
        return _CONVERTERS[fields[name].type](text)
    except ValueError as e:
        raise ArgumentError(f'{name}: cannot parse {text!r}') from e


def read_config_file(path) -> dict:
    """key=value lines (no section header needed, '#' comments allowed)."""
    parser = configparser.ConfigParser(comment_prefixes=('#',), inline_comment_prefixes=('#',))
    try:
        with open(path, 'r', encoding='utf-8') as f:
            parser.read_string('[run]\n' + f.read(), source=path)
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    except configparser.Error as e:
        raise ArgumentError(f'{path}: {e}') from e
    return {key.replace('-', '_'): convert_field(key.replace('-', '_'), value)
            for key, value in parser['run'].items()}


def build_config(args) -> RunConfig:
    """defaults < --config file < command-line flags"""
    values = {}
    if getattr(args, 'config', None):
        values.update(read_config_file(args.config))
    for f in dataclasses.fields(RunConfig):
        if hasattr(args, f.name):
            values[f.name] = convert_field(f.name, getattr(args, f.name))
    cfg = RunConfig(**values)
    if cfg.data_dir is None:
        cfg.data_dir = os.environ.get(DATA_DIR_ENV)
    return cfg


# ============================ run directory ============================

def run_path(cfg: RunConfig, *parts):
    return os.path.join(cfg.run_dir, *parts)


def require(path, hint):
    if not os.path.exists(path):
        raise MissingArtifactError(path, hint)
    return path


def write_manifest(cfg: RunConfig, command, artifacts):
    """Config echo, config hash, seed and the sha256 of every artifact written by `command`."""
    items = [('command', command), ('config_hash', cfg.hash()), ('seed', cfg.seed)]
    items += [(f'config.{key}', value) for key, value in cfg.echo()]
    for path in sorted(set(artifacts)):
        items.append((f'artifact.{os.path.relpath(path, cfg.run_dir)}', sha256_file(path)))
    path = run_path(cfg, f'manifest_{command}.txt')
    write_key_values(path, items)
    logging.info(f'manifest: {path}')
    return path


def _first_existing(directory, names):
    for name in names:
        for candidate in (name, name + '.gz'):
            path = os.path.join(directory, candidate)
            if os.path.exists(path):
                return path
    return None


def load_source(cfg: RunConfig):
    """The clean source dataset, from explicit paths or the data directory."""
    num_classes = 10
    if cfg.source_format == 'idx':
        images, labels = cfg.images, cfg.labels
        if images is None or labels is None:
            if cfg.data_dir is None:
                raise ArgumentError(f'give --images/--labels, --data_dir or set {DATA_DIR_ENV}')
            images = images or _first_existing(cfg.data_dir, ['train-images-idx3-ubyte', 'train-images.idx3-ubyte'])
            labels = labels or _first_existing(cfg.data_dir, ['train-labels-idx1-ubyte', 'train-labels.idx1-ubyte'])
            if images is None or labels is None:
                raise MissingArtifactError(cfg.data_dir, 'no IDX training files found')
        dataset = read_idx(require(images, 'IDX images'), require(labels, 'IDX labels'), num_classes, name=cfg.kind)
    else:
        batches = list(cfg.batches or [])
        if not batches:
            if cfg.data_dir is None:
                raise ArgumentError(f'give --batches, --data_dir or set {DATA_DIR_ENV}')
            batches = sorted(glob.glob(os.path.join(cfg.data_dir, 'data_batch_*.bin')))
            if not batches:
                raise MissingArtifactError(cfg.data_dir, 'no CIFAR-10 data_batch_*.bin files found')
        dataset = read_cifar10([require(b, 'CIFAR-10 batch') for b in batches], name=cfg.kind)
    if cfg.subset is not None:
        dataset = stratified_subset(dataset, cfg.subset, cfg.seed)
        logging.info(f'{cfg.kind}: stratified subset of {len(dataset)} samples')
    return dataset


def load_noised(cfg: RunConfig, need_ledger=False):
    """Noised dataset of the run, with true labels restored when the ledger is present."""
    directory = run_path(cfg, NOISED_DIR)
    for path in dataset_files(directory, cfg.source_format):
        require(path, 'run inject first')
    dataset = load_dataset(directory, cfg.source_format, num_classes=10, name=cfg.kind)
    ledger_path = run_path(cfg, LEDGER_FILE)
    if need_ledger:
        require(ledger_path, 'run inject first')
    ledger = NoiseLedger.load(ledger_path) if os.path.exists(ledger_path) else None
    if ledger is not None:
        dataset = restore_true_labels(dataset, ledger)
    return dataset, ledger


# ============================ commands ============================

def cmd_inject(cfg: RunConfig):
    source = load_source(cfg)
    noised, ledger = inject_noise(source, cfg.noise_rate, cfg.seed)
    artifacts = save_dataset(noised, run_path(cfg, NOISED_DIR))
    ledger.save(run_path(cfg, LEDGER_FILE))
    return artifacts + [run_path(cfg, LEDGER_FILE)]


def cmd_train(cfg: RunConfig):
    dataset, _ = load_noised(cfg)
    result = train(dataset, cfg.architecture(dataset.image_shape), cfg.training())
    checkpoint = run_path(cfg, CHECKPOINT_FILE)
    save_checkpoint(checkpoint, result.model, result.state.epoch, extra=dict(cfg.echo()))
    save_history(result.history, run_path(cfg, HISTORY_FILE))
    return [checkpoint, run_path(cfg, HISTORY_FILE)]


def cmd_detect(cfg: RunConfig):
    checkpoint = require(run_path(cfg, CHECKPOINT_FILE), 'run train first')
    dataset, ledger = load_noised(cfg)
    model, _ = load_checkpoint(checkpoint)
    latents = project(dataset, model, progress=cfg.progress)
    result = detect_and_remove(dataset, latents, min_points=cfg.min_points, eps_mode=cfg.eps_mode,
                               epsilon=cfg.epsilon, window=cfg.window, threads=cfg.threads)
    artifacts = write_cleaned(dataset, result, run_path(cfg, CLEANED_DIR), ledger)

    items = [('eps_mode', result.eps_mode), ('removed', result.removed.size), ('retained', len(result.retained))]
    for label, detection in sorted(result.per_class.items()):
        items += [(f'class.{label}.name', get_label_name(cfg.kind, label)),
                  (f'class.{label}.epsilon', detection.epsilon),
                  (f'class.{label}.removed', detection.outliers.size),
                  (f'class.{label}.skipped', int(detection.skipped)),
                  (f'class.{label}.flat_curve', int(detection.flat_curve))]
    write_key_values(run_path(cfg, DETECTION_FILE), items)

    exporter = PlotDataExporter(run_path(cfg, PLOTS_DIR))
    artifacts += [exporter.latent_scatter(latents, ledger)]
    artifacts += exporter.kdistance_curves(result) + exporter.cluster_assignments(result)
    return artifacts + [run_path(cfg, DETECTION_FILE)]


def _read_baselines(path):
    if not os.path.exists(path):
        return {}
    baselines = {}
    for key, text in read_key_values(path).items():
        name, metric = key.split('.', 1)
        baselines.setdefault(name, {})[metric] = int(text) if metric == 'changed' else float(text)
    return baselines


def trained_config(cfg: RunConfig) -> dict:
    """Config echo the checkpoint was trained with, clustering settings of this command, paths left out."""
    checkpoint = require(run_path(cfg, CHECKPOINT_FILE), 'run train first')
    _, header = load_parameters(checkpoint)
    values = dict(cfg.echo(paths=False))
    values.update((k, v) for k, v in header.get('config', {}).items() if k not in PATH_FIELDS)
    values.update((k, format_value(getattr(cfg, k))) for k in CLUSTERING_FIELDS)
    return values


def cmd_evaluate(cfg: RunConfig):
    dataset, ledger = load_noised(cfg, need_ledger=True)
    manifest = require(run_path(cfg, CLEANED_DIR, 'removal_manifest.csv'), 'run detect first')
    result = load_detection(dataset, manifest, eps_mode=cfg.eps_mode, min_points=cfg.min_points)
    mean_psnr = None
    if os.path.exists(run_path(cfg, HISTORY_FILE)):
        history = pd.read_csv(run_path(cfg, HISTORY_FILE))
        if len(history):
            mean_psnr = float(history['mean_psnr'].iloc[-1])
    trained = trained_config(cfg)
    report = evaluate(dataset, result, ledger, mean_psnr=mean_psnr, kl_formula=trained['kl_formula'],
                      config=trained, baselines=_read_baselines(run_path(cfg, BASELINE_FILE)))
    report.save(run_path(cfg, REPORT_FILE))
    logging.info(f'retained accuracy={round(report.retained_accuracy, 4)} .. P={round(report.performance, 4)}')
    return [run_path(cfg, REPORT_FILE)]


def cmd_baseline(cfg: RunConfig):
    dataset, ledger = load_noised(cfg)
    reps = select_representatives(dataset, cfg.fraction, cfg.seed)
    outputs = {'knn': knn_relabel(dataset, reps, cfg.k),
               'eigen': eigen_relabel(dataset, reps, cfg.n_components, cfg.k)}
    artifacts, items = [], []
    for name, relabeled in outputs.items():
        artifacts += write_relabeled(dataset, relabeled, run_path(cfg, f'baseline_{name}'))
        if ledger is not None:
            items += [(f'{name}.{metric}', value) for metric, value in relabel_scores(relabeled, dataset).items()]
    if ledger is None:
        logging.warning('no ledger in the run directory: baseline accuracy against the truth is not computed')
    else:
        write_key_values(run_path(cfg, BASELINE_FILE), items)
        artifacts.append(run_path(cfg, BASELINE_FILE))
    return artifacts


def cmd_sweep(cfg: RunConfig):
    dataset, _ = load_noised(cfg, need_ledger=True)
    records = psnr_accuracy_sweep(dataset, cfg.architecture(dataset.image_shape), cfg.budgets, cfg.training(),
                                  min_points=cfg.min_points, eps_mode=cfg.eps_mode, epsilon=cfg.epsilon,
                                  window=cfg.window, threads=cfg.threads)
    path = PlotDataExporter(run_path(cfg, PLOTS_DIR)).sweep(records)
    write_key_values(run_path(cfg, SWEEP_SUMMARY_FILE), [('budgets', list(cfg.budgets)),
                                                         ('spearman', sweep_correlation(records))])
    return [path, run_path(cfg, SWEEP_SUMMARY_FILE)]


def cmd_report(cfg: RunConfig, run_dirs=()):
    if not run_dirs:
        raise ArgumentError('report needs at least one run directory')
    reports = [EvaluationReport.load(require(os.path.join(d, REPORT_FILE), 'run evaluate first')) for d in run_dirs]
    summary = aggregate_reports(reports)
    os.makedirs(cfg.run_dir, exist_ok=True)
    path = run_path(cfg, SUMMARY_FILE)
    try:
        summary.to_csv(path)
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    logging.info(f'summary of {len(reports)} run(s): {path}')
    return [path]


HANDLERS = {
    'inject': cmd_inject, 'train': cmd_train, 'detect': cmd_detect, 'evaluate': cmd_evaluate,
    'baseline': cmd_baseline, 'sweep': cmd_sweep,
}


# ============================ argument parsing ============================

def parse_args(argv=None):
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--config', type=str, help='key=value configuration file, overridden by flags')
    common.add_argument('--run_dir', type=str, help='directory receiving every artifact of the run')
    common.add_argument('--kind', type=str, choices=DATASET_KINDS, help='dataset kind')
    common.add_argument('--data_dir', type=str, help=f'directory of the source files (default ${DATA_DIR_ENV})')
    common.add_argument('--images', type=str, help='IDX images file')
    common.add_argument('--labels', type=str, help='IDX labels file')
    common.add_argument('--batches', type=str, help='comma separated CIFAR-10 batch files')
    common.add_argument('--seed', type=int, help='rng seed (mandatory)')
    common.add_argument('--subset', type=int, help='stratified desk-scale subset size')
    common.add_argument('--threads', type=int, help='worker cap for torch and per-class clustering')
    common.add_argument('--no_progress', dest='progress', action='store_false', help='hide tqdm bars')

    model = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    model.add_argument('--latent_dim', type=int, help='latent dimension d')
    model.add_argument('--beta_kl', type=float, help='weight of the KL term')
    model.add_argument('--kl_formula', type=str, choices=KL_FORMULAS)
    model.add_argument('--epochs', type=int, help='num of training epochs')
    model.add_argument('--batch_size', type=int, help='training batch size')
    model.add_argument('--lr', type=float, help='learning rate')
    model.add_argument('--l1', type=float, help='L1 kernel regularization')
    model.add_argument('--l2', type=float, help='L2 kernel regularization')
    model.add_argument('--tensorboard', action='store_true', help='tensorboard scalars & image grids')

    clustering = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    clustering.add_argument('--min_points', type=int, help='DBSCAN minPts, also k of the k-distance curve')
    clustering.add_argument('--eps_mode', type=str, choices=EPS_MODES)
    clustering.add_argument('--epsilon', type=float, help='epsilon for --eps_mode fixed')
    clustering.add_argument('--window', type=int, help='k-distance smoothing window')

    parser = argparse.ArgumentParser(description='label-noise detection with a convolutional autoencoder')
    sub = parser.add_subparsers(dest='command', required=True)
    inject = sub.add_parser('inject', parents=[common], help='flip labels & write the noised dataset + ledger')
    inject.add_argument('--rate', dest='noise_rate', type=float, default=argparse.SUPPRESS, help='noise rate')
    sub.add_parser('train', parents=[common, model], help='train the autoencoder on the noised images')
    sub.add_parser('detect', parents=[common, clustering], help='per-class outlier removal in latent space')
    sub.add_parser('evaluate', parents=[common, model, clustering], help='jaccard, P & retained accuracy')
    baseline = sub.add_parser('baseline', parents=[common], help='KNN & eigenspace relabeling baselines')
    baseline.add_argument('--fraction', type=float, default=argparse.SUPPRESS, help='representative fraction')
    baseline.add_argument('--k', type=int, default=argparse.SUPPRESS, help='K of the majority vote')
    baseline.add_argument('--n_components', type=int, default=argparse.SUPPRESS, help='eigenvectors kept')
    sweep = sub.add_parser('sweep', parents=[common, model, clustering], help='PSNR vs accuracy over epoch budgets')
    sweep.add_argument('--budgets', type=str, default=argparse.SUPPRESS, help='comma separated epoch budgets')
    report = sub.add_parser('report', parents=[common], help='mean/min/max over several evaluated runs')
    report.add_argument('runs', nargs='+', help='evaluated run directories')
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    command = args.command
    try:
        cfg = build_config(args)
        cfg.validate(command)
        setup_logging(cfg.run_dir, log_name=f'run_{command}.log')
        if cfg.seed is not None:
            seed_everything(cfg.seed)
        torch.set_num_threads(cfg.threads)
        logging.info(f'===== {command} .. run_dir={cfg.run_dir} .. seed={cfg.seed} =====')
        if command == 'report':
            artifacts = cmd_report(cfg, args.runs)
        else:
            artifacts = HANDLERS[command](cfg)
        write_manifest(cfg, command, artifacts)
    except TrainingDivergedError as e:
        logging.error(str(e))
        return EXIT_DIVERGED
    except OSError as e:
        logging.error(str(e))
        return EXIT_IO
    except LabelCleanError as e:
        logging.error(str(e))
        return EXIT_INVALID
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
