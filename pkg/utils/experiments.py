"""
Experiment commands behind `main.py`.

Each `cmd_*` takes an `ExperimentSpec`, reads and writes artifacts under
`spec.out_dir` and returns a dict of what it wrote. Artifacts of FFNN and
DEQGAN runs live in separate sub-folders:

    <out>/potential.json                    potential used for base training
    <out>/potential_transfer.json           resampled potential (transfer-potential)
    <out>/<arch>/checkpoint.json            base checkpoint
    <out>/<arch>/checkpoint_<task>.json     base + transfer heads
    <out>/<arch>/reports/...                TrainingReport JSON files
    <out>/<arch>/trajectories/<task>/...    PINN trajectories (CSV)
    <out>/<arch>/eval_<checkpoint>.json     EvalSummary
    <out>/oracle/...                        RK4 trajectories (CSV)
    <out>/plots/...                         SVG figures
    <out>/bench.json                        epochs/sec table

where <arch> is `ffnn` or `deqgan` and <task> is `transfer_ic` or
`transfer_potential`.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import torch

from config.config import expand_ics
from utils.dynamics import InitialCondition, Trajectory, rk4_sweep
from utils.errors import ConfigurationError, InputError, TrainingDivergedError
from utils.metrics import evaluate_heads, pinn_trajectory
from utils.models import ModelConfig, attach_head, freeze_base, init_model, load_checkpoint, save_checkpoint
from utils.plotting import bench_table, plot_loss_curves, plot_trajectories, save_bench_table
from utils.potential import (load_potential, potential_hash, resample_means, sample_potential,
                             save_potential)
from utils.training import (DeqganConfig, TrainingConfig, TrainingReport, deqgan_train, make_epoch,
                            measure_epochs_per_second, train_base, train_classical, transfer_train)

MODES = ('train-base', 'transfer-ic', 'transfer-potential', 'classical',
         'oracle', 'eval', 'plot', 'bench')
TRAINING_MODES = ('train-base', 'transfer-ic', 'transfer-potential', 'classical', 'bench')
TRANSFER_TASKS = {'transfer-ic': 'transfer_ic', 'transfer-potential': 'transfer_potential'}
ARCHITECTURES = {'ffnn': 'FFNN', 'deqgan': 'DEQGAN'}


@dataclass
class ExperimentSpec:
    mode: str
    out_dir: Path
    potential: dict
    model: ModelConfig
    training: TrainingConfig
    deqgan: DeqganConfig
    base_ics: list
    transfer_ics: list
    transfer: dict
    oracle: dict
    eval: dict
    bench: dict
    gan: bool = False
    checkpoint: Path = None

    @property
    def arch(self):
        return 'deqgan' if self.gan else 'ffnn'

    @property
    def run_dir(self):
        return self.out_dir / self.arch

    @property
    def potential_path(self):
        return Path(self.potential['path']) if self.potential.get('path') else self.out_dir / 'potential.json'

    @property
    def checkpoint_path(self):
        return self.checkpoint or self.run_dir / 'checkpoint.json'

    @property
    def transfer_config(self):
        return replace(self.training, epochs=self.transfer['epochs'])


def build_spec(mode, config, seed=None, epochs=None, out=None, gan=None, potential=None, checkpoint=None):
    """ExperimentSpec from a merged config dict plus CLI overrides."""
    if mode not in MODES:
        raise ConfigurationError(f'Unknown mode {mode!r}, expected one of {MODES}')

    potential_cfg = dict(config['potential'])
    model_cfg = dict(config['model'])
    training_cfg = dict(config['training'])
    deqgan_cfg = dict(config['deqgan'])
    transfer_cfg = dict(config['transfer'])

    if seed is not None:
        model_cfg['init_seed'] = training_cfg['seed'] = deqgan_cfg['seed'] = seed
    if epochs is not None:
        training_cfg['epochs'] = transfer_cfg['epochs'] = epochs
    if potential is not None:
        potential_cfg['path'] = potential
    if potential_cfg.get('path') and not Path(potential_cfg['path']).exists():
        raise InputError(f'Potential file {potential_cfg["path"]} does not exist')

    try:
        spec = ExperimentSpec(
            mode=mode,
            out_dir=Path(out or config['out_dir']),
            potential=potential_cfg,
            model=ModelConfig(**model_cfg),
            training=TrainingConfig(**training_cfg),
            deqgan=DeqganConfig(**deqgan_cfg),
            base_ics=expand_ics(config['base_ics']),
            transfer_ics=expand_ics(config['transfer_ics']),
            transfer=transfer_cfg,
            oracle=dict(config['oracle']),
            eval=dict(config['eval']),
            bench=dict(config['bench']),
            gan=bool(config['gan'] if gan is None else gan),
            checkpoint=Path(checkpoint or config['checkpoint']) if (checkpoint or config['checkpoint']) else None)
    except TypeError as err:
        raise ConfigurationError(f'Invalid configuration: {err}') from err

    if mode in TRAINING_MODES and (not spec.base_ics or not spec.transfer_ics):
        raise ConfigurationError('base_ics and transfer_ics must be non-empty for training modes')
    return spec


def _ic_name(y0):
    return f'y0={y0:.4f}'


def _resolve_potential(spec, required=False):
    """Loads the potential file, or samples one from the config when allowed."""
    if spec.potential_path.exists():
        return load_potential(spec.potential_path)
    if required or spec.potential.get('path'):
        raise InputError(f'Potential file {spec.potential_path} does not exist')
    p = spec.potential
    return sample_potential(p['seed'], p['K'], p['A'], p['sigma'],
                            tuple(tuple(side) for side in p['sampling_rect']), p['conventional_exponent'])


def _load_checkpoint(spec):
    if not spec.checkpoint_path.exists():
        raise InputError(f'Checkpoint {spec.checkpoint_path} does not exist')
    return load_checkpoint(spec.checkpoint_path)


def _check_potential(meta, potential):
    stored = meta.get('potential_hash')
    if stored and stored != potential_hash(potential):
        raise InputError('Potential file does not match the potential the checkpoint was trained on')


def _log_dir(spec):
    return str(spec.run_dir / 'log' / 'tensorboard')


def _write_trajectories(net, heads, folder, t_end, n_points):
    times = np.linspace(0.0, t_end, n_points)
    paths = []
    for l in heads:
        path = folder / f'{_ic_name(net.heads[l].y0)}.csv'
        pinn_trajectory(net, l, times).to_csv(path)
        paths.append(path)
    return paths


###################################
# Commands
###################################

def cmd_train_base(spec):
    """Multi-head base training on `base_ics` (FFNN, or DEQGAN with --gan)."""
    potential = _resolve_potential(spec)
    save_potential(potential, spec.out_dir / 'potential.json')
    p_hash = potential_hash(potential)

    net = init_model(spec.model, [InitialCondition(y0) for y0 in spec.base_ics])
    for head in net.heads:
        head.potential_hash = p_hash
    config = replace(spec.training, log_dir=_log_dir(spec))
    report_path = spec.run_dir / 'reports' / 'base.json'

    print(f'Starting base training ({ARCHITECTURES[spec.arch]}, {net.n_heads} heads, K={potential.K})...')
    try:
        if spec.gan:
            report = deqgan_train(net, potential, spec.deqgan, config)
        else:
            report = train_base(net, potential, config)
    except TrainingDivergedError as err:
        if err.report is not None:
            err.report.save(report_path)
        raise

    report.save(report_path)
    save_checkpoint(net, spec.checkpoint_path, potential_hash=p_hash, t_end=config.t_end)
    trajectories = _write_trajectories(net, range(net.n_heads), spec.run_dir / 'trajectories' / 'base',
                                       config.t_end, spec.eval['points'])
    print(f'Final loss: {report.final_loss:.3e} after {report.stopped_epoch} epochs '
          f'({report.epochs_per_second:.2f} epochs/sec)')
    return {'checkpoint': spec.checkpoint_path, 'report': report_path,
            'potential': spec.out_dir / 'potential.json', 'trajectories': trajectories}


def cmd_transfer(spec):
    """Initial Condition Transfer or Potential Transfer on a frozen base."""
    task = TRANSFER_TASKS[spec.mode]
    net, meta = _load_checkpoint(spec)
    potential = _resolve_potential(spec, required=True)
    _check_potential(meta, potential)
    freeze_base(net)

    if spec.mode == 'transfer-potential':
        potential = resample_means(potential, spec.potential['transfer_seed'])
        save_potential(potential, spec.out_dir / 'potential_transfer.json')

    checksum = net.base_checksum()
    print(f'Starting {task} ({ARCHITECTURES[spec.arch]}): {len(spec.transfer_ics)} initial conditions, '
          f'base checksum {checksum[:12]}')
    heads, reports = transfer_train(net, [InitialCondition(y0) for y0 in spec.transfer_ics], potential,
                                    spec.transfer_config, init=spec.transfer['init'],
                                    dconfig=spec.deqgan if spec.gan else None,
                                    workers=spec.transfer['workers'])

    report_paths = []
    for report in reports:
        path = spec.run_dir / 'reports' / task / f'{_ic_name(report.y0)}.json'
        report.save(path)
        report_paths.append(path)
    trajectories = _write_trajectories(net, heads, spec.run_dir / 'trajectories' / task,
                                       spec.training.t_end, spec.eval['points'])
    checkpoint = spec.run_dir / f'checkpoint_{task}.json'
    save_checkpoint(net, checkpoint, potential_hash=potential_hash(potential), t_end=spec.training.t_end)

    diverged = [r.y0 for r in reports if r.error]
    print(f'Base checksum after transfer {net.base_checksum()[:12]}; '
          f'{len(reports) - len(diverged)}/{len(reports)} heads converged without divergence')
    return {'checkpoint': checkpoint, 'reports': report_paths, 'trajectories': trajectories,
            'base_checksum': checksum, 'diverged': diverged}


def cmd_classical(spec):
    """Single-head networks trained from scratch for every transfer IC."""
    potential = _resolve_potential(spec)
    report_paths, diverged = [], []
    for y0 in spec.transfer_ics:
        path = spec.run_dir / 'reports' / 'classical' / f'{_ic_name(y0)}.json'
        try:
            _, report = train_classical(InitialCondition(y0), potential, spec.model, spec.training,
                                        dconfig=spec.deqgan if spec.gan else None)
        except TrainingDivergedError as err:
            report = err.report
            diverged.append(y0)
        report.save(path)
        report_paths.append(path)
    return {'reports': report_paths, 'diverged': diverged}


def cmd_oracle(spec):
    """RK4 trajectories for every base and transfer IC."""
    potential = _resolve_potential(spec, required=True)
    y0s = sorted(set(spec.base_ics) | set(spec.transfer_ics))
    trajectories = rk4_sweep([InitialCondition(y0) for y0 in y0s], potential, spec.training.t_end,
                             spec.oracle['dt'], workers=spec.transfer['workers'])
    paths = []
    for y0, trajectory in zip(y0s, trajectories):
        path = spec.out_dir / 'oracle' / f'{_ic_name(y0)}.csv'
        trajectory.to_csv(path)
        paths.append(path)
    return {'trajectories': paths}


def cmd_eval(spec):
    """Per-head errors against fresh RK4 runs on the evaluation grid."""
    net, meta = _load_checkpoint(spec)
    potential = _resolve_potential(spec, required=True)
    _check_potential(meta, potential)
    p_hash = potential_hash(potential)

    heads = [l for l, head in enumerate(net.heads) if head.potential_hash in ('', p_hash)]
    train_t_end = meta.get('t_end', spec.training.t_end)
    t_end = spec.eval['t_end'] or train_t_end
    summary = evaluate_heads(net, potential, t_end, train_t_end, spec.eval['points'],
                             spec.oracle['dt'], heads=heads)

    path = spec.run_dir / f'eval_{spec.checkpoint_path.stem}.json'
    summary.save(path)
    worst = max((h.max_error for h in summary.heads), default=0.0)
    print(f'Evaluated {len(summary.heads)} heads; worst max error {worst:.3e}')
    return {'summary': path}


def _trajectories_in(folder):
    return [Trajectory.from_csv(path) for path in sorted(folder.glob('*.csv'))]


def _reports_in(folder):
    return [TrainingReport.load(path) for path in sorted(folder.glob('*.json'))]


def cmd_plot(spec):
    """Trajectory figures over the potential and loss-curve figures."""
    plots = spec.out_dir / 'plots'
    archs = [arch for arch in ARCHITECTURES if (spec.out_dir / arch / 'trajectories' / 'base').is_dir()]
    if not archs or not spec.potential_path.exists():
        raise InputError(f'No base trajectories or potential found under {spec.out_dir}')

    base_potential = load_potential(spec.potential_path)
    written = []
    for arch in archs:
        run_dir = spec.out_dir / arch
        base = _trajectories_in(run_dir / 'trajectories' / 'base')
        transfer = _trajectories_in(run_dir / 'trajectories' / 'transfer_ic')
        path = plots / f'trajectories_{arch}_transfer_ic.svg'
        fig, _ = plot_trajectories(base_potential, base, transfer, path, title='Initial Condition Transfer')
        plt.close(fig)
        written.append(path)

        transfer_potential = spec.out_dir / 'potential_transfer.json'
        transfer = _trajectories_in(run_dir / 'trajectories' / 'transfer_potential')
        if transfer and transfer_potential.exists():
            path = plots / f'trajectories_{arch}_transfer_potential.svg'
            fig, _ = plot_trajectories(load_potential(transfer_potential), [], transfer, path,
                                       title='Potential Transfer Learning')
            plt.close(fig)
            written.append(path)

        series = {'Classical': _reports_in(run_dir / 'reports' / 'classical'),
                  'Base': _reports_in(run_dir / 'reports'),
                  'Transfer': _reports_in(run_dir / 'reports' / 'transfer_ic')}
        series = {label: reports for label, reports in series.items() if reports}
        if series:
            path = plots / f'loss_{arch}.svg'
            fig, _ = plot_loss_curves(series, path, title=ARCHITECTURES[arch])
            plt.close(fig)
            written.append(path)
    return {'plots': written}


def cmd_bench(spec):
    """Epochs/sec for classical, base and transfer epochs, FFNN and DEQGAN."""
    if not spec.checkpoint_path.exists():
        raise InputError(f'Checkpoint {spec.checkpoint_path} does not exist')
    potential = _resolve_potential(spec)
    torch.set_num_threads(1)

    ic = InitialCondition(spec.transfer_ics[0])
    config = replace(spec.training, log_dir=None, verbose=False)
    budget = {'min_epochs': spec.bench['min_epochs'], 'min_seconds': spec.bench['min_seconds']}
    rates = {}
    for arch, name in ARCHITECTURES.items():
        dconfig = spec.deqgan if arch == 'deqgan' else None

        classical = init_model(spec.model, [ic])
        base = init_model(spec.model, [InitialCondition(y0) for y0 in spec.base_ics])
        transfer, _ = load_checkpoint(spec.checkpoint_path)
        freeze_base(transfer)
        head = attach_head(transfer, ic)

        rates[name] = {
            'classical': measure_epochs_per_second(
                make_epoch(classical, [0], potential, config, dconfig=dconfig), **budget),
            'base': measure_epochs_per_second(
                make_epoch(base, range(base.n_heads), potential, config, dconfig=dconfig), **budget),
            'transfer': measure_epochs_per_second(
                make_epoch(transfer, [head], potential, config, transfer.head_tensor_names(head), dconfig),
                **budget),
        }
        print(f'{name}: ' + ', '.join(f'{k} {v:.2f}' for k, v in rates[name].items()) + ' epochs/sec')

    table = bench_table(rates)
    path = spec.out_dir / 'bench.json'
    save_bench_table(table, path)
    print(table.to_string(float_format='%.2f'))
    return {'table': path, 'rates': rates}


COMMANDS = {
    'train-base': cmd_train_base,
    'transfer-ic': cmd_transfer,
    'transfer-potential': cmd_transfer,
    'classical': cmd_classical,
    'oracle': cmd_oracle,
    'eval': cmd_eval,
    'plot': cmd_plot,
    'bench': cmd_bench,
}


def run(spec):
    return COMMANDS[spec.mode](spec)
