"""
Functions for plotting trajectories, loss curves and the efficiency table.

All figures are written as SVG.
"""

import json
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

from utils.potential import DEFAULT_RECT, potential_grid

SERIES_COLOURS = {'Classical': 'dimgray',
                  'Base': 'black',
                  'Transfer': 'dodgerblue'}

BENCH_COLUMNS = {'classical': 'Single-Head (Classical)',
                 'base': 'Multi-Head (Base)',
                 'transfer': 'Single-Head (Transfer)'}

LOSS_LABEL = 'L2 residual'


def _save(fig, path):
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format='svg', bbox_inches='tight')


def clean_axes(ax):
    """Removes top and right spines."""
    ax.spines[['top', 'right']].set_visible(False)


###################################
# Trajectories over the potential
###################################

def plot_trajectories(potential, base_trajectories, transfer_trajectories=(), path=None,
                      bounds=DEFAULT_RECT, n_grid=120, title=None):
    """
    Rays over a colour map of V.

    Base-training rays are black, transfer rays blue. Returns (fig, ax); one
    line per trajectory is added to `ax.lines`.
    """
    xs, ys, values = potential_grid(potential, bounds, n_grid)
    fig, ax = plt.subplots(figsize=(6, 5), dpi=150)

    image = ax.imshow(values, origin='lower', cmap='viridis', aspect='auto',
                      extent=(xs[0], xs[-1], ys[0], ys[-1]))
    fig.colorbar(image, ax=ax, label='V(x, y)')

    for trajectory in transfer_trajectories:
        ax.plot(trajectory.states[:, 0], trajectory.states[:, 1], color=SERIES_COLOURS['Transfer'], lw=0.6)
    for trajectory in base_trajectories:
        ax.plot(trajectory.states[:, 0], trajectory.states[:, 1], color=SERIES_COLOURS['Base'], lw=1.2)

    ax.set_xlim(xs[0], xs[-1])
    ax.set_ylim(ys[0], ys[-1])
    ax.set_xlabel('x')
    ax.set_ylabel('y')
    if title:
        ax.set_title(title, size=10)

    _save(fig, path)
    return fig, ax


###################################
# Loss curves
###################################

def stack_loss_curves(series):
    """
    Long-format frame (Epoch, Series, L2 residual, Run) from
    `{label: [TrainingReport, ...]}`.
    """
    frames = []
    for label, reports in series.items():
        for run, report in enumerate(reports):
            frame = pd.DataFrame({LOSS_LABEL: report.loss_curve})
            frame.index.rename('Epoch', inplace=True)
            frame = frame.reset_index()
            frame['Epoch'] += 1
            frame['Series'] = label
            frame['Run'] = run
            frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=['Epoch', LOSS_LABEL, 'Series', 'Run'])
    return pd.concat(frames, ignore_index=True)


def plot_loss_curves(series, path=None, title=None):
    """
    Log-scale residual vs epoch, one line per series (runs averaged).

    Returns (fig, ax).
    """
    stacked = stack_loss_curves(series)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=150)

    palette = {label: SERIES_COLOURS.get(label, None) for label in series}
    palette = palette if all(palette.values()) else None
    if not stacked.empty:
        sns.lineplot(data=stacked, x='Epoch', y=LOSS_LABEL, hue='Series', ax=ax,
                     palette=palette, errorbar=None)
    ax.set_yscale('log')
    clean_axes(ax)
    if title:
        ax.set_title(title, size=10)

    _save(fig, path)
    return fig, ax


###################################
# Efficiency table
###################################

def bench_table(rates):
    """
    Epochs/sec frame shaped like the efficiency table:
    rows are architectures, columns classical / base / transfer.

    `rates` is {architecture: {'classical': r, 'base': r, 'transfer': r}}.
    """
    frame = pd.DataFrame.from_dict(rates, orient='index')
    frame = frame.reindex(columns=list(BENCH_COLUMNS)).rename(columns=BENCH_COLUMNS)
    frame.index.rename('Epochs per second', inplace=True)
    return frame


def save_bench_table(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(json.loads(frame.to_json(orient='index')), handle, indent=1)
