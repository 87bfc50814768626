#!/usr/bin/env python
"""Module containing the class that aggregates run directories into a report.

A run directory may hold a training history (history.csv), a probe report
(probe_report.csv) and an out-of-distribution table (ood.csv). The report
is one markdown file plus an SVG of validation R2 curves.

Examples:
    python -m scripts.hyperZoo report runs/ts-ed runs/ts-ecd --out reports
"""
import logging
import math
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

from scripts.modules.helperFunctions import setup_logger
from scripts.modules.json2csv import read_csv

HISTORY_FILE = 'history.csv'
PROBE_FILE = 'probe_report.csv'
OOD_FILE = 'ood.csv'
REPORT_NAME = 'report.md'
CURVES_NAME = 'val_r2.svg'
NAN_NOTE = 'n/a values are undefined metrics and are left out of aggregates.'

# Fixed ids and no creation date keep reruns bit-identical
plt.rcParams['svg.hashsalt'] = 'hyperzoo'
SVG_METADATA = {'Date': None}


def _float(value):
    try:
        return float(value)
    except (TypeError, ValueError):
        return float('nan')


def _cell(value, digits=4):
    value = _float(value)
    if math.isnan(value):
        return 'n/a'
    return '%.*f' % (digits, value)


def markdown_table(header, rows):
    lines = ['| %s |' % ' | '.join(header),
             '|%s' % ''.join('---|' for _ in header)]
    lines.extend('| %s |' % ' | '.join(str(c) for c in row) for row in rows)
    return '\n'.join(lines)


def _save_svg(fig, path):
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    return path


def plot_val_curves(histories, path):
    """Line plot of val_r2 per epoch, one line per run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rows in sorted(histories.items()):
        points = [(int(r['epoch']), _float(r['val_r2'])) for r in rows]
        points = [p for p in points if not math.isnan(p[1])]
        if points:
            ax.plot([p[0] for p in points], [p[1] for p in points], label=name)
    ax.set_xlabel('epoch')
    ax.set_ylabel('validation reconstruction R2')
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc='lower right')
    fig.tight_layout()
    return _save_svg(fig, path)


def plot_probe_bars(rows, dir_save, prefix='probe'):
    """One bar chart per task comparing sources; returns written paths.

    Args:
        rows: ProbeReport rows (dicts with source, task, metric, value)
        dir_save: output directory
        prefix: file name prefix, files are <prefix>_<task>.svg
    """
    paths = []
    for task in sorted(set(r['task'] for r in rows)):
        cells = sorted((r['source'], _float(r['value'])) for r in rows
                       if r['task'] == task)
        fig, ax = plt.subplots(figsize=(6, 3.5))
        values = [0.0 if math.isnan(v) else v for _, v in cells]
        bars = ax.bar(range(len(cells)), values, color='tab:blue')
        for bar, (_, v) in zip(bars, cells):
            if math.isnan(v):
                bar.set_hatch('//')
                bar.set_facecolor('white')
        ax.set_xticks(range(len(cells)))
        ax.set_xticklabels([s for s, _ in cells], rotation=30)
        metric = next(r['metric'] for r in rows if r['task'] == task)
        ax.set_ylabel(metric)
        ax.set_title(task)
        fig.tight_layout()
        paths.append(_save_svg(fig, os.path.join(dir_save, '%s_%s.svg'
                                                 % (prefix, task))))
    return paths


class RunReporter(object):
    """Class for collecting CSV outputs of several runs into one report."""

    def __init__(self, run_dirs, dir_save, logger=None, dir_log=None,
                 verbosity=logging.INFO):
        self.run_dirs = list(run_dirs)
        self.dir_save = dir_save

        # Set up logger if not given as arg
        if logger is not None:
            self.logger = logger
        else:
            self.logger = setup_logger('runReporter', dir_log, verbosity)
        self.logger.info('Logging set up for runReporter object')
        self.logger.debug('Exit:__init__')

    def collect(self, filename):
        """Rows of filename per run name for runs that have it."""
        found = {}
        for run_dir in self.run_dirs:
            path = os.path.join(run_dir, filename)
            if os.path.isfile(path):
                found[os.path.basename(os.path.normpath(run_dir))] = \
                    read_csv(path)
        return found

    def historySection(self, histories):
        rows = []
        for name, history in sorted(histories.items()):
            val = [_float(r['val_r2']) for r in history]
            finite = [v for v in val if not math.isnan(v)]
            rows.append([name, len(history), _cell(history[-1]['loss']),
                         _cell(max(finite) if finite else float('nan')),
                         _cell(val[-1] if val else float('nan'))])
        return markdown_table(['run', 'epochs', 'final loss', 'best val R2',
                               'final val R2'], rows)

    def probeSection(self, probes):
        """Tasks as rows, one column per (run, source)."""
        columns = []
        for name, rows in sorted(probes.items()):
            for source in sorted(set(r['source'] for r in rows)):
                columns.append((name, source))
        tasks = sorted(set(r['task'] for rows in probes.values()
                           for r in rows))
        lookup = {(name, r['source'], r['task']): r['value']
                  for name, rows in probes.items() for r in rows}
        header = ['task'] + ['%s %s' % c for c in columns]
        table = [[task] + [_cell(lookup.get((name, source, task)))
                           for name, source in columns] for task in tasks]
        return markdown_table(header, table)

    def oodSection(self, oods):
        rows = []
        for name, table in sorted(oods.items()):
            for r in table:
                rows.append([r['source'], r['target'], r['task'],
                             _cell(r['tau']), _cell(r['r2']),
                             _cell(r['accuracy']), r['n']])
        return markdown_table(['source', 'target', 'task', 'tau', 'R2',
                               'accuracy', 'n'], rows)

    def run(self):
        """Write report.md (and val_r2.svg when histories exist)."""
        self.logger.debug('Entr:run')
        if not os.path.isdir(self.dir_save):
            os.makedirs(self.dir_save)
        lines = ['# Run report', '']
        if not self.run_dirs:
            lines.append('No runs were given; nothing to report.')
        histories = self.collect(HISTORY_FILE)
        probes = self.collect(PROBE_FILE)
        oods = self.collect(OOD_FILE)
        if self.run_dirs and not (histories or probes or oods):
            lines.append('None of the given runs contain CSV outputs.')

        if histories:
            lines += ['## Reconstruction', '', self.historySection(histories),
                      '', '![validation R2](%s)' % CURVES_NAME, '']
            plot_val_curves(histories, os.path.join(self.dir_save,
                                                    CURVES_NAME))
        if probes:
            lines += ['## Linear probes (test split)', '',
                      self.probeSection(probes), '']
        if oods:
            lines += ['## Out-of-distribution transfer', '',
                      self.oodSection(oods), '']
        body = '\n'.join(lines)
        if 'n/a' in body:
            body += '\n\n%s' % NAN_NOTE
        path = os.path.join(self.dir_save, REPORT_NAME)
        with open(path, 'w', encoding='utf-8') as outfile:
            outfile.write(body.rstrip('\n') + '\n')

        self.logger.info('Show:runs=%i' % len(self.run_dirs))
        self.logger.info('Saved report to %s' % path)
        self.logger.debug('Exit:run')
        return path
