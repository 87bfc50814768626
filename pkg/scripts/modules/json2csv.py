#!/usr/bin/env python
"""Functions to flatten JSON-structured records into csv.

    Usage:
        1. navigate to the repository root
        2. `python -m scripts.modules.json2csv <zoo dir> [csv path]`
"""

import csv
import math
import os
import sys

from scripts.modules.errors import StorageError
from scripts.modules.zooStore import ZooManifest


def flatten_record(record):
    """Expand list values into indexed columns, e.g. per_class_f1_0."""
    row = {}
    for key, value in record.items():
        if type(value) in [list, tuple]:
            for i, item in enumerate(value):
                row['%s_%i' % (key, i)] = item
        elif type(value) is dict:
            for sub_key, item in value.items():
                row['%s_%s' % (key, sub_key)] = item
        else:
            row[key] = value
    return row


def _format(value):
    if type(value) is float:
        if math.isnan(value):
            return 'nan'
        return repr(value)
    return value


def records2csv(records, csv_path, fieldnames=None):
    """Write records as csv with a header row.

    Args:
        records: list of dicts
        csv_path: str output file
        fieldnames: optional column order; default is first-seen order

    Returns:
        csv_path
    """
    rows = [flatten_record(r) for r in records]
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)

    try:
        with open(csv_path, 'w', newline='', encoding='utf-8') as csvfile:
            writer = csv.DictWriter(csvfile, fieldnames=fieldnames,
                                    extrasaction='ignore')
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format(v) for k, v in row.items()})
    except IOError as err:
        raise StorageError('could not write %s: %s' % (csv_path, err))
    return csv_path


def manifest2csv(zoo_dir, csv_path=None):
    """Write one csv row per (model, epoch) of the zoo in zoo_dir."""
    manifest = ZooManifest.load(zoo_dir)
    csv_path = csv_path or os.path.join(zoo_dir, '%s.csv' % manifest.name)
    return records2csv(manifest.records(), csv_path)


def read_csv(csv_path):
    """Read a csv written by records2csv back into a list of dicts."""
    try:
        with open(csv_path, 'r', newline='', encoding='utf-8') as csvfile:
            return [dict(row) for row in csv.DictReader(csvfile)]
    except IOError as err:
        raise StorageError('could not read %s: %s' % (csv_path, err))


if __name__ == "__main__":

    if len(sys.argv) in [2, 3]:
        zoo_dir = sys.argv[1]
        if os.path.isdir(zoo_dir):
            path = manifest2csv(zoo_dir, *sys.argv[2:])
            print('Saved csv to:\n %s' % path)
        else:
            print('%s is not a valid directory.' % zoo_dir)
    else:
        print('Usage: python -m scripts.modules.json2csv <zoo dir> [csv path]')
        print('   ex. python -m scripts.modules.json2csv zoos/ts')
