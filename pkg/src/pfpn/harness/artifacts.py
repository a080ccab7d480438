"""CSV schemas for run artifacts. UTF-8, LF line endings, header row always written."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

METRICS_COLUMNS = (
    "iteration", "env_steps", "mean_train_reward", "mean_eval_reward", "policy_loss",
    "value_loss", "clip_fraction", "entropy", "dead_particle_count", "resample_events",
)
PARTICLES_COLUMNS = ("iteration", "dimension", "particle", "mu", "xi", "mean_weight")
EVENTS_COLUMNS = ("iteration", "dimension", "dead", "target", "old_bias", "new_bias")
EVAL_COLUMNS = ("episode", "return", "length")
DENSITY_COLUMNS = ("bin_center", "density")
VARIANCE_COLUMNS = ("n", "variance", "discrete_variance", "samples", "seed")


def _fmt(value):
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    return value


class CsvLog:
    """Append-only CSV file with a fixed column set."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = tuple(columns)
        self._fh = open(self.path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)

    def write(self, row: dict):
        self._writer.writerow([_fmt(row[c]) for c in self.columns])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, columns, rows):
    with CsvLog(path, columns) as log:
        for row in rows:
            log.write(row)


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
