"""Common raw-output container and its CSV schema."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Trace:
    """Uniformly sampled simulator output.

    channels holds one array per recorded quantity (voltage, rate, ...);
    stimulus is the injected input on the same grid. `bad` marks diverged or
    non-finite runs: their values are data for the guard classifier, not an
    error. `summary` carries exact full-resolution statistics when the stored
    arrays are subsampled.
    """

    dt: float
    channels: dict[str, np.ndarray]
    stimulus: np.ndarray
    bad: bool = False
    summary: dict[str, float] = field(default_factory=dict)

    @property
    def n_steps(self):
        return len(self.stimulus)

    @property
    def times(self):
        return np.arange(self.n_steps) * self.dt

    def channel(self, name):
        return self.channels[name]


def write_trace_csv(path, trace):
    """Write time, channels, stimulus columns at full float precision."""
    names = list(trace.channels)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + names + ["stimulus"])
        times = trace.times
        cols = [trace.channels[n] for n in names]
        for i in range(trace.n_steps):
            writer.writerow(
                [repr(float(times[i]))]
                + [repr(float(c[i])) for c in cols]
                + [repr(float(trace.stimulus[i]))]
            )
    return path


def read_trace_csv(path):
    """Read the schema written by write_trace_csv; infers dt from the grid."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    if header[0] != "time" or header[-1] != "stimulus":
        raise ValueError(f"{path}: expected time,...,stimulus columns")
    times = rows[:, 0]
    dt = float(times[1] - times[0]) if len(times) > 1 else 1.0
    channels = {name: rows[:, i + 1] for i, name in enumerate(header[1:-1])}
    trace = Trace(dt=dt, channels=channels, stimulus=rows[:, -1])
    trace.bad = not all(np.all(np.isfinite(c)) for c in channels.values())
    return trace
