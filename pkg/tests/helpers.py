import numpy as np

from rads.timeseries import Metric, RawSeries


def make_series(values, *, interval=5.0, start=0.0, vm_id="vm-1", metric=Metric.CPU_PERCENT):
    values = np.asarray(values, dtype=float)
    timestamps = start + np.arange(len(values)) * interval
    return RawSeries(vm_id, metric, timestamps, values, interval)
