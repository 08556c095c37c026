"""Systemwide statistics tracking, mostly for test and debug purposes."""

import threading

from prometheus_client import Gauge

class Stats:
    samples_generated: int = 0
    reverse_steps: int = 0
    train_steps: int = 0
    grid_points_evaluated: int = 0
    bootstrap_resamples: int = 0
    counterfactuals_generated: int = 0
    artifacts_written: int = 0
    numeric_failures: int = 0

    _lock = threading.Lock()

    @classmethod
    def increment(cl, name: str, k: int = 1):
        """Add k to a counter under the class lock."""
        with cl._lock:
            setattr(cl, name, getattr(cl, name) + k)

    @classmethod
    def reset(cl):
        cl.samples_generated = cl.reverse_steps = 0
        cl.train_steps = cl.grid_points_evaluated = 0
        cl.bootstrap_resamples = cl.counterfactuals_generated = 0
        cl.artifacts_written = cl.numeric_failures = 0

    @classmethod
    def snapshot(cl) -> dict:
        return {name: getattr(cl, name) for name in dir(cl)
                if not name.startswith('_') and isinstance(getattr(cl, name), int)}

    @classmethod
    def register_prom_callbacks(cl):
        """Register a gauge callback for every int member of this class.  This
        will pick up all the stats above automatically."""

        def make_callback(attr_name):
            """Closure to capture the current attribute name in the for loop."""
            return lambda: getattr(Stats, attr_name)

        for name in cl.snapshot():
            d = Gauge('driftlab_stat_' + name, name)
            d.set_function(make_callback(name))
