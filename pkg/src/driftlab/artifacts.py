"""Experiment outputs: batch/trajectory/report files and the sink that
writes and checksums them.

All floats are written with 17 significant digits so identical runs give
identical bytes.  Every file goes through one ArtifactSink, which holds a
lock so grid points finishing on different threads cannot interleave
writes or reorder the artifact list."""

import csv
import json
import logging
import os
import threading
from dataclasses import dataclass

from .diffusion import SampleBatch, Trajectory
from .errors import DriftlabError
from .stats import Stats
from .util import fmt_float, file_checksum
from .driftlab_logger import Logger

logger = logging.getLogger(__name__)
#logger.level = logging.DEBUG
LOGGER = Logger()

ARTIFACT_KINDS = ('batch', 'trajectory', 'report', 'checkpoint')
REPORT_HEADER = ('delta', 'l1', 'l1_se', 'is_argmin')

def _write_csv(f, header, rows):
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(header)
    writer.writerows(rows)

def write_batch_csv(f, batch: SampleBatch):
    """Columns: sample_id, dim_0..dim_{d-1}, cond."""
    header = ['sample_id'] + [f'dim_{d}' for d in range(batch.dim)] + ['cond']
    rows = ([i] + [fmt_float(v) for v in row] + [int(c)]
            for i, (row, c) in enumerate(zip(batch.data, batch.condition)))
    _write_csv(f, header, rows)

def write_trajectory_csv(f, traj: Trajectory):
    """Columns: t, mean, std, then the per-channel means ch_0.."""
    dim = traj.per_channel_mean.shape[1]
    header = ['t', 'mean', 'std'] + [f'ch_{d}' for d in range(dim)]
    rows = ([int(t), fmt_float(m), fmt_float(sd)] + [fmt_float(v) for v in ch]
            for t, m, sd, ch in zip(traj.steps, traj.per_step_mean,
                                    traj.per_step_std, traj.per_channel_mean))
    _write_csv(f, header, rows)

def write_trajectory_jsonl(f, traj: Trajectory):
    """One JSON object per step, then a final terminal-statistics line."""
    for t, m, sd, ch in zip(traj.steps, traj.per_step_mean,
                            traj.per_step_std, traj.per_channel_mean):
        # floats go through fmt_float and back so the text is stable
        f.write(json.dumps({'t': int(t), 'mean': float(fmt_float(m)),
                            'std': float(fmt_float(sd)),
                            'channel_mean': [float(fmt_float(v)) for v in ch]},
                           sort_keys=True) + '\n')
    f.write(json.dumps({'terminal': {k: float(fmt_float(v)) for k, v in
                                     traj.terminal_latent_stats.items()}},
                       sort_keys=True) + '\n')

def write_rows_csv(f, header, rows: list):
    """Rows as dicts keyed by header names."""
    _write_csv(f, header, ([row[k] for k in header] for row in rows))

def write_json(f, obj):
    json.dump(obj, f, sort_keys=True, indent=1)
    f.write('\n')

def read_batch_csv(path: str) -> SampleBatch:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader)
        dims = [i for i, name in enumerate(header) if name.startswith('dim_')]
        data, cond = [], []
        for row in reader:
            data.append([float(row[i]) for i in dims])
            cond.append(int(row[-1]))
    return SampleBatch(data, cond)

def read_rows_csv(path: str) -> list:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))

@dataclass(frozen=True)
class Artifact:
    kind: str
    path: str
    checksum: str

    def to_dict(self) -> dict:
        return {'kind': self.kind, 'path': self.path, 'checksum': self.checksum}

class ArtifactSink:
    """Serialized writer for one run directory.

    Paths recorded in artifacts are relative to out_dir.  cleanup() removes
    everything this sink wrote, for failed runs."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.artifacts: list = []
        self._extra: list = []
        self._lock = threading.Lock()
        os.makedirs(out_dir, exist_ok=True)

    def write(self, kind: str, name: str, writer, obj, record: bool = True) -> str:
        """Write obj with writer(f, obj) to out_dir/name and record it."""
        assert kind in ARTIFACT_KINDS or not record, f"unknown artifact kind {kind}"
        path = os.path.join(self.out_dir, name)
        with self._lock:
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, 'w', encoding='utf-8', newline='') as f:
                writer(f, obj)
            if record:
                self.artifacts.append(Artifact(kind, name, file_checksum(path)))
                Stats.increment("artifacts_written")
            else:
                self._extra.append(name)
        logger.debug("Wrote %s artifact %s", kind, path)
        return path

    def write_checkpoint(self, name: str, save_fn) -> str:
        """save_fn(path) writes the file itself (see training.save_checkpoint)."""
        path = os.path.join(self.out_dir, name)
        with self._lock:
            save_fn(path)
            self.artifacts.append(Artifact('checkpoint', name, file_checksum(path)))
            Stats.increment("artifacts_written")
        return path

    def audit(self) -> None:
        """Every recorded path must exist and still match its checksum."""
        for art in self.artifacts:
            path = os.path.join(self.out_dir, art.path)
            if not os.path.exists(path):
                raise DriftlabError(f"artifact missing: {art.path}")
            if file_checksum(path) != art.checksum:
                raise DriftlabError(f"artifact checksum changed: {art.path}")

    def cleanup(self) -> None:
        with self._lock:
            for name in [a.path for a in self.artifacts] + self._extra:
                try:
                    os.remove(os.path.join(self.out_dir, name))
                except FileNotFoundError:
                    pass
            logger.warning("Removed %d partial outputs from %s",
                           len(self.artifacts) + len(self._extra), self.out_dir)
            self.artifacts.clear()
            self._extra.clear()
