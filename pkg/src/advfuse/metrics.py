"""Per-step metrics records and their CSV serialization.

Floats are written with 17 significant digits so a write/read cycle is exact
for 64-bit values, which is what makes whole-run CSV diffs meaningful.
"""

import csv
from dataclasses import dataclass, fields

from .errors import ContractError

_STAGE_RANK = {"pretrain": 0, "finetune": 1}


@dataclass(frozen=True)
class MetricsRecord:
    stage: str
    epoch: int
    step: int
    split: str
    task: str
    l_std: float
    r_at: float
    r_kl: float
    total: float
    accuracy: float
    delta_norm_img: float
    delta_norm_txt: float
    grad_norm: float
    wall_ms: float


_COLUMNS = [f.name for f in fields(MetricsRecord)]
_INT_COLUMNS = {"epoch", "step"}
_STR_COLUMNS = {"stage", "split", "task"}


def _format(name, value):
    if name in _STR_COLUMNS:
        return str(value)
    if name in _INT_COLUMNS:
        return str(int(value))
    return format(float(value), ".17g")


def write_metrics(records, path):
    """CSV with a fixed header; strictly ordered by (stage, epoch, step)."""
    last = None
    for r in records:
        if r.stage not in _STAGE_RANK:
            raise ContractError(f"unknown stage {r.stage!r}")
        key = (_STAGE_RANK[r.stage], r.epoch, r.step)
        if last is not None and key <= last:
            raise ContractError(f"records not strictly ordered at {key}")
        last = key
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(_COLUMNS) + "\n")
        for r in records:
            fh.write(",".join(_format(n, getattr(r, n)) for n in _COLUMNS) + "\n")


def read_metrics(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _COLUMNS:
            raise ContractError(f"unexpected metrics header in {path}")
        records = []
        for row in reader:
            if len(row) != len(_COLUMNS):
                raise ContractError(f"malformed metrics row in {path}")
            kwargs = {}
            for name, cell in zip(_COLUMNS, row):
                if name in _STR_COLUMNS:
                    kwargs[name] = cell
                elif name in _INT_COLUMNS:
                    kwargs[name] = int(cell)
                else:
                    kwargs[name] = float(cell)
            records.append(MetricsRecord(**kwargs))
    return records
