"""CSV and checkpoint persistence."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from ..net import MlpSpec, ParamVector
from ..optimizers import TrainTrace

TRACE_FIELDS = tuple(f.name for f in dataclasses.fields(TrainTrace))


def _as_dict(rec) -> dict:
    if dataclasses.is_dataclass(rec):
        return dataclasses.asdict(rec)
    return dict(rec)


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def emit_csv(records: Iterable, path, fields: Optional[Sequence[str]] = None) -> Path:
    """Write records (dataclasses or dicts) with a header row, in the given order."""
    rows = [_as_dict(r) for r in records]
    if fields is None:
        fields = list(rows[0]) if rows else list(TRACE_FIELDS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in fields])
    return path


def _parse(text: str):
    if text == "":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def read_traces(path) -> list[TrainTrace]:
    out = []
    for row in read_csv(path):
        row["flag"] = row.get("flag") or ""
        out.append(TrainTrace(**{k: row.get(k) for k in TRACE_FIELDS}))
    return out


def save_checkpoint(path, params: ParamVector, **meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = dataclasses.asdict(params.spec)
    with path.open("wb") as fh:
        np.savez(fh, values=params.values, spec=json.dumps(spec), meta=json.dumps(meta))
    return path


def load_checkpoint(path) -> tuple[ParamVector, dict]:
    with np.load(Path(path)) as data:
        spec = MlpSpec(**json.loads(str(data["spec"])))
        meta = json.loads(str(data["meta"]))
        return ParamVector(data["values"], spec), meta
