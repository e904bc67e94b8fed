"""Append-only JSON-lines store of trial state transitions."""

from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass, field

from ..errors import FormatError

STATUSES = ("proposed", "running", "done", "failed")


@dataclass
class Trial:
    id: int
    point: list[float]  # unit-cube coordinates
    values: dict  # denormalised named values
    status: str = "proposed"
    loss: float | None = None
    seed: int = 0
    wall_time: float = 0.0
    started: float | None = None
    finished: float | None = None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def finished_ok(self) -> bool:
        return self.status == "done"

    @property
    def consumed(self) -> bool:
        """Counts against the budget."""
        return self.status in ("done", "failed")

    def to_json(self) -> str:
        d = {
            "id": self.id, "status": self.status, "point": list(self.point),
            "values": self.values, "loss": _encode_loss(self.loss), "seed": self.seed,
            "wall_time": self.wall_time, "started": self.started, "finished": self.finished,
        }
        if self.error is not None:
            d["error"] = self.error
        if self.extra:
            d["extra"] = self.extra
        return json.dumps(d, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "Trial":
        d = json.loads(text)
        if not isinstance(d, dict):
            raise ValueError("record is not an object")
        status = d["status"]
        if status not in STATUSES:
            raise ValueError(f"unknown status {status!r}")
        loss = _decode_loss(d.get("loss"))
        if status == "done" and (loss is None or not math.isfinite(loss)):
            raise ValueError("done trial without a finite loss")
        return cls(int(d["id"]), [float(v) for v in d["point"]], dict(d["values"]), status, loss,
                   int(d.get("seed", 0)), float(d.get("wall_time", 0.0)), d.get("started"),
                   d.get("finished"), d.get("error"), dict(d.get("extra", {})))


def _encode_loss(loss):
    if loss is None:
        return None
    if math.isinf(loss):
        return "inf"
    return float(loss)


def _decode_loss(v):
    if v is None:
        return None
    if v == "inf":
        return math.inf
    return float(v)


class TrialStore:
    """Line-delimited trial log; the latest line for an id is its state."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._lock = threading.Lock()

    def append(self, trial: Trial) -> None:
        line = trial.to_json() + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    def records(self) -> list[Trial]:
        """Every line in file order."""
        if not os.path.exists(self.path):
            return []
        out = []
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                if not line.endswith("\n"):
                    raise FormatError(f"{self.path}: incomplete last record on line {lineno}", lineno)
                try:
                    out.append(Trial.from_json(line))
                except (ValueError, KeyError, TypeError) as exc:
                    raise FormatError(f"{self.path}: malformed record on line {lineno}: {exc}", lineno) from None
        return out

    def load(self) -> list[Trial]:
        """Current state of every trial, ordered by id."""
        latest: dict[int, Trial] = {}
        for t in self.records():
            latest[t.id] = t
        return [latest[k] for k in sorted(latest)]


def trial_store_append(store: TrialStore, trial: Trial) -> None:
    store.append(trial)


def trial_store_load(store: TrialStore) -> list[Trial]:
    return store.load()
