"""Newline-delimited JSON metrics, one self-describing record per line."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable

AUX_TERMS = ("sparsity", "diversity", "correlation", "stability", "distill")


class MetricsError(RuntimeError):
    pass


def _clean(value):
    # JSON has no NaN/inf; keep lines parseable by strict readers
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item") and callable(value.item):
        return _clean(value.item())
    return value


def encode(record: dict) -> str:
    return json.dumps(_clean(record), sort_keys=True, ensure_ascii=False, allow_nan=False)


class MetricsWriter:
    """Append-only writer; each record is flushed so a crash keeps a valid prefix."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a" if append else "w", encoding="utf-8", newline="\n")
        except OSError as e:
            raise MetricsError(f"cannot open metrics file {self.path}: {e.strerror}") from None
        self.count = 0

    def write(self, record: dict) -> None:
        try:
            self._fh.write(encode(record) + "\n")
            self._fh.flush()
        except OSError as e:
            raise MetricsError(f"writing {self.path} failed after {self.count} records: {e.strerror}") from None
        self.count += 1

    __call__ = write

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit_metrics(records: Iterable[dict], path: str | Path) -> Path:
    with MetricsWriter(path) as w:
        for r in records:
            w.write(r)
    return Path(path)


def read_metrics(path: str | Path) -> list[dict]:
    """Parse every complete line; a torn final line (no newline) is ignored."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    out = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise MetricsError(f"{path}: line {i + 1} is not a valid record") from None
    return out


def check_additivity(record: dict, tol: float = 1e-10) -> bool:
    w = record.get("loss_weights", {})
    total = record["task"] + sum(w.get(k, 0.0) * (record.get(k) or 0.0) for k in AUX_TERMS)
    return abs(total - record["total"]) <= tol * max(1.0, abs(record["total"]))
