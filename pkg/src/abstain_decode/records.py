"""Line-delimited JSON files with a header record.

Floats are rounded to 6 decimals and infinities written as the strings
``"inf"`` / ``"-inf"`` so output bytes are stable across runs and platforms.
Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator

FLOAT_DECIMALS = 6


def _clean(obj):
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            raise ValueError("NaN is not serializable")
        return round(obj, FLOAT_DECIMALS) + 0.0  # + 0.0 folds -0.0
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def read_float(value) -> float:
    """Inverse of the float encoding (accepts ``"inf"`` strings)."""
    return float(value)


def dumps(record: dict) -> str:
    return json.dumps(_clean(record), ensure_ascii=False, allow_nan=False)


def config_hash(config: dict) -> str:
    canon = json.dumps(_clean(config), sort_keys=True, ensure_ascii=False, allow_nan=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def header(kind: str, config: dict, seed: int) -> dict:
    return {"type": "header", "kind": kind, "config_hash": config_hash(config), "seed": seed, "config": config}


def write_records(path: str | Path, head: dict | None, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            if head is not None:
                fh.write(dumps(head) + "\n")
            for row in rows:
                fh.write(dumps(row) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def iter_lines(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: malformed record ({exc.msg})") from None


def read_records(path: str | Path) -> tuple[dict | None, list[dict]]:
    """Return ``(header, body)``; header is ``None`` for headerless files."""
    head = None
    body = []
    for obj in iter_lines(path):
        if obj.get("type") == "header" and head is None and not body:
            head = obj
        else:
            body.append(obj)
    return head, body


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
