"""Structured run logging and provenance manifests.

Log lines are single JSON objects; they go to stderr unless a sink file is
installed.  A RunManifest is written next to every CLI output so a run can be
traced back to its command, config, inputs, and code version.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO

from . import __version__

_sink: IO[str] | None = None


def set_log_sink(sink: IO[str] | None) -> None:
    """Redirect log_event output; None restores stderr."""
    global _sink
    _sink = sink


def log_event(event: str, **fields) -> None:
    payload = {"ts": round(time.time(), 3), "event": event}
    payload.update(fields)
    stream = _sink if _sink is not None else sys.stderr
    stream.write(json.dumps(payload, ensure_ascii=False, sort_keys=True) + "\n")
    stream.flush()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None = None
    version: str = __version__
    started_at: float = 0.0
    finished_at: float = 0.0
    input_digests: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, ensure_ascii=False, sort_keys=True, indent=2)
            f.write("\n")
        return path


def build_manifest(
    command: str,
    argv: list[str],
    config: dict,
    seed: int | None = None,
    inputs: list | None = None,
    outputs: list | None = None,
    started_at: float | None = None,
) -> RunManifest:
    digests = {}
    for p in inputs or []:
        p = Path(p)
        if p.is_file():
            digests[str(p)] = sha256_file(p)
    return RunManifest(
        command=command,
        argv=list(argv),
        config=config,
        seed=seed,
        started_at=started_at if started_at is not None else time.time(),
        finished_at=time.time(),
        input_digests=digests,
        outputs=[str(o) for o in outputs or []],
    )
