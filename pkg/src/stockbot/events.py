"""Event-log serialization: one JSON record per line, a header first.

The same format feeds the replay loader, the acceptance tests, and the
console's live stream, so byte-identical logs mean identical runs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

LOG_SCHEMA_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def encode_event(event: dict) -> str:
    return canonical_json(event)


def write_event_log(path, header: dict, events) -> None:
    head = dict(header)
    head["schema_version"] = LOG_SCHEMA_VERSION
    head["record"] = "header"
    lines = [canonical_json(head)]
    lines.extend(encode_event(e) for e in events)
    Path(path).write_text("\n".join(lines) + "\n")


def read_event_log(path):
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError("empty event log")
    header = json.loads(lines[0])
    if header.get("record") != "header":
        raise ValueError("event log missing header record")
    if header.get("schema_version") != LOG_SCHEMA_VERSION:
        raise ValueError(f"unsupported log schema {header.get('schema_version')}")
    events = [json.loads(line) for line in lines[1:] if line.strip()]
    return header, events
