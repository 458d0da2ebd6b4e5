"""Run manifests and deterministic output writers.

A manifest captures everything needed to reproduce a run bit-for-bit:
scenario parameters, grid and time discretization, driver counts and every
seed.  Run directories are named by the manifest hash, so identical inputs
collide onto identical outputs and nothing else ever does.  All floats are
serialized with repr (shortest round-trip form) to keep files byte-stable
across reruns.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from . import __version__


@dataclass
class RunManifest:
    scenario: str
    subcommand: str
    parameters: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    dt: float = 0.0
    L: int = 1
    seeds: dict = field(default_factory=dict)
    tool_version: str = __version__

    def canonical_json(self) -> str:
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(t) for k, t in sorted(v.items())}
            if isinstance(v, (list, tuple)):
                return [clean(t) for t in v]
            if isinstance(v, float):
                return repr(float(v))
            if hasattr(v, "item"):
                return repr(v.item())
            return v
        return json.dumps(clean(asdict(self)), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def write(self, directory):
        (directory / "manifest.json").write_text(self.canonical_json() + "\n")


def format_value(v) -> str:
    if isinstance(v, float):
        return repr(float(v))  # numpy scalars subclass float but repr differently
    if hasattr(v, "item"):
        return repr(v.item())
    return str(v)


def write_csv(path, header, rows) -> None:
    """Deterministic CSV: repr-formatted floats, LF endings, no quoting."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_json_report(path, reports, manifest_hash: str) -> None:
    payload = []
    for r in reports:
        d = r.as_dict()
        d["manifest_hash"] = manifest_hash
        payload.append(d)
    path.write_text(json.dumps(payload, sort_keys=True, indent=1,
                               default=format_value) + "\n")
