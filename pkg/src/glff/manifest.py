"""Line-delimited sample manifests.

Each line is a JSON object with exactly the keys path, label, generator,
protocol, ops (in that order). ``ops`` is an ordered list of
``{"name": ..., "params": {...}}`` entries. Relative paths resolve against
the manifest's directory.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .imaging import list_images

PROTOCOLS = ("unprocessed", "common", "blend(external)", "antiforensics", "multicompress", "mixed")


@dataclass
class SampleRecord:
    path: str
    label: int
    generator: str
    protocol: str = "unprocessed"
    ops: list = field(default_factory=list)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label!r}")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")

    def to_json(self) -> str:
        ops = [{"name": op["name"], "params": op.get("params", {})} for op in self.ops]
        return json.dumps(
            {"path": self.path, "label": self.label, "generator": self.generator,
             "protocol": self.protocol, "ops": ops},
            sort_keys=False, ensure_ascii=False, separators=(",", ":"),
        )


def op(name: str, **params) -> dict:
    return {"name": name, "params": params}


def _portable(path: Path, base: Path) -> str:
    path, base = Path(path).resolve(), base.resolve()
    try:
        return Path(os.path.relpath(path, base)).as_posix()
    except ValueError:
        return path.as_posix()


def write_manifest(records, path):
    """Write records sorted by path; returns the number of lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = sorted(records, key=lambda r: r.path)
    if not records:
        raise ConfigError("refusing to write an empty manifest")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.to_json() + "\n")
    return len(records)


def build_manifest(roots, out_path):
    """roots: iterable of (directory, label, generator, protocol). One line per image."""
    out_path = Path(out_path)
    records = []
    for directory, label, generator, protocol in roots:
        directory = Path(directory)
        if not directory.is_dir():
            raise ConfigError(f"not a directory: {directory}")
        for p in list_images(directory):
            records.append(SampleRecord(_portable(p, out_path.parent), int(label), generator, protocol))
    if not records:
        raise ConfigError("no images found under the given roots")
    write_manifest(records, out_path)
    return records


def read_manifest(path, check_files: bool = True):
    """Parse a manifest; returns records with absolute paths."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = SampleRecord(d["path"], int(d["label"]), d["generator"], d["protocol"], d["ops"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed record ({exc})") from exc
            p = Path(rec.path)
            if not p.is_absolute():
                p = path.parent / p
            if check_files and not p.is_file():
                raise ConfigError(f"{path}:{lineno}: image not found: {rec.path}")
            rec.path = str(p)
            records.append(rec)
    if not records:
        raise ConfigError(f"{path}: manifest is empty")
    return records
