"""Candidates as edit sequences over a base artifact.

Locators
--------
An edit's ``target`` names a file and, depending on the edit kind, a
region inside it:

* ``path@a:b``  lines ``a`` (inclusive) to ``b`` (exclusive), 0-based.
  Used by ``replace_region`` and ``delete``.
* ``path@a``    insertion point before line ``a`` (``insert``).
* ``path#name`` the first ``name = value`` assignment line (``set_parameter``).

Payloads for region edits are text; a trailing newline is implied per line.
"""

from __future__ import annotations

import hashlib
import json
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

HASH_ALGORITHM = "sha256"
EDIT_KINDS = ("replace_region", "insert", "delete", "set_parameter")


class MaterializationError(Exception):
    """An edit could not be applied to the evolving snapshot."""


@dataclass(frozen=True)
class Edit:
    target: str
    kind: str
    payload: Any = ""

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise ValueError(f"unknown edit kind {self.kind!r}")

    def to_dict(self) -> dict:
        payload = self.payload
        if isinstance(payload, bytes):
            payload = {"bytes": payload.hex()}
        return {"target": self.target, "kind": self.kind, "payload": payload}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Edit":
        payload = d.get("payload", "")
        if isinstance(payload, dict) and set(payload) == {"bytes"}:
            payload = bytes.fromhex(payload["bytes"])
        return cls(target=str(d["target"]), kind=str(d["kind"]), payload=payload)


def _encode_edits(edits: Sequence[Edit]) -> bytes:
    return json.dumps([e.to_dict() for e in edits], sort_keys=True,
                      separators=(",", ":")).encode()


def candidate_id(base_id: str, edits: Sequence[Edit]) -> str:
    h = hashlib.new(HASH_ALGORITHM)
    h.update(base_id.encode())
    h.update(b"\0")
    h.update(_encode_edits(edits))
    return h.hexdigest()


@dataclass(frozen=True)
class Candidate:
    id: str
    edits: tuple[Edit, ...] = ()
    parent: str | None = None
    birth_iteration: int = 0

    @classmethod
    def create(cls, base_id: str, edits: Sequence[Edit] = (), parent: str | None = None,
               birth_iteration: int = 0) -> "Candidate":
        edits = tuple(edits)
        return cls(candidate_id(base_id, edits), edits, parent, birth_iteration)

    def to_dict(self) -> dict:
        return {"id": self.id, "edits": [e.to_dict() for e in self.edits],
                "parent": self.parent, "birth_iteration": self.birth_iteration}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Candidate":
        return cls(d["id"], tuple(Edit.from_dict(e) for e in d["edits"]), d.get("parent"),
                   int(d.get("birth_iteration", 0)))


@dataclass(frozen=True)
class ArtifactSnapshot:
    files: Mapping[str, bytes] = field(default_factory=dict)
    provenance: str = ""

    def digest(self) -> str:
        """Content hash over paths and bytes (independent of provenance)."""
        h = hashlib.new(HASH_ALGORITHM)
        for path in sorted(self.files):
            data = self.files[path]
            h.update(path.encode())
            h.update(b"\0")
            h.update(len(data).to_bytes(8, "big"))
            h.update(data)
        return h.hexdigest()

    @classmethod
    def from_directory(cls, root: str | Path, provenance: str = "") -> "ArtifactSnapshot":
        root = Path(root)
        files = {}
        for p in sorted(root.rglob("*")):
            if p.is_file() and "__pycache__" not in p.parts:
                files[p.relative_to(root).as_posix()] = p.read_bytes()
        return cls(files, provenance or "")

    def write_to(self, directory: str | Path) -> Path:
        directory = Path(directory)
        if directory.exists():
            shutil.rmtree(directory)
        directory.mkdir(parents=True)
        for rel, data in self.files.items():
            dest = directory / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(data)
        return directory

    def text(self, path: str) -> str:
        return self.files[path].decode("utf-8")


_REGION = re.compile(r"^(?P<path>.+?)@(?P<a>\d+)(?::(?P<b>\d+))?$")
_PARAM = re.compile(r"^(?P<path>.+?)#(?P<name>[A-Za-z_][\w.]*)$")


def parse_target(target: str) -> tuple[str, int | None, int | None, str | None]:
    """Split a locator into (path, start, end, parameter name)."""
    m = _PARAM.match(target)
    if m:
        return m["path"], None, None, m["name"]
    m = _REGION.match(target)
    if m:
        b = m["b"]
        return m["path"], int(m["a"]), int(b) if b is not None else None, None
    return target, None, None, None


def _lines(data: bytes) -> list[str]:
    return data.decode("utf-8").splitlines(keepends=True)


def _payload_lines(payload: Any) -> list[str]:
    if isinstance(payload, bytes):
        payload = payload.decode("utf-8")
    text = str(payload)
    if text == "":
        return []
    if not text.endswith("\n"):
        text += "\n"
    return text.splitlines(keepends=True)


def _format_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, bytes):
        return value.decode("utf-8")
    return str(value)


def apply_edit(files: dict[str, bytes], edit: Edit) -> None:
    path, a, b, name = parse_target(edit.target)
    if path not in files:
        raise MaterializationError(f"{edit.target}: no such file")
    lines = _lines(files[path])
    if edit.kind == "set_parameter":
        if name is None:
            raise MaterializationError(f"{edit.target}: set_parameter needs path#name")
        pat = re.compile(rf"^(\s*{re.escape(name)}\s*[=:]\s*)(.*?)(\s*)$", re.S)
        for i, line in enumerate(lines):
            m = pat.match(line)
            if m:
                lines[i] = m.group(1) + _format_scalar(edit.payload) + m.group(3)
                break
        else:
            raise MaterializationError(f"{edit.target}: parameter not found")
    else:
        if a is None:
            raise MaterializationError(f"{edit.target}: region edit needs path@start[:end]")
        if edit.kind == "insert":
            if b is not None or a > len(lines):
                raise MaterializationError(f"{edit.target}: bad insertion point")
            if lines and a == len(lines) and not lines[-1].endswith("\n"):
                lines[-1] += "\n"
            lines[a:a] = _payload_lines(edit.payload)
        else:
            if b is None or not a <= b <= len(lines):
                raise MaterializationError(f"{edit.target}: region out of range")
            repl = _payload_lines(edit.payload) if edit.kind == "replace_region" else []
            lines[a:b] = repl
    files[path] = "".join(lines).encode("utf-8")


def materialize(base: ArtifactSnapshot, c: Candidate) -> ArtifactSnapshot:
    files = dict(base.files)
    for edit in c.edits:
        apply_edit(files, edit)
    return ArtifactSnapshot(files, c.id)


def workdir_for(root: str | Path, c: Candidate) -> Path:
    """Isolated per-candidate working directory, named by candidate id."""
    return Path(root) / c.id
