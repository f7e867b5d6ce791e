"""Candidate proposal: the interface the search loop talks to.

A generator receives a :class:`ProposalRequest` (parent candidate, rendered
context, spec digest) and returns up to ``n`` :class:`Proposal` objects.
Proposal edits are relative to the parent unless ``absolute`` is set, in
which case they apply to the base artifact directly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fnmatch import fnmatch
from typing import Protocol, Sequence

import numpy as np

from .hypothesis import ArtifactSnapshot, Edit, MaterializationError, apply_edit

logger = logging.getLogger(__name__)

ENV_ENDPOINT = "REFINERY_GENERATOR_URL"
ENV_TOKEN = "REFINERY_GENERATOR_TOKEN"
MAX_PAYLOAD = 64_000
EXCERPT_CHARS = 6_000

OUTPUT_INSTRUCTION = (
    "Respond with JSON only: {\"proposals\": [{\"edits\": [{\"target\": ..., \"kind\": "
    "one of replace_region|insert|delete|set_parameter, \"payload\": ...}], "
    "\"rationale\": \"...\"}]}. Targets use path@start:end for line ranges, "
    "path@line for insertion points, and path#name for parameters."
)


class GeneratorUnavailable(Exception):
    """The proposal service could not be reached; the caller may retry later."""


@dataclass(frozen=True)
class ProposalRequest:
    incumbent_id: str
    incumbent: ArtifactSnapshot
    bundle: str = ""
    spec_digest: str = ""
    n: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def excerpt(self, limit: int = EXCERPT_CHARS) -> str:
        parts = []
        for path in sorted(self.incumbent.files):
            try:
                text = self.incumbent.files[path].decode("utf-8")
            except UnicodeDecodeError:
                continue
            numbered = "".join(f"{i:4d}| {line}\n" for i, line in enumerate(text.splitlines()))
            parts.append(f"--- {path}\n{numbered}")
        return "".join(parts)[:limit]


@dataclass(frozen=True)
class Proposal:
    edits: tuple[Edit, ...]
    rationale: str = ""
    absolute: bool = False

    def __post_init__(self):
        object.__setattr__(self, "edits", tuple(self.edits))


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""


class Generator(Protocol):
    notes: list[str]

    def propose(self, req: ProposalRequest) -> list[Proposal]: ...


def validate_proposal(p: Proposal, base: ArtifactSnapshot,
                      max_payload: int = MAX_PAYLOAD) -> Verdict:
    """Cheap pre-check against the snapshot the edits will be applied to."""
    if not p.edits:
        return Verdict(False, "no edits")
    for e in p.edits:
        size = len(e.payload) if isinstance(e.payload, (str, bytes)) else len(str(e.payload))
        if size > max_payload:
            return Verdict(False, "payload")
    files = dict(base.files)
    try:
        for e in p.edits:
            apply_edit(files, e)
    except MaterializationError:
        return Verdict(False, "target")
    return Verdict(True)


def _content_seed(snapshot: ArtifactSnapshot, seed: int) -> list[int]:
    digest = snapshot.digest()
    return [int(digest[:16], 16), int(seed) & 0xFFFFFFFFFFFFFFFF]


_NUMBER = re.compile(r"(?<![\w.])(-?\d+)(\.\d+)?(?![\w.])")


class MutationGenerator:
    """Deterministic local mutations of the parent's text files.

    Operators: vocabulary token substitution, numeric perturbation, line
    deletion, line duplication, and swapping two lines.
    """

    OPERATORS = ("token", "number", "delete", "duplicate", "swap")

    def __init__(self, vocabulary: Sequence[str] = (), files: Sequence[str] | None = None,
                 operators: Sequence[str] | None = None, max_attempts: int = 50):
        self.vocabulary = list(dict.fromkeys(vocabulary))
        self.files = list(files) if files is not None else None
        self.operators = tuple(operators or self.OPERATORS)
        self.max_attempts = max_attempts
        self.notes: list[str] = []
        if self.vocabulary:
            alts = sorted(self.vocabulary, key=lambda t: (-len(t), t))
            self._token_re = re.compile("|".join(
                rf"\b{re.escape(t)}\b" if re.fullmatch(r"\w+", t) else re.escape(t)
                for t in alts))
        else:
            self._token_re = None

    def _texts(self, snap: ArtifactSnapshot) -> dict[str, list[str]]:
        out = {}
        for path in sorted(snap.files):
            if self.files is not None and not any(fnmatch(path, g) for g in self.files):
                continue
            try:
                out[path] = snap.files[path].decode("utf-8").splitlines()
            except UnicodeDecodeError:
                continue
        return out

    def _mutate(self, op: str, texts: dict[str, list[str]], rng) -> list[Edit] | None:
        paths = [p for p in texts if texts[p]]
        if not paths:
            return None
        path = paths[rng.integers(len(paths))]
        lines = texts[path]
        if op == "token":
            if self._token_re is None:
                return None
            hits = [(i, m) for i, line in enumerate(lines) for m in self._token_re.finditer(line)]
            if not hits:
                return None
            i, m = hits[rng.integers(len(hits))]
            choices = [t for t in self.vocabulary if t != m.group(0)]
            if not choices:
                return None
            new = choices[rng.integers(len(choices))]
            line = lines[i][: m.start()] + new + lines[i][m.end():]
            return [Edit(f"{path}@{i}:{i + 1}", "replace_region", line + "\n")]
        if op == "number":
            hits = [(i, m) for i, line in enumerate(lines) for m in _NUMBER.finditer(line)]
            if not hits:
                return None
            i, m = hits[rng.integers(len(hits))]
            step = int(rng.choice([-2, -1, 1, 2]))
            if m.group(2):
                value = float(m.group(0)) * (1.0 + 0.1 * step)
                text = repr(round(value, 6))
            else:
                text = str(int(m.group(1)) + step)
            line = lines[i][: m.start()] + text + lines[i][m.end():]
            return [Edit(f"{path}@{i}:{i + 1}", "replace_region", line + "\n")]
        if op == "delete":
            i = int(rng.integers(len(lines)))
            return [Edit(f"{path}@{i}:{i + 1}", "delete", "")]
        if op == "duplicate":
            i = int(rng.integers(len(lines)))
            return [Edit(f"{path}@{i + 1}", "insert", lines[i] + "\n")]
        if op == "swap":
            if len(lines) < 2:
                return None
            i, j = sorted(int(x) for x in rng.choice(len(lines), size=2, replace=False))
            if lines[i] == lines[j]:
                return None
            return [Edit(f"{path}@{i}:{i + 1}", "replace_region", lines[j] + "\n"),
                    Edit(f"{path}@{j}:{j + 1}", "replace_region", lines[i] + "\n")]
        raise ValueError(f"unknown operator {op!r}")

    def propose(self, req: ProposalRequest) -> list[Proposal]:
        rng = np.random.default_rng(_content_seed(req.incumbent, req.seed))
        texts = self._texts(req.incumbent)
        seen: set[str] = set()
        out: list[Proposal] = []
        for _ in range(self.max_attempts * req.n):
            if len(out) == req.n:
                break
            op = self.operators[rng.integers(len(self.operators))]
            edits = self._mutate(op, texts, rng)
            if not edits:
                continue
            key = json.dumps([e.to_dict() for e in edits], sort_keys=True)
            if key in seen:
                continue
            seen.add(key)
            out.append(Proposal(tuple(edits), rationale=op))
        return out


def build_prompt(req: ProposalRequest) -> str:
    return "\n\n".join([
        "## Specification\n" + req.spec_digest,
        "## Context\n" + req.bundle,
        f"## Current candidate ({req.incumbent_id[:12]})\n" + req.excerpt(),
        "## Output format\n" + OUTPUT_INSTRUCTION,
    ])


class RemoteGenerator:
    """HTTP client for an external proposal service.

    Each proposal is a separate POST of
    ``{spec_digest, context, incumbent_excerpt, n, seed, prompt}``; the reply
    must be ``{"proposals": [{"edits": [...], "rationale": ...}]}``.
    """

    def __init__(self, endpoint: str | None = None, token: str | None = None,
                 timeout: float = 60.0, max_in_flight: int = 4):
        self.endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
        self.token = token if token is not None else os.environ.get(ENV_TOKEN)
        if not self.endpoint:
            raise ValueError(f"no generator endpoint (set {ENV_ENDPOINT})")
        self.timeout = timeout
        self.max_in_flight = max(1, max_in_flight)
        self.notes: list[str] = []

    def _post(self, doc: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        request = urllib.request.Request(self.endpoint, data=json.dumps(doc).encode(),
                                         headers=headers, method="POST")
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise GeneratorUnavailable(str(exc)) from exc

    def _one(self, req: ProposalRequest, k: int) -> list[Proposal] | GeneratorUnavailable:
        seed = int(hashlib.sha256(f"{req.seed}:{k}".encode()).hexdigest()[:8], 16)
        doc = {"spec_digest": req.spec_digest, "context": req.bundle,
               "incumbent_excerpt": req.excerpt(), "n": 1, "seed": seed,
               "prompt": build_prompt(req)}
        try:
            reply = self._post(doc)
        except GeneratorUnavailable as exc:
            return exc
        except json.JSONDecodeError as exc:
            self.notes.append(f"unparseable reply: {exc}")
            return []
        out = []
        for raw in (reply.get("proposals") or [])[:1] if isinstance(reply, dict) else []:
            try:
                edits = tuple(Edit.from_dict(e) for e in raw["edits"])
                if not edits:
                    raise ValueError("no edits")
                out.append(Proposal(edits, str(raw.get("rationale", ""))))
            except (KeyError, TypeError, ValueError) as exc:
                self.notes.append(f"dropped malformed proposal: {exc!r}")
        return out

    def propose(self, req: ProposalRequest) -> list[Proposal]:
        with ThreadPoolExecutor(max_workers=min(self.max_in_flight, req.n)) as ex:
            results = list(ex.map(lambda k: self._one(req, k), range(req.n)))
        failures = [r for r in results if isinstance(r, GeneratorUnavailable)]
        if len(failures) == len(results):
            raise GeneratorUnavailable(str(failures[0]))
        return [p for r in results if not isinstance(r, GeneratorUnavailable) for p in r]
