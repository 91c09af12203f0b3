"""Hash-chained, append-only record of committed stage artifacts."""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path
from typing import Any


class ChainError(RuntimeError):
    """A committed stage record is missing, altered or out of order."""


def canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=True, allow_nan=True) + "\n"


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def audit_entry(event: str, allowed: bool, timestamps: bool = True, **details: Any) -> dict:
    entry = {"event": event, "allowed": allowed, **details}
    if timestamps:
        entry["time"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    return entry


def append_audit(root: str | os.PathLike, entry: dict) -> None:
    """Append one entry to ``root/audit.log``; usable when the stage log itself cannot be loaded."""
    with open(Path(root) / "audit.log", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


class StageLog:
    """Ordered stage records; each stores the hash of its predecessor.

    With ``root`` set, records live in ``root/stages/NN-<name>.json``, the hash
    of the newest record in ``root/HEAD`` (so edits to the last record are
    caught too) and the audit trail in ``root/audit.log``; otherwise everything
    stays in memory.
    """

    GENESIS = "0" * 64

    def __init__(self, root: str | os.PathLike | None = None, timestamps: bool = True):
        self.root = Path(root) if root is not None else None
        self.timestamps = timestamps
        self.names: list[str] = []
        self.texts: list[str] = []
        self.audit_entries: list[dict] = []
        if self.root is not None:
            self._load()

    # -- persistence --------------------------------------------------------
    def _stage_dir(self) -> Path:
        assert self.root is not None
        return self.root / "stages"

    def _load(self) -> None:
        d = self._stage_dir()
        if not d.exists():
            return
        for p in sorted(d.glob("*.json")):
            _, _, name = p.stem.partition("-")
            self.names.append(name)
            self.texts.append(p.read_text(encoding="utf-8"))
        log = self.root / "audit.log"
        if log.exists():
            for n, line in enumerate(log.read_text(encoding="utf-8").splitlines(), start=1):
                if line.strip():
                    try:
                        self.audit_entries.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise ChainError(f"audit.log line {n} is corrupted") from exc

    # -- chain ----------------------------------------------------------------
    @property
    def head(self) -> str:
        return sha256_text(self.texts[-1]) if self.texts else self.GENESIS

    def has(self, name: str) -> bool:
        return name in self.names

    def get(self, name: str) -> dict:
        try:
            return json.loads(self.texts[self.names.index(name)])["payload"]
        except ValueError:
            raise KeyError(name) from None

    def hash_of(self, name: str) -> str:
        return sha256_text(self.texts[self.names.index(name)])

    def commit(self, name: str, payload: dict[str, Any], artifacts: dict[str, str] | None = None) -> str:
        if self.has(name):
            raise ChainError(f"stage {name!r} is already committed and cannot be rewritten")
        record = {
            "stage": name,
            "index": len(self.names),
            "previous_hash": self.head,
            "payload": payload,
            "artifacts": dict(sorted((artifacts or {}).items())),
        }
        if self.timestamps:
            record["created"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        text = canonical(record)
        if self.root is not None:
            d = self._stage_dir()
            d.mkdir(parents=True, exist_ok=True)
            path = d / f"{len(self.names):02d}-{name}.json"
            with open(path, "x", encoding="utf-8") as fh:
                fh.write(text)
            (self.root / "HEAD").write_text(f"{len(self.names) + 1} {sha256_text(text)}\n", encoding="utf-8")
        self.names.append(name)
        self.texts.append(text)
        return sha256_text(text)

    def verify(self) -> None:
        """Check every predecessor hash and every recorded artifact hash."""
        prev = self.GENESIS
        for i, (name, text) in enumerate(zip(self.names, self.texts)):
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ChainError(f"stage {name!r} is not valid JSON") from exc
            if record.get("previous_hash") != prev or record.get("index") != i or record.get("stage") != name:
                raise ChainError(f"hash chain broken at stage {name!r}")
            if self.root is not None:
                for rel, digest in record.get("artifacts", {}).items():
                    path = self.root / rel
                    if not path.exists():
                        raise ChainError(f"artifact {rel} recorded by stage {name!r} is missing")
                    if sha256_file(path) != digest:
                        raise ChainError(f"artifact {rel} was modified after stage {name!r}")
            prev = sha256_text(text)
        if self.root is not None:
            head = self.root / "HEAD"
            if not head.exists():
                if self.names:
                    raise ChainError("HEAD record is missing")
                return
            count, _, digest = head.read_text(encoding="utf-8").strip().partition(" ")
            if count != str(len(self.names)) or digest != prev:
                raise ChainError("stage records do not match HEAD (a record was edited, added or removed)")

    # -- audit ----------------------------------------------------------------
    def audit(self, event: str, allowed: bool, **details: Any) -> None:
        entry = audit_entry(event, allowed, self.timestamps, **details)
        self.audit_entries.append(entry)
        if self.root is not None:
            append_audit(self.root, entry)

    def violations(self) -> list[dict]:
        return [e for e in self.audit_entries if not e["allowed"]]
