"""Content-addressed artifact store backing the CLI (part of the cli layer)."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile


def hash_path(path: str) -> str:
    """sha256 over a file, or over a directory's sorted (relpath, bytes) stream."""
    h = hashlib.sha256()
    if os.path.isfile(path):
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        return h.hexdigest()
    for base, _, files in sorted(os.walk(path)):
        for name in sorted(files):
            full = os.path.join(base, name)
            h.update(os.path.relpath(full, path).encode())
            with open(full, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    h.update(chunk)
    return h.hexdigest()


def hash_strings(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode())
        h.update(b"\x00")
    return h.hexdigest()


class ArtifactStore:
    """Index of produced artifacts: id -> {kind, hash, path, parents, input_hash}.

    Parent links must reference registered artifacts, keeping the index a DAG.
    Index updates are atomic (write-temp-then-rename). The root comes from the
    MODSPLIT_HOME environment variable unless given explicitly.
    """

    def __init__(self, root: str | None = None):
        self.root = root or os.environ.get("MODSPLIT_HOME") or os.path.join(os.getcwd(), "modsplit-store")
        os.makedirs(self.root, exist_ok=True)
        self.index_path = os.path.join(self.root, "index.json")

    def _load(self) -> dict:
        if not os.path.exists(self.index_path):
            return {}
        with open(self.index_path) as f:
            return json.load(f)

    def _write(self, index: dict) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            json.dump(index, f, indent=2, sort_keys=True)
        os.replace(tmp, self.index_path)

    def register(self, kind: str, path: str, parents=(), input_hash: str | None = None) -> str:
        index = self._load()
        for p in parents:
            if p not in index:
                raise ValueError(f"unknown parent artifact {p!r}")
        payload_hash = hash_path(path)
        artifact_id = f"{kind}-{payload_hash[:12]}"
        index[artifact_id] = {
            "kind": kind,
            "hash": payload_hash,
            "path": os.path.abspath(path),
            "parents": list(parents),
            "input_hash": input_hash,
        }
        self._write(index)
        return artifact_id

    def get(self, artifact_id: str) -> dict:
        index = self._load()
        if artifact_id not in index:
            raise KeyError(f"unknown artifact {artifact_id!r}")
        return index[artifact_id]

    def entries(self) -> dict:
        return self._load()

    def find_by_input(self, kind: str, input_hash: str) -> str | None:
        """Existing artifact produced from the same inputs, if its payload still matches."""
        for artifact_id, entry in self._load().items():
            if entry["kind"] == kind and entry.get("input_hash") == input_hash:
                if os.path.exists(entry["path"]) and hash_path(entry["path"]) == entry["hash"]:
                    return artifact_id
        return None

    def verify(self) -> list[str]:
        """Artifact ids whose recorded hash no longer matches the payload."""
        bad = []
        for artifact_id, entry in self._load().items():
            if not os.path.exists(entry["path"]) or hash_path(entry["path"]) != entry["hash"]:
                bad.append(artifact_id)
        return bad
