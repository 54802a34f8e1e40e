"""File-backed subject registry.

``<root>/registry.json`` maps each subject id to its list of entry versions;
updates append a new version and never rewrite old ones. Mutations hold
``<root>/.lock``; readers do not lock.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from pathlib import Path

from filelock import FileLock

from .errors import ConfigurationError, GenmarkError

REGISTRY_ENV = "GENMARK_REGISTRY"
REGISTRY_VERSION = 1


class RegistryError(GenmarkError):
    pass


def default_root(flag: str | None = None) -> Path:
    """Flag beats ``GENMARK_REGISTRY`` beats ``./genmark-registry``."""
    return Path(flag or os.environ.get(REGISTRY_ENV) or "genmark-registry")


class Registry:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.path = self.root / "registry.json"
        self._lock = FileLock(str(self.root / ".lock"), timeout=60)

    def _read(self) -> dict:
        if not self.path.is_file():
            return {"version": REGISTRY_VERSION, "subjects": {}, "artifacts": {}}
        doc = json.loads(self.path.read_text())
        if doc.get("version") != REGISTRY_VERSION:
            raise RegistryError(f"unsupported registry version {doc.get('version')} in {self.path}")
        doc.setdefault("artifacts", {})
        return doc

    def _write(self, doc: dict) -> None:
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
        os.replace(tmp, self.path)

    @contextmanager
    def mutate(self):
        self.root.mkdir(parents=True, exist_ok=True)
        with self._lock:
            doc = self._read()
            yield doc
            self._write(doc)

    # ---- subjects

    def subjects(self) -> list[str]:
        return sorted(self._read()["subjects"])

    def history(self, subject_id: str) -> list[dict]:
        return list(self._read()["subjects"].get(subject_id, []))

    def get(self, subject_id: str) -> dict | None:
        hist = self.history(subject_id)
        return dict(hist[-1]) if hist else None

    def require(self, subject_id: str) -> dict:
        entry = self.get(subject_id)
        if entry is None:
            raise RegistryError(f"subject {subject_id!r} is not registered in {self.root}")
        return entry

    def update(self, subject_id: str, **fields) -> dict:
        """Append a new version of the subject's entry with ``fields`` merged in."""
        if not subject_id:
            raise ConfigurationError("subject id must be nonempty")
        with self.mutate() as doc:
            hist = doc["subjects"].setdefault(subject_id, [])
            entry = {**(hist[-1] if hist else {"subject_id": subject_id}), **fields}
            entry["entry_version"] = len(hist) + 1
            hist.append(entry)
        return entry

    # ---- shared artifacts (e.g. the pretrained models)

    def artifact(self, name: str) -> dict | None:
        return self._read()["artifacts"].get(name)

    def set_artifact(self, name: str, value: dict) -> None:
        with self.mutate() as doc:
            doc["artifacts"][name] = value

    def subject_dir(self, subject_id: str) -> Path:
        return self.root / subject_id
