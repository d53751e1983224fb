"""Workdir layout, stage artifacts, config fingerprints and the lock file.

Every pipeline stage reads only prior-stage artifacts and writes its own
versioned outputs into a fixed subdirectory; a missing input names the
command that produces it.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        self.path = path
        self.producer = producer
        super().__init__(
            f"missing artifact {path}; run `genrec {producer}` first"
        )


class WorkdirLockedError(RuntimeError):
    pass


def fingerprint(payload) -> str:
    """Short stable digest of a JSON-serializable config mapping."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.blake2b(blob, digest_size=6).hexdigest()


class Workdir:
    SUBDIRS = ("corpus", "embeddings", "index", "checkpoints", "reports")

    def __init__(self, root):
        self.root = Path(root)

    def ensure(self) -> "Workdir":
        for sub in self.SUBDIRS:
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        return self

    # Raw inputs (written by synth, or provided by the user).
    @property
    def raw_interactions(self) -> Path:
        return self.root / "corpus" / "raw_interactions.tsv"

    @property
    def raw_items(self) -> Path:
        return self.root / "corpus" / "raw_items.jsonl"

    # Stage outputs.
    @property
    def filtered_interactions(self) -> Path:
        return self.root / "corpus" / "interactions.tsv"

    @property
    def filtered_items(self) -> Path:
        return self.root / "corpus" / "items.jsonl"

    @property
    def splits(self) -> Path:
        return self.root / "corpus" / "splits.jsonl"

    @property
    def semantic_embeddings(self) -> Path:
        return self.root / "embeddings" / "semantic.bin"

    @property
    def behavioral_embeddings(self) -> Path:
        return self.root / "embeddings" / "behavioral.bin"

    @property
    def index_file(self) -> Path:
        return self.root / "index" / "items.jsonl"

    @property
    def vocab_file(self) -> Path:
        return self.root / "index" / "vocab.json"

    @property
    def initial_checkpoint(self) -> Path:
        return self.root / "checkpoints" / "initial.ckpt"

    @property
    def annealed_checkpoint(self) -> Path:
        return self.root / "checkpoints" / "annealed.ckpt"

    @property
    def checkpoints_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, producer)
        return path

    @contextmanager
    def lock(self):
        """One command per workdir: guard with a pid lock file."""
        self.root.mkdir(parents=True, exist_ok=True)
        lock_path = self.root / ".lock"
        if lock_path.exists():
            raise WorkdirLockedError(
                f"workdir {self.root} is locked by {lock_path.read_text().strip()!r}; "
                "remove the .lock file if no other command is running"
            )
        lock_path.write_text(str(os.getpid()), encoding="utf-8")
        try:
            yield self
        finally:
            lock_path.unlink(missing_ok=True)
