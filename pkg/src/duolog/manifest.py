"""Run manifests: one JSON record tying a training run's artifacts together.

Input files are fingerprinted by content hash so a manifest can be
re-verified later: fingerprints must recompute to the same values from
the referenced files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError

TOOL_VERSION = "0.1.0"


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    tool_version: str
    train_config: dict
    model_config: dict
    corpus_path: str
    corpus_sha256: str
    vocab_path: str
    vocab_sha256: str
    checkpoint_paths: list[str] = field(default_factory=list)
    loss_log_path: str | None = None
    teacher_path: str | None = None
    teacher_sha256: str | None = None
    metrics: dict | None = None

    @staticmethod
    def build(train_config: dict, model_config: dict, corpus_path: str | Path,
              vocab_path: str | Path, checkpoint_paths: list[str | Path],
              loss_log_path: str | Path | None = None,
              teacher_path: str | Path | None = None,
              metrics: dict | None = None) -> "RunManifest":
        return RunManifest(
            tool_version=TOOL_VERSION,
            train_config=train_config, model_config=model_config,
            corpus_path=str(corpus_path), corpus_sha256=file_sha256(corpus_path),
            vocab_path=str(vocab_path), vocab_sha256=file_sha256(vocab_path),
            checkpoint_paths=[str(p) for p in checkpoint_paths],
            loss_log_path=str(loss_log_path) if loss_log_path else None,
            teacher_path=str(teacher_path) if teacher_path else None,
            teacher_sha256=file_sha256(teacher_path) if teacher_path else None,
            metrics=metrics)

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    def write(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8")

    @staticmethod
    def read(path: str | Path) -> "RunManifest":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            return RunManifest(**raw)
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}: bad manifest: {exc}") from exc

    def verify(self, base: str | Path | None = None) -> list[str]:
        """Recompute fingerprints; a nonempty result lists the mismatches."""
        base = Path(base) if base is not None else Path(".")

        def resolve(p: str) -> Path:
            q = Path(p)
            return q if q.is_absolute() else base / q

        problems = []
        for label, path, expect in (("corpus", self.corpus_path, self.corpus_sha256),
                                    ("vocab", self.vocab_path, self.vocab_sha256),
                                    ("teacher", self.teacher_path, self.teacher_sha256)):
            if path is None:
                continue
            target = resolve(path)
            if not target.exists():
                problems.append(f"{label} file missing: {path}")
            elif file_sha256(target) != expect:
                problems.append(f"{label} fingerprint mismatch: {path}")
        for p in self.checkpoint_paths:
            if not resolve(p).exists():
                problems.append(f"checkpoint missing: {p}")
        return problems


def verify_manifest(path: str | Path) -> list[str]:
    """Verify a manifest file, resolving relative paths beside it."""
    return RunManifest.read(path).verify(Path(path).parent)
