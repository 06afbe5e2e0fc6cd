"""Append-only JSON Lines cache of narration results, content-hashed per line."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import ContractError, CorruptionError, NotFoundError


@dataclass
class CacheRecord:
    sample_id: str
    step: int
    narrative: str
    descriptions: list[str]
    evaluator_log: list[dict]
    rounds_used: int
    pipeline_version: str
    fallback: bool = False
    content_hash: str = field(default="")

    def _payload(self) -> dict:
        d = asdict(self)
        d.pop("content_hash")
        return d

    def compute_hash(self) -> str:
        blob = json.dumps(self._payload(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def sealed(self) -> "CacheRecord":
        self.content_hash = self.compute_hash()
        return self

    def to_line(self) -> str:
        if not self.content_hash:
            self.sealed()
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "CacheRecord":
        try:
            rec = cls(**json.loads(line))
        except (TypeError, ValueError) as exc:
            raise CorruptionError(f"unreadable cache line: {exc}") from exc
        if rec.compute_hash() != rec.content_hash:
            raise CorruptionError(f"content hash mismatch for ({rec.sample_id}, {rec.step})")
        return rec


class NarrationCache:
    """In-memory index over one JSONL file; writes append, reads verify hashes.

    With ``path=None`` the cache lives in memory only.
    """

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._index: dict[tuple[str, int], CacheRecord] = {}
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = CacheRecord.from_line(line)
                        self._index[(rec.sample_id, rec.step)] = rec

    def __contains__(self, key: tuple[str, int]) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._index)

    def get(self, sample_id: str, step: int = 0) -> CacheRecord:
        try:
            return self._index[(sample_id, step)]
        except KeyError:
            raise NotFoundError(f"no cached narrative for ({sample_id!r}, {step})") from None

    def put(self, record: CacheRecord) -> bool:
        """Append ``record``; returns False when an identical record already exists."""
        record.sealed()
        key = (record.sample_id, record.step)
        existing = self._index.get(key)
        if existing is not None:
            if existing.content_hash == record.content_hash:
                return False
            raise ContractError(f"cache already holds a different record for {key}")
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(record.to_line() + "\n")
        self._index[key] = record
        return True


def cache_put(path: str | Path, record: CacheRecord) -> bool:
    return NarrationCache(path).put(record)


def cache_get(path: str | Path, sample_id: str, step: int = 0) -> CacheRecord:
    return NarrationCache(path).get(sample_id, step)
