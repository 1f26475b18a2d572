"""
File-backed checkpoint store for sharded 2-flip searches.
One JSON file per (unit, shard); a restarted search resumes from the
recorded first-flip position with the hits found so far.
"""

import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from config import settings
from models import CheckpointModel, HitModel

logger = logging.getLogger(__name__)


@dataclass
class SearchProgress:
    """Mutable progress of one shard, flushed to disk at most every `interval` seconds."""
    fragment: int
    fragment_sha256: str
    shard: Tuple[int, int]
    start_position: int
    end_position: int
    resume_position: int
    hits: List[HitModel] = field(default_factory=list)
    last_flush: float = field(default_factory=time.monotonic)
    complete: bool = False

    def due(self, interval: float) -> bool:
        return time.monotonic() - self.last_flush >= interval

    def to_model(self) -> CheckpointModel:
        return CheckpointModel(
            fragment=self.fragment,
            fragment_sha256=self.fragment_sha256,
            shard=self.shard,
            resume_position=self.resume_position,
            end_position=self.end_position,
            complete=self.complete,
            hits=list(self.hits),
        )


class CheckpointStore:
    """Thread-safe checkpoint directory. Writes are atomic (temp file + rename)."""

    def __init__(self, directory: Optional[str] = None):
        self.directory = Path(directory or settings.CHECKPOINT_DIR)
        self._lock = threading.Lock()

    def _path(self, fragment: int, shard: Tuple[int, int]) -> Path:
        return self.directory / f"unit-{fragment}-shard-{shard[0]}-of-{shard[1]}.json"

    def get(self, fragment: int, shard: Tuple[int, int], fragment_sha256: str) -> Optional[CheckpointModel]:
        path = self._path(fragment, shard)
        if not path.exists():
            return None
        try:
            checkpoint = CheckpointModel.model_validate_json(path.read_text())
        except (OSError, ValueError) as exc:
            logger.warning(f"[unit {fragment}] unreadable checkpoint {path}: {exc}")
            return None
        if checkpoint.fragment_sha256 != fragment_sha256:
            logger.warning(f"[unit {fragment}] checkpoint {path} belongs to different bytes, ignoring")
            return None
        return checkpoint

    def get_or_create(self, fragment: int, fragment_sha256: str, shard: Tuple[int, int],
                      start: int, end: int) -> SearchProgress:
        checkpoint = self.get(fragment, shard, fragment_sha256)
        if checkpoint is None or checkpoint.end_position != end:
            return SearchProgress(fragment, fragment_sha256, shard, start, end, start)
        logger.info(
            f"[unit {fragment}] [shard {shard[0]}/{shard[1]}] resuming at position "
            f"{checkpoint.resume_position} with {len(checkpoint.hits)} hits"
        )
        return SearchProgress(
            fragment, fragment_sha256, shard, start, end,
            max(start, checkpoint.resume_position),
            hits=list(checkpoint.hits),
            complete=checkpoint.complete,
        )

    def update(self, progress: SearchProgress) -> None:
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            path = self._path(progress.fragment, progress.shard)
            # a resumed chunk can report hits already saved
            progress.hits = list({tuple(h.flips): h for h in progress.hits}.values())
            tmp = path.with_suffix(".tmp")
            tmp.write_text(progress.to_model().model_dump_json())
            os.replace(tmp, path)
            progress.last_flush = time.monotonic()
