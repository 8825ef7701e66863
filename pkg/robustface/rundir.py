"""
Run directory: persisted config, JSON Lines epoch log, epoch checkpoints and
an index of artifact digests used to compare runs.
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .checkpoint import Checkpoint, save_checkpoint
from .errors import RunLockedError

logger = logging.getLogger(__name__)

LOCK_FILENAME = ".lock"
INDEX_FILENAME = "run_index.json"
CONFIG_FILENAME = "config.json"
LOG_FILENAME = "log.jsonl"
TIMING_FIELDS = ("wall_ms",)


def compute_file_hash(file_path: Path, strip_fields=()) -> str:
    """
    sha256 of a file. With ``strip_fields`` the file is read as JSON Lines and
    hashed with those keys removed from every record.
    """
    hasher = hashlib.sha256()
    if strip_fields:
        with open(file_path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                record = {k: v for k, v in json.loads(line).items() if k not in strip_fields}
                hasher.update(json.dumps(record, sort_keys=True).encode("utf-8"))
                hasher.update(b"\n")
        return hasher.hexdigest()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(4096), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:05d}.ckpt"


def load_index(run_dir: Path) -> dict:
    """Load run_index.json if present, else a blank structure."""
    index_path = Path(run_dir) / INDEX_FILENAME
    if index_path.exists():
        try:
            with open(index_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (json.JSONDecodeError, IOError):
            logger.warning("ignoring unreadable %s", index_path)
    return {"files": {}}


def save_index(run_dir: Path, index_data: dict) -> None:
    with open(Path(run_dir) / INDEX_FILENAME, "w", encoding="utf-8") as f:
        json.dump(index_data, f, indent=2, sort_keys=True)


class RunDirectory:
    """
    Owns one run directory for the duration of a training command.

    Entering takes the ``.lock`` sentinel (exclusive create); leaving removes
    it and refreshes ``run_index.json``.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._locked = False

    def __enter__(self) -> "RunDirectory":
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / LOCK_FILENAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"run directory {self.path} is in use (remove {lock} if it is stale)") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._locked = True
        return self

    def __exit__(self, *exc) -> None:
        try:
            self.write_index()
        finally:
            if self._locked:
                (self.path / LOCK_FILENAME).unlink(missing_ok=True)
                self._locked = False

    @property
    def log_path(self) -> Path:
        return self.path / LOG_FILENAME

    def write_config(self, config: Dict[str, Any]) -> Path:
        target = self.path / CONFIG_FILENAME
        with open(target, "w", encoding="utf-8") as f:
            json.dump(config, f, indent=2, sort_keys=True)
            f.write("\n")
        return target

    def reset_log(self, keep_epochs: Optional[int] = None) -> None:
        """Truncate the log, or keep only records with ``epoch <= keep_epochs`` when resuming."""
        if keep_epochs is None or not self.log_path.exists():
            self.log_path.write_text("", encoding="utf-8")
            return
        kept = [
            line for line in self.log_path.read_text(encoding="utf-8").splitlines()
            if line.strip() and json.loads(line)["epoch"] <= keep_epochs
        ]
        self.log_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")

    def append_log(self, record: Dict[str, Any]) -> None:
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def write_checkpoint(self, ckpt: Checkpoint) -> Path:
        return save_checkpoint(ckpt, self.path / checkpoint_name(ckpt.epoch))

    def write_index(self) -> dict:
        """Recompute the digest of every artifact; timing fields are excluded from the log digest."""
        index = load_index(self.path)
        files = {}
        for artifact in sorted(self.path.iterdir()):
            if artifact.name in (INDEX_FILENAME, LOCK_FILENAME) or not artifact.is_file():
                continue
            if artifact.name.endswith(".tmp"):
                continue
            strip = TIMING_FIELDS if artifact.name == LOG_FILENAME else ()
            files[artifact.name] = {"sha256": compute_file_hash(artifact, strip)}
        removed = sorted(set(index["files"]) - set(files))
        if removed:
            logger.debug("dropped from run index: %s", removed)
        index["files"] = files
        save_index(self.path, index)
        return index
