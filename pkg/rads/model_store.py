"""Durable storage of trained models, one JSON document per (vm, metric, mode).

Layout: ``<root>/<vm_id>/<metric>.model.json`` for avg/sd models and
``<root>/<vm_id>/<metric>.<mode>.model.json`` for the comparison modes. Each
write goes to a temporary file in the same directory, is fsynced and renamed
over the target, so readers always see either the previous or the new
document. The replaced document is kept next to it as ``.bak``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import stat
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from rads.errors import IntegrityError, ModelNotFoundError, StorageError
from rads.occ import OccModel
from rads.timeseries import Metric
from rads.wtsa import FeatureMode

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelKey:
    vm_id: str
    metric: Metric
    mode: FeatureMode

    def __post_init__(self) -> None:
        if not self.vm_id or "/" in self.vm_id or "\\" in self.vm_id or self.vm_id in (".", ".."):
            raise StorageError(f"vm id {self.vm_id!r} cannot be used as a directory name")


@dataclass(frozen=True)
class ModelRecord:
    key: ModelKey
    model: OccModel
    state: dict[str, Any] = field(default_factory=dict)
    created_at: float = 0.0
    version: int = 0


def _checksum(document: dict[str, Any]) -> str:
    body = {k: v for k, v in document.items() if k != "checksum"}
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ModelStore:
    """Filesystem model store. One writer per key, any number of readers."""

    def __init__(self, root: Path):
        self.root = Path(root)

    def path_for(self, key: ModelKey) -> Path:
        if key.mode is FeatureMode.AVG_SD:
            return self.root / key.vm_id / f"{key.metric.value}.model.json"
        return self.root / key.vm_id / f"{key.metric.value}.{key.mode.value}.model.json"

    def _read_document(self, path: Path) -> dict[str, Any]:
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise IntegrityError(f"{path} is not valid JSON (truncated?): {e}") from e
        except OSError as e:
            raise StorageError(f"cannot read {path} ({type(e).__name__}): {e}") from e
        if not isinstance(document, dict) or document.get("checksum") != _checksum(document):
            raise IntegrityError(f"{path} failed its checksum")
        return document

    def _current_version(self, path: Path) -> int:
        for candidate in (path, path.with_suffix(".json.bak")):
            if not candidate.exists():
                continue
            try:
                return int(self._read_document(candidate)["version"])
            except (IntegrityError, KeyError, ValueError) as e:
                logger.warning(f"ignoring unreadable model document {candidate}: {e}")
        return 0

    def save_model(self, record: ModelRecord) -> int:
        """Write the record as the next version for its key and return that version.

        Raises:
            StorageError: If the document cannot be written.
        """
        target = self.path_for(record.key)
        version = self._current_version(target) + 1
        model = record.model.to_dict()
        document: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "vm_id": record.key.vm_id,
            "metric": record.key.metric.value,
            "mode": record.key.mode.value,
            "version": version,
            "created_at": record.created_at,
            "seed": record.model.rng_seed,
            "threshold": record.model.threshold,
            "prior": record.model.target_prior,
            "bounds": model["bounds"],
            "model": model,
            "state": record.state,
        }
        document["checksum"] = _checksum(document)

        tmp_path: Path | None = None
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            # Write to a temporary file first, then rename over the target
            with tempfile.NamedTemporaryFile(
                mode="w",
                encoding="utf-8",
                dir=target.parent,
                prefix=f".{target.name}.",
                suffix=".tmp",
                delete=False,
            ) as tmp:
                json.dump(document, tmp, indent=2, sort_keys=True)
                tmp.write("\n")
                tmp_path = Path(tmp.name)
                tmp.flush()
                os.fsync(tmp.fileno())
            os.chmod(tmp_path, stat.S_IRUSR | stat.S_IWUSR | stat.S_IRGRP | stat.S_IROTH)
            if target.exists():
                shutil.copy2(target, target.with_suffix(".json.bak"))
            os.replace(tmp_path, target)
        except OSError as e:
            if tmp_path is not None and tmp_path.exists():
                tmp_path.unlink()
            raise StorageError(f"saving {target} failed ({type(e).__name__}): {e}") from e

        logger.info(f"saved {record.key.vm_id}/{record.key.metric} ({record.key.mode}) model v{version} to {target}")
        return version

    def load_model(self, key: ModelKey) -> ModelRecord | None:
        """Latest record for key, or None when nothing is stored for it.

        Raises:
            IntegrityError: If the stored document is truncated or tampered with.
        """
        path = self.path_for(key)
        if not path.exists():
            return None
        document = self._read_document(path)
        if document.get("mode") != key.mode.value:
            logger.debug(f"{path} holds a {document.get('mode')} model, not {key.mode}")
            return None
        try:
            return ModelRecord(
                key=key,
                model=OccModel.from_dict(document["model"]),
                state=document.get("state", {}),
                created_at=float(document["created_at"]),
                version=int(document["version"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise IntegrityError(f"{path} is missing fields ({type(e).__name__}): {e}") from e

    def require(self, key: ModelKey) -> ModelRecord:
        record = self.load_model(key)
        if record is None:
            raise ModelNotFoundError(f"no {key.mode} model stored for {key.vm_id}/{key.metric} under {self.root}")
        return record
