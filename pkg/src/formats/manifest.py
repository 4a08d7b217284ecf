"""Run manifests.

Every command that writes files also writes manifest.json next to them: the
command, its fully resolved configuration, the seed, package versions, wall
clock and the output paths. The file is replaced atomically so a reader never
sees a half-written manifest.
"""

from __future__ import annotations

import json
import logging
import os
import platform
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from src.config import MANIFEST_NAME, VERSION

logger = logging.getLogger(__name__)

_TRACKED_PACKAGES = ("numpy", "scipy", "pandas")


def package_versions() -> dict[str, str]:
    versions = {"spikelab": VERSION, "python": platform.python_version()}
    for name in _TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


@dataclass(slots=True)
class RunManifest:
    command: str
    config: dict
    seed: int | None
    versions: dict[str, str] = field(default_factory=package_versions)
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    wall_clock_seconds: float = 0.0
    outputs: list[str] = field(default_factory=list)

    def to_document(self) -> dict:
        return asdict(self)

    @classmethod
    def from_document(cls, doc: dict) -> RunManifest:
        return cls(**doc)


def write_atomic(path: Path, text: str) -> None:
    """Write `text` to a temp file in the same directory, then rename over `path`."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(manifest: RunManifest, out_dir: str | Path) -> Path:
    path = Path(out_dir) / MANIFEST_NAME
    write_atomic(path, json.dumps(manifest.to_document(), indent=2, default=str))
    logger.info("wrote %s", path)
    return path


def read_manifest(path: str | Path) -> RunManifest:
    return RunManifest.from_document(json.loads(Path(path).read_text()))
