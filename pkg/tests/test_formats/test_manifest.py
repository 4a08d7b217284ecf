"""Tests for run manifests."""

import json

from src.config import MANIFEST_NAME
from src.formats.manifest import (
    RunManifest,
    package_versions,
    read_manifest,
    write_atomic,
    write_manifest,
)


class TestVersions:
    def test_tracked_packages(self):
        versions = package_versions()
        assert {"spikelab", "python", "numpy", "scipy", "pandas"} <= set(versions)


class TestWriteAtomic:
    def test_creates_parent(self, tmp_path):
        path = tmp_path / "a" / "b" / "out.json"
        write_atomic(path, "{}\n")
        assert path.read_text() == "{}\n"

    def test_replaces_existing(self, tmp_path):
        path = tmp_path / "out.json"
        path.write_text("old")
        write_atomic(path, "new")
        assert path.read_text() == "new"
        assert [p.name for p in tmp_path.iterdir()] == ["out.json"]


class TestManifest:
    def test_roundtrip(self, tmp_path):
        manifest = RunManifest(
            command="simulate clt",
            config={"p": 20, "n": 40},
            seed=7,
            wall_clock_seconds=1.5,
            outputs=["out/summary.json"],
        )
        path = write_manifest(manifest, tmp_path)
        assert path.name == MANIFEST_NAME
        again = read_manifest(path)
        assert again == manifest

    def test_document_keys(self, tmp_path):
        path = write_manifest(RunManifest(command="phase", config={}, seed=None), tmp_path)
        doc = json.loads(path.read_text())
        assert set(doc) == {"command", "config", "seed", "versions", "started",
                            "wall_clock_seconds", "outputs"}
