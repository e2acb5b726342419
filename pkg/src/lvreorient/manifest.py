"""Dataset manifests: JSON lists of cases with ground-truth parameters.

Each entry records a transaxial volume path, optionally the matching
short-axis volume, the rigid parameters that reorient transaxial to
short-axis, and for augmented entries the index of the source case. Paths are
stored relative to the manifest file so a dataset directory can be moved.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .transform import RigidParams


@dataclass(frozen=True)
class ManifestEntry:
    transaxial_path: str
    params: RigidParams
    sa_path: str | None = None
    source_case: int | None = None

    def to_json_dict(self) -> dict:
        obj = {"transaxial_path": self.transaxial_path, "params": self.params.to_json_dict()}
        if self.sa_path is not None:
            obj["sa_path"] = self.sa_path
        if self.source_case is not None:
            obj["source_case"] = self.source_case
        return obj

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ManifestEntry":
        return cls(
            transaxial_path=obj["transaxial_path"],
            params=RigidParams.from_json_dict(obj["params"]),
            sa_path=obj.get("sa_path"),
            source_case=obj.get("source_case"),
        )


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: str = "."

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def abspath(self, rel_path: str) -> str:
        return os.path.normpath(os.path.join(self.base_dir, rel_path))

    def transaxial_path(self, index: int) -> str:
        return self.abspath(self.entries[index].transaxial_path)

    def sa_path(self, index: int) -> str | None:
        rel = self.entries[index].sa_path
        return None if rel is None else self.abspath(rel)


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    """Write entries as a JSON list; byte-stable for identical content."""
    payload = [entry.to_json_dict() for entry in manifest.entries]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_manifest(path: str) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, list):
        raise ValueError(f"manifest {path} must be a JSON list")
    entries = [ManifestEntry.from_json_dict(obj) for obj in payload]
    return DatasetManifest(entries=entries, base_dir=os.path.dirname(os.path.abspath(path)))
