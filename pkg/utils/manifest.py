"""
Artifact bookkeeping for pipeline stages.

Each stage writes `manifests/<stage>[__<variant>].json` recording its config
hash, seed, input and output hashes and wall time, and registers its outputs
in `manifests/index.json`. Inputs are verified against the index before a
stage runs.
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from . import __version__
from .codec_helpers import read_json, write_json

logger = logging.getLogger(__name__)


class MissingArtifactError(FileNotFoundError):
    pass


class ArtifactIntegrityError(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


@dataclass
class RunManifest:
    stage: str
    variant: str
    config_hash: str
    seed: int
    tool_version: str
    wall_time: float
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    extra: Dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return manifest_name(self.stage, self.variant)


def manifest_name(stage: str, variant: str = "") -> str:
    return f"{stage}__{variant}" if variant else stage


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class ArtifactStore:
    def __init__(self, root: str):
        self.root = os.path.abspath(root)
        os.makedirs(os.path.join(self.root, "manifests"), exist_ok=True)

    def path(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    @property
    def index_path(self) -> str:
        return self.path("manifests/index.json")

    def index(self) -> Dict[str, Dict[str, str]]:
        if not os.path.exists(self.index_path):
            return {}
        return read_json(self.index_path)

    def manifest_path(self, name: str) -> str:
        return self.path(f"manifests/{name}.json")

    def has_manifest(self, name: str) -> bool:
        return os.path.exists(self.manifest_path(name))

    def load_manifest(self, name: str) -> RunManifest:
        if not self.has_manifest(name):
            raise MissingArtifactError(f"No manifest named {name!r} under {self.root}")
        return RunManifest(**read_json(self.manifest_path(name)))

    def list_manifests(self) -> List[str]:
        folder = self.path("manifests")
        return sorted(f[:-5] for f in os.listdir(folder) if f.endswith(".json") and f != "index.json")

    def require_stage(self, name: str, hint: str) -> None:
        if not self.has_manifest(name):
            raise StageOrderError(f"Stage output {name!r} is missing; run `{hint}` first")

    def verify_inputs(self, inputs: Sequence[str]) -> Dict[str, str]:
        """Hash every input, checking existence and the recorded hash; returns path -> sha256."""
        index = self.index()
        hashes = {}
        for relative in inputs:
            full = self.path(relative)
            if not os.path.exists(full):
                producer = index.get(relative, {}).get("manifest", "the stage that produces it")
                raise MissingArtifactError(f"Missing input artifact {relative} (expected from {producer})")
            digest = sha256_file(full)
            recorded = index.get(relative, {}).get("sha256")
            if recorded is not None and recorded != digest:
                raise ArtifactIntegrityError(
                    f"Hash mismatch for {relative}: manifest {index[relative]['manifest']} recorded {recorded[:12]}, "
                    f"file has {digest[:12]}"
                )
            hashes[relative] = digest
        return hashes

    def write_manifest(self, manifest: RunManifest, outputs: Sequence[str]) -> RunManifest:
        index = self.index()
        name = manifest.name
        for relative in outputs:
            full = self.path(relative)
            if not os.path.exists(full):
                raise MissingArtifactError(f"Stage {name} declared output {relative} but did not write it")
            owner = index.get(relative, {}).get("manifest")
            if owner is not None and owner != name:
                raise ArtifactIntegrityError(f"Artifact {relative} is already owned by manifest {owner}")
            manifest.outputs[relative] = sha256_file(full)
            index[relative] = {"manifest": name, "sha256": manifest.outputs[relative]}
        manifest.tool_version = manifest.tool_version or __version__
        write_json(self.manifest_path(name), asdict(manifest))
        write_json(self.index_path, index)
        logger.info(f"Wrote manifest {name} with {len(outputs)} outputs")
        return manifest

    def trace(self, relative: str) -> List[str]:
        """Manifests on the provenance chain of an artifact, nearest first."""
        index = self.index()
        chain: List[str] = []
        pending = [relative]
        while pending:
            current = pending.pop()
            owner: Optional[str] = index.get(current, {}).get("manifest")
            if owner is None or owner in chain:
                continue
            chain.append(owner)
            pending.extend(self.load_manifest(owner).inputs)
        return chain
