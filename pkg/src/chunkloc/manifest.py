"""Run manifests: config snapshot, input/output digests and stage timings.

Reruns with identical manifest inputs must reproduce identical output digests;
a resumed stage whose recorded inputs changed fails with a digest mismatch.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path


class ManifestError(RuntimeError):
    pass


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        if self.path.exists():
            self.data = json.loads(self.path.read_text(encoding="utf-8"))
        else:
            self.data = {"stages": {}}

    def record_stage(self, stage: str, config: dict, inputs: list, outputs: list, seconds: float) -> None:
        self.data["stages"][stage] = {
            "config": config,
            "inputs": {str(p): file_digest(p) for p in inputs},
            "outputs": {str(p): file_digest(p) for p in outputs},
            "seconds": round(seconds, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def verify_inputs(self, stage: str, inputs: list) -> None:
        """On resume, recorded input digests must match the current files."""
        recorded = self.data["stages"].get(stage)
        if recorded is None:
            return
        for path in inputs:
            old = recorded["inputs"].get(str(path))
            if old is not None and old != file_digest(path):
                raise ManifestError(f"digest mismatch on resume for {path} (stage {stage})")

    def stage_outputs_fresh(self, stage: str) -> bool:
        recorded = self.data["stages"].get(stage)
        if recorded is None:
            return False
        try:
            return all(
                file_digest(path) == digest for path, digest in recorded["outputs"].items()
            )
        except FileNotFoundError:
            return False


class StageTimer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        return False
