"""Dataset directory format and loader.

A dataset directory holds ``manifest.json`` plus an ``images/`` folder of
float image files: per (view, phase) a training projection, a vessel-only
projection and a 2D vessel mask.  The manifest records the acquisition
geometry (poses in degrees and millimeters), detector spec, phase count,
scene scale and the phantom parameters used for synthesis.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import io
from .geometry import CArmPose, DetectorGrid, SceneBounds

__all__ = ["AngioDataset", "write_manifest", "MANIFEST_VERSION"]

MANIFEST_VERSION = 1


def write_manifest(path, *, n_phases, detector: DetectorGrid, poses, world_scale_mm, phantom_info, images):
    manifest = {
        "format_version": MANIFEST_VERSION,
        "n_phases": n_phases,
        "world_scale_mm": world_scale_mm,
        "detector": {
            "width_px": detector.width_px,
            "height_px": detector.height_px,
            "pixel_pitch_mm": detector.pixel_pitch_mm,
        },
        "poses": [
            {
                "primary_angle_deg": p.primary_angle_deg,
                "secondary_angle_deg": p.secondary_angle_deg,
                "source_to_isocenter_mm": p.source_to_isocenter_mm,
                "source_to_detector_mm": p.source_to_detector_mm,
            }
            for p in poses
        ],
        "phantom": phantom_info,
        "images": images,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


class AngioDataset:
    """Per-view, per-phase projection images with geometry manifest.

    Images are loaded lazily and cached; :meth:`validate` checks that
    every referenced file exists and matches the detector spec.
    """

    def __init__(self, root):
        self.root = str(root)
        manifest_path = os.path.join(self.root, "manifest.json")
        with open(manifest_path) as f:
            self.manifest = json.load(f)
        if self.manifest.get("format_version") != MANIFEST_VERSION:
            raise io.FormatError(
                f"unsupported manifest version {self.manifest.get('format_version')!r}"
            )
        det = self.manifest["detector"]
        self.detector = DetectorGrid(det["width_px"], det["height_px"], det["pixel_pitch_mm"])
        self.bounds = SceneBounds(world_scale_mm=self.manifest["world_scale_mm"])
        self.poses = [
            CArmPose(
                p["primary_angle_deg"],
                p["secondary_angle_deg"],
                p["source_to_isocenter_mm"],
                p["source_to_detector_mm"],
            )
            for p in self.manifest["poses"]
        ]
        self.n_phases = int(self.manifest["n_phases"])
        self._index = {
            (entry["view"], entry["phase"]): entry for entry in self.manifest["images"]
        }
        self._cache: dict[tuple, np.ndarray] = {}

    @property
    def n_views(self) -> int:
        return len(self.poses)

    def _load(self, view, phase, kind):
        key = (view, phase, kind)
        if key not in self._cache:
            entry = self._index[(view, phase)]
            img = io.read_image(os.path.join(self.root, entry[kind]))
            if img.shape != (self.detector.height_px, self.detector.width_px):
                raise io.FormatError(
                    f"image for view {view} phase {phase} has shape {img.shape}, "
                    f"detector says {(self.detector.height_px, self.detector.width_px)}"
                )
            self._cache[key] = img
        return self._cache[key]

    def image(self, view: int, phase: int) -> np.ndarray:
        """Training projection (full scene) in (0, 1]."""
        return self._load(view, phase, "image")

    def vessel_image(self, view: int, phase: int) -> np.ndarray:
        """Vessel-only projection (ground truth for Dice targets)."""
        return self._load(view, phase, "vessel")

    def vessel_mask(self, view: int, phase: int) -> np.ndarray:
        """Binary 2D vessel mask."""
        return self._load(view, phase, "mask") > 0.5

    def validate(self):
        """Check file presence and image dimensions for every entry."""
        for (view, phase), entry in sorted(self._index.items()):
            for kind in ("image", "vessel", "mask"):
                path = os.path.join(self.root, entry[kind])
                if not os.path.exists(path):
                    raise FileNotFoundError(f"dataset references missing file {path}")
                self._load(view, phase, kind)
        return self
