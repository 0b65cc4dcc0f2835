"""Cone-beam C-arm geometry.

Converts clinical angle pairs (LAO/RAO, cranial/caudal) into source and
detector poses, generates detector-pixel rays through the normalized scene
volume, and places stratified samples along those rays.

Conventions
-----------
The scene lives in a fixed axis-aligned box ``[-1, 1]^3`` of normalized
coordinates; one normalized unit corresponds to ``world_scale_mm``
millimeters.  At the zero pose the source sits on the -Y axis, the
principal ray points along +Y, the detector u axis is +X and the v axis
is +Z.  The primary angle rotates about the patient longitudinal axis
(+Z, LAO positive), the secondary angle about the resulting lateral axis
(cranial positive), applied secondary-after-primary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CArmPose",
    "DetectorGrid",
    "SceneBounds",
    "Frame",
    "Rays",
    "rotation_z",
    "rotation_x",
    "pose_rotation",
    "pose_to_frame",
    "make_rays",
    "sample_rays",
]


@dataclass(frozen=True)
class CArmPose:
    """One C-arm viewpoint in clinical parameterization.

    Angles are in degrees: ``primary_angle_deg`` is LAO positive / RAO
    negative, ``secondary_angle_deg`` cranial positive / caudal negative.
    Distances are in millimeters.
    """

    primary_angle_deg: float
    secondary_angle_deg: float
    source_to_isocenter_mm: float = 750.0
    source_to_detector_mm: float = 1200.0

    def __post_init__(self):
        if not 0.0 < self.source_to_isocenter_mm < self.source_to_detector_mm:
            raise ValueError(
                "need source_to_detector_mm > source_to_isocenter_mm > 0, got "
                f"{self.source_to_detector_mm} / {self.source_to_isocenter_mm}"
            )


@dataclass(frozen=True)
class DetectorGrid:
    """Flat-panel detector: pixel counts and pitch (mm per pixel)."""

    width_px: int = 200
    height_px: int = 200
    pixel_pitch_mm: float = 1.5

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("detector needs at least one pixel per axis")
        if self.pixel_pitch_mm <= 0:
            raise ValueError("pixel_pitch_mm must be positive")


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned scene box, fixed to [-1, 1]^3 in normalized units.

    ``world_scale_mm`` is the physical length of one normalized unit.
    """

    world_scale_mm: float = 64.0

    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.world_scale_mm <= 0:
            raise ValueError("world_scale_mm must be positive")


@dataclass(frozen=True)
class Frame:
    """Orthonormal viewing frame produced by :func:`pose_to_frame`.

    All positions in millimeters, isocenter at the origin.
    """

    source_mm: np.ndarray
    detector_center_mm: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    principal_axis: np.ndarray


@dataclass
class Rays:
    """A bundle of detector-pixel rays in normalized scene units.

    ``origins``/``directions`` have shape (n, 3) with unit directions;
    ``t_near``/``t_far`` are box entry/exit parameters.  Rays that miss
    the scene box have ``hit`` False and t_near == t_far == 0.
    """

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    hit: np.ndarray
    world_scale_mm: float

    def __len__(self):
        return self.origins.shape[0]

    def select(self, idx) -> "Rays":
        return Rays(
            self.origins[idx],
            self.directions[idx],
            self.t_near[idx],
            self.t_far[idx],
            self.hit[idx],
            self.world_scale_mm,
        )


def rotation_z(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_x(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def pose_rotation(pose: CArmPose) -> np.ndarray:
    """Rotation taking the zero-pose frame to this pose's frame.

    Rotating about the body-fixed lateral axis after the primary rotation
    equals ``Rz(primary) @ Rx(secondary)`` in world coordinates.
    """
    return rotation_z(pose.primary_angle_deg) @ rotation_x(pose.secondary_angle_deg)


def pose_to_frame(pose: CArmPose) -> Frame:
    """Source position, detector center and detector axes for a pose."""
    rot = pose_rotation(pose)
    source = rot @ np.array([0.0, -pose.source_to_isocenter_mm, 0.0])
    principal = rot @ np.array([0.0, 1.0, 0.0])
    det_center = source + principal * pose.source_to_detector_mm
    u_axis = rot @ np.array([1.0, 0.0, 0.0])
    v_axis = rot @ np.array([0.0, 0.0, 1.0])
    return Frame(source, det_center, u_axis, v_axis, principal)


def _pixel_centers_mm(frame: Frame, det: DetectorGrid, pixel_indices: np.ndarray) -> np.ndarray:
    """Pixel centers in mm for (column, row) index pairs, detector-centered."""
    iu = pixel_indices[:, 0].astype(np.float64)
    iv = pixel_indices[:, 1].astype(np.float64)
    du = (iu - (det.width_px - 1) / 2.0) * det.pixel_pitch_mm
    dv = (iv - (det.height_px - 1) / 2.0) * det.pixel_pitch_mm
    return (
        frame.detector_center_mm[None, :]
        + du[:, None] * frame.u_axis[None, :]
        + dv[:, None] * frame.v_axis[None, :]
    )


def _slab_intersect(origins, directions, lo, hi):
    """Exact slab-method intersection with the axis-aligned box [lo, hi]^3."""
    # Signed tiny stand-in for zero components keeps the slab arithmetic
    # well-defined: origins inside the slab yield an unbounded t range,
    # origins outside yield an empty one.
    d = np.where(np.abs(directions) < 1e-300, 1e-300, directions)
    inv = 1.0 / d
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)
    hit = t_near < t_far
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    return t_near, t_far, hit


def make_rays(
    pose: CArmPose,
    det: DetectorGrid,
    bounds: SceneBounds,
    pixel_indices: np.ndarray | None = None,
) -> Rays:
    """One ray per requested pixel, from the source through the pixel center.

    Parameters
    ----------
    pixel_indices : (n, 2) int array of (column, row) pairs, or None for
        all pixels in row-major order (row varies slowest).
    """
    if pixel_indices is None:
        iu, iv = np.meshgrid(np.arange(det.width_px), np.arange(det.height_px))
        pixel_indices = np.stack([iu.ravel(), iv.ravel()], axis=1)
    else:
        pixel_indices = np.asarray(pixel_indices)
        if pixel_indices.ndim != 2 or pixel_indices.shape[1] != 2:
            raise ValueError("pixel_indices must have shape (n, 2)")
        if (
            pixel_indices.min() < 0
            or pixel_indices[:, 0].max() >= det.width_px
            or pixel_indices[:, 1].max() >= det.height_px
        ):
            raise ValueError("pixel index outside detector extents")

    frame = pose_to_frame(pose)
    scale = bounds.world_scale_mm
    source = frame.source_mm / scale
    pixels = _pixel_centers_mm(frame, det, pixel_indices) / scale
    directions = pixels - source[None, :]
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origins = np.broadcast_to(source, directions.shape).copy()
    t_near, t_far, hit = _slab_intersect(origins, directions, bounds.lo, bounds.hi)
    return Rays(origins, directions, t_near, t_far, hit, scale)


def sample_rays(
    rays: Rays,
    n_samples: int,
    jitter: bool = False,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
):
    """Stratified samples along each ray.

    Splits [t_near, t_far] into ``n_samples`` equal bins and samples at
    the bin center (jitter off) or uniformly within the bin (jitter on).
    Returns positions (n, s, 3) in normalized units and per-sample segment
    lengths (n, s) in millimeters; segment lengths are the bin widths, so
    they always sum to the in-box chord length.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not rays.hit.all():
        raise ValueError("cannot sample rays that miss the scene bounds")
    if jitter and rng is None:
        raise ValueError("jitter sampling needs an rng")

    n = len(rays)
    span = (rays.t_far - rays.t_near)[:, None]
    if jitter:
        offsets = rng.random((n, n_samples))
    else:
        offsets = 0.5
    t = rays.t_near[:, None] + span * (np.arange(n_samples)[None, :] + offsets) / n_samples
    positions = rays.origins[:, None, :] + t[:, :, None] * rays.directions[:, None, :]
    deltas_mm = np.broadcast_to(span / n_samples * rays.world_scale_mm, t.shape).copy()
    return positions.astype(dtype), deltas_mm.astype(dtype)


def default_pose_set(
    source_to_isocenter_mm: float = 750.0, source_to_detector_mm: float = 1200.0
) -> list[CArmPose]:
    """The built-in 9-pose acquisition spanning LAO/RAO x CRA/CAU.

    The 3-view and 4-view training settings use the first 3 / 4 entries.
    """
    angles = [
        (0.0, 0.0),
        (30.0, 20.0),
        (-30.0, -20.0),
        (60.0, 0.0),
        (-60.0, 0.0),
        (30.0, -20.0),
        (-30.0, 20.0),
        (0.0, 20.0),
        (60.0, -20.0),
    ]
    return [
        CArmPose(p, s, source_to_isocenter_mm, source_to_detector_mm) for p, s in angles
    ]
