"""Synthetic intraoperative B-scan rendering and tip placement labeling.

A scan plane is swept laterally (image columns) and in depth (rows, pointing
into the retina). Rendering is schematic but geometry-faithful: retina bands,
vessel wall annulus and lumen around the scene's centerline, a bright needle
cross-section, an occlusion shadow below the needle, and seeded multiplicative
speckle. Dark lumen after a flush is the verification cue the workflow needs.
"""

from __future__ import annotations

import base64
import io
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .eye_sim import ContactPhase, LumenFluid, Scenario, TissueState, tip_tissue_query

NEEDLE_RADIUS_MM = 0.05   # 100 um beveled cannula
RETINA_BAND_MM = 0.30


class TipPlacement(str, Enum):
    ABOVE_WALL = "above_wall"
    INDENTING = "indenting"
    INTRALUMINAL = "intraluminal"
    THROUGH_WALL = "through_wall"


_PHASE_TO_PLACEMENT = {
    ContactPhase.FREE: TipPlacement.ABOVE_WALL,
    ContactPhase.ON_WALL: TipPlacement.INDENTING,
    ContactPhase.INTRALUMINAL: TipPlacement.INTRALUMINAL,
    ContactPhase.THROUGH_WALL: TipPlacement.THROUGH_WALL,
}


@dataclass
class ScanPlane:
    origin: np.ndarray            # top-center of the image, mm
    lateral: np.ndarray           # unit, along image columns
    depth: np.ndarray             # unit, along image rows (into retina)
    width_mm: float = 1.5
    depth_mm: float = 0.75

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.lateral = np.asarray(self.lateral, dtype=float)
        self.depth = np.asarray(self.depth, dtype=float)
        for name, v in (("lateral", self.lateral), ("depth", self.depth)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"{name} axis must be unit length")
        if abs(float(np.dot(self.lateral, self.depth))) > 1e-9:
            raise ValueError("plane axes must be orthogonal")

    def to_dict(self):
        return {
            "origin": list(map(float, self.origin)),
            "lateral": list(map(float, self.lateral)),
            "depth": list(map(float, self.depth)),
            "width_mm": self.width_mm,
            "depth_mm": self.depth_mm,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            origin=data["origin"], lateral=data["lateral"], depth=data["depth"],
            width_mm=float(data.get("width_mm", 1.5)),
            depth_mm=float(data.get("depth_mm", 0.75)),
        )


@dataclass
class BScan:
    pixels: np.ndarray            # H x W float in [0, 1]
    plane: ScanPlane
    t: float
    empty: bool = False

    @property
    def pitch_lateral_um(self):
        return self.plane.width_mm * 1000.0 / self.pixels.shape[1]

    @property
    def pitch_axial_um(self):
        return self.plane.depth_mm * 1000.0 / self.pixels.shape[0]

    def to_u8(self) -> np.ndarray:
        return np.clip(self.pixels * 255.0, 0.0, 255.0).astype(np.uint8)

    def to_png_bytes(self) -> bytes:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(self.to_u8(), mode="L").save(buf, format="PNG")
        return buf.getvalue()

    def to_frame(self) -> dict:
        """Streaming form: raw row-major bytes, base64. The plane rides along
        so clients can nudge the scan position relative to it."""
        h, w = self.pixels.shape
        return {
            "type": "bscan",
            "t": self.t,
            "w": w,
            "h": h,
            "pitch_um": self.pitch_lateral_um,
            "pixels_b64": base64.b64encode(self.to_u8().tobytes()).decode("ascii"),
            "plane": self.plane.to_dict(),
        }


def _segment_distances(points, verts):
    """Min distance from each point (N,3) to a polyline given by verts (M,3)."""
    best = np.full(points.shape[0], np.inf)
    for p0, p1 in zip(verts[:-1], verts[1:]):
        d = p1 - p0
        length2 = float(d @ d)
        if length2 < 1e-18:
            continue
        t = np.clip((points - p0) @ d / length2, 0.0, 1.0)
        closest = p0 + t[:, None] * d
        dist = np.linalg.norm(points - closest, axis=1)
        np.minimum(best, dist, out=best)
    return best


def render_bscan(scenario: Scenario, tissue: TissueState, tip_pose, plane: ScanPlane,
                 width_px: int = 512, height_px: int = 256,
                 speckle_strength: float = 0.15, seed: int = 0,
                 t: float = 0.0) -> BScan:
    """Render one cross-section of the scene.

    ``tip_pose`` is a (tip_position, shaft_direction) pair; the shaft is the
    unit vector pointing from the wrist toward the tip. A plane that misses
    the globe entirely yields an empty, flagged scan.
    """
    tip, shaft = tip_pose
    tip = np.asarray(tip, dtype=float)
    shaft = np.asarray(shaft, dtype=float)

    u = (np.arange(width_px) + 0.5) * plane.width_mm / width_px - plane.width_mm / 2.0
    v = (np.arange(height_px) + 0.5) * plane.depth_mm / height_px
    pts = (plane.origin[None, None, :]
           + u[None, :, None] * plane.lateral[None, None, :]
           + v[:, None, None] * plane.depth[None, None, :])
    flat = pts.reshape(-1, 3)

    r_globe = np.linalg.norm(flat, axis=1)
    rg = scenario.globe_radius_mm
    if not np.any(r_globe < rg):
        img = np.zeros((height_px, width_px))
        return BScan(pixels=img, plane=plane, t=t, empty=True)

    depth_into = r_globe - rg
    intensity = np.full(flat.shape[0], 0.02)
    intensity[(depth_into >= 0.0) & (depth_into < 0.06)] = 0.75
    intensity[(depth_into >= 0.06) & (depth_into < RETINA_BAND_MM)] = 0.50
    intensity[depth_into >= RETINA_BAND_MM] = 0.20

    # vessel cross-section: prefilter pixels by distance to the centerline's
    # chord (polyline stays within chord_deviation of it), then refine
    geom = scenario.vessel.geometry()
    verts = geom.points_np
    r_lum = scenario.vessel.lumen_radius_um / 1000.0
    r_out = scenario.vessel.outer_radius_um / 1000.0
    chord_d = _segment_distances(flat, verts[[0, -1]])
    cand = chord_d <= r_out + geom.chord_deviation + 0.05
    if np.any(cand):
        d_vessel = _segment_distances(flat[cand], verts)
        wall = (d_vessel >= r_lum) & (d_vessel < r_out)
        lumen = d_vessel < r_lum
        idx = np.flatnonzero(cand)
        intensity[idx[wall]] = 0.85
        lumen_value = 0.60 if tissue.lumen_fluid is LumenFluid.BLOOD else 0.04
        intensity[idx[lumen]] = lumen_value

    # needle: bright cylinder section along the shaft, ending at the tip
    tail = tip - 10.0 * shaft
    d = tip - tail
    length2 = float(d @ d)
    s = np.clip((flat - tail) @ d / length2, 0.0, 1.0)
    d_needle = np.linalg.norm(flat - (tail + s[:, None] * d), axis=1)
    needle_mask = (d_needle <= NEEDLE_RADIUS_MM).reshape(height_px, width_px)
    img = intensity.reshape(height_px, width_px).copy()
    img[needle_mask] = 0.95

    # OCT shadowing: everything below the needle in a column goes dark
    has_needle = needle_mask.any(axis=0)
    if has_needle.any():
        last_row = (height_px - 1) - np.argmax(needle_mask[::-1, :], axis=0)
        rows = np.arange(height_px)[:, None]
        shadow = has_needle[None, :] & (rows > last_row[None, :])
        img[shadow] = 0.0

    if speckle_strength > 0.0:
        rng = np.random.default_rng(seed)
        factor = 1.0 + speckle_strength * rng.standard_normal(img.shape)
        img *= np.clip(factor, 0.0, None)

    return BScan(pixels=np.clip(img, 0.0, 1.0), plane=plane, t=t)


def classify_tip_placement(scenario: Scenario, tissue: TissueState,
                           tip) -> TipPlacement:
    """Geometry-derived ground truth of where the tip sits relative to the
    vessel. Never Intraluminal unless the wall has actually been punctured."""
    report = tip_tissue_query(tip, scenario, tissue)
    return _PHASE_TO_PLACEMENT[report.phase]


def auto_plane_at_tip(tip, vessel, width_mm: float = 1.5,
                      depth_mm: float = 0.75) -> ScanPlane:
    """Scan plane through the tip, perpendicular to the local vessel run."""
    tip = np.asarray(tip, dtype=float)
    geom = vessel.geometry()
    _, axis_pt, tangent, _ = geom.locate(tuple(tip))
    axis_pt = np.asarray(axis_pt)
    tangent = np.asarray(tangent)
    depth = axis_pt / np.linalg.norm(axis_pt)  # radially outward, into retina
    depth = depth - (depth @ tangent) * tangent
    depth /= np.linalg.norm(depth)
    lateral = np.cross(tangent, depth)
    lateral /= np.linalg.norm(lateral)
    origin = tip - (depth_mm / 3.0) * depth
    # keep the plane exactly through the tip: origin offset is along depth
    return ScanPlane(origin=origin, lateral=lateral, depth=depth,
                     width_mm=width_mm, depth_mm=depth_mm)


def default_plane(scenario: Scenario, width_mm: float = 1.5,
                  depth_mm: float = 0.75) -> ScanPlane:
    """Initial manual plane: over the vessel target, perpendicular to it."""
    target = scenario.target_point()
    probe = target * (1.0 - 0.02 / np.linalg.norm(target))  # nudge inside
    return auto_plane_at_tip(probe, scenario.vessel, width_mm, depth_mm)
