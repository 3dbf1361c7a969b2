"""Deterministic preprocessing of 16-bit knee radiographs into patch pairs.

Pipeline: percentile-based intensity standardization to 8 bits, landmark-
guided ROI extraction with tibial-plateau alignment, center crop + resize
to a 300x300 canvas, and extraction of the (lateral, flipped-medial)
128x128 patch pair normalized to [-1, 1].

All steps are pure functions of their inputs; identical inputs give
bit-identical outputs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .resample import resize_bilinear, rotated_crop

ROI_MM = 140.0
CENTER_CROP_MM = 110.0
CANVAS_PX = 300
PATCH_PX = 128
PAD_PX = 300

ROLE_JOINT_CENTER = "joint_center"
ROLE_PLATEAU_LATERAL = "plateau_lateral"
ROLE_PLATEAU_MEDIAL = "plateau_medial"


class DegenerateImage(ValueError):
    """Image has no usable intensity range (p5 == p99)."""


class OutOfBounds(ValueError):
    """Requested ROI exceeds the padded image."""


class TooSmall(ValueError):
    """ROI is smaller than the center-crop target."""


@dataclass(frozen=True)
class RawImage:
    """16-bit grayscale radiograph with physical pixel size and knee side."""

    pixels: np.ndarray
    spacing_mm: float
    side: str  # "left" | "right"

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be 2D")
        if self.pixels.dtype != np.uint16:
            raise ValueError("pixels must be uint16")
        if not self.spacing_mm > 0:
            raise ValueError("spacing_mm must be positive")
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be left/right, got {self.side!r}")


@dataclass(frozen=True)
class Image8bit:
    """8-bit image carrying its pixel spacing and knee side."""

    pixels: np.ndarray
    spacing_mm: float
    side: str

    def __post_init__(self):
        if self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be uint8")


@dataclass(frozen=True)
class LandmarkSet:
    """Named (x, y) pixel landmarks; requires the joint center and the two
    tibial plateau endpoints."""

    points: dict[str, tuple[float, float]]

    REQUIRED = (ROLE_JOINT_CENTER, ROLE_PLATEAU_LATERAL, ROLE_PLATEAU_MEDIAL)

    def __post_init__(self):
        missing = [r for r in self.REQUIRED if r not in self.points]
        if missing:
            raise ValueError(f"missing landmark roles: {missing}")
        if self.plateau_lateral == self.plateau_medial:
            raise ValueError("plateau endpoints must be distinct")

    @property
    def joint_center(self) -> tuple[float, float]:
        return self.points[ROLE_JOINT_CENTER]

    @property
    def plateau_lateral(self) -> tuple[float, float]:
        return self.points[ROLE_PLATEAU_LATERAL]

    @property
    def plateau_medial(self) -> tuple[float, float]:
        return self.points[ROLE_PLATEAU_MEDIAL]

    def mirrored(self, width: int) -> "LandmarkSet":
        """Landmarks for the horizontally flipped image."""
        return LandmarkSet(
            {role: (width - 1 - x, y) for role, (x, y) in self.points.items()}
        )


@dataclass(frozen=True)
class PatchPair:
    """Model input: lateral patch and horizontally flipped medial patch,
    both square, same size, values in [-1, 1]."""

    lateral: np.ndarray
    medial: np.ndarray

    def __post_init__(self):
        for name, p in (("lateral", self.lateral), ("medial", self.medial)):
            if p.ndim != 2 or p.shape[0] != p.shape[1]:
                raise ValueError(f"{name} patch must be square 2D")
        if self.lateral.shape != self.medial.shape:
            raise ValueError("patches must have equal shapes")

    @property
    def size(self) -> int:
        return self.lateral.shape[0]

    def to_array(self) -> np.ndarray:
        """Stack as (2, H, H) float32: [lateral, medial]."""
        return np.stack([self.lateral, self.medial]).astype(np.float32)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PatchPair":
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ValueError("expected (2, H, H) array")
        return cls(lateral=arr[0], medial=arr[1])


def standardize_intensity(img: RawImage) -> Image8bit:
    """Clip to the 5th/99th intensity percentiles, normalize contrast, and
    map linearly onto 0..255.

    Raises DegenerateImage when the percentile window has zero width.
    """
    flat = img.pixels.astype(np.float64).ravel()
    p5, p99 = np.percentile(flat, [5.0, 99.0])
    if p99 <= p5:
        raise DegenerateImage(f"p5 == p99 == {p5}")
    clipped = np.clip(img.pixels.astype(np.float64), p5, p99)
    lo = clipped.min()
    span = clipped.max() - lo
    scaled = (clipped - lo) / span
    out = np.rint(scaled * 255.0).astype(np.uint8)
    return Image8bit(pixels=out, spacing_mm=img.spacing_mm, side=img.side)


def plateau_angle(lm: LandmarkSet) -> float:
    """Slope angle (radians) of the tibial plateau line, endpoints ordered
    left-to-right so the angle stays in (-pi/2, pi/2]."""
    p1, p2 = sorted([lm.plateau_lateral, lm.plateau_medial])
    return math.atan2(p2[1] - p1[1], p2[0] - p1[0])


def crop_knee_roi(img: Image8bit, lm: LandmarkSet) -> Image8bit:
    """Cut the square 140mm ROI centered on the knee joint, rotated so the
    tibial plateau comes out horizontal.

    The image is zero-padded by 300 px per side first; left knees are
    mirrored to right-knee orientation before any resampling.
    """
    pixels = img.pixels
    if lm.joint_center[0] < 0 or lm.joint_center[0] > pixels.shape[1] - 1 \
            or lm.joint_center[1] < 0 or lm.joint_center[1] > pixels.shape[0] - 1:
        raise OutOfBounds("joint center outside image bounds")

    if img.side == "left":
        pixels = pixels[:, ::-1]
        lm = lm.mirrored(pixels.shape[1])

    angle = plateau_angle(lm)
    side = int(np.rint(ROI_MM / img.spacing_mm))
    cx, cy = lm.joint_center
    cx += PAD_PX
    cy += PAD_PX
    padded = np.pad(pixels, PAD_PX, mode="constant")

    half = (side - 1) / 2.0
    cos_a, sin_a = math.cos(angle), math.sin(angle)
    for dr in (-half, half):
        for dc in (-half, half):
            sx = cos_a * dc - sin_a * dr + cx
            sy = sin_a * dc + cos_a * dr + cy
            if not (0 <= sx <= padded.shape[1] - 1 and 0 <= sy <= padded.shape[0] - 1):
                raise OutOfBounds(
                    f"{side}px ROI at ({cx - PAD_PX:.1f},{cy - PAD_PX:.1f}) "
                    "leaves the padded image"
                )

    roi = rotated_crop(padded, (cx, cy), angle, side, mode="constant", cval=0.0)
    roi = np.clip(np.rint(roi), 0, 255).astype(np.uint8)
    return Image8bit(pixels=roi, spacing_mm=img.spacing_mm, side="right")


def center_crop_resize(roi: Image8bit) -> Image8bit:
    """Center-crop the ROI to 110mm x 110mm and resize to 300x300."""
    size = roi.pixels.shape[0]
    crop = int(np.rint(CENTER_CROP_MM / roi.spacing_mm))
    if crop > size:
        raise TooSmall(f"ROI side {size}px < {crop}px ({CENTER_CROP_MM}mm)")
    off = (size - crop) // 2
    cropped = roi.pixels[off:off + crop, off:off + crop]
    resized = resize_bilinear(cropped, CANVAS_PX, CANVAS_PX)
    out = np.clip(np.rint(resized), 0, 255).astype(np.uint8)
    spacing = roi.spacing_mm * crop / CANVAS_PX
    return Image8bit(pixels=out, spacing_mm=spacing, side=roi.side)


def extract_patch_pair(img300: Image8bit) -> PatchPair:
    """Slice the lateral and medial 128x128 patches off the 300x300 canvas
    (top anchor at one third of the height), flip the medial patch, and map
    intensities onto [-1, 1]."""
    px = img300.pixels
    if px.shape != (CANVAS_PX, CANVAS_PX):
        raise ValueError(f"expected {CANVAS_PX}x{CANVAS_PX}, got {px.shape}")
    top = CANVAS_PX // 3
    rows = slice(top, top + PATCH_PX)
    lateral = px[rows, :PATCH_PX]
    medial = px[rows, CANVAS_PX - PATCH_PX:][:, ::-1]

    def normalize(patch):
        return ((patch.astype(np.float32) / 255.0) - 0.5) / 0.5

    return PatchPair(lateral=normalize(lateral), medial=normalize(medial))


def process_image(raw: RawImage, lm: LandmarkSet) -> PatchPair:
    """Full chain: standardize -> ROI -> crop/resize -> patch pair."""
    img8 = standardize_intensity(raw)
    roi = crop_knee_roi(img8, lm)
    canvas = center_crop_resize(roi)
    return extract_patch_pair(canvas)


# ---------------------------------------------------------------------------
# file formats

def save_pair(path: str | Path, pair: PatchPair) -> None:
    """Write a pair as little-endian float32, lateral then medial, row-major."""
    data = pair.lateral.astype("<f4").tobytes() + pair.medial.astype("<f4").tobytes()
    Path(path).write_bytes(data)


def load_pair(path: str | Path) -> PatchPair:
    buf = Path(path).read_bytes()
    vals = np.frombuffer(buf, dtype="<f4")
    if vals.size % 2 != 0:
        raise ValueError(f"{path}: bad pair blob length {vals.size}")
    side = math.isqrt(vals.size // 2)
    if 2 * side * side != vals.size:
        raise ValueError(f"{path}: blob is not two square patches")
    half = vals.size // 2
    return PatchPair(
        lateral=vals[:half].reshape(side, side).copy(),
        medial=vals[half:].reshape(side, side).copy(),
    )


def read_raw_image(path: str | Path) -> RawImage:
    """Load a 16-bit grayscale image.

    PNG files are read directly; `.raw` files are little-endian uint16.
    Both need a sidecar JSON descriptor `<stem>.json` with at least
    spacing_mm and side (raw files also need width/height).
    """
    path = Path(path)
    desc_path = path.with_suffix(".json")
    if not desc_path.exists():
        raise FileNotFoundError(f"missing sidecar descriptor {desc_path}")
    desc = json.loads(desc_path.read_text())

    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.array(im)
        if arr.dtype == np.int32:  # Pillow mode "I"
            arr = arr.astype(np.uint16)
        if arr.dtype != np.uint16:
            raise ValueError(f"{path}: expected 16-bit grayscale, got {arr.dtype}")
    else:
        arr = np.fromfile(path, dtype="<u2").reshape(desc["height"], desc["width"])
    return RawImage(pixels=arr, spacing_mm=float(desc["spacing_mm"]),
                    side=desc["side"])


def read_landmarks_csv(path: str | Path) -> dict[str, LandmarkSet]:
    """Parse a landmarks CSV (image_id, role, x, y) into LandmarkSets."""
    by_image: dict[str, dict[str, tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            by_image.setdefault(row["image_id"], {})[row["role"]] = (
                float(row["x"]), float(row["y"]))
    return {img_id: LandmarkSet(points) for img_id, points in by_image.items()}
