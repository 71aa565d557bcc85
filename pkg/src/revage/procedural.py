"""Deterministic procedural face backend.

Renders parameterized face-like images with zero pretrained weights: one
identity seed fixes the low-frequency geometry (head shape, eye/mouth
layout, tones) across every age, while age controls the amplitude of
high-frequency wrinkle bands in three zones (the two lateral eye corners
and the mouth). Pose is an affine warp, expression a small smooth
deformation field, and landmark positions are tracked analytically through
both, so the evaluation metrics need no detector on this data.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .datamodel import AgeValue, Frame, VideoClip, as_age
from .errors import ValidationError

LANDMARK_NAMES = ("left_eye_outer", "right_eye_outer", "mouth_left", "mouth_right")

# Wrinkle texture wavelength in pixels; the band-energy estimator listens here.
WRINKLE_WAVELENGTH_PX = 4.0


@dataclass(frozen=True)
class PoseExpressionSample:
    """One sampled head pose (3 rotations, 2D translation) + expression coefficients."""

    rotation: tuple[float, float, float]
    translation: tuple[float, float]
    expression: tuple[float, ...]

    def to_list(self) -> list:
        return [list(self.rotation), list(self.translation), list(self.expression)]

    @classmethod
    def from_list(cls, data: list) -> "PoseExpressionSample":
        return cls(tuple(data[0]), tuple(data[1]), tuple(data[2]))

    @classmethod
    def identity(cls, expression_dims: int = 4) -> "PoseExpressionSample":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0), (0.0,) * expression_dims)


@dataclass(frozen=True)
class MotionBounds:
    """Sampling bounds for pose/expression draws (radians, frame fraction, a.u.)."""

    rotation: float = 0.15
    translation: float = 0.04
    expression: float = 1.0


def validate_sample(sample: PoseExpressionSample, bounds: MotionBounds | None = None) -> None:
    bounds = bounds or MotionBounds()
    if max(abs(r) for r in sample.rotation) > bounds.rotation:
        raise ValidationError(f"rotation exceeds ±{bounds.rotation} rad: {sample.rotation}")
    if max(abs(t) for t in sample.translation) > bounds.translation:
        raise ValidationError(f"translation exceeds ±{bounds.translation}: {sample.translation}")
    if sample.expression and max(abs(c) for c in sample.expression) > bounds.expression:
        raise ValidationError(f"expression exceeds ±{bounds.expression}: {sample.expression}")


def sample_pose_expressions(
    rng: np.random.Generator,
    count: int,
    bounds: MotionBounds | None = None,
    expression_dims: int = 4,
) -> list[PoseExpressionSample]:
    bounds = bounds or MotionBounds()
    samples = []
    for _ in range(count):
        samples.append(
            PoseExpressionSample(
                rotation=tuple(rng.uniform(-bounds.rotation, bounds.rotation, 3).tolist()),
                translation=tuple(rng.uniform(-bounds.translation, bounds.translation, 2).tolist()),
                expression=tuple(
                    rng.uniform(-bounds.expression, bounds.expression, expression_dims).tolist()
                ),
            )
        )
    return samples


def pose_digest(samples: list[PoseExpressionSample]) -> str:
    """Stable fingerprint of a motion trajectory, for paired-motion validation."""
    payload = json.dumps([s.to_list() for s in samples], sort_keys=True)
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()


def _ellipse(u, v, cx, cy, rx, ry):
    return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2


def _soft_mask(dist_sq, softness):
    # 1 inside the unit ellipse, 0 outside, few-pixel transition
    return expit((1.0 - dist_sq) / softness)


class ProceduralFaceRenderer:
    """Identity-seeded face renderer with age-scaled wrinkle texture."""

    def __init__(self, resolution: int = 64, wrinkle_strength: float = 0.5):
        if resolution % 16:
            raise ValidationError(f"resolution must be divisible by 16, got {resolution}")
        self.resolution = resolution
        self.wrinkle_strength = wrinkle_strength

    def geometry(self, seed: int) -> dict:
        """Low-frequency identity parameters; a function of the seed only."""
        rng = np.random.default_rng(seed)
        g = {
            "face_rx": rng.uniform(0.52, 0.62),
            "face_ry": rng.uniform(0.68, 0.78),
            "face_cy": rng.uniform(0.0, 0.08),
            "eye_dx": rng.uniform(0.26, 0.33),
            "eye_y": rng.uniform(-0.24, -0.16),
            "eye_rx": rng.uniform(0.085, 0.115),
            "eye_ry": rng.uniform(0.045, 0.065),
            "mouth_y": rng.uniform(0.38, 0.46),
            "mouth_rx": rng.uniform(0.18, 0.25),
            "mouth_ry": rng.uniform(0.035, 0.055),
            "skin": rng.uniform(0.25, 0.55),
            "skin_tilt": rng.uniform(-0.08, 0.08),
            "background": rng.uniform(-0.85, -0.6),
        }
        return g

    def _grid(self):
        r = self.resolution
        axis = (np.arange(r, dtype=np.float64) + 0.5) / r * 2.0 - 1.0
        u, v = np.meshgrid(axis, axis)  # u: x right, v: y down
        return u, v

    def landmarks(self, seed: int) -> dict[str, tuple[float, float]]:
        """Canonical (unposed) landmark pixel coordinates for an identity."""
        g = self.geometry(seed)
        r = self.resolution

        def px(u, v):
            return ((u + 1.0) / 2.0 * r - 0.5, (v + 1.0) / 2.0 * r - 0.5)

        return {
            "left_eye_outer": px(-(g["eye_dx"] + g["eye_rx"]), g["eye_y"]),
            "right_eye_outer": px(g["eye_dx"] + g["eye_rx"], g["eye_y"]),
            "mouth_left": px(-g["mouth_rx"], g["mouth_y"]),
            "mouth_right": px(g["mouth_rx"], g["mouth_y"]),
        }

    # Furrow zones sit slightly clear of the eye/mouth contours so their band
    # energy is not drowned by feature edges; ZONE_SHIFT is the outward offset
    # as a fraction of the inter-ocular distance (mirrored in wrinkle_band_energy).
    ZONE_SHIFT = 0.16
    # gaussian sigma (pixels) applied to the base face before furrows go in
    BASE_SMOOTHING = 1.0

    def _wrinkle_zones(self, g: dict) -> list[tuple[float, float]]:
        shift = self.ZONE_SHIFT * 2.0 * (g["eye_dx"] + g["eye_rx"])
        return [
            (-(g["eye_dx"] + g["eye_rx"]) - shift, g["eye_y"] + 0.02),
            (g["eye_dx"] + g["eye_rx"] + shift, g["eye_y"] + 0.02),
            (0.0, g["mouth_y"] + shift),
        ]

    def render_still(self, seed: int, age: AgeValue | float) -> Frame:
        age = as_age(age)
        g = self.geometry(seed)
        u, v = self._grid()
        r = self.resolution
        soft = 7.0 / r  # few-pixel contour transition on the dist^2 scale

        img = np.full((r, r), g["background"], dtype=np.float64)
        face = _soft_mask(_ellipse(u, v, 0.0, g["face_cy"], g["face_rx"], g["face_ry"]), soft)
        skin = g["skin"] + g["skin_tilt"] * v
        img = img * (1 - face) + skin * face

        for sx in (-1.0, 1.0):
            eye = _soft_mask(
                _ellipse(u, v, sx * g["eye_dx"], g["eye_y"], g["eye_rx"], g["eye_ry"]), soft
            )
            img = img * (1 - eye) + (-0.75) * eye
            brow = _soft_mask(
                _ellipse(u, v, sx * g["eye_dx"], g["eye_y"] - 0.11, g["eye_rx"] * 1.5, 0.02), soft
            )
            img = img * (1 - brow) + (-0.5) * brow
        mouth = _soft_mask(_ellipse(u, v, 0.0, g["mouth_y"], g["mouth_rx"], g["mouth_ry"]), soft)
        img = img * (1 - mouth) + (-0.6) * mouth

        # soften the base face so feature contours carry almost no energy in
        # the furrow band; the furrows are added afterwards, unattenuated
        img = gaussian_filter(img, self.BASE_SMOOTHING)

        # age-scaled high-frequency furrows, gaussian-windowed around each zone
        amplitude = self.wrinkle_strength * age.normalized()
        if amplitude > 0:
            px_scale = r / 2.0
            texture = np.zeros_like(img)
            for zx, zy in self._wrinkle_zones(g):
                d_px = np.hypot((u - zx) * px_scale, (v - zy) * px_scale)
                window = np.exp(-((np.hypot(u - zx, v - zy) / 0.13) ** 2))
                texture += np.sin(2.0 * np.pi * d_px / WRINKLE_WAVELENGTH_PX) * window
            img = img - amplitude * texture * face

        rgb = np.stack([img, img * 0.92 - 0.02, img * 0.85 - 0.05], axis=2)
        return Frame(np.clip(rgb, -1.0, 1.0).astype(np.float32))


def _affine_from_pose(sample: PoseExpressionSample, resolution: int):
    """Forward 2x2 matrix + translation (pixels) about the frame center."""
    theta, yaw, pitch = sample.rotation
    sx, sy = math.cos(yaw), math.cos(pitch)
    c, s = math.cos(theta), math.sin(theta)
    fwd = np.array([[c * sx, -s * sy], [s * sx, c * sy]], dtype=np.float64)
    t = np.array(sample.translation, dtype=np.float64) * resolution
    return fwd, t


def _expression_field(sample: PoseExpressionSample, u, v, resolution: int):
    """Small smooth displacement (pixels) from the expression coefficients."""
    dx = np.zeros_like(u)
    dy = np.zeros_like(v)
    for k, coef in enumerate(sample.expression):
        if coef == 0.0:
            continue
        m = 1 + k // 2
        dx += coef * np.sin(math.pi * m * v + 0.7 * k)
        dy += coef * np.sin(math.pi * m * u + 1.3 * k)
    scale = 0.015 * resolution
    return dx * scale, dy * scale


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def apply_pose_expression(
    frame: Frame,
    sample: PoseExpressionSample,
    landmarks: dict[str, tuple[float, float]] | None = None,
) -> tuple[Frame, dict[str, tuple[float, float]] | None]:
    """Warp a frame by pose (affine) and expression (local deformation).

    The identity sample reproduces the input bit-exactly. Landmarks, when
    given, are carried through the same transform (with a first-order
    correction for the expression field) and returned alongside.
    """
    r = frame.height
    if frame.width != r:
        raise ValidationError("pose warp expects square frames")
    fwd, t = _affine_from_pose(sample, r)
    inv = np.linalg.inv(fwd)
    cx = cy = (r - 1) / 2.0

    gy, gx = np.mgrid[0:r, 0:r].astype(np.float64)
    rel_x = gx - cx - t[0]
    rel_y = gy - cy - t[1]
    xs = inv[0, 0] * rel_x + inv[0, 1] * rel_y + cx
    ys = inv[1, 0] * rel_x + inv[1, 1] * rel_y + cy

    u = (gx + 0.5) / r * 2.0 - 1.0
    v = (gy + 0.5) / r * 2.0 - 1.0
    dx, dy = _expression_field(sample, u, v, r)
    warped = _bilinear(frame.data.astype(np.float64), xs + dx, ys + dy)
    out = Frame(warped.astype(np.float32))

    moved = None
    if landmarks is not None:
        moved = {}
        for name, (lx, ly) in landmarks.items():
            p = fwd @ np.array([lx - cx, ly - cy]) + np.array([cx, cy]) + t
            lu = (p[0] + 0.5) / r * 2.0 - 1.0
            lv = (p[1] + 0.5) / r * 2.0 - 1.0
            ex, ey = _expression_field(
                sample, np.array([[lu]]), np.array([[lv]]), r
            )
            moved[name] = (float(p[0] - ex[0, 0]), float(p[1] - ey[0, 0]))
    return out, moved


def interpolate_landmarks(
    a: dict[str, tuple[float, float]], b: dict[str, tuple[float, float]]
) -> dict[str, tuple[float, float]]:
    return {k: ((a[k][0] + b[k][0]) / 2.0, (a[k][1] + b[k][1]) / 2.0) for k in a}


def stored_landmarks(clip: VideoClip) -> list[dict[str, tuple[float, float]]]:
    """Per-frame landmarks recorded in a clip's metadata by the pipeline."""
    raw = clip.extras.get("landmarks")
    if raw is None or len(raw) != clip.frame_count:
        raise ValidationError(
            "clip carries no per-frame landmark metadata; use a detector backend"
        )
    return [{k: (float(v[0]), float(v[1])) for k, v in entry.items()} for entry in raw]


def wrinkle_zone_centers(
    landmarks: dict[str, tuple[float, float]],
) -> tuple[list[np.ndarray], float]:
    """Furrow zone centers implied by a landmark set, plus the inter-ocular
    distance. Uses the same outward-shift rule as the renderer, expressed in
    the landmark frame so it follows pose."""
    le = np.array(landmarks["left_eye_outer"], dtype=np.float64)
    re = np.array(landmarks["right_eye_outer"], dtype=np.float64)
    mouth = (
        np.array(landmarks["mouth_left"], dtype=np.float64)
        + np.array(landmarks["mouth_right"], dtype=np.float64)
    ) / 2.0
    axis = re - le
    interocular = float(np.linalg.norm(axis))
    axis = axis / max(interocular, 1e-9)
    down = np.array([-axis[1], axis[0]])
    shift = ProceduralFaceRenderer.ZONE_SHIFT * interocular
    return [le - shift * axis, re + shift * axis, mouth + shift * down], interocular


def wrinkle_band_energy(
    image: np.ndarray,
    landmarks: dict[str, tuple[float, float]],
    window: float = 0.13,
) -> float:
    """Furrow-band energy of one image at the three wrinkle zones.

    Band-passes the image around the renderer's furrow wavelength, then
    matches it against the zone-local radial furrow pattern; the result is
    the mean squared matched amplitude over the three zones. Feature
    contours are spectrally broad but uncorrelated with the pattern, so
    they contribute little.
    """
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    band = gaussian_filter(gray, WRINKLE_WAVELENGTH_PX / 4.0) - gaussian_filter(
        gray, WRINKLE_WAVELENGTH_PX
    )
    h, w = gray.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    centers, _ = wrinkle_zone_centers(landmarks)
    sigma = window * h / 2.0
    energies = []
    for cx, cy in centers:
        d = np.hypot(gx - cx, gy - cy)
        weight = np.exp(-((d / sigma) ** 2))
        pattern = np.sin(2.0 * np.pi * d / WRINKLE_WAVELENGTH_PX) * weight
        norm = float((pattern * pattern).sum())
        amp = float((band * pattern).sum()) / max(norm, 1e-12)
        energies.append(amp * amp)
    return float(np.mean(energies))


@dataclass(frozen=True)
class AgeEstimate:
    """Expected age plus a weight distribution over integer ages 0..100."""

    expected_age: float
    distribution: np.ndarray

    def __post_init__(self) -> None:
        dist = np.asarray(self.distribution, dtype=np.float64)
        if dist.shape != (101,) or np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-6:
            raise ValidationError("distribution must be 101 non-negative weights summing to 1")
        object.__setattr__(self, "distribution", dist)


def gaussian_age_estimate(expected: float, sigma: float = 6.0) -> AgeEstimate:
    ages = np.arange(101, dtype=np.float64)
    weights = np.exp(-0.5 * ((ages - expected) / sigma) ** 2)
    return AgeEstimate(expected_age=float(expected), distribution=weights / weights.sum())


class AnalyticAgeEstimator:
    """Age estimator calibrated against the procedural renderer.

    Inverts the renderer's energy-vs-age law (wrinkle amplitude is linear in
    age, so band energy is affine in age squared) using reference renders of
    a few identities. Estimates a whole clip at a time, reading per-frame
    landmarks from the clip metadata unless a landmark source is supplied.
    """

    def __init__(
        self,
        renderer: ProceduralFaceRenderer,
        landmark_source=stored_landmarks,
        calibration_seeds: tuple[int, ...] = (101, 202, 303),
    ):
        self.renderer = renderer
        self.landmark_source = landmark_source
        self._fit(calibration_seeds)

    def _fit(self, seeds: tuple[int, ...]) -> None:
        xs, ys = [], []
        for seed in seeds:
            lm = self.renderer.landmarks(seed)
            for age in (0.0, 50.0, 100.0):
                frame = self.renderer.render_still(seed, age)
                xs.append((age / 100.0) ** 2)
                ys.append(wrinkle_band_energy(frame.data, lm))
        slope, intercept = np.polyfit(np.asarray(xs), np.asarray(ys), 1)
        self.energy_slope = float(slope)
        self.energy_floor = float(intercept)

    def estimate_energy(self, energy: float) -> AgeEstimate:
        a_sq = max(energy - self.energy_floor, 0.0) / self.energy_slope
        expected = float(np.clip(100.0 * math.sqrt(max(a_sq, 0.0)), 0.0, 100.0))
        return gaussian_age_estimate(expected)

    def __call__(self, clip: VideoClip) -> list[AgeEstimate]:
        landmark_list = self.landmark_source(clip)
        return [
            self.estimate_energy(wrinkle_band_energy(frame.data, lm))
            for frame, lm in zip(clip.frames, landmark_list)
        ]
