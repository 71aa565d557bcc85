"""Temporal-consistency and age-accuracy metrics.

TRWC compares the perceptual frame-pair distances of a generated clip
against those of the real clip, region by region (left eye, right eye,
mouth): 1.0 means the generated video's temporal variation in the wrinkle
regions matches the real one. T-Age tracks the stability of an age
estimator across adjacent frames (lower is steadier). Age MAE measures how
close estimated output ages land to the requested target. All backends
(perceptual distance, landmarks, age estimation, identity embedding) are
pluggable; the defaults need no pretrained weights.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_generator
from .datamodel import (
    AgeValue,
    DatasetManifest,
    VideoClip,
    as_age,
    load_clip,
    load_manifest,
)
from .errors import MetricError, ValidationError
from .generator import generate_video
from .perceptual import GradientFeatureBackend
from .procedural import (  # noqa: F401  (AgeEstimate is part of this module's API)
    AgeEstimate,
    AnalyticAgeEstimator,
    ProceduralFaceRenderer,
    gaussian_age_estimate,
    stored_landmarks,
)

log = logging.getLogger(__name__)

ROI_REGIONS = ("left_eye", "right_eye", "mouth")


@dataclass(frozen=True)
class RoiBox:
    """Half-open pixel box [y0:y1, x0:x1]."""

    y0: int
    y1: int
    x0: int
    x1: int

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[self.y0 : self.y1, self.x0 : self.x1]


@dataclass(frozen=True)
class RoiSpec:
    """One region's per-frame boxes; all boxes share one size and stay in frame."""

    region: str
    boxes: tuple[RoiBox, ...]


def _clipped_box(cx: float, cy: float, side: int, height: int, width: int) -> RoiBox:
    # keep the size, slide the box inside the frame
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    x0 = max(0, min(x0, width - side))
    y0 = max(0, min(y0, height - side))
    return RoiBox(y0, y0 + side, x0, x0 + side)


def roi_specs(
    clip: VideoClip,
    landmark_backend: Callable[[VideoClip], list[dict]] = stored_landmarks,
    scale: float = 0.25,
) -> dict[str, RoiSpec]:
    """Square ROI boxes per frame: side = ``scale`` x inter-ocular distance,
    centered on the lateral eye corners and the mouth-corner midpoint."""
    landmark_list = landmark_backend(clip)
    first = landmark_list[0]
    le = np.array(first["left_eye_outer"])
    re = np.array(first["right_eye_outer"])
    side = max(2, int(round(scale * float(np.linalg.norm(re - le)))))
    if side > min(clip.height, clip.width):
        raise MetricError("ROI side exceeds the frame; check landmarks")
    specs: dict[str, list[RoiBox]] = {r: [] for r in ROI_REGIONS}
    for lm in landmark_list:
        mouth = (
            np.array(lm["mouth_left"]) + np.array(lm["mouth_right"])
        ) / 2.0
        centers = {
            "left_eye": lm["left_eye_outer"],
            "right_eye": lm["right_eye_outer"],
            "mouth": tuple(mouth),
        }
        for region, (cx, cy) in centers.items():
            specs[region].append(_clipped_box(cx, cy, side, clip.height, clip.width))
    return {r: RoiSpec(r, tuple(b)) for r, b in specs.items()}


@dataclass(frozen=True)
class TrwcResult:
    value: float
    evaluated: int
    skipped: int

    @property
    def skip_fraction(self) -> float:
        total = self.evaluated + self.skipped
        return self.skipped / total if total else 0.0

    def __float__(self) -> float:
        return self.value


def trwc(
    generated: VideoClip,
    real: VideoClip,
    interval: int = 1,
    dist_backend: Callable[[np.ndarray, np.ndarray], float] | None = None,
    landmark_backend: Callable[[VideoClip], list[dict]] = stored_landmarks,
    eps: float = 1e-6,
    roi_scale: float = 0.25,
) -> TrwcResult:
    """Temporal regional wrinkle consistency of ``generated`` against ``real``.

    Mean over the three regions and all frame pairs (t, t+interval) of
    dist(generated ROIs) / dist(real ROIs). ROI boxes come from the real
    clip's landmarks and are applied to both clips. Pairs whose real-side
    distance falls below ``eps`` are skipped and counted; if every pair is
    skipped the metric is undefined and raises.
    """
    if generated.frame_count != real.frame_count:
        raise ValidationError(
            f"clips are not frame-aligned: {generated.frame_count} vs {real.frame_count}"
        )
    n = real.frame_count
    if interval < 1 or n <= interval:
        raise MetricError(f"need clip length > interval, got N={n}, interval={interval}")
    dist = dist_backend or GradientFeatureBackend()
    specs = roi_specs(real, landmark_backend, roi_scale)

    ratios: list[float] = []
    skipped = 0
    for region in ROI_REGIONS:
        boxes = specs[region].boxes
        for t in range(n - interval):
            ga = boxes[t].crop(generated.frames[t].data)
            gb = boxes[t + interval].crop(generated.frames[t + interval].data)
            ra = boxes[t].crop(real.frames[t].data)
            rb = boxes[t + interval].crop(real.frames[t + interval].data)
            den = dist(ra, rb)
            if den < eps:
                skipped += 1
                continue
            ratios.append(dist(ga, gb) / den)
    if not ratios:
        raise MetricError(
            f"all {skipped} region/frame pairs had static real ROIs (den < {eps}); "
            "TRWC is undefined"
        )
    return TrwcResult(value=float(np.mean(ratios)), evaluated=len(ratios), skipped=skipped)


def t_age(
    clip: VideoClip,
    estimator_backend: Callable[[VideoClip], list[AgeEstimate]],
    mode: str = "expected_diff",
) -> float:
    """Adjacent-frame age stability; 0 means perfectly steady.

    ``expected_diff`` averages |E[age]_t - E[age]_{t+1}| in years;
    ``cosine`` averages 1 - cos(distribution_t, distribution_{t+1}).
    """
    if clip.frame_count < 2:
        raise MetricError("T-Age needs at least two frames")
    if mode not in ("expected_diff", "cosine"):
        raise MetricError(f"unknown T-Age mode {mode!r}")
    estimates = estimator_backend(clip)
    if len(estimates) != clip.frame_count:
        raise MetricError("estimator returned wrong number of frame estimates")
    diffs = []
    for a, b in zip(estimates, estimates[1:]):
        if mode == "expected_diff":
            diffs.append(abs(a.expected_age - b.expected_age))
        else:
            da, db = a.distribution, b.distribution
            denom = float(np.linalg.norm(da) * np.linalg.norm(db))
            diffs.append(1.0 - float(np.dot(da, db)) / denom)
    return float(np.mean(diffs))


def age_mae(
    clips: Sequence[VideoClip],
    target_age: AgeValue | float,
    estimator_backend: Callable[[VideoClip], list[AgeEstimate]],
) -> float:
    """Mean absolute error between estimated frame ages and the target."""
    if not clips:
        raise MetricError("age MAE over an empty clip set is undefined")
    target = as_age(target_age).years
    errors = [
        abs(e.expected_age - target) for clip in clips for e in estimator_backend(clip)
    ]
    return float(np.mean(errors))


def identity_similarity(
    clip_a: VideoClip,
    clip_b: VideoClip,
    embed_backend: Callable[[VideoClip], np.ndarray],
) -> float:
    """Mean frame-wise cosine similarity between two clips' face embeddings."""
    if clip_a.frame_count != clip_b.frame_count:
        raise ValidationError("clips are not frame-aligned")
    ea = np.asarray(embed_backend(clip_a), dtype=np.float64)
    eb = np.asarray(embed_backend(clip_b), dtype=np.float64)
    if ea.shape != eb.shape or ea.ndim != 2:
        raise MetricError("embeddings must be matching (frames, dim) arrays")
    sims = []
    for va, vb in zip(ea, eb):
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na < 1e-12 or nb < 1e-12:
            raise MetricError("zero-vector embedding; similarity undefined")
        sims.append(float(np.dot(va, vb) / (na * nb)))
    return float(np.mean(sims))


@dataclass
class EvalBackends:
    """Backends used by corpus evaluation; defaults need no pretrained weights."""

    distance: Callable[[np.ndarray, np.ndarray], float] = field(
        default_factory=GradientFeatureBackend
    )
    landmarks: Callable[[VideoClip], list[dict]] = stored_landmarks
    age_estimator: Callable[[VideoClip], list[AgeEstimate]] | None = None

    def resolve_estimator(self, resolution: int):
        if self.age_estimator is None:
            self.age_estimator = AnalyticAgeEstimator(
                ProceduralFaceRenderer(resolution), landmark_source=self.landmarks
            )
        return self.age_estimator


def _fmt(x: float) -> str:
    return f"{x:.9g}"


ROW_FIELDS = (
    "subject_id",
    "input_age",
    "target_age",
    "trwc",
    "trwc_skip_fraction",
    "t_age",
    "age_mae",
)


def evaluate_corpus(
    data: DatasetManifest | Path | str,
    checkpoint: Path | str,
    targets: Sequence[AgeValue | float],
    out_dir: Path | str,
    backends: EvalBackends | None = None,
    interval: int = 1,
    data_root: Path | str | None = None,
    debug_roi: bool = False,
) -> dict:
    """Re-age every manifest clip to every target and score it.

    Writes ``rows.csv`` (one row per clip x target) and ``summary.json``
    (per-target aggregates plus the interval used) under ``out_dir``.
    Per-clip failures are recorded and skipped; aggregates cover successes.
    """
    if isinstance(data, DatasetManifest):
        manifest = data
        root = Path(data_root) if data_root else None
        if root is None:
            raise ValidationError("data_root is required when passing a manifest object")
    else:
        root = Path(data)
        manifest = load_manifest(root)
    if not manifest.subjects:
        raise MetricError("empty corpus: the manifest lists no subjects")
    model, _meta = load_generator(checkpoint)
    backends = backends or EvalBackends()
    backends.resolve_estimator(int(manifest.creation.get("resolution", 64)))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    failures: list[dict] = []
    for subject in manifest.subjects:
        for age_key in sorted(subject.videos):
            video = subject.videos[age_key]
            clip = load_clip(root / video.path)
            input_age = float(age_key)
            if debug_roi:
                _write_roi_overlay(clip, backends, out_dir, subject.subject_id, age_key)
            for target in targets:
                target = as_age(target)
                try:
                    generated = generate_video(model, clip, input_age, target, interval)
                    consistency = trwc(
                        generated,
                        clip,
                        interval=interval,
                        dist_backend=backends.distance,
                        landmark_backend=backends.landmarks,
                    )
                    stability = t_age(generated, backends.age_estimator)
                    mae = age_mae([generated], target, backends.age_estimator)
                except Exception as e:
                    log.warning(
                        "evaluation failed for %s age %s -> %s: %s",
                        subject.subject_id,
                        age_key,
                        target.years,
                        e,
                    )
                    failures.append(
                        {
                            "subject_id": subject.subject_id,
                            "input_age": input_age,
                            "target_age": target.years,
                            "error": str(e),
                        }
                    )
                    continue
                rows.append(
                    {
                        "subject_id": subject.subject_id,
                        "input_age": input_age,
                        "target_age": target.years,
                        "trwc": consistency.value,
                        "trwc_skip_fraction": consistency.skip_fraction,
                        "t_age": stability,
                        "age_mae": mae,
                    }
                )

    with (out_dir / "rows.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()}
            )

    per_target: dict[str, dict] = {}
    for target in targets:
        t = as_age(target).years
        subset = [r for r in rows if r["target_age"] == t]
        if subset:
            per_target[f"{t:g}"] = {
                "clips": len(subset),
                "trwc": float(np.mean([r["trwc"] for r in subset])),
                "t_age": float(np.mean([r["t_age"] for r in subset])),
                "age_mae": float(np.mean([r["age_mae"] for r in subset])),
            }
    summary = {
        "interval": interval,
        "targets": [as_age(t).years for t in targets],
        "rows": len(rows),
        "failures": failures,
        "per_target": per_target,
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
    )
    return summary


def _write_roi_overlay(clip, backends, out_dir: Path, subject_id: str, age_key: str) -> None:
    from PIL import Image

    from .datamodel import encode_frame

    specs = roi_specs(clip, backends.landmarks)
    canvas = encode_frame(clip.frames[0].data).copy()
    for spec in specs.values():
        b = spec.boxes[0]
        canvas[b.y0 : b.y1, [b.x0, b.x1 - 1]] = (255, 0, 0)
        canvas[[b.y0, b.y1 - 1], b.x0 : b.x1] = (255, 0, 0)
    Image.fromarray(canvas).save(out_dir / f"roi_{subject_id}_age_{age_key}.png")
