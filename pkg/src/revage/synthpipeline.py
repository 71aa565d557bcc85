"""Three-stage paired-video dataset factory.

Stage one synthesizes longitudinal stills of one identity at every requested
age; stage two turns each still into keyframes under randomly sampled pose
and expression (the same samples reused for every age of a subject, which is
what makes the videos paired); stage three fills the motion in by recursive
midpoint interpolation. Clips below a sharpness threshold are rejected and
logged. Every stage sits behind a small backend interface with a built-in
deterministic procedural implementation; external tools can be wired in via
the subprocess adapters without code changes.
"""

from __future__ import annotations

import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .datamodel import (
    AgeValue,
    DatasetManifest,
    Frame,
    SubjectRecord,
    VideoClip,
    VideoRecord,
    as_age,
    decode_frame,
    encode_frame,
    format_age,
    save_clip,
    save_manifest,
    validate_manifest,
)
from .errors import BackendError, ConfigurationError, ValidationError
from .procedural import (
    MotionBounds,
    PoseExpressionSample,
    ProceduralFaceRenderer,
    apply_pose_expression,
    interpolate_landmarks,
    pose_digest,
    sample_pose_expressions,
    validate_sample,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IdentitySeed:
    """The random seed standing in for the identity noise vector."""

    seed: int


@dataclass(frozen=True)
class PipelineConfig:
    subjects: int = 4
    ages: tuple[float, ...] = (18.0, 50.0, 85.0)
    keyframes_per_video: int = 8
    recursion_depth: int = 3
    resolution: int = 64
    sharpness_threshold: float = 0.5
    seed: int = 0
    rotation_bound: float = 0.15
    translation_bound: float = 0.04
    expression_bound: float = 1.0
    expression_dims: int = 4
    wrinkle_strength: float = 0.5

    def __post_init__(self) -> None:
        if self.subjects < 0 or self.keyframes_per_video < 2 or self.recursion_depth < 0:
            raise ConfigurationError("need >= 2 keyframes, >= 0 recursion depth, >= 0 subjects")
        if not self.ages:
            raise ConfigurationError("at least one age is required")
        for a in self.ages:
            as_age(a)

    @property
    def frames_per_video(self) -> int:
        k, d = self.keyframes_per_video, self.recursion_depth
        return (k - 1) * ((1 << d) - 1) + k

    @property
    def motion_bounds(self) -> MotionBounds:
        return MotionBounds(self.rotation_bound, self.translation_bound, self.expression_bound)

    @classmethod
    def production_scale(cls, subjects: int = 4248, age_classes: int = 14) -> "PipelineConfig":
        """Full-scale plan: thousands of subjects, 14 ages spanning 18-85, 512px."""
        ages = tuple(float(round(a, 1)) for a in np.linspace(18.0, 85.0, age_classes))
        return cls(subjects=subjects, ages=ages, resolution=512)

    def to_dict(self) -> dict:
        return {
            "subjects": self.subjects,
            "ages": list(self.ages),
            "keyframes_per_video": self.keyframes_per_video,
            "recursion_depth": self.recursion_depth,
            "resolution": self.resolution,
            "sharpness_threshold": self.sharpness_threshold,
            "seed": self.seed,
            "rotation_bound": self.rotation_bound,
            "translation_bound": self.translation_bound,
            "expression_bound": self.expression_bound,
            "expression_dims": self.expression_dims,
            "wrinkle_strength": self.wrinkle_strength,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        data["ages"] = tuple(float(a) for a in data.get("ages", cls.ages))
        return cls(**data)


class ProceduralStillBackend:
    """Stage-one backend: identity-seeded procedural renders, no weights."""

    def __init__(self, renderer: ProceduralFaceRenderer):
        self.renderer = renderer

    def synthesize(self, identity: IdentitySeed, age: AgeValue) -> Frame:
        return self.renderer.render_still(identity.seed, age)

    def canonical_landmarks(self, identity: IdentitySeed) -> dict:
        return self.renderer.landmarks(identity.seed)


class ProceduralReenactmentBackend:
    """Stage-two backend: pose as affine warp, expression as local deformation."""

    def __init__(self, bounds: MotionBounds | None = None):
        self.bounds = bounds or MotionBounds()

    def reenact(self, still: Frame, sample: PoseExpressionSample, landmarks=None):
        validate_sample(sample, self.bounds)
        return apply_pose_expression(still, sample, landmarks)


class LinearBlendInterpolation:
    """Stage-three backend: plain midpoint average of the two endpoint frames."""

    def midpoint(self, a: Frame, b: Frame) -> Frame:
        return Frame((a.data + b.data) / 2.0)


class ReblurSharpness:
    """No-reference sharpness proxy on [0, 1].

    Scores 1 minus the gradient-energy ratio between a re-blurred copy and
    the image itself. Crisp edges lose most of their gradient energy to the
    re-blur (score near 1); an already-smoothed image barely changes (score
    near 0). For an ideal edge of width sigma the score is
    1 - sigma / sqrt(sigma^2 + reblur_sigma^2).
    """

    def __init__(self, reblur_sigma: float = 3.5):
        self.reblur_sigma = reblur_sigma

    def score(self, data: np.ndarray) -> float:
        gray = np.asarray(data, dtype=np.float64)
        if gray.ndim == 3:
            gray = gray.mean(axis=2)
        gy, gx = np.gradient(gray)
        e0 = float(np.mean(gx * gx + gy * gy))
        if e0 < 1e-12:
            return 0.0
        by, bx = np.gradient(gaussian_filter(gray, self.reblur_sigma))
        e1 = float(np.mean(bx * bx + by * by))
        return float(np.clip(1.0 - e1 / e0, 0.0, 1.0))


@dataclass
class PipelineBackends:
    """The pluggable stages. Defaults are the deterministic procedural set."""

    stills: ProceduralStillBackend
    reenact: ProceduralReenactmentBackend
    interpolate: LinearBlendInterpolation
    sharpness: ReblurSharpness

    @classmethod
    def procedural(cls, config: PipelineConfig) -> "PipelineBackends":
        renderer = ProceduralFaceRenderer(config.resolution, config.wrinkle_strength)
        return cls(
            stills=ProceduralStillBackend(renderer),
            reenact=ProceduralReenactmentBackend(config.motion_bounds),
            interpolate=LinearBlendInterpolation(),
            sharpness=ReblurSharpness(),
        )


def synthesize_aged_stills(
    identity: IdentitySeed,
    ages: list[AgeValue | float],
    backend,
    attempts: int = 2,
) -> dict[float, Frame]:
    """One still per age, same identity throughout. Retries transient backend
    failures ``attempts`` times before raising for the offending age."""
    stills: dict[float, Frame] = {}
    for age in ages:
        age = as_age(age)
        last: Exception | None = None
        for _ in range(max(attempts, 1)):
            try:
                stills[age.years] = backend.synthesize(identity, age)
                last = None
                break
            except Exception as e:  # backend boundary: anything can come back
                last = e
        if last is not None:
            raise BackendError(f"still synthesis failed for age {age.years:g}") from last
    return stills


def generate_keyframes(
    still: Frame,
    samples: list[PoseExpressionSample],
    backend,
    landmarks: dict | None = None,
) -> tuple[list[Frame], list[dict | None]]:
    """Reenact one still under each pose/expression sample.

    The caller passes the same samples for every age of a subject, which is
    what guarantees paired motion across ages.
    """
    frames, frame_landmarks = [], []
    for i, sample in enumerate(samples):
        try:
            frame, moved = backend.reenact(still, sample, landmarks)
        except ValidationError:
            raise
        except Exception as e:
            raise BackendError(f"reenactment failed for keyframe {i}") from e
        frames.append(frame)
        frame_landmarks.append(moved)
    return frames, frame_landmarks


def _expand(a, b, depth: int, midpoint):
    if depth == 0:
        return []
    mid = midpoint(a, b)
    return _expand(a, mid, depth - 1, midpoint) + [mid] + _expand(mid, b, depth - 1, midpoint)


def interpolate_motion(
    keyframes: list[Frame],
    depth: int,
    backend,
    landmarks: list[dict | None] | None = None,
) -> tuple[list[Frame], list[dict | None] | None]:
    """Insert 2^depth - 1 midpoint frames between each consecutive keyframe pair.

    Keyframes appear unchanged at indices 1 + i * 2^depth (1-based). When
    per-keyframe landmarks are supplied they are carried through the same
    recursion by linear interpolation. A backend failure mid-recursion
    raises before anything is returned.
    """
    if len(keyframes) < 2:
        raise ValidationError("need at least two keyframes to interpolate")
    if depth < 0:
        raise ValidationError("recursion depth must be >= 0")

    track = landmarks is not None and all(lm is not None for lm in landmarks)
    if track:
        items = list(zip(keyframes, landmarks))

        def midpoint(x, y):
            try:
                frame = backend.midpoint(x[0], y[0])
            except Exception as e:
                raise BackendError("interpolation backend failed mid-recursion") from e
            return frame, interpolate_landmarks(x[1], y[1])

    else:
        items = list(keyframes)

        def midpoint(x, y):
            try:
                return backend.midpoint(x, y)
            except Exception as e:
                raise BackendError("interpolation backend failed mid-recursion") from e

    out = [items[0]]
    for a, b in zip(items, items[1:]):
        out.extend(_expand(a, b, depth, midpoint))
        out.append(b)
    if track:
        return [f for f, _ in out], [lm for _, lm in out]
    return out, None


def sharpness_filter(clip: VideoClip, estimator, threshold: float = 0.5) -> tuple[bool, float]:
    """Accept a clip iff its mean per-frame sharpness reaches the threshold."""
    scores = [estimator.score(f.data) for f in clip.frames]
    mean = float(np.mean(scores))
    return mean >= threshold, mean


def _subject_seeds(base_seed: int, index: int) -> tuple[int, int]:
    identity = int(np.random.SeedSequence([base_seed, index, 0]).generate_state(1)[0])
    motion = int(np.random.SeedSequence([base_seed, index, 1]).generate_state(1)[0])
    return identity, motion


def _landmarks_jsonable(landmark_list):
    return [{k: [float(v[0]), float(v[1])] for k, v in lm.items()} for lm in landmark_list]


def _build_subject(config: PipelineConfig, backends: PipelineBackends, index: int):
    """Render one subject's clips in memory. Returns (staged, digest, seed)
    on success or an errata dict on rejection/failure."""
    subject_id = f"s{index:04d}"
    identity_seed, motion_seed = _subject_seeds(config.seed, index)
    identity = IdentitySeed(identity_seed)
    motion_rng = np.random.default_rng(motion_seed)
    samples = sample_pose_expressions(
        motion_rng, config.keyframes_per_video, config.motion_bounds, config.expression_dims
    )
    digest = pose_digest(samples)
    try:
        stills = synthesize_aged_stills(identity, list(config.ages), backends.stills)
        canonical = getattr(backends.stills, "canonical_landmarks", lambda _i: None)(identity)
        staged: list[tuple[float, VideoClip, float]] = []
        for age in config.ages:
            keyframes, key_lms = generate_keyframes(
                stills[as_age(age).years], samples, backends.reenact, canonical
            )
            frames, frame_lms = interpolate_motion(
                keyframes, config.recursion_depth, backends.interpolate, key_lms
            )
            extras = {"pose_samples": [s.to_list() for s in samples]}
            if frame_lms is not None:
                extras["landmarks"] = _landmarks_jsonable(frame_lms)
            clip = VideoClip(
                frames=tuple(frames),
                subject_id=subject_id,
                apparent_age=as_age(age),
                motion_seed=motion_seed,
                extras=extras,
            )
            accepted, score = sharpness_filter(clip, backends.sharpness, config.sharpness_threshold)
            if not accepted:
                raise _Rejected(age, score)
            staged.append((as_age(age).years, clip, score))
    except _Rejected as r:
        log.info("subject %s rejected: age %s sharpness %.4f", subject_id, r.age, r.score)
        return {
            "subject_id": subject_id,
            "reason": "sharpness",
            "age": as_age(r.age).years,
            "score": r.score,
        }
    except BackendError as e:
        log.warning("subject %s skipped: %s", subject_id, e)
        return {"subject_id": subject_id, "reason": "backend", "detail": str(e)}
    return subject_id, staged, digest, motion_seed


def build_dataset(
    config: PipelineConfig,
    root: Path | str,
    backends: PipelineBackends | None = None,
    workers: int = 1,
) -> DatasetManifest:
    """Render every subject x age clip, filter, persist, and index.

    A subject whose clips fail any stage (or the sharpness filter) is skipped
    whole, with the reason recorded in the manifest errata; accepted subjects
    are only written once every age passed, so partial subjects never reach
    disk. Subjects are independent, so with ``workers`` > 1 they render in a
    thread pool; results are committed in subject order either way, keeping
    the output byte-identical.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    backends = backends or PipelineBackends.procedural(config)

    if workers > 1 and config.subjects > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _build_subject(config, backends, i), range(config.subjects)))
    else:
        results = [_build_subject(config, backends, i) for i in range(config.subjects)]

    subjects: list[SubjectRecord] = []
    errata: list[dict] = []
    for result in results:
        if isinstance(result, dict):
            errata.append(result)
            continue
        subject_id, staged, digest, motion_seed = result
        videos: dict[str, VideoRecord] = {}
        for age_years, clip, score in staged:
            rel = f"{subject_id}/age_{format_age(age_years)}"
            save_clip(clip, root / rel)
            videos[format_age(age_years)] = VideoRecord(
                path=rel,
                frame_count=clip.frame_count,
                motion_seed=motion_seed,
                sharpness=score,
                pose_digest=digest,
            )
        subjects.append(SubjectRecord(subject_id=subject_id, videos=videos))

    manifest = DatasetManifest(
        ages=tuple(as_age(a).years for a in config.ages),
        creation={**config.to_dict(), "frames_per_video": config.frames_per_video},
        subjects=tuple(subjects),
        errata=tuple(errata),
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    validate_manifest(manifest)
    save_manifest(manifest, root)
    return manifest


class _Rejected(Exception):
    def __init__(self, age, score):
        self.age, self.score = age, score


def manifest_stub(config: PipelineConfig) -> DatasetManifest:
    """Bookkeeping-only manifest for a planned dataset; no media is rendered.

    Useful for validating full-scale plans (thousands of subjects) against
    the manifest invariants without generating anything.
    """
    subjects = []
    for i in range(config.subjects):
        subject_id = f"s{i:04d}"
        _, motion_seed = _subject_seeds(config.seed, i)
        videos = {
            format_age(age): VideoRecord(
                path=f"{subject_id}/age_{format_age(age)}",
                frame_count=config.frames_per_video,
                motion_seed=motion_seed,
                sharpness=1.0,
                pose_digest=f"plan-{motion_seed:08x}",
            )
            for age in config.ages
        }
        subjects.append(SubjectRecord(subject_id=subject_id, videos=videos))
    return DatasetManifest(
        ages=tuple(as_age(a).years for a in config.ages),
        creation={**config.to_dict(), "frames_per_video": config.frames_per_video},
        subjects=tuple(subjects),
    )


# --- subprocess adapters -----------------------------------------------------
#
# Contract shared by all three stages: the command is invoked once per call
# with its placeholders substituted; inputs are 8-bit PNGs plus a JSON
# parameter file, the output is a PNG the command must write at {output}.
# Placeholders: {params} {output} and per-stage inputs ({input_a}/{input_b}
# for interpolation, {still} for the other stages).


def _run_command(command: list[str], mapping: dict[str, str]) -> None:
    cmd = [part.format(**mapping) for part in command]
    result = subprocess.run(cmd, capture_output=True, text=True)
    if result.returncode != 0:
        raise BackendError(
            f"backend command failed ({result.returncode}): {result.stderr.strip()[:500]}"
        )


def _read_output_frame(path: Path) -> Frame:
    if not path.exists():
        raise BackendError(f"backend command produced no output at {path}")
    return Frame(decode_frame(np.asarray(Image.open(path).convert("RGB"))))


class CommandStillBackend:
    """Run an external still synthesizer: reads params JSON, writes a PNG."""

    def __init__(self, command: list[str]):
        self.command = command

    def synthesize(self, identity: IdentitySeed, age: AgeValue) -> Frame:
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            params = tmp / "params.json"
            params.write_text(json.dumps({"seed": identity.seed, "age": age.years}))
            out = tmp / "out.png"
            _run_command(self.command, {"params": str(params), "output": str(out)})
            return _read_output_frame(out)


class CommandReenactmentBackend:
    """Run an external reenactor on a still; landmark tracking is not available."""

    def __init__(self, command: list[str]):
        self.command = command

    def reenact(self, still: Frame, sample: PoseExpressionSample, landmarks=None):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            src = tmp / "still.png"
            Image.fromarray(encode_frame(still.data)).save(src)
            params = tmp / "params.json"
            params.write_text(json.dumps({"pose": sample.to_list()}))
            out = tmp / "out.png"
            _run_command(
                self.command, {"still": str(src), "params": str(params), "output": str(out)}
            )
            return _read_output_frame(out), None


class CommandInterpolationBackend:
    """Run an external frame interpolator on a pair of endpoint frames."""

    def __init__(self, command: list[str]):
        self.command = command

    def midpoint(self, a: Frame, b: Frame) -> Frame:
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            pa, pb = tmp / "a.png", tmp / "b.png"
            Image.fromarray(encode_frame(a.data)).save(pa)
            Image.fromarray(encode_frame(b.data)).save(pb)
            params = tmp / "params.json"
            params.write_text(json.dumps({"t": 0.5}))
            out = tmp / "out.png"
            _run_command(
                self.command,
                {"input_a": str(pa), "input_b": str(pb), "params": str(params), "output": str(out)},
            )
            return _read_output_frame(out)
