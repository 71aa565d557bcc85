"""Core value types and on-disk formats shared by every other module.

Pixels are float32 in [-1, 1] (clamped at construction). On disk a clip is a
directory of 8-bit PNGs plus a ``meta.json`` sidecar, and a dataset is a tree
of clip directories indexed by a single ``manifest.json`` at its root.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image

from .errors import IngestionError, ManifestError, ValidationError

# Spatial sizes must survive four halving stages inside the recurrent block.
SIZE_DIVISOR = 16

META_FILENAME = "meta.json"
FRAME_PATTERN = "frame_{:06d}.png"
MANIFEST_FILENAME = "manifest.json"
MANIFEST_SCHEMA_VERSION = 1


@dataclass(frozen=True, order=True)
class AgeValue:
    """An age in years, restricted to [0, 100]."""

    years: float

    def __post_init__(self) -> None:
        years = float(self.years)
        if not np.isfinite(years) or not 0.0 <= years <= 100.0:
            raise ValidationError(f"age must lie in [0, 100] years, got {self.years!r}")
        object.__setattr__(self, "years", years)

    def normalized(self) -> float:
        """Age mapped to [0, 1], the range the networks consume."""
        return self.years / 100.0


def as_age(value: AgeValue | float | int) -> AgeValue:
    return value if isinstance(value, AgeValue) else AgeValue(float(value))


@dataclass(frozen=True)
class Frame:
    """One RGB frame: HxWx3 float32 in [-1, 1], sides divisible by 16."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValidationError(f"frame data must be HxWx3, got shape {data.shape}")
        h, w = int(data.shape[0]), int(data.shape[1])
        if h <= 0 or w <= 0 or h % SIZE_DIVISOR or w % SIZE_DIVISOR:
            raise ValidationError(
                f"frame sides must be positive multiples of {SIZE_DIVISOR}, got {h}x{w}"
            )
        data = np.clip(data, -1.0, 1.0)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True)
class AgeMask:
    """A spatially constant plane holding one normalized age."""

    height: int
    width: int
    value: float

    def __post_init__(self) -> None:
        if self.height <= 0 or self.width <= 0:
            raise ValidationError(f"mask dimensions must be positive, got {self.height}x{self.width}")
        if not 0.0 <= float(self.value) <= 1.0:
            raise ValidationError(f"normalized age must lie in [0, 1], got {self.value!r}")
        object.__setattr__(self, "value", float(self.value))

    def as_array(self) -> np.ndarray:
        return np.full((self.height, self.width), self.value, dtype=np.float32)


def make_age_mask(age: AgeValue | float, height: int, width: int) -> AgeMask:
    """Constant plane valued ``age / 100`` over an HxW grid."""
    return AgeMask(height, width, as_age(age).normalized())


@dataclass(frozen=True)
class MaskedFrame:
    """5-channel conditioning unit: RGB frame + input-age and target-age planes."""

    frame: Frame
    input_mask: AgeMask
    target_mask: AgeMask

    def __post_init__(self) -> None:
        for name, mask in (("input", self.input_mask), ("target", self.target_mask)):
            if (mask.height, mask.width) != (self.frame.height, self.frame.width):
                raise ValidationError(
                    f"{name} mask size {mask.height}x{mask.width} does not match "
                    f"frame {self.frame.height}x{self.frame.width}"
                )

    @property
    def channels(self) -> int:
        return 5

    def as_array(self) -> np.ndarray:
        """HxWx5 stack; channels 0-2 are the frame, 3 input age, 4 target age."""
        return np.concatenate(
            [
                self.frame.data,
                self.input_mask.as_array()[:, :, None],
                self.target_mask.as_array()[:, :, None],
            ],
            axis=2,
        )


def mask_frame(frame: Frame, input_age: AgeValue | float, target_age: AgeValue | float) -> MaskedFrame:
    """Attach constant input/target age planes to a frame."""
    h, w = frame.height, frame.width
    return MaskedFrame(frame, make_age_mask(input_age, h, w), make_age_mask(target_age, h, w))


@dataclass(frozen=True)
class VideoClip:
    """An ordered, uniformly sized frame sequence with per-clip age metadata."""

    frames: tuple[Frame, ...]
    subject_id: str = ""
    apparent_age: AgeValue | None = None
    motion_seed: int | None = None
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        if not frames:
            raise ValidationError("a clip needs at least one frame")
        h, w = frames[0].height, frames[0].width
        for i, frame in enumerate(frames):
            if (frame.height, frame.width) != (h, w):
                raise ValidationError(
                    f"frame {i} is {frame.height}x{frame.width}, expected {h}x{w}"
                )
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "extras", dict(self.extras))

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def as_array(self) -> np.ndarray:
        """NxHxWx3 float32 stack of all frames."""
        return np.stack([f.data for f in self.frames], axis=0)

    @classmethod
    def from_array(cls, array: np.ndarray, **meta: Any) -> "VideoClip":
        return cls(frames=tuple(Frame(a) for a in np.asarray(array)), **meta)

    def with_frames(self, array: np.ndarray) -> "VideoClip":
        """Same metadata, new pixel content."""
        return replace(self, frames=tuple(Frame(a) for a in np.asarray(array)))


def encode_frame(data: np.ndarray) -> np.ndarray:
    """[-1, 1] float -> 8-bit, the on-disk representation."""
    return np.clip(np.round((data + 1.0) * 127.5), 0, 255).astype(np.uint8)


def decode_frame(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 127.5 - 1.0


def save_clip(clip: VideoClip, path: Path | str) -> Path:
    """Write a clip as ``frame_000001.png ...`` plus a ``meta.json`` sidecar."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames, start=1):
        Image.fromarray(encode_frame(frame.data)).save(path / FRAME_PATTERN.format(i))
    meta = {
        "subject_id": clip.subject_id,
        "apparent_age": None if clip.apparent_age is None else clip.apparent_age.years,
        "motion_seed": clip.motion_seed,
        "frame_count": clip.frame_count,
        "extras": dict(clip.extras),
    }
    (path / META_FILENAME).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_clip(path: Path | str) -> VideoClip:
    """Read a clip directory written by :func:`save_clip`.

    Tolerates a missing ``meta.json`` (plain frame directories load with empty
    metadata) but rejects empty directories, unreadable frames, and frame-size
    mismatches, naming the offending frame index.
    """
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"clip directory does not exist: {path}")
    files = sorted(path.glob("frame_*.png"))
    if not files:
        raise IngestionError(f"no frames in {path}")

    meta: dict[str, Any] = {}
    meta_path = path / META_FILENAME
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise IngestionError(f"unreadable metadata sidecar: {meta_path}") from e

    frames: list[Frame] = []
    shape: tuple[int, int] | None = None
    for i, file in enumerate(files, start=1):
        try:
            raw = np.asarray(Image.open(file).convert("RGB"))
        except Exception as e:  # PIL raises a zoo of types on corrupt files
            raise IngestionError(f"frame {i} is unreadable: {file}") from e
        if shape is None:
            shape = raw.shape[:2]
        elif raw.shape[:2] != shape:
            raise IngestionError(
                f"frame {i} is {raw.shape[0]}x{raw.shape[1]}, expected "
                f"{shape[0]}x{shape[1]}: {file}"
            )
        try:
            frames.append(Frame(decode_frame(raw)))
        except ValidationError as e:
            raise IngestionError(f"frame {i} is invalid: {e}") from e

    declared = meta.get("frame_count")
    if declared is not None and declared != len(frames):
        raise IngestionError(
            f"metadata declares {declared} frames but {len(frames)} are present in {path}"
        )
    age = meta.get("apparent_age")
    return VideoClip(
        frames=tuple(frames),
        subject_id=meta.get("subject_id", ""),
        apparent_age=None if age is None else AgeValue(age),
        motion_seed=meta.get("motion_seed"),
        extras=meta.get("extras", {}),
    )


def format_age(age: AgeValue | float) -> str:
    """Canonical string key for an age (used in manifests and directory names)."""
    return f"{as_age(age).years:g}"


@dataclass(frozen=True)
class VideoRecord:
    """One subject-at-one-age video inside a dataset manifest."""

    path: str  # relative to the dataset root
    frame_count: int
    motion_seed: int
    sharpness: float
    pose_digest: str


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    videos: Mapping[str, VideoRecord]  # keyed by format_age(age)

    def __post_init__(self) -> None:
        object.__setattr__(self, "videos", dict(self.videos))


@dataclass
class DatasetManifest:
    """Persisted index of subjects x ages x paired videos with provenance."""

    ages: tuple[float, ...]
    creation: dict[str, Any]
    subjects: tuple[SubjectRecord, ...] = ()
    errata: tuple[dict[str, Any], ...] = ()
    schema_version: int = MANIFEST_SCHEMA_VERSION
    created_at: str = ""

    def subject(self, subject_id: str) -> SubjectRecord:
        for record in self.subjects:
            if record.subject_id == subject_id:
                return record
        raise ManifestError(f"unknown subject: {subject_id}")


def validate_manifest(manifest: DatasetManifest, sharpness_threshold: float | None = None) -> None:
    """Check the paired-motion and bookkeeping invariants; raise on violation.

    Structural only: no file accesses, so plans for datasets that were never
    rendered validate too.
    """
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION:
        raise ManifestError(f"unsupported manifest schema version {manifest.schema_version}")
    if sharpness_threshold is None:
        sharpness_threshold = manifest.creation.get("sharpness_threshold")
    expected_keys = {format_age(a) for a in manifest.ages}
    declared_frames = manifest.creation.get("frames_per_video")

    for record in manifest.subjects:
        present = set(record.videos)
        if present != expected_keys:
            missing = sorted(expected_keys - present)
            extra = sorted(present - expected_keys)
            raise ManifestError(
                f"subject {record.subject_id}: age coverage mismatch "
                f"(missing {missing}, unexpected {extra})"
            )
        videos = [record.videos[k] for k in sorted(record.videos)]
        counts = {v.frame_count for v in videos}
        if len(counts) != 1:
            raise ManifestError(
                f"subject {record.subject_id}: per-age frame counts differ: {sorted(counts)}"
            )
        if declared_frames is not None and counts != {declared_frames}:
            raise ManifestError(
                f"subject {record.subject_id}: frame count {counts.pop()} does not match "
                f"declared frames_per_video {declared_frames}"
            )
        if len({v.motion_seed for v in videos}) != 1:
            raise ManifestError(f"subject {record.subject_id}: motion seeds differ across ages")
        if len({v.pose_digest for v in videos}) != 1:
            raise ManifestError(
                f"subject {record.subject_id}: pose metadata differs across ages "
                "(paired-motion guarantee broken)"
            )
        if sharpness_threshold is not None:
            for key, video in record.videos.items():
                if video.sharpness < sharpness_threshold:
                    raise ManifestError(
                        f"subject {record.subject_id} age {key}: sharpness "
                        f"{video.sharpness:.4f} below threshold {sharpness_threshold}"
                    )


def manifest_to_dict(manifest: DatasetManifest) -> dict[str, Any]:
    return {
        "schema_version": manifest.schema_version,
        "created_at": manifest.created_at,
        "ages": list(manifest.ages),
        "creation": manifest.creation,
        "subjects": [
            {
                "subject_id": s.subject_id,
                "videos": {
                    k: {
                        "path": v.path,
                        "frame_count": v.frame_count,
                        "motion_seed": v.motion_seed,
                        "sharpness": v.sharpness,
                        "pose_digest": v.pose_digest,
                    }
                    for k, v in sorted(s.videos.items())
                },
            }
            for s in manifest.subjects
        ],
        "errata": list(manifest.errata),
    }


def manifest_from_dict(data: Mapping[str, Any]) -> DatasetManifest:
    try:
        subjects = tuple(
            SubjectRecord(
                subject_id=s["subject_id"],
                videos={k: VideoRecord(**v) for k, v in s["videos"].items()},
            )
            for s in data["subjects"]
        )
        return DatasetManifest(
            ages=tuple(float(a) for a in data["ages"]),
            creation=dict(data["creation"]),
            subjects=subjects,
            errata=tuple(data.get("errata", [])),
            schema_version=int(data.get("schema_version", MANIFEST_SCHEMA_VERSION)),
            created_at=data.get("created_at", ""),
        )
    except (KeyError, TypeError) as e:
        raise ManifestError(f"malformed manifest: {e}") from e


def save_manifest(manifest: DatasetManifest, root: Path | str) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_FILENAME
    path.write_text(
        json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True), encoding="utf-8"
    )
    return path


def load_manifest(root: Path | str) -> DatasetManifest:
    path = Path(root)
    if path.is_dir():
        path = path / MANIFEST_FILENAME
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {path}") from e
    return manifest_from_dict(data)
