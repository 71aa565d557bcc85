"""Loss objective and optimization loop.

The generator minimizes a weighted sum of per-frame L1, a perceptual
distance, and two hinge adversarial terms (one per discriminator); the
discriminators train on the hinge objective against real windows from the
paired dataset. Temporal augmentation draws the neighbor interval from a
small set and time-reverses both windows of a pair together with
probability one half; input and target ages are drawn independently, so
self-reconstruction pairs occur naturally.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    load_optimizer_state,
    optimizer_arrays,
    read_arrays,
    save_checkpoint,
)
from .datamodel import DatasetManifest, VideoClip, format_age, load_clip
from .discriminator import (
    ImageDiscConfig,
    PatchImageDiscriminator,
    TemporalVideoDiscriminator,
    VideoDiscConfig,
)
from .errors import ConfigurationError, ManifestError, TrainingDiverged, ValidationError
from .generator import GeneratorConfig, RecurrentUNet, rollout
from .perceptual import gradient_feature_distance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    adv_image: float = 0.025
    adv_video: float = 0.025
    perceptual: float = 1.0

    def __post_init__(self) -> None:
        if min(self.l1, self.adv_image, self.adv_video, self.perceptual) < 0:
            raise ConfigurationError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return {
            "l1": self.l1,
            "adv_image": self.adv_image,
            "adv_video": self.adv_video,
            "perceptual": self.perceptual,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the full-scale run used 250k iterations at batch 4."""

    learning_rate: float = 1e-4
    iterations: int = 500
    batch_size: int = 2
    delta_t_choices: tuple[int, ...] = (3, 5, 7)
    reverse_prob: float = 0.5
    seed: int = 0
    window_frames: int | None = None  # None: 3*delta_t + 1
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self) -> None:
        if not self.delta_t_choices or min(self.delta_t_choices) < 1:
            raise ConfigurationError("delta_t_choices must be non-empty positive integers")
        if not 0.0 <= self.reverse_prob <= 1.0:
            raise ConfigurationError("reverse_prob must lie in [0, 1]")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigurationError("batch_size must be >= 1 and iterations >= 0")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "delta_t_choices": list(self.delta_t_choices),
            "reverse_prob": self.reverse_prob,
            "seed": self.seed,
            "window_frames": self.window_frames,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["delta_t_choices"] = tuple(int(d) for d in data["delta_t_choices"])
        return cls(**data)


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """mean(max(0, 1 - real)) + mean(max(0, 1 + fake))."""
    return torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """-mean(fake): the generator pushes fake scores up."""
    return -fake_scores.mean()


def total_generator_loss(
    output_frames: torch.Tensor,
    gt_frames: torch.Tensor,
    image_scores: torch.Tensor | None,
    video_scores: torch.Tensor | None,
    weights: LossWeights,
    perceptual_backend=gradient_feature_distance,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted generator objective over aligned (N, 3, H, W) frame stacks.

    Returns the scalar loss plus a breakdown of the unweighted components;
    the total equals the weighted sum of the breakdown entries exactly.
    """
    if output_frames.shape != gt_frames.shape:
        raise ValidationError(
            f"output/ground-truth mismatch: {tuple(output_frames.shape)} vs "
            f"{tuple(gt_frames.shape)}"
        )
    zero = output_frames.new_zeros(())
    l1 = (output_frames - gt_frames).abs().mean()
    perceptual = (
        perceptual_backend(output_frames, gt_frames) if weights.perceptual > 0 else zero
    )
    adv_image = hinge_g_loss(image_scores) if image_scores is not None else zero
    adv_video = hinge_g_loss(video_scores) if video_scores is not None else zero
    total = (
        weights.l1 * l1
        + weights.perceptual * perceptual
        + weights.adv_image * adv_image
        + weights.adv_video * adv_video
    )
    breakdown = {
        "l1": float(l1.detach()),
        "perceptual": float(perceptual.detach()),
        "adv_image": float(adv_image.detach()),
        "adv_video": float(adv_video.detach()),
    }
    # reported total recomposes exactly from the reported components
    breakdown["total"] = (
        weights.l1 * breakdown["l1"]
        + weights.perceptual * breakdown["perceptual"]
        + weights.adv_image * breakdown["adv_image"]
        + weights.adv_video * breakdown["adv_video"]
    )
    return total, breakdown


@dataclass(frozen=True)
class PairSpec:
    """The random decisions behind one training pair, before any file I/O."""

    subject_id: str
    input_age: float
    target_age: float
    delta_t: int
    start: int
    window: int
    reversed: bool


@dataclass
class TrainingSample:
    input_frames: np.ndarray  # (W, H, W, 3) float32
    gt_frames: np.ndarray
    input_age: float
    target_age: float
    delta_t: int


def sample_pair_spec(
    manifest: DatasetManifest, rng: np.random.Generator, config: TrainConfig
) -> PairSpec:
    """Draw subject, age pair, interval, window placement, and reversal."""
    if not manifest.subjects:
        raise ManifestError("manifest lists no subjects to sample from")
    subject = manifest.subjects[int(rng.integers(len(manifest.subjects)))]
    ages = manifest.ages
    input_age = float(ages[int(rng.integers(len(ages)))])
    target_age = float(ages[int(rng.integers(len(ages)))])  # equality allowed
    delta_t = int(config.delta_t_choices[int(rng.integers(len(config.delta_t_choices)))])
    for age in (input_age, target_age):
        if format_age(age) not in subject.videos:
            raise ManifestError(f"subject {subject.subject_id} has no video for age {age:g}")
    frame_count = subject.videos[format_age(input_age)].frame_count
    window = min(config.window_frames or (3 * delta_t + 1), frame_count)
    start = int(rng.integers(frame_count - window + 1))
    return PairSpec(
        subject_id=subject.subject_id,
        input_age=input_age,
        target_age=target_age,
        delta_t=delta_t,
        start=start,
        window=window,
        reversed=bool(rng.random() < config.reverse_prob),
    )


class ClipCache:
    """Decoded clip arrays keyed by path; the dataset is small at desk scale."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self._arrays: dict[str, np.ndarray] = {}

    def frames(self, rel_path: str) -> np.ndarray:
        if rel_path not in self._arrays:
            self._arrays[rel_path] = load_clip(self.root / rel_path).as_array()
        return self._arrays[rel_path]


def materialize_pair(spec: PairSpec, manifest: DatasetManifest, cache: ClipCache) -> TrainingSample:
    subject = manifest.subject(spec.subject_id)
    window = slice(spec.start, spec.start + spec.window)
    inp = cache.frames(subject.videos[format_age(spec.input_age)].path)[window]
    gt = cache.frames(subject.videos[format_age(spec.target_age)].path)[window]
    if spec.reversed:
        inp, gt = inp[::-1], gt[::-1]
    return TrainingSample(
        input_frames=np.ascontiguousarray(inp),
        gt_frames=np.ascontiguousarray(gt),
        input_age=spec.input_age,
        target_age=spec.target_age,
        delta_t=spec.delta_t,
    )


def sample_training_pair(
    manifest: DatasetManifest,
    rng: np.random.Generator,
    config: TrainConfig,
    cache: ClipCache,
) -> TrainingSample:
    """One augmented (input window, ground-truth window) pair; both windows
    come from the same subject and motion, cut and reversed identically."""
    return materialize_pair(sample_pair_spec(manifest, rng, config), manifest, cache)


def _to_tensor(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(frames.transpose(0, 3, 1, 2).copy())


def _triples(frames: torch.Tensor) -> torch.Tensor | None:
    """(N, 3, H, W) -> (N-2, 3, 3, H, W) sliding windows of three consecutive frames."""
    if frames.shape[0] < 3:
        return None
    stacked = torch.stack([frames[:-2], frames[1:-1], frames[2:]], dim=2)
    return stacked


class Trainer:
    """Alternating hinge-GAN optimization of the recurrent generator."""

    def __init__(
        self,
        manifest: DatasetManifest,
        data_root: Path | str,
        gen_config: GeneratorConfig,
        train_config: TrainConfig | None = None,
        weights: LossWeights | None = None,
        image_config: ImageDiscConfig | None = None,
        video_config: VideoDiscConfig | None = None,
        run_dir: Path | str | None = None,
    ):
        self.manifest = manifest
        self.config = train_config or TrainConfig()
        self.weights = weights or LossWeights()
        torch.manual_seed(self.config.seed)
        self.model = RecurrentUNet(gen_config)
        self.disc_image = PatchImageDiscriminator(
            image_config or ImageDiscConfig(seed=self.config.seed + 1)
        )
        self.disc_video = TemporalVideoDiscriminator(
            video_config or VideoDiscConfig(seed=self.config.seed + 2)
        )
        betas = (0.9, 0.999)
        self.opt_g = torch.optim.Adam(
            self.model.parameters(), lr=self.config.learning_rate, betas=betas
        )
        self.opt_d = torch.optim.Adam(
            list(self.disc_image.parameters()) + list(self.disc_video.parameters()),
            lr=self.config.learning_rate,
            betas=betas,
        )
        self.rng = np.random.default_rng(self.config.seed)
        self.cache = ClipCache(data_root)
        self.iteration = 0
        self.history: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.json").write_text(
                json.dumps(
                    {
                        "train": self.config.to_dict(),
                        "generator": gen_config.to_dict(),
                        "weights": self.weights.to_dict(),
                        "image_disc": self.disc_image.config.to_dict(),
                        "video_disc": self.disc_video.config.to_dict(),
                    },
                    indent=2,
                    sort_keys=True,
                )
            )

    def _mask_plane(self, frames: torch.Tensor, age: float) -> torch.Tensor:
        return frames.new_full((frames.shape[0], 1, *frames.shape[-2:]), age / 100.0)

    def _video_input(self, frames: torch.Tensor, reference: torch.Tensor) -> torch.Tensor | None:
        if self.disc_video.config.input_mode == "deltas":
            return _triples(frames - reference)
        return _triples(frames)

    def train_step(self, batch: list[TrainingSample]) -> dict:
        """One discriminator update (both critics), then one generator update.

        The generated windows are produced once with gradients attached; the
        discriminator phase sees them detached, the generator phase re-scores
        the same outputs through the freshly updated critics.
        """
        tensors = [
            (
                _to_tensor(s.input_frames),
                _to_tensor(s.gt_frames),
                s.input_age,
                s.target_age,
                s.delta_t,
            )
            for s in batch
        ]
        outputs = [rollout(self.model, inp, ia, ta, dt) for inp, _gt, ia, ta, dt in tensors]

        # discriminator phase
        self.opt_d.zero_grad()
        d_image = torch.zeros(())
        d_video = torch.zeros(())
        for (inp, gt, _ia, ta, _dt), out in zip(tensors, outputs):
            fake = out.detach()
            mask = self._mask_plane(gt, ta)
            d_image = d_image + hinge_d_loss(
                self.disc_image(gt, mask), self.disc_image(fake, mask)
            )
            real_v = self._video_input(gt, inp)
            fake_v = self._video_input(fake, inp)
            if real_v is not None:
                vmask = mask[:1]
                d_video = d_video + hinge_d_loss(
                    self.disc_video(real_v, vmask.expand(real_v.shape[0], -1, -1, -1)),
                    self.disc_video(fake_v, vmask.expand(fake_v.shape[0], -1, -1, -1)),
                )
        d_loss = (d_image + d_video) / len(batch)
        d_loss.backward()
        self.opt_d.step()

        # generator phase
        self.opt_g.zero_grad()
        totals = []
        parts_acc = {"l1": 0.0, "perceptual": 0.0, "adv_image": 0.0, "adv_video": 0.0, "total": 0.0}
        for (inp, gt, ia, ta, dt), out in zip(tensors, outputs):
            mask = self._mask_plane(out, ta)
            img_scores = self.disc_image(out, mask)
            vid_in = self._video_input(out, inp)
            vid_scores = (
                self.disc_video(vid_in, mask[:1].expand(vid_in.shape[0], -1, -1, -1))
                if vid_in is not None
                else None
            )
            total, parts = total_generator_loss(
                out, gt, img_scores, vid_scores, self.weights
            )
            totals.append(total)
            for k in parts_acc:
                parts_acc[k] += parts[k] / len(batch)
        g_loss = torch.stack(totals).mean()
        g_loss.backward()
        self.opt_g.step()

        record = {
            "iteration": self.iteration,
            "d_image": float(d_image.detach()) / len(batch),
            "d_video": float(d_video.detach()) / len(batch),
            **parts_acc,
        }
        if not all(np.isfinite(v) for v in record.values()):
            self._dump_diagnostics(record)
            raise TrainingDiverged(f"non-finite loss at iteration {self.iteration}: {record}")
        self.iteration += 1
        self.history.append(record)
        return record

    def _dump_diagnostics(self, record: dict) -> None:
        if self.run_dir:
            (self.run_dir / "diverged.json").write_text(
                json.dumps({"record": record, "history_tail": self.history[-20:]}, indent=2)
            )

    def run(self, iterations: int | None = None) -> list[dict]:
        """Train for the configured number of iterations, logging every step."""
        iterations = self.config.iterations if iterations is None else iterations
        log_file = None
        if self.run_dir:
            log_path = self.run_dir / "log.csv"
            fresh = not log_path.exists()
            log_file = log_path.open("a", encoding="utf-8")
            if fresh:
                log_file.write(
                    "iteration,d_image,d_video,l1,perceptual,adv_image,adv_video,total\n"
                )
        try:
            for _ in range(iterations):
                batch = [
                    sample_training_pair(self.manifest, self.rng, self.config, self.cache)
                    for _ in range(self.config.batch_size)
                ]
                record = self.train_step(batch)
                if log_file:
                    log_file.write(
                        "{iteration},{d_image:.9g},{d_video:.9g},{l1:.9g},{perceptual:.9g},"
                        "{adv_image:.9g},{adv_video:.9g},{total:.9g}\n".format(**record)
                    )
                    log_file.flush()
                if (
                    self.run_dir
                    and self.config.checkpoint_every
                    and self.iteration % self.config.checkpoint_every == 0
                ):
                    self.save(self.run_dir / f"ckpt_{self.iteration:07d}.npz")
        finally:
            if log_file:
                log_file.close()
        if self.run_dir:
            self.save(self.run_dir / "ckpt_final.npz")
            self._write_summary()
        return self.history

    def save(self, path: Path | str):
        opt_g_arrays, opt_g_meta = optimizer_arrays("opt_g", self.opt_g)
        opt_d_arrays, opt_d_meta = optimizer_arrays("opt_d", self.opt_d)
        return save_checkpoint(
            path,
            self.model,
            iteration=self.iteration,
            extra_modules={"disc_image": self.disc_image, "disc_video": self.disc_video},
            extra_meta={
                "train_config": self.config.to_dict(),
                "weights": self.weights.to_dict(),
                "optimizers": {"opt_g": opt_g_meta, "opt_d": opt_d_meta},
                "extra_arrays": sorted(opt_g_arrays | opt_d_arrays),
            },
            extra_arrays={**opt_g_arrays, **opt_d_arrays},
        )

    def restore(self, path: Path | str) -> None:
        """Resume from a checkpoint written by :meth:`save`: restores the
        generator, both discriminators, optimizer states, and the iteration
        counter. Data sampling restarts from the configured seed."""
        from .checkpoint import _load_state  # same container, same key scheme

        meta, arrays = read_arrays(path)
        _load_state("generator", self.model, arrays)
        for name, module in (("disc_image", self.disc_image), ("disc_video", self.disc_video)):
            if name in meta.get("modules", []):
                _load_state(name, module, arrays)
        optimizers = meta.get("optimizers", {})
        if "opt_g" in optimizers:
            load_optimizer_state("opt_g", self.opt_g, arrays, optimizers["opt_g"])
        if "opt_d" in optimizers:
            load_optimizer_state("opt_d", self.opt_d, arrays, optimizers["opt_d"])
        self.iteration = int(meta.get("iteration", 0))

    def self_reconstruction_l1(self) -> float:
        """Same-age L1 to the input on a fixed manifest window (lower is better)."""
        subject = self.manifest.subjects[0]
        key = sorted(subject.videos)[0]
        frames = self.cache.frames(subject.videos[key].path)[:8]
        inp = _to_tensor(np.ascontiguousarray(frames))
        age = float(key)
        with torch.no_grad():
            out = rollout(self.model, inp, age, age, interval=1)
        return float((out - inp).abs().mean())

    def _write_summary(self) -> None:
        summary = {
            "iterations": self.iteration,
            "self_reconstruction_l1": self.self_reconstruction_l1(),
            "final": self.history[-1] if self.history else None,
        }
        (self.run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
