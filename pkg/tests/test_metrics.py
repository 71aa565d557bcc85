import csv
import json

import numpy as np
import pytest

from revage.checkpoint import save_checkpoint
from revage.datamodel import Frame, VideoClip
from revage.errors import MetricError, ValidationError
from revage.generator import GeneratorConfig, RecurrentUNet
from revage.metrics import (
    ROI_REGIONS,
    age_mae,
    evaluate_corpus,
    gaussian_age_estimate,
    identity_similarity,
    roi_specs,
    t_age,
    trwc,
)
from revage.perceptual import GradientFeatureBackend
from revage.procedural import AgeEstimate
from revage.synthpipeline import PipelineConfig, build_dataset

LANDMARKS = {
    "left_eye_outer": (20.0, 24.0),
    "right_eye_outer": (44.0, 24.0),
    "mouth_left": (26.0, 46.0),
    "mouth_right": (38.0, 46.0),
}


def synthetic_clip(rng, n=5, size=64, scale=1.0):
    frames = tuple(
        Frame((rng.uniform(-1, 1, size=(size, size, 3)) * scale).astype(np.float32))
        for _ in range(n)
    )
    extras = {"landmarks": [{k: list(v) for k, v in LANDMARKS.items()}] * n}
    return VideoClip(frames=frames, extras=extras)


def trwc_oracle(generated, real, interval, dist):
    # independent term-by-term enumeration of the ratio sum
    specs = roi_specs(real)
    vals = []
    for region in ROI_REGIONS:
        for t in range(real.frame_count - interval):
            b0 = specs[region].boxes[t]
            b1 = specs[region].boxes[t + interval]
            den = dist(b0.crop(real.frames[t].data), b1.crop(real.frames[t + interval].data))
            if den < 1e-6:
                continue
            num = dist(
                b0.crop(generated.frames[t].data),
                b1.crop(generated.frames[t + interval].data),
            )
            vals.append(num / den)
    return sum(vals) / len(vals)


class TestTrwc:
    def test_identical_clips_give_exactly_one(self):
        rng = np.random.default_rng(0)
        clip = synthetic_clip(rng)
        result = trwc(clip, clip)
        assert result.value == 1.0
        assert result.skipped == 0

    def test_constant_generated_gives_zero(self):
        rng = np.random.default_rng(1)
        real = synthetic_clip(rng)
        const = real.with_frames(np.zeros_like(real.as_array()))
        assert trwc(const, real).value == 0.0

    def test_matches_enumeration_oracle(self):
        dist = GradientFeatureBackend()
        for seed in range(3):
            rng = np.random.default_rng(seed)
            real = synthetic_clip(rng)
            gen = synthetic_clip(rng)
            got = trwc(gen, real, dist_backend=dist).value
            assert abs(got - trwc_oracle(gen, real, 1, dist)) <= 1e-9

    def test_flicker_monotone_in_amplitude(self):
        rng = np.random.default_rng(2)
        real = synthetic_clip(rng, scale=0.5)
        pattern = rng.uniform(-1, 1, size=real.as_array().shape[1:])
        values = []
        for amp in (0.05, 0.15, 0.45):
            arr = real.as_array().copy()
            for t in range(arr.shape[0]):
                arr[t] += amp * pattern * (1 if t % 2 == 0 else -1)
            flickered = real.with_frames(np.clip(arr, -1, 1))
            values.append(trwc(flickered, real).value)
        assert values[0] < values[1] < values[2]

    def test_offset_invariance_with_gradient_backend(self):
        rng = np.random.default_rng(3)
        real = synthetic_clip(rng, scale=0.6)
        gen = synthetic_clip(rng, scale=0.6)
        base = trwc(gen, real).value
        shifted = trwc(
            gen.with_frames(gen.as_array() + 0.2),
            real.with_frames(real.as_array() + 0.2),
        ).value
        assert abs(base - shifted) < 1e-6

    def test_interval_must_be_shorter_than_clip(self):
        rng = np.random.default_rng(4)
        clip = synthetic_clip(rng, n=3)
        with pytest.raises(MetricError):
            trwc(clip, clip, interval=3)

    def test_clip_alignment_required(self):
        rng = np.random.default_rng(5)
        with pytest.raises(ValidationError):
            trwc(synthetic_clip(rng, n=4), synthetic_clip(rng, n=5))

    def test_static_real_pairs_skipped_and_counted(self):
        rng = np.random.default_rng(6)
        real = synthetic_clip(rng, n=4)
        arr = real.as_array().copy()
        arr[1] = arr[0]  # one static adjacent pair in every region
        real = real.with_frames(arr)
        gen = synthetic_clip(rng, n=4)
        result = trwc(gen, real)
        assert result.skipped == len(ROI_REGIONS)
        assert result.evaluated == len(ROI_REGIONS) * 3 - 3
        assert 0 < result.skip_fraction < 1

    def test_all_static_real_is_undefined(self):
        rng = np.random.default_rng(7)
        real = synthetic_clip(rng)
        const = real.with_frames(np.tile(real.as_array()[:1], (5, 1, 1, 1)))
        gen = synthetic_clip(rng)
        with pytest.raises(MetricError, match="undefined"):
            trwc(gen, const)


def stub_estimator(expected_ages):
    def backend(clip):
        assert clip.frame_count == len(expected_ages)
        return [gaussian_age_estimate(a) for a in expected_ages]

    return backend


def stub_distribution_estimator(distributions):
    def backend(clip):
        return [
            AgeEstimate(expected_age=float(np.arange(101) @ d), distribution=d)
            for d in distributions
        ]

    return backend


def one_hot(age):
    d = np.zeros(101)
    d[age] = 1.0
    return d


class TestTAge:
    def test_constant_clip_is_zero_in_both_modes(self):
        rng = np.random.default_rng(8)
        clip = synthetic_clip(rng, n=3)
        backend = stub_estimator([40.0, 40.0, 40.0])
        assert t_age(clip, backend, mode="expected_diff") == 0.0
        assert t_age(clip, backend, mode="cosine") <= 1e-12

    def test_expected_diff_arithmetic(self):
        rng = np.random.default_rng(9)
        clip = synthetic_clip(rng, n=3)
        assert t_age(clip, stub_estimator([20.0, 22.0, 21.0])) == pytest.approx(1.5, abs=1e-12)

    def test_cosine_mode_matches_enumeration(self):
        rng = np.random.default_rng(10)
        clip = synthetic_clip(rng, n=5)
        mix = np.zeros(101)
        mix[20] = mix[30] = 0.5
        dists = [one_hot(20), mix, one_hot(30), one_hot(30), mix]
        backend = stub_distribution_estimator(dists)
        # hand enumeration of 1 - cos for each adjacent pair
        expected = []
        for a, b in zip(dists, dists[1:]):
            cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
            expected.append(1.0 - cos)
        assert t_age(clip, backend, mode="cosine") == pytest.approx(
            float(np.mean(expected)), abs=1e-9
        )

    def test_needs_two_frames(self):
        rng = np.random.default_rng(11)
        with pytest.raises(MetricError):
            t_age(synthetic_clip(rng, n=1), stub_estimator([40.0]))

    def test_unknown_mode(self):
        rng = np.random.default_rng(12)
        with pytest.raises(MetricError):
            t_age(synthetic_clip(rng, n=2), stub_estimator([1.0, 2.0]), mode="bogus")


class TestAgeMae:
    def test_exact_estimator_gives_zero(self):
        rng = np.random.default_rng(13)
        clip = synthetic_clip(rng, n=2)
        assert age_mae([clip], 85, stub_estimator([85.0, 85.0])) == 0.0

    def test_arithmetic(self):
        rng = np.random.default_rng(14)
        clip = synthetic_clip(rng, n=2)
        assert age_mae([clip], 85, stub_estimator([80.0, 90.0])) == pytest.approx(5.0)

    def test_empty_set(self):
        with pytest.raises(MetricError):
            age_mae([], 85, stub_estimator([]))


class TestIdentitySimilarity:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(15)
        clip = synthetic_clip(rng, n=3)
        backend = lambda c: np.tile(np.array([1.0, 2.0, 3.0]), (c.frame_count, 1))
        assert identity_similarity(clip, clip, backend) == pytest.approx(1.0)

    def test_orthogonal_embeddings(self):
        rng = np.random.default_rng(16)
        a = synthetic_clip(rng, n=2)
        b = synthetic_clip(rng, n=2)
        vecs = {id(a): np.array([[1.0, 0.0]] * 2), id(b): np.array([[0.0, 1.0]] * 2)}
        assert identity_similarity(a, b, lambda c: vecs[id(c)]) == pytest.approx(0.0)

    def test_known_angles(self):
        rng = np.random.default_rng(17)
        a = synthetic_clip(rng, n=2)
        b = synthetic_clip(rng, n=2)
        va = np.array([[1.0, 0.0], [1.0, 0.0]])
        vb = np.array([[1.0, 1.0], [np.sqrt(3), 1.0]])  # 45 and 30 degrees
        vecs = {id(a): va, id(b): vb}
        expected = (np.cos(np.pi / 4) + np.cos(np.pi / 6)) / 2
        assert identity_similarity(a, b, lambda c: vecs[id(c)]) == pytest.approx(expected)

    def test_zero_vector_rejected(self):
        rng = np.random.default_rng(18)
        a = synthetic_clip(rng, n=1)
        with pytest.raises(MetricError):
            identity_similarity(a, a, lambda c: np.zeros((1, 4)))


class TestRoiSpecs:
    def test_boxes_share_size_and_stay_in_frame(self):
        rng = np.random.default_rng(19)
        clip = synthetic_clip(rng)
        specs = roi_specs(clip)
        assert set(specs) == set(ROI_REGIONS)
        side = specs["mouth"].boxes[0].y1 - specs["mouth"].boxes[0].y0
        assert side == 6  # 0.25 * interocular 24
        for spec in specs.values():
            for b in spec.boxes:
                assert 0 <= b.y0 < b.y1 <= clip.height
                assert 0 <= b.x0 < b.x1 <= clip.width
                assert (b.y1 - b.y0) == (b.x1 - b.x0) == side


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    config = PipelineConfig(subjects=2, ages=(18.0, 85.0), seed=3)
    manifest = build_dataset(config, root)
    return root, manifest


class TestEvaluateCorpus:
    def test_identity_model_rows_and_aggregates(self, corpus, tmp_path):
        root, manifest = corpus
        model = RecurrentUNet(
            GeneratorConfig(resolution=64, base_channels=8, hidden_channels=8, depth=2,
                            zero_init_output=True)
        )
        ckpt = save_checkpoint(tmp_path / "ckpt.npz", model)
        summary = evaluate_corpus(root, ckpt, targets=[18.0, 85.0], out_dir=tmp_path / "report")
        assert summary["rows"] == 2 * 2 * 2  # subjects x input ages x targets
        assert summary["interval"] == 1
        with (tmp_path / "report" / "rows.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == summary["rows"]
        # identity model output == input, so TRWC is exactly 1 on every row
        assert all(float(r["trwc"]) == 1.0 for r in rows)
        # per-target aggregate equals the mean of its rows
        summary_json = json.loads((tmp_path / "report" / "summary.json").read_text())
        for target, agg in summary_json["per_target"].items():
            subset = [float(r["age_mae"]) for r in rows if float(r["target_age"]) == float(target)]
            assert agg["age_mae"] == pytest.approx(float(np.mean(subset)), rel=1e-6)

    def test_debug_roi_overlays(self, corpus, tmp_path):
        root, _ = corpus
        model = RecurrentUNet(
            GeneratorConfig(resolution=64, base_channels=8, hidden_channels=8, depth=2,
                            zero_init_output=True)
        )
        ckpt = save_checkpoint(tmp_path / "ckpt.npz", model)
        evaluate_corpus(root, ckpt, targets=[85.0], out_dir=tmp_path / "report", debug_roi=True)
        overlays = list((tmp_path / "report").glob("roi_*.png"))
        assert len(overlays) == 4  # subjects x input ages

    def test_empty_corpus_rejected(self, tmp_path):
        from revage.datamodel import DatasetManifest, save_manifest

        empty = DatasetManifest(ages=(18.0,), creation={})
        save_manifest(empty, tmp_path / "data")
        model = RecurrentUNet(GeneratorConfig(resolution=64, base_channels=4,
                                              hidden_channels=4, depth=2))
        ckpt = save_checkpoint(tmp_path / "ckpt.npz", model)
        with pytest.raises(MetricError, match="empty corpus"):
            evaluate_corpus(tmp_path / "data", ckpt, targets=[85.0], out_dir=tmp_path / "report")
