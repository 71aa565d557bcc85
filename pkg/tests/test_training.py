import numpy as np
import pytest
import torch

from revage.datamodel import format_age
from revage.errors import ConfigurationError, ManifestError, TrainingDiverged, ValidationError
from revage.generator import GeneratorConfig
from revage.synthpipeline import PipelineConfig, build_dataset, manifest_stub
from revage.training import (
    ClipCache,
    LossWeights,
    TrainConfig,
    Trainer,
    hinge_d_loss,
    hinge_g_loss,
    materialize_pair,
    sample_pair_spec,
    sample_training_pair,
    total_generator_loss,
)


class TestHingeLosses:
    def test_margin_satisfied(self):
        real = torch.full((2, 1, 4, 4), 1.0)
        fake = torch.full((2, 1, 4, 4), -1.0)
        assert float(hinge_d_loss(real, fake)) == 0.0

    def test_both_margins_violated_by_one(self):
        zeros = torch.zeros(2, 1, 4, 4)
        assert float(hinge_d_loss(zeros, zeros)) == 2.0

    def test_hinge_saturation(self):
        real = torch.full((3, 5), 3.0)
        fake = torch.full((3, 5), -3.0)
        assert float(hinge_d_loss(real, fake)) == 0.0

    def test_generator_side(self):
        assert float(hinge_g_loss(torch.full((4,), 2.0))) == -2.0
        assert float(hinge_g_loss(torch.zeros(4))) == 0.0

    def test_generator_gradient_is_uniform(self):
        fake = torch.randn(8, requires_grad=True)
        hinge_g_loss(fake).backward()
        assert torch.allclose(fake.grad, torch.full((8,), -1.0 / 8))


class TestTotalGeneratorLoss:
    def test_zero_when_output_matches_gt_and_scores_absent(self):
        frames = torch.rand(3, 3, 16, 16)
        total, parts = total_generator_loss(frames, frames.clone(), None, None, LossWeights())
        assert float(total) == 0.0
        assert parts["l1"] == parts["perceptual"] == 0.0

    def test_l1_component_alone(self):
        out = torch.full((2, 3, 16, 16), 0.5)
        gt = torch.zeros(2, 3, 16, 16)
        _, parts = total_generator_loss(out, gt, None, None, LossWeights())
        assert parts["l1"] == pytest.approx(0.5, abs=1e-7)

    def test_decomposition_matches_weighted_sum(self):
        torch.manual_seed(0)
        out = torch.rand(3, 3, 16, 16) * 2 - 1
        gt = torch.rand(3, 3, 16, 16) * 2 - 1
        img_scores = torch.randn(3, 1, 2, 2)
        vid_scores = torch.randn(1, 1, 4, 2, 2)
        weights = LossWeights()  # the published multipliers: 1.0, 0.025, 0.025, 1.0
        total, parts = total_generator_loss(out, gt, img_scores, vid_scores, weights)
        recomposed = (
            1.0 * parts["l1"]
            + 1.0 * parts["perceptual"]
            + 0.025 * parts["adv_image"]
            + 0.025 * parts["adv_video"]
        )
        assert abs(parts["total"] - recomposed) <= 1e-9
        assert float(total) == pytest.approx(recomposed, rel=1e-5)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            total_generator_loss(
                torch.zeros(2, 3, 16, 16), torch.zeros(3, 3, 16, 16), None, None, LossWeights()
            )

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigurationError):
            LossWeights(l1=-1.0)


@pytest.fixture(scope="module")
def stub_manifest():
    return manifest_stub(PipelineConfig(subjects=3, ages=(18.0, 50.0, 85.0), seed=7))


class TestSampling:
    def test_seeded_rng_reproduces_samples(self, stub_manifest):
        config = TrainConfig(seed=0)
        a = [sample_pair_spec(stub_manifest, np.random.default_rng(5), config) for _ in range(20)]
        b = [sample_pair_spec(stub_manifest, np.random.default_rng(5), config) for _ in range(20)]
        assert a == b

    def test_reversal_rate(self, stub_manifest):
        config = TrainConfig()
        rng = np.random.default_rng(1)
        n = 10_000
        reversed_count = sum(
            sample_pair_spec(stub_manifest, rng, config).reversed for _ in range(n)
        )
        assert abs(reversed_count / n - 0.5) <= 0.03

    def test_interval_choices_uniform(self, stub_manifest):
        config = TrainConfig()
        rng = np.random.default_rng(2)
        n = 10_000
        counts = {3: 0, 5: 0, 7: 0}
        for _ in range(n):
            counts[sample_pair_spec(stub_manifest, rng, config).delta_t] += 1
        for dt in (3, 5, 7):
            assert abs(counts[dt] / n - 1 / 3) <= 0.02

    def test_self_reconstruction_pairs_occur(self, stub_manifest):
        config = TrainConfig()
        rng = np.random.default_rng(3)
        same = sum(
            s.input_age == s.target_age
            for s in (sample_pair_spec(stub_manifest, rng, config) for _ in range(2000))
        )
        # independent draws over 3 ages: expect about 1/3
        assert 0.25 <= same / 2000 <= 0.42

    def test_window_defaults_to_three_intervals_plus_one(self, stub_manifest):
        config = TrainConfig(delta_t_choices=(5,))
        spec = sample_pair_spec(stub_manifest, np.random.default_rng(4), config)
        assert spec.window == 16
        assert 0 <= spec.start <= 57 - 16

    def test_missing_age_video_rejected(self, stub_manifest):
        from dataclasses import replace

        broken = replace(stub_manifest, ages=(18.0, 99.0))
        config = TrainConfig()
        with pytest.raises(ManifestError, match="no video"):
            for _ in range(50):
                sample_pair_spec(broken, np.random.default_rng(5), config)


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("train_data")
    config = PipelineConfig(subjects=2, ages=(18.0, 85.0), seed=1)
    manifest = build_dataset(config, root)
    return root, manifest


def desk_gen_config(**overrides):
    base = dict(resolution=64, base_channels=8, hidden_channels=8, depth=2, seed=0)
    base.update(overrides)
    return GeneratorConfig(**base)


FAST_TRAIN = dict(delta_t_choices=(2,), window_frames=6, batch_size=1)


class TestMaterialize:
    def test_windows_are_paired(self, desk_data):
        root, manifest = desk_data
        cache = ClipCache(root)
        config = TrainConfig(seed=3, **FAST_TRAIN)
        rng = np.random.default_rng(3)
        for _ in range(10):
            spec = sample_pair_spec(manifest, rng, config)
            sample = materialize_pair(spec, manifest, cache)
            assert sample.input_frames.shape == sample.gt_frames.shape
            if spec.input_age == spec.target_age:
                assert np.array_equal(sample.input_frames, sample.gt_frames)

    def test_reversal_applies_to_both_windows(self, desk_data):
        root, manifest = desk_data
        cache = ClipCache(root)
        config = TrainConfig(seed=0, reverse_prob=1.0, **FAST_TRAIN)
        spec = sample_pair_spec(manifest, np.random.default_rng(0), config)
        fwd = materialize_pair(
            type(spec)(**{**spec.__dict__, "reversed": False}), manifest, cache
        )
        rev = materialize_pair(spec, manifest, cache)
        assert np.array_equal(rev.input_frames, fwd.input_frames[::-1])
        assert np.array_equal(rev.gt_frames, fwd.gt_frames[::-1])


class TestTrainer:
    def test_zero_learning_rate_keeps_parameters(self, desk_data):
        root, manifest = desk_data
        trainer = Trainer(
            manifest,
            root,
            desk_gen_config(),
            TrainConfig(learning_rate=0.0, iterations=1, seed=0, **FAST_TRAIN),
        )
        before = [p.detach().clone() for p in trainer.model.parameters()]
        trainer.run(1)
        for p0, p1 in zip(before, trainer.model.parameters()):
            assert torch.equal(p0, p1)

    def test_same_seed_gives_identical_loss_curves(self, desk_data):
        root, manifest = desk_data
        records = []
        for _ in range(2):
            trainer = Trainer(
                manifest,
                root,
                desk_gen_config(seed=2),
                TrainConfig(iterations=3, seed=9, **FAST_TRAIN),
            )
            records.append(trainer.run(3))
        assert records[0] == records[1]

    def test_run_artifacts(self, desk_data, tmp_path):
        root, manifest = desk_data
        run_dir = tmp_path / "run"
        trainer = Trainer(
            manifest,
            root,
            desk_gen_config(),
            TrainConfig(iterations=2, seed=1, **FAST_TRAIN),
            run_dir=run_dir,
        )
        trainer.run()
        log = (run_dir / "log.csv").read_text().strip().splitlines()
        assert log[0].startswith("iteration,")
        assert len(log) == 3  # header + 2 records
        assert (run_dir / "ckpt_final.npz").exists()
        assert (run_dir / "config.json").exists()
        import json

        summary = json.loads((run_dir / "summary.json").read_text())
        assert "self_reconstruction_l1" in summary

    def test_non_finite_loss_aborts_with_diagnostics(self, desk_data, tmp_path):
        root, manifest = desk_data
        run_dir = tmp_path / "run"
        trainer = Trainer(
            manifest,
            root,
            desk_gen_config(),
            TrainConfig(iterations=1, seed=2, **FAST_TRAIN),
            run_dir=run_dir,
        )
        with torch.no_grad():
            trainer.model.head.weight[0, 0, 0, 0] = float("nan")
        batch = [
            sample_training_pair(manifest, trainer.rng, trainer.config, trainer.cache)
        ]
        with pytest.raises(TrainingDiverged):
            trainer.train_step(batch)
        assert (run_dir / "diverged.json").exists()

    def test_deltas_input_mode_runs(self, desk_data):
        from revage.discriminator import VideoDiscConfig

        root, manifest = desk_data
        trainer = Trainer(
            manifest,
            root,
            desk_gen_config(),
            TrainConfig(iterations=1, seed=3, **FAST_TRAIN),
            video_config=VideoDiscConfig(input_mode="deltas", seed=5),
        )
        record = trainer.train_step(
            [sample_training_pair(manifest, trainer.rng, trainer.config, trainer.cache)]
        )
        assert np.isfinite(record["total"])
