import numpy as np
import pytest
import torch

from revage.datamodel import Frame, make_age_mask
from revage.discriminator import (
    ImageDiscConfig,
    PatchImageDiscriminator,
    TemporalVideoDiscriminator,
    VideoDiscConfig,
    image_disc_forward,
    video_disc_forward,
)
from revage.errors import ConfigurationError, ValidationError

TABLE_IMAGE_512 = [
    ("input", (512, 512, 4)),
    ("conv1", (256, 256, 64)),
    ("conv2", (128, 128, 128)),
    ("conv3", (64, 64, 256)),
    ("conv4", (64, 64, 512)),
    ("conv5", (64, 64, 1)),
]

TABLE_VIDEO_512 = [
    ("input", (512, 512, 3, 4)),
    ("conv1", (256, 256, 32, 4)),
    ("conv2", (128, 128, 64, 4)),
    ("conv3", (64, 64, 128, 4)),
    ("conv4", (64, 64, 256, 4)),
    ("conv5", (64, 64, 1, 4)),
]


def random_frame(rng, size=64):
    return Frame(rng.uniform(-1, 1, size=(size, size, 3)).astype(np.float32))


class TestImageDiscriminator:
    def test_walker_matches_table_at_512(self):
        model = PatchImageDiscriminator()
        assert model.layer_shapes(512) == TABLE_IMAGE_512

    def test_live_forward_matches_walker_at_desk(self):
        model = PatchImageDiscriminator(ImageDiscConfig(seed=1))
        scores = model(torch.randn(2, 3, 64, 64), torch.rand(2, 1, 64, 64))
        assert scores.shape == (2, 1, 8, 8)
        assert model.layer_shapes(64)[-1] == ("conv5", (8, 8, 1))

    def test_zero_weights_give_zero_scores(self):
        model = PatchImageDiscriminator()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        rng = np.random.default_rng(0)
        scores = image_disc_forward(random_frame(rng), make_age_mask(85, 64, 64), model)
        assert scores.shape == (8, 8)
        assert np.all(scores == 0.0)

    def test_conditional_on_target_age(self):
        model = PatchImageDiscriminator(ImageDiscConfig(seed=2))
        rng = np.random.default_rng(1)
        frame = random_frame(rng)
        a = image_disc_forward(frame, make_age_mask(18, 64, 64), model)
        b = image_disc_forward(frame, make_age_mask(85, 64, 64), model)
        assert np.abs(a - b).max() > 1e-6

    def test_size_mismatch(self):
        model = PatchImageDiscriminator()
        rng = np.random.default_rng(2)
        with pytest.raises(ValidationError):
            image_disc_forward(random_frame(rng, 64), make_age_mask(50, 32, 32), model)

    def test_patch_locality(self):
        # the top-left patch's receptive field cannot reach the far corner
        model = PatchImageDiscriminator(ImageDiscConfig(seed=3))
        rng = np.random.default_rng(3)
        frame = random_frame(rng)
        base = image_disc_forward(frame, make_age_mask(40, 64, 64), model)

        poked = frame.data.copy()
        poked[63, 63, :] = 0.0
        far = image_disc_forward(Frame(poked), make_age_mask(40, 64, 64), model)
        assert far[0, 0] == base[0, 0]
        assert np.abs(far - base).max() > 0  # the poke is visible somewhere

        poked = frame.data.copy()
        poked[0, 0, :] = 0.0
        near = image_disc_forward(Frame(poked), make_age_mask(40, 64, 64), model)
        assert near[0, 0] != base[0, 0]


class TestVideoDiscriminator:
    def test_walker_matches_table_at_512(self):
        model = TemporalVideoDiscriminator()
        assert model.layer_shapes(512) == TABLE_VIDEO_512

    def test_live_forward_matches_walker_at_desk(self):
        model = TemporalVideoDiscriminator(VideoDiscConfig(seed=1))
        scores = model(torch.randn(2, 3, 3, 64, 64), torch.rand(2, 1, 64, 64))
        assert scores.shape == (2, 1, 4, 8, 8)
        assert model.layer_shapes(64)[-1] == ("conv5", (8, 8, 1, 4))

    def test_functional_wrapper_shape(self):
        model = TemporalVideoDiscriminator(VideoDiscConfig(seed=2))
        rng = np.random.default_rng(4)
        frames = [random_frame(rng) for _ in range(3)]
        scores = video_disc_forward(frames, make_age_mask(70, 64, 64), model)
        assert scores.shape == (8, 8, 1, 4)

    def test_wrong_frame_count(self):
        model = TemporalVideoDiscriminator()
        rng = np.random.default_rng(5)
        with pytest.raises(ValidationError):
            video_disc_forward([random_frame(rng)] * 2, make_age_mask(70, 64, 64), model)

    def test_temporal_sensitivity(self):
        # reversing the frame order must change a seeded network's answer
        model = TemporalVideoDiscriminator(VideoDiscConfig(seed=6))
        rng = np.random.default_rng(6)
        frames = [random_frame(rng) for _ in range(3)]
        mask = make_age_mask(60, 64, 64)
        fwd = video_disc_forward(frames, mask, model)
        rev = video_disc_forward(frames[::-1], mask, model)
        assert np.abs(fwd - rev).max() > 1e-6

    def test_conditional_on_target_age(self):
        model = TemporalVideoDiscriminator(VideoDiscConfig(seed=7))
        rng = np.random.default_rng(7)
        frames = [random_frame(rng) for _ in range(3)]
        a = video_disc_forward(frames, make_age_mask(18, 64, 64), model)
        b = video_disc_forward(frames, make_age_mask(85, 64, 64), model)
        assert np.abs(a - b).max() > 1e-6

    def test_input_mode_validation(self):
        with pytest.raises(ConfigurationError):
            VideoDiscConfig(input_mode="frames")
        assert VideoDiscConfig(input_mode="deltas").input_mode == "deltas"
