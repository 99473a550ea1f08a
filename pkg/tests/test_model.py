import numpy as np
import pytest

from deblur_lab import tensor_core as tc
from deblur_lab.errors import ConfigurationError, DimensionError
from deblur_lab.gradcheck import MODEL_TOLERANCE, gradcheck_config, model_check
from deblur_lab.model import (ModelConfig, ModelParams, build_model, count_receptive_tokens, forward,
                              layer_family, predict)


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig())


@pytest.fixture(scope="module")
def small():
    return build_model(ModelConfig.reduced(32, patch_px=16))


class TestConfig:

    def test_default_geometry(self):
        cfg = ModelConfig()
        assert cfg.downsample == 4 and cfg.feature_size == (64, 64)
        assert cfg.patch_fm == 8 and cfg.num_patches == 64

    @pytest.mark.parametrize("patch,tokens", [(32, 64), (64, 16), (256, 1)])
    def test_token_count(self, patch, tokens):
        assert count_receptive_tokens(ModelConfig(patch_px=patch)) == tokens

    @pytest.mark.parametrize("bad", [dict(patch_px=48), dict(embed_dim=250), dict(encoder_strides=(2, 2, 2, 1, 1)),
                                     dict(img_size=(250, 250)), dict(skip_sources=("enc_conv9", "enc_conv1"))])
    def test_inconsistent_rejected(self, bad):
        with pytest.raises(ConfigurationError):
            build_model(ModelConfig(**bad))

    def test_dict_round_trip(self):
        cfg = ModelConfig.reduced(64)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigurationError):
            ModelConfig.from_dict({"layers": 3})


class TestBuild:

    def test_param_count_band(self, default_model):
        assert 2.0e6 <= default_model.param_count <= 3.7e6
        assert default_model.param_count == sum(t.size for t in default_model.tensors.values())

    def test_seed_determinism(self):
        cfg = ModelConfig.reduced(32, patch_px=16)
        a, b = build_model(cfg), build_model(cfg)
        assert all(a.tensors[n].values.tobytes() == b.tensors[n].values.tobytes() for n in a.names())
        c = build_model(ModelConfig.reduced(32, patch_px=16, seed=1))
        assert a.tensors["enc_conv1.w"].values.tobytes() != c.tensors["enc_conv1.w"].values.tobytes()

    def test_halved_channels_smaller(self, default_model):
        half = ModelConfig(encoder_channels=(16, 32, 32, 64, 64), decoder_channels=(64, 32, 16), token_channels=16)
        assert build_model(half).param_count < default_model.param_count

    def test_initialization(self, default_model):
        p = default_model.tensors
        assert not np.any(p["enc_conv1.b"].values)
        assert abs(p["pos_embed"].values.std() - 0.02) < 0.002
        limit = np.sqrt(6.0 / (9 * 3))
        assert np.abs(p["enc_conv1.w"].values).max() <= limit
        assert p["pos_embed"].shape == (64, 256)

    def test_every_layer_has_a_family(self, default_model):
        assert all(layer_family(n) for n in default_model.names())

    def test_from_arrays_validates(self, small):
        arrays = small.arrays()
        ModelParams.from_arrays(small.config, arrays)
        arrays.pop("out_conv.b")
        with pytest.raises(ConfigurationError):
            ModelParams.from_arrays(small.config, arrays)


class TestForward:

    def test_default_output(self, default_model):
        img = np.random.default_rng(0).uniform(size=(256, 256, 3))
        out = predict(default_model, img)
        assert out.shape == (256, 256, 3)
        assert out.min() > 0 and out.max() < 1

    def test_intermediate_shapes(self, default_model):
        with tc.no_grad():
            _, feats = forward(default_model, np.zeros((256, 256, 3)), return_features=True)
        assert feats["enc_conv1"].shape == (128, 128, 32)
        assert feats["enc_conv5"].shape == (64, 64, 128)
        assert feats["vit"].shape == (64, 256)
        assert feats["dec_convT1"].shape[:2] == (64, 64)
        assert feats["dec_convT3"].shape[:2] == (256, 256)

    def test_zero_input_uniform_output(self, small):
        # with the positional table also zeroed, every token and pixel sees the same input
        arrays = small.arrays()
        arrays["pos_embed"] = np.zeros_like(arrays["pos_embed"])
        params = ModelParams.from_arrays(small.config, arrays)
        out = predict(params, np.zeros((32, 32, 3)))
        assert np.all(out == out[0, 0][None, None, :])
        bias = arrays["out_conv.b"]
        np.testing.assert_allclose(out[0, 0], 1 / (1 + np.exp(-bias)), rtol=1e-15)

    def test_infer_deterministic(self, small):
        img = np.random.default_rng(1).uniform(size=(32, 32, 3))
        assert predict(small, img).tobytes() == predict(small, img).tobytes()

    def test_train_mode_dropout(self, small):
        img = np.random.default_rng(2).uniform(size=(32, 32, 3))
        with tc.no_grad():
            a = forward(small, img, mode="train", seed=1).values
            b = forward(small, img, mode="train", seed=2).values
            c = forward(small, img, mode="train", seed=1).values
        assert not np.array_equal(a, b) and np.array_equal(a, c)

    def test_dropout_zero_train_equals_infer(self):
        params = build_model(ModelConfig.reduced(32, patch_px=16, dropout=0.0))
        img = np.random.default_rng(3).uniform(size=(32, 32, 3))
        with tc.no_grad():
            train = forward(params, img, mode="train", seed=5).values
        np.testing.assert_array_equal(train, predict(params, img))

    def test_wrong_input_shape(self, small):
        with pytest.raises(DimensionError, match="input"):
            predict(small, np.zeros((64, 64, 3)))

    def test_bad_mode(self, small):
        with pytest.raises(ConfigurationError):
            forward(small, np.zeros((32, 32, 3)), mode="eval")

    @pytest.mark.parametrize("img,patch", [(32, 16), (64, 16), (64, 32), (96, 32)])
    def test_skip_shapes_for_other_sizes(self, img, patch):
        params = build_model(ModelConfig.reduced(img, patch_px=patch))
        assert predict(params, np.zeros((img, img, 3))).shape == (img, img, 3)


def test_end_to_end_gradient():
    check = model_check(seed=0)
    assert check.max_error <= MODEL_TOLERANCE
    assert set(check.per_family) >= {"encoder_conv", "attention", "mlp", "decoder_convT", "out_conv"}
    assert gradcheck_config().img_size == (32, 32)
