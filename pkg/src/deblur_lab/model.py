"""Hybrid CNN/ViT deblurring network.

Layout for the default configuration (256x256x3 input)::

    enc_conv1..5   3x3 convs + ReLU, strides 2,2,1,1,1     -> 64x64x128
    token_reduce   1x1 conv + ReLU                          -> 64x64x32
    patchify       8x8 feature-map patches (32 input px)    -> 64 tokens x 2048
    patch_embed    linear + learnable positional table      -> 64 x 256
    vit0..1        pre-norm blocks: MHA(4 heads) + MLP(1024), residuals
    vit_norm       final layer norm
    unpatchify     each 256-d token -> 8x8x4 patch          -> 64x64x4
    dec_convT1     3x3 transpose conv, stride 1 + ReLU      -> 64x64x128  ++ enc_conv3
    dec_convT2     stride 2 + ReLU                          -> 128x128x64 ++ enc_conv1
    dec_convT3     stride 2 + ReLU                          -> 256x256x32
    out_conv       3x3 conv + sigmoid                       -> 256x256x3

The transformer output replaces the CNN bottleneck features; encoder detail
reaches the decoder only through the skip concatenations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import ConfigurationError, DimensionError
from .tensor_core import AttentionSpec, ConvSpec, DiffTensor

REFERENCE_PARAM_COUNT_M = 2.83


@dataclass(frozen=True)
class ModelConfig:
    img_size: tuple = (256, 256)
    patch_px: int = 32
    embed_dim: int = 256
    num_heads: int = 4
    mlp_dim: int = 1024
    num_layers: int = 2
    dropout: float = 0.1
    encoder_channels: tuple = (32, 64, 64, 128, 128)
    encoder_strides: tuple = (2, 2, 1, 1, 1)
    token_channels: int = 32
    decoder_channels: tuple = (128, 64, 32)
    decoder_strides: tuple = (1, 2, 2)
    skip_sources: tuple = ("enc_conv3", "enc_conv1")
    in_channels: int = 3
    out_channels: int = 3
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("img_size", "encoder_channels", "encoder_strides", "decoder_channels",
                     "decoder_strides", "skip_sources"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def reduced(cls, img: int = 64, **overrides) -> "ModelConfig":
        """Small configuration with the same topology, for desk-scale runs."""
        base = dict(img_size=(img, img), patch_px=16, embed_dim=128, num_heads=4, mlp_dim=256,
                    num_layers=2, dropout=0.1, encoder_channels=(16, 32, 32, 64, 64),
                    token_channels=16, decoder_channels=(64, 32, 16))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def downsample(self) -> int:
        return math.prod(self.encoder_strides)

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.img_size[0] // self.downsample, self.img_size[1] // self.downsample

    @property
    def patch_fm(self) -> int:
        """Patch side length on the encoded feature map."""
        return self.patch_px // self.downsample

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_size[0] // self.patch_px, self.img_size[1] // self.patch_px

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_fm ** 2 * self.token_channels

    @property
    def unpatch_channels(self) -> int:
        return self.embed_dim // self.patch_fm ** 2

    def validate(self) -> None:
        err = ConfigurationError
        if len(self.img_size) != 2 or min(self.img_size) < 1:
            raise err(f"img_size must be (H, W), got {self.img_size}")
        if len(self.encoder_channels) != len(self.encoder_strides) or not self.encoder_channels:
            raise err("encoder_channels and encoder_strides must be non-empty and equally long")
        if len(self.decoder_channels) != len(self.decoder_strides) or not self.decoder_channels:
            raise err("decoder_channels and decoder_strides must be non-empty and equally long")
        if any(s < 1 for s in self.encoder_strides + self.decoder_strides):
            raise err("strides must be positive")
        if math.prod(self.decoder_strides) != self.downsample:
            raise err(f"decoder upsampling {math.prod(self.decoder_strides)} != encoder "
                      f"downsampling {self.downsample}")
        if self.patch_px < 1 or any(s % self.patch_px for s in self.img_size):
            raise err(f"img_size {self.img_size} not divisible by patch_px {self.patch_px}")
        if self.patch_px % self.downsample:
            raise err(f"patch_px {self.patch_px} not divisible by encoder downsampling {self.downsample}")
        if self.embed_dim % self.num_heads:
            raise err(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.embed_dim % self.patch_fm ** 2:
            raise err(f"embed_dim {self.embed_dim} not divisible by patch area {self.patch_fm ** 2}")
        if not 0.0 <= self.dropout < 1.0:
            raise err(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.kernel_size % 2 == 0:
            raise err("kernel_size must be odd")
        names = {f"enc_conv{i + 1}" for i in range(len(self.encoder_channels))}
        bad = [s for s in self.skip_sources if s not in names]
        if bad:
            raise err(f"unknown skip sources {bad}")
        if len(self.skip_sources) > len(self.decoder_channels):
            raise err("more skip sources than decoder stages")
        # skip resolutions must line up with the decoder path
        enc_sizes = {}
        h, w = self.img_size
        for i, s in enumerate(self.encoder_strides):
            h, w = -(-h // s), -(-w // s)
            enc_sizes[f"enc_conv{i + 1}"] = (h, w)
        h, w = self.feature_size
        for i, s in enumerate(self.decoder_strides):
            h, w = h * s, w * s
            if i < len(self.skip_sources) and enc_sizes[self.skip_sources[i]] != (h, w):
                raise err(f"skip {self.skip_sources[i]} at {enc_sizes[self.skip_sources[i]]} "
                          f"does not match decoder stage {i + 1} at {(h, w)}")
        if (h, w) != tuple(self.img_size):
            raise err(f"decoder output {(h, w)} != img_size {self.img_size}")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict:
        return {k: np.array(v.values) for k, v in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict) -> "ModelParams":
        expected = build_model(config)
        missing = set(expected.tensors) - set(arrays)
        extra = set(arrays) - set(expected.tensors)
        if missing or extra:
            raise ConfigurationError(f"parameter names mismatch: missing {sorted(missing)}, "
                                     f"unexpected {sorted(extra)}")
        tensors = {}
        for name, ref in expected.tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != ref.shape:
                raise ConfigurationError(f"{name}: shape {arr.shape} != expected {ref.shape}")
            tensors[name] = tc.parameter(arr)
        return cls(config, tensors)


def _conv_specs(cfg: ModelConfig):
    k = cfg.kernel_size
    enc = []
    cin = cfg.in_channels
    for i, (cout, s) in enumerate(zip(cfg.encoder_channels, cfg.encoder_strides)):
        enc.append((f"enc_conv{i + 1}", ConvSpec(k, k, cin, cout, stride=s)))
        cin = cout
    reduce = ConvSpec(1, 1, cin, cfg.token_channels)
    enc_ch = {name: spec.out_channels for name, spec in enc}
    dec = []
    cin = cfg.unpatch_channels
    for i, (cout, s) in enumerate(zip(cfg.decoder_channels, cfg.decoder_strides)):
        dec.append((f"dec_convT{i + 1}", ConvSpec(k, k, cin, cout, stride=s)))
        cin = cout + (enc_ch[cfg.skip_sources[i]] if i < len(cfg.skip_sources) else 0)
    out = ConvSpec(k, k, cin, cfg.out_channels)
    return enc, reduce, dec, out


def build_model(config: ModelConfig) -> ModelParams:
    """Initialize every weight deterministically from ``config.seed``.

    Convs use He-uniform weights, transformer and linear layers N(0, 0.02),
    layer norms (1, 0), biases zero.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    t = {}

    def he(shape, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return tc.parameter(rng.uniform(-limit, limit, shape))

    def normal(shape):
        return tc.parameter(rng.normal(0.0, 0.02, shape))

    zeros = lambda n: tc.parameter(np.zeros(n))
    ones = lambda n: tc.parameter(np.ones(n))

    enc, reduce, dec, out = _conv_specs(config)
    for name, s in enc:
        t[f"{name}.w"] = he((s.kernel_height, s.kernel_width, s.in_channels, s.out_channels),
                            s.kernel_height * s.kernel_width * s.in_channels)
        t[f"{name}.b"] = zeros(s.out_channels)
    t["token_reduce.w"] = he((1, 1, reduce.in_channels, reduce.out_channels), reduce.in_channels)
    t["token_reduce.b"] = zeros(reduce.out_channels)
    d = config.embed_dim
    t["patch_embed.w"] = normal((config.patch_dim, d))
    t["patch_embed.b"] = zeros(d)
    t["pos_embed"] = normal((config.num_patches, d))
    for layer in range(config.num_layers):
        p = f"vit{layer}"
        t[f"{p}.ln1.g"], t[f"{p}.ln1.b"] = ones(d), zeros(d)
        for proj in ("q", "k", "v", "o"):
            t[f"{p}.attn.w{proj}"] = normal((d, d))
            t[f"{p}.attn.b{proj}"] = zeros(d)
        t[f"{p}.ln2.g"], t[f"{p}.ln2.b"] = ones(d), zeros(d)
        t[f"{p}.mlp1.w"], t[f"{p}.mlp1.b"] = normal((d, config.mlp_dim)), zeros(config.mlp_dim)
        t[f"{p}.mlp2.w"], t[f"{p}.mlp2.b"] = normal((config.mlp_dim, d)), zeros(d)
    t["vit_norm.g"], t["vit_norm.b"] = ones(d), zeros(d)
    for name, s in dec:
        t[f"{name}.w"] = he((s.kernel_height, s.kernel_width, s.out_channels, s.in_channels),
                            s.kernel_height * s.kernel_width * s.in_channels)
        t[f"{name}.b"] = zeros(s.out_channels)
    t["out_conv.w"] = he((out.kernel_height, out.kernel_width, out.in_channels, out.out_channels),
                         out.kernel_height * out.kernel_width * out.in_channels)
    t["out_conv.b"] = zeros(out.out_channels)
    return ModelParams(config, t)


def count_receptive_tokens(config: ModelConfig) -> int:
    """Number of ViT tokens (patches) the configuration produces."""
    if config.patch_px < 1 or any(s % config.patch_px for s in config.img_size):
        raise ConfigurationError(f"img_size {config.img_size} not divisible by patch_px {config.patch_px}")
    return config.num_patches


def layer_family(name: str) -> str:
    """Coarse grouping of parameter names (encoder, attention, mlp, ...)."""
    head = name.split(".")[0]
    if head.startswith("enc_conv"):
        return "encoder_conv"
    if head.startswith("dec_convT"):
        return "decoder_convT"
    if head.startswith("vit") and head != "vit_norm":
        return {"ln1": "layer_norm", "ln2": "layer_norm", "attn": "attention",
                "mlp1": "mlp", "mlp2": "mlp"}[name.split(".")[1]]
    return {"vit_norm": "layer_norm"}.get(head, head)


def _expect(x: DiffTensor, shape: tuple, stage: str) -> DiffTensor:
    if tuple(x.shape) != tuple(shape):
        raise DimensionError(f"stage {stage}: expected shape {tuple(shape)}, got {x.shape}")
    return x


def _block(x, p, prefix, cfg, training, seeds):
    spec = AttentionSpec(cfg.embed_dim, cfg.num_heads, cfg.dropout)
    attn_params = {k: p[f"{prefix}.attn.{k}"] for k in tc.ATTENTION_PARAM_NAMES}
    h = tc.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h = tc.multi_head_attention(h, spec, attn_params, training=training, seed=next(seeds))
    x = x + tc.dropout(h, cfg.dropout, seed=next(seeds), training=training)
    h = tc.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = tc.gelu(tc.linear(h, p[f"{prefix}.mlp1.w"], p[f"{prefix}.mlp1.b"]))
    h = tc.dropout(h, cfg.dropout, seed=next(seeds), training=training)
    h = tc.linear(h, p[f"{prefix}.mlp2.w"], p[f"{prefix}.mlp2.b"])
    return x + tc.dropout(h, cfg.dropout, seed=next(seeds), training=training)


def forward(params: ModelParams, image, mode: str = "infer", seed: int = 0,
            return_features: bool = False):
    """Run the network on one ``[H, W, C]`` image in [0, 1].

    ``mode='train'`` enables dropout, with masks derived from ``seed``.
    With ``return_features`` a dict of intermediate maps is returned too.
    """
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = params.config
    p = params.tensors
    training = mode == "train"
    seeds = iter(np.random.SeedSequence(seed).generate_state(4 * cfg.num_layers + 1, dtype=np.uint64).tolist())
    x = image if isinstance(image, DiffTensor) else DiffTensor(image)
    h_img, w_img = cfg.img_size
    _expect(x, (h_img, w_img, cfg.in_channels), "input")
    enc, reduce, dec, out_spec = _conv_specs(cfg)
    feats = {}

    for name, spec in enc:
        expect = spec.output_size(*x.shape[:2]) + (spec.out_channels,)
        x = _expect(tc.relu(tc.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], spec)), expect, name)
        feats[name] = x
    fh, fw = cfg.feature_size
    _expect(x, (fh, fw, cfg.encoder_channels[-1]), "encoder_output")
    x = tc.relu(tc.conv2d(x, p["token_reduce.w"], p["token_reduce.b"], reduce))

    gh, gw = cfg.grid
    k = cfg.patch_fm
    x = tc.reshape(x, (gh, k, gw, k, cfg.token_channels))
    x = tc.reshape(tc.transpose(x, (0, 2, 1, 3, 4)), (gh * gw, cfg.patch_dim))
    tokens = tc.linear(x, p["patch_embed.w"], p["patch_embed.b"]) + p["pos_embed"]
    _expect(tokens, (cfg.num_patches, cfg.embed_dim), "patch_embed")
    for layer in range(cfg.num_layers):
        tokens = _block(tokens, p, f"vit{layer}", cfg, training, seeds)
    tokens = tc.layer_norm(tokens, p["vit_norm.g"], p["vit_norm.b"])
    feats["vit"] = tokens

    cu = cfg.unpatch_channels
    x = tc.reshape(tokens, (gh, gw, k, k, cu))
    x = tc.reshape(tc.transpose(x, (0, 2, 1, 3, 4)), (fh, fw, cu))

    for i, (name, spec) in enumerate(dec):
        expect = spec.transpose_output_size(*x.shape[:2]) + (spec.out_channels,)
        x = _expect(tc.relu(tc.conv2d_transpose(x, p[f"{name}.w"], p[f"{name}.b"], spec)),
                    expect, name)
        if i < len(cfg.skip_sources):
            skip = feats[cfg.skip_sources[i]]
            if skip.shape[:2] != x.shape[:2]:
                raise DimensionError(f"stage {name}: skip {cfg.skip_sources[i]} is "
                                     f"{skip.shape[:2]}, decoder map is {x.shape[:2]}")
            x = tc.concat_channels([x, skip])
        feats[name] = x
    y = tc.sigmoid(tc.conv2d(x, p["out_conv.w"], p["out_conv.b"], out_spec))
    _expect(y, (h_img, w_img, cfg.out_channels), "output")
    return (y, feats) if return_features else y


def predict(params: ModelParams, image) -> np.ndarray:
    """Inference-mode forward without graph recording."""
    with tc.no_grad():
        return np.array(forward(params, image, mode="infer").values)
