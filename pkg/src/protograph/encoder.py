"""Convolutional embedding network for impression images.

Four blocks of conv(3x3, stride 1, pad 1, no bias) -> batch norm (affine)
-> 2x2 max pool -> ReLU, then a global average pool down to one vector per
image.  Conv layers carry no bias because the batch norm affine shift
immediately follows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, batchnorm2d, conv2d, global_avg_pool, maxpool2d, relu

__all__ = [
    "EncoderConfig",
    "encoder_preset",
    "init_encoder",
    "encode_batch",
    "prepare_images",
    "encoder_param_count",
]

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class EncoderConfig:
    """Backbone geometry; embed_dim always equals the last channel count."""

    input_hw: int
    channels: tuple[int, int, int, int]
    norm_mean: tuple[float, float, float] = _IMAGENET_MEAN
    norm_std: tuple[float, float, float] = _IMAGENET_STD

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError(f"encoder needs exactly 4 blocks, got {len(self.channels)}")
        if self.input_hw % 16 != 0:
            raise ValueError(f"input size {self.input_hw} not divisible by 16")

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]


_PRESETS = {
    "paper": EncoderConfig(input_hw=128, channels=(64, 128, 256, 512)),
    "tiny": EncoderConfig(input_hw=32, channels=(8, 16, 32, 64)),
}


def encoder_preset(name: str) -> EncoderConfig:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown encoder preset {name!r}; choose from {sorted(_PRESETS)}")


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(cfg: EncoderConfig,
                 rng: np.random.Generator) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Fresh parameters and batch-norm running buffers.

    Parameter names: enc.conv{k}.w, enc.bn{k}.gamma, enc.bn{k}.beta;
    buffer names: enc.bn{k}.mean, enc.bn{k}.var (k in 1..4).
    """
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    cin = 3
    for k, cout in enumerate(cfg.channels, start=1):
        fan_in = cin * 9
        params[f"enc.conv{k}.w"] = Tensor(
            _uniform_fan_in(rng, (cout, cin, 3, 3), fan_in), requires_grad=True)
        params[f"enc.bn{k}.gamma"] = Tensor(np.ones(cout), requires_grad=True)
        params[f"enc.bn{k}.beta"] = Tensor(np.zeros(cout), requires_grad=True)
        buffers[f"enc.bn{k}.mean"] = np.zeros(cout)
        buffers[f"enc.bn{k}.var"] = np.ones(cout)
        cin = cout
    return params, buffers


def prepare_images(images: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """uint8 (B, H, W, 3) -> normalized float64 (B, 3, H, W)."""
    if images.ndim != 4 or images.shape[3] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {images.shape}")
    if images.shape[1] != cfg.input_hw or images.shape[2] != cfg.input_hw:
        raise ValueError(
            f"expected {cfg.input_hw}x{cfg.input_hw} images, got "
            f"{images.shape[1]}x{images.shape[2]}")
    x = images.astype(np.float64) / 255.0
    mean = np.asarray(cfg.norm_mean)
    std = np.asarray(cfg.norm_std)
    x = (x - mean) / std
    return x.transpose(0, 3, 1, 2)


def encode_batch(images: np.ndarray, params: dict[str, Tensor],
                 buffers: dict[str, np.ndarray], cfg: EncoderConfig,
                 training: bool) -> Tensor:
    """Normalized (B, 3, H, W) float input -> (B, embed_dim) embeddings.

    Training mode uses batch statistics and advances the running buffers;
    evaluation mode reads the buffers without side effects.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) input, got {images.shape}")
    h = Tensor(images)
    for k in range(1, 5):
        h = conv2d(h, params[f"enc.conv{k}.w"])
        h = batchnorm2d(h, params[f"enc.bn{k}.gamma"], params[f"enc.bn{k}.beta"],
                        buffers[f"enc.bn{k}.mean"], buffers[f"enc.bn{k}.var"],
                        training=training)
        h = maxpool2d(h)
        h = relu(h)
    return global_avg_pool(h)


def encoder_param_count(cfg: EncoderConfig) -> int:
    n = 0
    cin = 3
    for cout in cfg.channels:
        n += cout * cin * 9 + 2 * cout
        cin = cout
    return n
