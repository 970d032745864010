"""Desk-scale network architectures.

The translator generator is split into an encoder and a decoder that
meet at a shared latent contract (base_width*4 channels at 1/4 spatial
resolution), so any domain's decoder can consume any domain's encoder
output. The discriminator is a small patch classifier emitting a grid
of real/fake scores. The classifier realizes f = h(g(x)) with a fixed
128-dim feature embedding shared by both comparison streams.

Initialization follows the image-translation convention: conv and
affine weights N(0, 0.02), biases zero, normalization gains one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .autodiff import (
    Tensor,
    conv2d,
    conv2d_transpose,
    instance_norm,
    leaky_relu,
    matmul,
    relu,
    tanh,
)
from .datagen import ImageSpec

INIT_STD = 0.02


@dataclass
class Conv:
    w: Tensor
    b: Tensor
    stride: int = 1
    padding: int = 0

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


@dataclass
class ConvT:
    w: Tensor
    b: Tensor
    stride: int = 2
    padding: int = 1
    output_padding: int = 1

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_transpose(x, self.w, self.b, stride=self.stride,
                                padding=self.padding,
                                output_padding=self.output_padding)


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gain, self.bias)


@dataclass
class Affine:
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


@dataclass
class ResBlock:
    conv1: Conv
    norm1: Norm
    conv2: Conv
    norm2: Norm

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


def _conv(rng, c_in, c_out, k, stride, padding, std: float | None = None) -> Conv:
    std = INIT_STD if std is None else std
    w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return Conv(w, b, stride, padding)


def _convT(rng, c_in, c_out, k=3) -> ConvT:
    w = Tensor(rng.normal(0.0, INIT_STD, size=(c_in, c_out, k, k)), requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return ConvT(w, b)


def _norm(c) -> Norm:
    return Norm(Tensor(np.ones(c), requires_grad=True),
                Tensor(np.zeros(c), requires_grad=True))


def _affine(rng, d_in, d_out, std: float | None = None) -> Affine:
    std = INIT_STD if std is None else std
    w = Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True)
    return Affine(w, b)


def _res_block(rng, c) -> ResBlock:
    return ResBlock(_conv(rng, c, c, 3, 1, 1), _norm(c),
                    _conv(rng, c, c, 3, 1, 1), _norm(c))


def _named(prefix: str, layer) -> list[tuple[str, Tensor]]:
    if isinstance(layer, (Conv, ConvT, Affine)):
        return [(f"{prefix}.w", layer.w), (f"{prefix}.b", layer.b)]
    if isinstance(layer, Norm):
        return [(f"{prefix}.gain", layer.gain), (f"{prefix}.bias", layer.bias)]
    if isinstance(layer, ResBlock):
        return (_named(f"{prefix}.conv1", layer.conv1)
                + _named(f"{prefix}.norm1", layer.norm1)
                + _named(f"{prefix}.conv2", layer.conv2)
                + _named(f"{prefix}.norm2", layer.norm2))
    raise TypeError(f"unknown layer {type(layer)}")


# ---------------------------------------------------------------------------
# generator halves

@dataclass
class EncoderParams:
    image_spec: ImageSpec
    base_width: int
    stem: Conv
    stem_norm: Norm
    down1: Conv
    down1_norm: Norm
    down2: Conv
    down2_norm: Norm
    blocks: list[ResBlock] = field(default_factory=list)

    @property
    def latent_spec(self) -> tuple[int, int, int]:
        s = self.image_spec.size // 4
        return (4 * self.base_width, s, s)

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.stem_norm(self.stem(x)))
        h = relu(self.down1_norm(self.down1(h)))
        h = relu(self.down2_norm(self.down2(h)))
        for block in self.blocks:
            h = block(h)
        return h

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = (_named("stem", self.stem) + _named("stem_norm", self.stem_norm)
               + _named("down1", self.down1) + _named("down1_norm", self.down1_norm)
               + _named("down2", self.down2) + _named("down2_norm", self.down2_norm))
        for i, blk in enumerate(self.blocks):
            out += _named(f"block{i}", blk)
        return out


@dataclass
class DecoderParams:
    image_spec: ImageSpec
    base_width: int
    blocks: list[ResBlock]
    up1: ConvT
    up1_norm: Norm
    up2: ConvT
    up2_norm: Norm
    head: Conv

    def forward(self, z: Tensor) -> Tensor:
        h = z
        for block in self.blocks:
            h = block(h)
        h = relu(self.up1_norm(self.up1(h)))
        h = relu(self.up2_norm(self.up2(h)))
        return tanh(self.head(h))

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, blk in enumerate(self.blocks):
            out += _named(f"block{i}", blk)
        out += (_named("up1", self.up1) + _named("up1_norm", self.up1_norm)
                + _named("up2", self.up2) + _named("up2_norm", self.up2_norm)
                + _named("head", self.head))
        return out


def build_generator_pair(image_spec: ImageSpec, n_res_blocks: int = 2,
                         seed: int = 0, base_width: int = 16
                         ) -> tuple[EncoderParams, DecoderParams]:
    """Encoder downsamples 4x into the latent; decoder mirrors it back.

    Residual blocks run at latent resolution, split encoder-heavy when
    the count is odd.
    """
    if n_res_blocks < 0:
        raise ValueError("n_res_blocks must be non-negative")
    rng = seeding.stream(seed, seeding.INIT)
    c = image_spec.channels
    f = base_width
    enc_blocks = (n_res_blocks + 1) // 2
    encoder = EncoderParams(
        image_spec, f,
        stem=_conv(rng, c, f, 7, 1, 3), stem_norm=_norm(f),
        down1=_conv(rng, f, 2 * f, 3, 2, 1), down1_norm=_norm(2 * f),
        down2=_conv(rng, 2 * f, 4 * f, 3, 2, 1), down2_norm=_norm(4 * f),
        blocks=[_res_block(rng, 4 * f) for _ in range(enc_blocks)])
    decoder = DecoderParams(
        image_spec, f,
        blocks=[_res_block(rng, 4 * f) for _ in range(n_res_blocks - enc_blocks)],
        up1=_convT(rng, 4 * f, 2 * f), up1_norm=_norm(2 * f),
        up2=_convT(rng, 2 * f, f), up2_norm=_norm(f),
        head=_conv(rng, f, c, 7, 1, 3))
    return encoder, decoder


# ---------------------------------------------------------------------------
# patch discriminator

DISC_MIN_SIZE = 16


@dataclass
class DiscriminatorParams:
    image_spec: ImageSpec
    l1: Conv
    l2: Conv
    l2_norm: Norm
    l3: Conv

    def forward(self, x: Tensor) -> Tensor:
        """Raw per-patch scores, shape (n, 1, g, g)."""
        h = leaky_relu(self.l1(x), 0.2)
        h = leaky_relu(self.l2_norm(self.l2(h)), 0.2)
        return self.l3(h)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return (_named("l1", self.l1) + _named("l2", self.l2)
                + _named("l2_norm", self.l2_norm) + _named("l3", self.l3))


def build_discriminator(image_spec: ImageSpec, seed: int = 0,
                        base_width: int = 32) -> DiscriminatorParams:
    """Three strided 4x4 conv layers; 32px input gives a 3x3 score grid."""
    if image_spec.size < DISC_MIN_SIZE:
        raise ValueError(f"discriminator needs input >= {DISC_MIN_SIZE}px")
    rng = seeding.stream(seed, seeding.INIT)
    c, w = image_spec.channels, base_width
    return DiscriminatorParams(
        image_spec,
        l1=_conv(rng, c, w, 4, 2, 1),
        l2=_conv(rng, w, 2 * w, 4, 2, 1), l2_norm=_norm(2 * w),
        l3=_conv(rng, 2 * w, 1, 4, 2, 0))


def disc_grid_size(image_spec: ImageSpec) -> int:
    s = image_spec.size
    s = (s + 2 - 4) // 2 + 1
    s = (s + 2 - 4) // 2 + 1
    return (s - 4) // 2 + 1


# ---------------------------------------------------------------------------
# classifier f = h . g

FEATURE_DIM = 128


@dataclass
class DGModel:
    """Shared-weight feature extractor g and logit head h."""
    image_spec: ImageSpec
    num_classes: int
    c1: Conv
    c2: Conv
    proj: Affine
    head: Affine

    def features(self, x: Tensor) -> Tensor:
        """Penultimate embedding g(x), shape (n, 128)."""
        h = relu(self.c1(x))
        h = relu(self.c2(h))
        h = h.reshape(h.shape[0], h.shape[1] * h.shape[2] * h.shape[3])
        return relu(self.proj(h))

    def logits(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return (_named("c1", self.c1) + _named("c2", self.c2)
                + _named("proj", self.proj) + _named("head", self.head))


def build_classifier(image_spec: ImageSpec, num_classes: int, seed: int = 0,
                     widths: tuple[int, int] = (16, 32)) -> DGModel:
    """Classifier weights use fan-in scaled init: unlike the translator
    nets (which follow the 0.02 convention and train with an adaptive
    optimizer), this trains from scratch with plain SGD and needs
    activations at unit scale."""
    if num_classes < 2:
        raise ValueError("classifier needs at least 2 classes")
    rng = seeding.stream(seed, seeding.INIT)
    c = image_spec.channels
    w1, w2 = widths
    flat = w2 * (image_spec.size // 4) ** 2
    return DGModel(
        image_spec, num_classes,
        c1=_conv(rng, c, w1, 3, 2, 1, std=np.sqrt(2.0 / (c * 9))),
        c2=_conv(rng, w1, w2, 3, 2, 1, std=np.sqrt(2.0 / (w1 * 9))),
        proj=_affine(rng, flat, FEATURE_DIM, std=np.sqrt(2.0 / flat)),
        head=_affine(rng, FEATURE_DIM, num_classes, std=np.sqrt(1.0 / FEATURE_DIM)))


# ---------------------------------------------------------------------------
# parameter plumbing shared by checkpoints and optimizers

def param_arrays(model) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in model.parameters()}


def param_tensors(model) -> list[Tensor]:
    return [t for _, t in model.parameters()]


def assign_parameters(model, arrays: dict[str, np.ndarray]) -> None:
    """Load saved arrays into a freshly built model of the same shape."""
    named = dict(model.parameters())
    if set(named) != set(arrays):
        missing = set(named) ^ set(arrays)
        raise ValueError(f"parameter name mismatch: {sorted(missing)}")
    for name, tensor in named.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != tensor.shape:
            raise ValueError(f"{name}: shape {arr.shape} != expected {tensor.shape}")
        tensor.data = arr.copy()


def param_count(model) -> int:
    return sum(t.size for _, t in model.parameters())
