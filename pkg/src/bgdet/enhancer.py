"""Unpaired underwater -> clear enhancement subnet.

Two generators translate between the underwater and clear domains, two
patch discriminators judge realness, and a fixed convolutional extractor
supplies the features for the perceptual cycle term.  The losses below are
written against plain tensors so they can be checked element by element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datagen import CLEAR, UNDERWATER, ImageSample
from .errors import ConfigError, NumericalError, ShapeError

EPS = 1e-7
_PIXEL_EPS = 1e-4


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder/residual/decoder translator with a near-identity start.

    The head predicts a correction in logit space, ``out = sigmoid(logit(x)
    + head(features))``, so outputs stay in (0, 1) and a near-zero head
    makes the initial mapping almost exactly the identity.
    """

    forward_calls = 0  # class-wide counter, lets callers prove no enhancer ran

    def __init__(self, base: int = 8, n_res: int = 3, head_init_std: float = 1e-4):
        super().__init__()
        b = base
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(3, b, 7), nn.InstanceNorm2d(b), nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1), nn.InstanceNorm2d(4 * b), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(4 * b) for _ in range(n_res)])
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * b, 2 * b, 3, padding=1), nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * b, b, 3, padding=1), nn.InstanceNorm2d(b), nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(b, 3, 7))
        nn.init.normal_(self.head[1].weight, std=head_init_std)
        nn.init.zeros_(self.head[1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise ShapeError(f"spatial dims must be divisible by 4, got {tuple(x.shape[-2:])}")
        Generator.forward_calls += 1
        h = self.decoder(self.blocks(self.encoder(x)))
        return torch.sigmoid(torch.logit(x.clamp(_PIXEL_EPS, 1 - _PIXEL_EPS)) + self.head(h))


class PatchDiscriminator(nn.Module):
    """Grid of realness probabilities, one per receptive-field patch."""

    def __init__(self, base: int = 16):
        super().__init__()
        d = base
        self.net = nn.Sequential(
            nn.Conv2d(3, d, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(d, 2 * d, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * d),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * d, 1, 4, stride=1, padding=1),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x))


class GeneratorPair(nn.Module):
    def __init__(self, base: int = 8, n_res: int = 3):
        super().__init__()
        self.u2a = Generator(base, n_res)
        self.a2u = Generator(base, n_res)


class DiscriminatorPair(nn.Module):
    def __init__(self, base: int = 16):
        super().__init__()
        self.d_a = PatchDiscriminator(base)
        self.d_u = PatchDiscriminator(base)


# --------------------------------------------------------------------------
# fixed perceptual extractor

def _perceptual_kernels() -> tuple[np.ndarray, np.ndarray]:
    luma = np.array([0.299, 0.587, 0.114])
    sobel_x = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]) / 4.0
    sobel_y = sobel_x.T
    lap = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=float)
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    blur = np.outer([1, 2, 1], [1, 2, 1]) / 16.0

    w1 = np.zeros((8, 3, 3, 3))
    for c in range(3):
        w1[c, c] = delta
    for k, kern in enumerate((sobel_x, -sobel_x, sobel_y, -sobel_y, -lap)):
        w1[3 + k] = luma[:, None, None] * kern

    w2 = np.zeros((8, 8, 3, 3))
    for c in range(3):
        w2[c, c] = blur
    for c in range(3, 7):
        w2[3, c] = blur
    w2[4, 0], w2[4, 1] = sobel_x, -sobel_x  # red-green opponent edges
    w2[5, 0], w2[5, 1] = sobel_y, -sobel_y
    w2[6, 2] = sobel_x
    w2[6, 0] = w2[6, 1] = -sobel_x / 2  # blue-yellow opponent edges
    w2[7, 7] = -lap
    return w1.astype(np.float32), w2.astype(np.float32)


class PerceptualExtractor(nn.Module):
    """Two-level fixed feature extractor (colour, edge and blob responses).

    Weights are analytic constants and are never trained; they are kept as
    parameters with ``requires_grad=False`` so freezing is checkable.
    """

    def __init__(self):
        super().__init__()
        w1, w2 = _perceptual_kernels()
        self.w1 = nn.Parameter(torch.from_numpy(w1), requires_grad=False)
        self.w2 = nn.Parameter(torch.from_numpy(w2), requires_grad=False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        w1, w2 = self.w1.to(x.dtype), self.w2.to(x.dtype)
        low = F.relu(F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), w1))
        pooled = F.avg_pool2d(low, 2)
        high = F.relu(F.conv2d(F.pad(pooled, (1, 1, 1, 1), mode="replicate"), w2))
        return [low, high]


# --------------------------------------------------------------------------
# losses

@dataclass
class EnhancerLossWeights:
    lambda1: float = 5e-5
    lambda2: float = 1.0

    def validate(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        return self


@dataclass
class EnhancerLossParts:
    gan_u2a: torch.Tensor
    gan_a2u: torch.Tensor
    cycle: torch.Tensor
    perceptual: torch.Tensor


def _clamped(scores: torch.Tensor, eps: float) -> torch.Tensor:
    out = scores.clamp(eps, 1 - eps)
    if not torch.isfinite(out).all():
        raise NumericalError("discriminator scores contain non-finite values")
    return out


def adversarial_loss(d_scores_real: torch.Tensor, d_scores_fake: torch.Tensor,
                     eps: float = EPS) -> torch.Tensor:
    """``E[log D(real)] + E[log(1 - D(fake))]`` over the score grids.

    The discriminator ascends this value; generators use
    :func:`generator_adversarial_loss`.
    """
    real = _clamped(d_scores_real, eps)
    fake = _clamped(d_scores_fake, eps)
    return torch.log(real).mean() + torch.log1p(-fake).mean()


def generator_adversarial_loss(d_scores_fake: torch.Tensor, mode: str = "log",
                               eps: float = EPS) -> torch.Tensor:
    """Generator objective: non-saturating ``-E[log D(G(x))]`` or least squares."""
    if mode == "lsgan":
        return ((d_scores_fake - 1) ** 2).mean()
    return -torch.log(_clamped(d_scores_fake, eps)).mean()


def discriminator_loss(d_scores_real, d_scores_fake, mode: str = "log", eps: float = EPS):
    if mode == "lsgan":
        return 0.5 * (((d_scores_real - 1) ** 2).mean() + (d_scores_fake ** 2).mean())
    return -adversarial_loss(d_scores_real, d_scores_fake, eps)


def cycle_l1(rec_u, x_u, rec_a, x_a) -> torch.Tensor:
    if rec_u.shape != x_u.shape or rec_a.shape != x_a.shape:
        raise ShapeError(f"reconstruction shapes {tuple(rec_u.shape)}/{tuple(rec_a.shape)} "
                         f"do not match inputs {tuple(x_u.shape)}/{tuple(x_a.shape)}")
    return (rec_u - x_u).abs().mean() + (rec_a - x_a).abs().mean()


def cycle_image_loss(g: GeneratorPair, x_u: torch.Tensor, x_a: torch.Tensor) -> torch.Tensor:
    """Mean L1 error of both round trips, underwater->clear->underwater and back."""
    return cycle_l1(g.a2u(g.u2a(x_u)), x_u, g.u2a(g.a2u(x_a)), x_a)


def feature_sq_error(phi, x: torch.Tensor, rec: torch.Tensor) -> torch.Tensor:
    fx, fr = phi(x), phi(rec)
    if len(fx) != len(fr):
        raise ShapeError("extractor returned a different number of levels")
    total = x.new_zeros(())
    for a, b in zip(fx, fr):
        if a.shape != b.shape:
            raise ShapeError(f"extractor level shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        total = total + ((a - b) ** 2).mean()
    return total


def perceptual_cycle_loss(phi, g: GeneratorPair, x_u: torch.Tensor, x_a: torch.Tensor) -> torch.Tensor:
    """Squared feature distance between images and their round-trip reconstructions.

    Each extractor level contributes the mean over its elements.
    """
    rec_u = g.a2u(g.u2a(x_u))
    rec_a = g.u2a(g.a2u(x_a))
    return feature_sq_error(phi, x_u, rec_u) + feature_sq_error(phi, x_a, rec_a)


def total_enhancer_loss(parts: EnhancerLossParts, w: EnhancerLossWeights):
    return (parts.gan_u2a + parts.gan_a2u
            + w.lambda1 * parts.cycle + w.lambda2 * parts.perceptual)


def enhancer_loss_parts(g: GeneratorPair, d: DiscriminatorPair, phi, x_u, x_a) -> EnhancerLossParts:
    """Evaluate all four terms of the enhancement objective on one batch."""
    fake_a = g.u2a(x_u)
    fake_u = g.a2u(x_a)
    rec_u = g.a2u(fake_a)
    rec_a = g.u2a(fake_u)
    return EnhancerLossParts(
        gan_u2a=adversarial_loss(d.d_a(x_a), d.d_a(fake_a)),
        gan_a2u=adversarial_loss(d.d_u(x_u), d.d_u(fake_u)),
        cycle=cycle_l1(rec_u, x_u, rec_a, x_a),
        perceptual=feature_sq_error(phi, x_u, rec_u) + feature_sq_error(phi, x_a, rec_a),
    )


# --------------------------------------------------------------------------

def image_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]


@torch.no_grad()
def enhance(g, img: ImageSample) -> ImageSample:
    """Translate an underwater sample to the clear domain; boxes pass through.

    ``g`` is a :class:`GeneratorPair` or a bare underwater->clear generator.
    """
    if img.domain != UNDERWATER:
        raise ConfigError(f"enhance expects an underwater image, got {img.domain!r}")
    gen = g.u2a if isinstance(g, GeneratorPair) else g
    was_training = gen.training
    gen.eval()
    try:
        out = gen(image_to_tensor(img.pixels))[0]
    finally:
        gen.train(was_training)
    return ImageSample(pixels=out.permute(1, 2, 0).numpy().astype(np.float32),
                       boxes=list(img.boxes), domain=CLEAR, id=img.id)
