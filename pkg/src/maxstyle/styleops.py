"""Feature style statistics and the style transform family.

"Style" here is the per-instance, per-channel spatial mean and standard
deviation of a feature map. The transforms re-dress a normalized feature
map with new style coefficients:

  mixstyle:  gamma/beta linearly interpolate the instance's own style with
             a donor instance's style (mixing weight per instance),
  maxstyle:  mixstyle coefficients plus per-channel noise scaled by the
             batch spread of the style statistics.

Everything is differentiable with respect to the features, the mixing
weights and the noise draws; the noise *scale* is always treated as a
constant of the current batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .errors import ValidationError
from .ndtensor import Tensor

EPS_STD = 1e-6


@dataclass
class StyleStats:
    """Per-instance per-channel spatial mean and (stabilized) std, both (N,C)."""

    mu: Tensor
    sigma: Tensor


@dataclass
class NoiseScale:
    """Per-channel batch variance of the style statistics; constants, no grad."""

    sigma_gamma: np.ndarray
    sigma_beta: np.ndarray


@dataclass
class StyleParams:
    """Free parameters of one style-augmentation draw for a batch.

    lambda_mix: (N,) mixing weight per instance, always in [0,1]
    eps_gamma, eps_beta: per style layer, (N, C_l) noise draws
    donor: permutation of batch indices selecting the style donor
    gate: per-layer on/off mask
    """

    lambda_mix: Tensor
    eps_gamma: list[Tensor]
    eps_beta: list[Tensor]
    donor: np.ndarray
    gate: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.eps_gamma)

    def copy(self) -> "StyleParams":
        return StyleParams(
            lambda_mix=Tensor(self.lambda_mix.data.copy(), self.lambda_mix.requires_grad),
            eps_gamma=[Tensor(e.data.copy(), e.requires_grad) for e in self.eps_gamma],
            eps_beta=[Tensor(e.data.copy(), e.requires_grad) for e in self.eps_beta],
            donor=self.donor.copy(),
            gate=self.gate.copy(),
        )

    def set_trainable(self, lambda_mix: bool, eps: bool):
        self.lambda_mix.requires_grad = lambda_mix
        for e in self.eps_gamma + self.eps_beta:
            e.requires_grad = eps

    def trainable(self) -> list[Tensor]:
        out = []
        if self.lambda_mix.requires_grad:
            out.append(self.lambda_mix)
        out.extend(e for e in self.eps_gamma + self.eps_beta if e.requires_grad)
        return out


def instance_stats(f: Tensor) -> StyleStats:
    """Spatial mean and std per (instance, channel); differentiable in f.

    Variance is the population variance, computed two-pass so constant
    channels come out at exactly sigma = EPS_STD.
    """
    mu = nd.spatial_mean(f)
    centered = nd.shift_channels(f, nd.mul_scalar(mu, -1.0))
    var = nd.spatial_mean(nd.mul(centered, centered))
    sigma = nd.sqrt(nd.add_scalar(var, EPS_STD * EPS_STD))
    return StyleStats(mu=mu, sigma=sigma)


def normalize(f: Tensor, stats: StyleStats) -> Tensor:
    """Remove the style: (f - mu) / sigma per instance and channel."""
    centered = nd.shift_channels(f, nd.mul_scalar(stats.mu, -1.0))
    return nd.scale_channels(centered, nd.reciprocal(stats.sigma))


def _mixed_coefficients(stats: StyleStats, params: StyleParams):
    """gamma/beta as per-instance interpolation of own and donor style."""
    lam = params.lambda_mix
    lam_c = nd.add_scalar(nd.mul_scalar(lam, -1.0), 1.0)
    sigma_d = nd.take_rows(stats.sigma, params.donor)
    mu_d = nd.take_rows(stats.mu, params.donor)
    gamma = nd.add(nd.scale_rows(stats.sigma, lam), nd.scale_rows(sigma_d, lam_c))
    beta = nd.add(nd.scale_rows(stats.mu, lam), nd.scale_rows(mu_d, lam_c))
    return gamma, beta


def mixstyle_transform(f_self: Tensor, params: StyleParams, layer: int) -> Tensor:
    """Re-style f with interpolated own/donor statistics; identity when gated off."""
    _check_layer(params, layer, f_self)
    if not params.gate[layer]:
        return nd.identity(f_self)
    stats = instance_stats(f_self)
    gamma, beta = _mixed_coefficients(stats, params)
    fbar = normalize(f_self, stats)
    return nd.shift_channels(nd.scale_channels(fbar, gamma), beta)


def estimate_style_noise_scale(f: Tensor) -> NoiseScale:
    """Batch variance of the per-instance style stats; a constant, never taped."""
    n = f.data.shape[0]
    if n < 2:
        raise ValidationError(f"estimate_style_noise_scale: need at least 2 instances, got {n}")
    mu = f.data.mean(axis=(2, 3), dtype=np.float32)
    centered = f.data - mu[:, :, None, None]
    var = (centered * centered).mean(axis=(2, 3), dtype=np.float32)
    sigma = np.sqrt(var + np.float32(EPS_STD * EPS_STD))
    return NoiseScale(
        sigma_gamma=sigma.var(axis=0, dtype=np.float32),
        sigma_beta=mu.var(axis=0, dtype=np.float32),
    )


def maxstyle_transform(f: Tensor, params: StyleParams, scale: NoiseScale, layer: int) -> Tensor:
    """Mixed styles plus scaled noise; identity when gated off.

    The noise term is the per-channel product of the (constant) batch scale
    with the reparameterized draws, so gradients reach eps but never the scale.
    """
    _check_layer(params, layer, f)
    if not params.gate[layer]:
        return nd.identity(f)
    stats = instance_stats(f)
    gamma, beta = _mixed_coefficients(stats, params)
    n, c = stats.mu.data.shape
    sg = Tensor(np.broadcast_to(scale.sigma_gamma, (n, c)))
    sb = Tensor(np.broadcast_to(scale.sigma_beta, (n, c)))
    gamma = nd.add(gamma, nd.mul(params.eps_gamma[layer], sg))
    beta = nd.add(beta, nd.mul(params.eps_beta[layer], sb))
    fbar = normalize(f, stats)
    return nd.shift_channels(nd.scale_channels(fbar, gamma), beta)


def sample_style_params(rng: np.random.Generator, batch: int, layer_channels, p_gate: float) -> StyleParams:
    """Fresh random draw: lambda ~ U[0,1], eps ~ N(0,1), donor a uniform permutation,
    each layer gate Bernoulli(p_gate)."""
    if not 0.0 <= p_gate <= 1.0:
        raise ValidationError(f"sample_style_params: p_gate {p_gate} outside [0,1]")
    lam = Tensor(rng.uniform(0.0, 1.0, size=batch).astype(np.float32))
    eps_gamma = [Tensor(rng.standard_normal((batch, c)).astype(np.float32)) for c in layer_channels]
    eps_beta = [Tensor(rng.standard_normal((batch, c)).astype(np.float32)) for c in layer_channels]
    donor = rng.permutation(batch)
    gate = rng.uniform(0.0, 1.0, size=len(layer_channels)) < p_gate
    return StyleParams(lambda_mix=lam, eps_gamma=eps_gamma, eps_beta=eps_beta, donor=donor, gate=gate)


def _check_layer(params: StyleParams, layer: int, f: Tensor):
    if not 0 <= layer < params.num_layers:
        raise ValidationError(f"style layer {layer} outside [0, {params.num_layers})")
    want_c = params.eps_gamma[layer].data.shape
    have = (f.data.shape[0], f.data.shape[1])
    if want_c != have:
        raise ValidationError(
            f"style params for layer {layer} are shaped {want_c}, feature batch is {have}"
        )
