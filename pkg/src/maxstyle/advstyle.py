"""Adversarial style search: find the style composition that maximizes the
segmentation loss of the decoded image, then hand it back as a hard example.

The model is frozen throughout; only the mixing weights and noise draws are
updated, by plain or Adam-flavored gradient ascent, with the mixing weight
clipped back into [0,1] after every step.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd
from . import styleops as so
from .errors import ConfigurationError, ValidationError
from .network import Model, StyleKind, Wiring, decode_img, decode_seg, encode
from .ndtensor import Tensor
from .optim import AdamState, adam_update


@dataclass
class AdvConfig:
    alpha: float = 0.1
    n_iter: int = 5
    optimizer: str = "adam_ascent"  # or "plain_ascent"
    resample_donor: bool = False

    def validate(self):
        if self.alpha <= 0:
            raise ValidationError(f"AdvConfig: alpha must be positive, got {self.alpha}")
        if self.n_iter < 0:
            raise ValidationError(f"AdvConfig: n_iter must be >= 0, got {self.n_iter}")
        if self.optimizer not in ("adam_ascent", "plain_ascent"):
            raise ValidationError(f"AdvConfig: unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_iter": self.n_iter,
            "optimizer": self.optimizer,
            "resample_donor": self.resample_donor,
        }


@dataclass
class AdvTrace:
    """Inner-loop diagnostics: one loss/stat row per visited iterate (n_iter+1)."""

    seg_losses: list[float] = field(default_factory=list)
    mean_abs_eps_gamma: list[float] = field(default_factory=list)
    mean_abs_eps_beta: list[float] = field(default_factory=list)
    mean_lambda: list[float] = field(default_factory=list)
    init_params: so.StyleParams | None = None
    final_params: so.StyleParams | None = None
    all_gates_off: bool = False

    def csv_rows(self, batch_id) -> list[tuple]:
        return [
            (batch_id, i, self.seg_losses[i], self.mean_abs_eps_gamma[i],
             self.mean_abs_eps_beta[i], self.mean_lambda[i])
            for i in range(len(self.seg_losses))
        ]


TRACE_CSV_HEADER = ("batch_id", "iter", "seg_loss", "mean_abs_eps_gamma", "mean_abs_eps_beta", "mean_lambda")


def style_params_for_variant(model: Model, rng: np.random.Generator, batch: int, p_gate: float = 0.5) -> so.StyleParams:
    """Random style draw with the variant's ablations applied.

    Neutralization happens after sampling so every variant consumes the rng
    stream identically; ablated runs differ only in the neutralized values.
    """
    params = so.sample_style_params(rng, batch, model.style_layer_channels(), p_gate)
    v = model.variant
    if v.style_kind is StyleKind.MIXSTYLE or v.ablation.no_style_noise:
        for e in params.eps_gamma + params.eps_beta:
            e.data[...] = 0.0
    if v.style_kind is StyleKind.DSU_NOISE or v.ablation.no_style_mixing:
        params.lambda_mix.data[...] = 1.0
        params.donor = np.arange(batch)
    return params


def init_style_params(rng: np.random.Generator, batch: int, model: Model) -> so.StyleParams:
    """Adversarial starting point: random draw with the free parameters marked
    differentiable (ablations freeze their respective parameters)."""
    if model.variant.wiring is not Wiring.C_DECODER_STYLE_AUG:
        raise ConfigurationError(
            f"adversarial style search needs wiring C, got {model.variant.wiring.value}"
        )
    params = style_params_for_variant(model, rng, batch)
    abl = model.variant.ablation
    params.set_trainable(lambda_mix=not abl.no_style_mixing, eps=not abl.no_style_noise)
    return params


@contextmanager
def _frozen(model: Model):
    saved = [(p, p.requires_grad) for _, p in model.parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, prev in saved:
            p.requires_grad = prev


def _eps_stats(params: so.StyleParams) -> tuple[float, float, float]:
    eg = np.concatenate([e.data.ravel() for e in params.eps_gamma])
    eb = np.concatenate([e.data.ravel() for e in params.eps_beta])
    return (
        float(np.abs(eg).mean()),
        float(np.abs(eb).mean()),
        float(params.lambda_mix.data.mean()),
    )


def _seg_loss_of_styled(model: Model, z: Tensor, s_params: so.StyleParams, labels: np.ndarray):
    x_hat = decode_img(model, z, s_params)
    p_hat = decode_seg(model, encode(model, x_hat))
    return nd.softmax_cross_entropy(p_hat, labels)


def _ascent_step(model, z, labels, params, cfg, adam: AdamState | None) -> float:
    """One maximization step; returns the loss at the pre-update iterate."""
    with nd.record():
        loss = _seg_loss_of_styled(model, z, params, labels)
        nd.backward(loss)
    trainable = params.trainable()
    if cfg.optimizer == "adam_ascent" and adam is not None:
        grads = [(-p.grad if p.grad is not None else None) for p in trainable]
        adam_update(trainable, grads, adam, lr=cfg.alpha)
    else:
        for p in trainable:
            if p.grad is not None:
                p.data = (p.data + cfg.alpha * p.grad).astype(np.float32)
    params.lambda_mix.data = np.clip(params.lambda_mix.data, 0.0, 1.0)
    for p in trainable:
        p.grad = None
    return float(loss.data)


def ascent_step(model: Model, x: Tensor, y: np.ndarray, params: so.StyleParams, cfg: AdvConfig) -> so.StyleParams:
    """Single public ascent step on a fresh batch; freezes the model around it."""
    cfg.validate()
    with _frozen(model), nd.no_grad():
        z = encode(model, x)
    adam = AdamState(params.trainable()) if cfg.optimizer == "adam_ascent" else None
    with _frozen(model):
        _ascent_step(model, z, y, params, cfg, adam)
    return params


def optimize_styles(
    model: Model,
    x: Tensor,
    y: np.ndarray,
    cfg: AdvConfig,
    rng: np.random.Generator,
    params: so.StyleParams | None = None,
) -> tuple[so.StyleParams, AdvTrace]:
    """Run the inner maximization; returns optimized params plus the loss trace.

    n_iter=0 returns the random initialization untouched (the no-advopt
    ablation). The model's parameters and grads are bit-identical before
    and after.
    """
    cfg.validate()
    if params is None:
        params = init_style_params(rng, x.data.shape[0], model)
    trace = AdvTrace(init_params=params.copy(), all_gates_off=not params.gate.any())

    def log_point(loss_value: float):
        trace.seg_losses.append(loss_value)
        eg, eb, lam = _eps_stats(params)
        trace.mean_abs_eps_gamma.append(eg)
        trace.mean_abs_eps_beta.append(eb)
        trace.mean_lambda.append(lam)

    with _frozen(model):
        with nd.no_grad():
            z = encode(model, x)
        adam = AdamState(params.trainable()) if cfg.optimizer == "adam_ascent" else None
        for _ in range(cfg.n_iter):
            if cfg.resample_donor and not model.variant.ablation.no_style_mixing:
                params.donor = rng.permutation(x.data.shape[0])
            log_point(_ascent_step(model, z, y, params, cfg, adam))
        with nd.no_grad():
            log_point(float(_seg_loss_of_styled(model, z, params, y).data))
    trace.final_params = params.copy()
    return params, trace


def generate_hard_example(model: Model, x: Tensor, params: so.StyleParams) -> Tensor:
    """Decode the style-perturbed reconstruction as a constant input sample."""
    with nd.no_grad():
        z = encode(model, x)
        x_hat = decode_img(model, z, params)
    return x_hat.detach()
