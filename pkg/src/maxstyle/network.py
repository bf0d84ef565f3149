"""Dual-branch segmentation network with pluggable style-augmentation sites.

Three wirings:
  A: plain encoder/seg-decoder, style layers in the encoder (regularization)
  B: as A plus an auxiliary image decoder reconstructing from the clean latent
  C: style layers moved into the image decoder, so style perturbations are
     decoded back to image space and can serve as fresh training inputs

Backbone is deliberately small: 4 encoder blocks (two 3x3 convs each) with
2x average pooling between, channels 16-32-64-64; decoders mirror the scales
with nearest upsampling and one conv per block. Fully convolutional, so any
input size divisible by 8 works.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ndtensor as nd
from . import styleops as so
from .errors import ConfigurationError, DimensionError, ValidationError
from .ndtensor import Tensor


class Wiring(str, Enum):
    A_ENCODER_MIXSTYLE = "A_encoder_mixstyle"
    B_DUALBRANCH_ENCODER_MIXSTYLE = "B_dualbranch_encoder_mixstyle"
    C_DECODER_STYLE_AUG = "C_decoder_style_aug"


class StyleKind(str, Enum):
    NONE = "none"
    MIXSTYLE = "mixstyle"
    DSU_NOISE = "dsu_noise"
    MAXSTYLE = "maxstyle"


@dataclass(frozen=True)
class Ablation:
    no_style_noise: bool = False
    no_style_mixing: bool = False
    no_advopt: bool = False


@dataclass(frozen=True)
class ModelVariant:
    wiring: Wiring
    style_kind: StyleKind = StyleKind.NONE
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self):
        enc_wirings = (Wiring.A_ENCODER_MIXSTYLE, Wiring.B_DUALBRANCH_ENCODER_MIXSTYLE)
        if self.wiring in enc_wirings and self.style_kind in (
            StyleKind.DSU_NOISE,
            StyleKind.MAXSTYLE,
        ):
            raise ConfigurationError(
                f"style kind {self.style_kind.value} needs the image decoder (wiring C), "
                f"got wiring {self.wiring.value}"
            )

    @property
    def has_img_decoder(self) -> bool:
        return self.wiring is not Wiring.A_ENCODER_MIXSTYLE

    @property
    def styles_in_encoder(self) -> bool:
        return self.wiring in (
            Wiring.A_ENCODER_MIXSTYLE,
            Wiring.B_DUALBRANCH_ENCODER_MIXSTYLE,
        )

    def to_dict(self) -> dict:
        return {
            "wiring": self.wiring.value,
            "style_kind": self.style_kind.value,
            "ablation": {
                "no_style_noise": self.ablation.no_style_noise,
                "no_style_mixing": self.ablation.no_style_mixing,
                "no_advopt": self.ablation.no_advopt,
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelVariant":
        return ModelVariant(
            wiring=Wiring(d["wiring"]),
            style_kind=StyleKind(d["style_kind"]),
            ablation=Ablation(**d.get("ablation", {})),
        )


@dataclass
class ConvP:
    kernel: Tensor
    bias: Tensor


ENCODER_CHANNELS = (16, 32, 64, 64)
DECODER_CHANNELS = (64, 64, 32, 16)
ENCODER_STYLE_CHANNELS = (16, 32, 64)  # after each of the first three blocks
DECODER_STYLE_CHANNELS = (64, 32, 16)  # after each of the last three blocks


@dataclass
class Model:
    variant: ModelVariant
    in_channels: int
    classes: int
    encoder: list[ConvP]
    seg_decoder: list[ConvP]
    img_decoder: list[ConvP] | None

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for group, convs in (
            ("enc", self.encoder),
            ("seg", self.seg_decoder),
            ("img", self.img_decoder or []),
        ):
            for i, cp in enumerate(convs):
                out.append((f"{group}.{i}.kernel", cp.kernel))
                out.append((f"{group}.{i}.bias", cp.bias))
        return out

    def set_requires_grad(self, flag: bool):
        for _, p in self.parameters():
            p.requires_grad = flag

    def zero_grads(self):
        for _, p in self.parameters():
            p.grad = None

    def style_layer_channels(self) -> list[int]:
        if self.variant.styles_in_encoder:
            return list(ENCODER_STYLE_CHANNELS)
        return list(DECODER_STYLE_CHANNELS)

    def param_count(self) -> int:
        return sum(p.data.size for _, p in self.parameters())


def _init_conv(rng: np.random.Generator, cin: int, cout: int, k: int = 3) -> ConvP:
    fan_in = cin * k * k
    limit = np.sqrt(6.0 / fan_in)
    kernel = rng.uniform(-limit, limit, size=(cout, cin, k, k)).astype(np.float32)
    return ConvP(kernel=Tensor(kernel, requires_grad=True), bias=nd.zeros((cout,), requires_grad=True))


def build_model(variant: ModelVariant, in_channels: int, classes: int, rng: np.random.Generator) -> Model:
    """Deterministic fan-scaled uniform init; draw order is fixed."""
    if classes < 2:
        raise ValidationError(f"build_model: need at least 2 classes, got {classes}")
    variant.validate()
    c1, c2, c3, c4 = ENCODER_CHANNELS
    enc_plan = [
        (in_channels, c1), (c1, c1),
        (c1, c2), (c2, c2),
        (c2, c3), (c3, c3),
        (c3, c4), (c4, c4),
    ]
    encoder = [_init_conv(rng, a, b) for a, b in enc_plan]

    def decoder(head_out: int) -> list[ConvP]:
        d1, d2, d3, d4 = DECODER_CHANNELS
        plan = [(c4, d1), (d1, d2), (d2, d3), (d3, d4), (d4, head_out)]
        return [_init_conv(rng, a, b) for a, b in plan]

    seg_decoder = decoder(classes)
    img_decoder = decoder(in_channels) if variant.has_img_decoder else None
    return Model(
        variant=variant,
        in_channels=in_channels,
        classes=classes,
        encoder=encoder,
        seg_decoder=seg_decoder,
        img_decoder=img_decoder,
    )


def _conv_relu(f: Tensor, cp: ConvP) -> Tensor:
    return nd.relu(nd.conv2d(f, cp.kernel, cp.bias, padding=1))


def _apply_style(m: Model, f: Tensor, style: so.StyleParams, layer: int) -> Tensor:
    kind = m.variant.style_kind
    if kind is StyleKind.MIXSTYLE:
        return so.mixstyle_transform(f, style, layer)
    scale = so.estimate_style_noise_scale(f)
    return so.maxstyle_transform(f, style, scale, layer)


def encode(m: Model, x: Tensor, style: so.StyleParams | None = None) -> Tensor:
    """(N,in,H,W) -> latent (N,64,H/8,W/8); styles fire here only for wiring A/B."""
    if x.data.ndim != 4 or x.data.shape[1] != m.in_channels:
        raise DimensionError(
            f"encode: expected (N,{m.in_channels},H,W), got {x.data.shape}"
        )
    h, w = x.data.shape[2], x.data.shape[3]
    if h % 8 or w % 8:
        raise DimensionError(f"encode: H and W must be divisible by 8, got {h}x{w}")
    use_style = (
        style is not None
        and m.variant.styles_in_encoder
        and m.variant.style_kind is not StyleKind.NONE
    )
    f = x
    for block in range(4):
        f = _conv_relu(f, m.encoder[2 * block])
        f = _conv_relu(f, m.encoder[2 * block + 1])
        if use_style and block < 3:
            f = _apply_style(m, f, style, block)
        if block < 3:
            f = nd.avgpool2x(f)
    return f


def _decode(m: Model, convs: list[ConvP], z: Tensor, style: so.StyleParams | None) -> Tensor:
    use_style = (
        style is not None
        and not m.variant.styles_in_encoder
        and m.variant.style_kind is not StyleKind.NONE
    )
    f = _conv_relu(z, convs[0])
    for i, cp in enumerate(convs[1:4]):
        f = nd.upsample_nearest2x(f)
        f = _conv_relu(f, cp)
        if use_style:
            f = _apply_style(m, f, style, i)
    return nd.conv2d(f, convs[4].kernel, convs[4].bias, padding=1)


def decode_seg(m: Model, z: Tensor) -> Tensor:
    """Latent -> per-pixel class logits at the input resolution."""
    if z.data.ndim != 4 or z.data.shape[1] != ENCODER_CHANNELS[-1]:
        raise DimensionError(f"decode_seg: latent must be (N,64,h,w), got {z.data.shape}")
    return _decode(m, m.seg_decoder, z, None)


def decode_img(m: Model, z: Tensor, style: so.StyleParams | None = None) -> Tensor:
    """Latent -> reconstruction; for wiring C the style transform fires after
    each of the last three blocks, with the noise scale estimated from that
    layer's pre-transform batch features."""
    if m.img_decoder is None:
        raise ConfigurationError(
            f"decode_img: wiring {m.variant.wiring.value} has no image decoder"
        )
    if z.data.ndim != 4 or z.data.shape[1] != ENCODER_CHANNELS[-1]:
        raise DimensionError(f"decode_img: latent must be (N,64,h,w), got {z.data.shape}")
    return _decode(m, m.img_decoder, z, style)


@dataclass
class ForwardOut:
    p_hat: Tensor
    x_hat: Tensor | None


def forward_variant(m: Model, x: Tensor, style: so.StyleParams | None = None) -> ForwardOut:
    """Variant-dependent training forward.

    A/B: style (if any) perturbs encoder features on the segmentation path;
    B reconstructs from a clean (unstyled) latent. C: the image decoder
    produces a (possibly styled) reconstruction and segmentation runs on it.
    """
    w = m.variant.wiring
    if w is Wiring.C_DECODER_STYLE_AUG:
        z = encode(m, x)
        x_hat = decode_img(m, z, style)
        p_hat = decode_seg(m, encode(m, x_hat))
        return ForwardOut(p_hat=p_hat, x_hat=x_hat)
    z_styled = encode(m, x, style)
    p_hat = decode_seg(m, z_styled)
    if w is Wiring.A_ENCODER_MIXSTYLE:
        return ForwardOut(p_hat=p_hat, x_hat=None)
    z_clean = z_styled if style is None else encode(m, x)
    return ForwardOut(p_hat=p_hat, x_hat=decode_img(m, z_clean))


def predict(m: Model, x: Tensor) -> np.ndarray:
    """Deployment path: argmax segmentation, image decoder detached."""
    with nd.no_grad():
        logits = decode_seg(m, encode(m, x))
    return logits.data.argmax(axis=1).astype(np.int32)


# ---------------------------------------------------------------------------
# checkpoints: JSON header + concatenated TNS1 records

_CKPT_MAGIC = b"MSCK"


def save_checkpoint(path, m: Model, seed: int, epoch: int, config_hash: str = "", meta: dict | None = None):
    params = m.parameters()
    header = {
        "variant": m.variant.to_dict(),
        "in_channels": m.in_channels,
        "classes": m.classes,
        "seed": int(seed),
        "epoch": int(epoch),
        "config_hash": config_hash,
        "params": [name for name, _ in params],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in params:
            arr = np.asarray(p.data, dtype="<f4", order="C")
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValidationError(f"load_checkpoint: bad magic in {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        variant = ModelVariant.from_dict(header["variant"])
        m = build_model(
            variant, header["in_channels"], header["classes"], np.random.default_rng(0)
        )
        by_name = dict(m.parameters())
        for name in header["params"]:
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims)
            if name not in by_name:
                raise ValidationError(f"load_checkpoint: unknown parameter {name}")
            if by_name[name].data.shape != arr.shape:
                raise ValidationError(
                    f"load_checkpoint: {name} shaped {arr.shape}, expected {by_name[name].data.shape}"
                )
            by_name[name].data = arr.astype(np.float32)
    return m, header
