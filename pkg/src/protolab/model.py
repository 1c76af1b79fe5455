"""PrototypeLab: coarse mask -> prototypes -> cosine prototype masks -> final mask."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import ConfigError, Encoder, EncoderConfig, FeaturePyramid, check_input_size
from .nn import (Conv2d, ConvBnRelu, FactorizedConv, Module, ResidualBlock, load_params,
                 param_count, save_params)
from .tensor import Tensor

POOL_EPS = 1e-6
COSINE_EPS = 1e-8

# (use_cmgm, use_lkdc, use_pgm_pmgm, use_effm)
ABLATIONS = {
    1: ("baseline", (False, False, False, False)),
    2: ("baseline+cmgm", (True, True, False, False)),
    3: ("baseline+cmgm_wo_lkdc+pgm+pmgm", (True, False, True, True)),
    4: ("baseline+cmgm+pgm_wo_effm+pmgm", (True, True, True, False)),
    5: ("baseline+cmgm_wo_lkdc+pgm_wo_effm+pmgm", (True, False, True, False)),
    6: ("prototypelab", (True, True, True, True)),
}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    proto_dim: int = 32
    width: int = 16
    use_cmgm: bool = True
    use_lkdc: bool = True
    use_pgm_pmgm: bool = True
    use_effm: bool = True
    pool_mode: str = "normalized"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.use_pgm_pmgm and not self.use_cmgm:
            raise ConfigError("prototype modules need the coarse mask: use_pgm_pmgm requires use_cmgm")
        if self.pool_mode not in ("normalized", "plain"):
            raise ConfigError(f"unknown pool_mode {self.pool_mode!r}")
        if self.proto_dim < 1 or self.width < 1:
            raise ConfigError("proto_dim and width must be positive")

    @classmethod
    def desk(cls, width: int = 16, proto_dim: int = 32, row: int = 6, blocks: int = 2) -> "ModelConfig":
        """Encoder channels (w, 2w, 3w, 4w) with every hidden width equal to ``w``."""
        flags = ABLATIONS[row][1]
        return cls(EncoderConfig((width, 2 * width, 3 * width, 4 * width), blocks), proto_dim, width, *flags)

    def with_row(self, row: int) -> "ModelConfig":
        cmgm, lkdc, pgm, effm = ABLATIONS[row][1]
        return ModelConfig(EncoderConfig(self.encoder.channels, self.encoder.blocks), self.proto_dim,
                           self.width, cmgm, lkdc, pgm, effm, self.pool_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels"] = list(self.encoder.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardOutput:
    final_mask: Tensor
    coarse_mask: Tensor | None = None
    prototypes: list | None = None
    prototype_masks: Tensor | None = None


# ------------------------------------------------------------------ blocks


class LKDC(Module):
    """Large-kernel dilated convolution block.

    Factorized 7x7 and 13x13 branches are concatenated, fed to three parallel
    3x3 convs with dilation 1, 2, 4, concatenated again and projected back to
    ``channels`` by a 1x1 Conv-BN-ReLU.
    """

    def __init__(self, channels: int, rng):
        c = channels
        self.large = [FactorizedConv(c, c, 7, rng), FactorizedConv(c, c, 13, rng)]
        # no bias: the 1x1 conv and batch norm that follow would cancel it
        self.dilated = [Conv2d(2 * c, c, 3, rng, padding=r, dilation=r, bias=False) for r in (1, 2, 4)]
        self.fuse = ConvBnRelu(3 * c, c, rng, kernel=1)

    def forward(self, x: Tensor) -> Tensor:
        y = T.concat_channels([b(x) for b in self.large])
        y = T.concat_channels([b(y) for b in self.dilated])
        return self.fuse(y)


class CMGM(Module):
    """Coarse mask at 1/8 resolution from X3 and X4."""

    def __init__(self, c3: int, c4: int, width: int, use_lkdc: bool, rng):
        self.entry = ConvBnRelu(c3 + c4, width, rng)
        self.context = LKDC(width, rng) if use_lkdc else ConvBnRelu(width, width, rng)
        self.head = Conv2d(width, 1, 1, rng)

    def forward(self, pyr: FeaturePyramid) -> tuple[Tensor, Tensor]:
        x = T.concat_channels([T.upsample_bilinear(pyr.x4, 2), pyr.x3])
        x = self.context(self.entry(x))
        feature = T.upsample_bilinear(x, 2)
        return T.sigmoid(self.head(feature)), feature


def masked_avg_pool(f: Tensor, mask: Tensor, eps: float = POOL_EPS, normalized: bool = True) -> Tensor:
    """Mask-weighted spatial mean per sample, then averaged over the batch -> (D,).

    ``mask`` (N,1,h',w') is bilinearly resized to the spatial size of ``f``.
    With ``normalized=False`` the masked product is plainly averaged.
    """
    m = T.resize_bilinear(mask, f.shape[-2:])
    num = (f * m).sum(axes=(2, 3))
    if normalized:
        per_sample = num / (m.sum(axes=(2, 3)) + eps)
    else:
        per_sample = num * (1.0 / (f.shape[2] * f.shape[3]))
    return per_sample.mean(axes=0)


class EFFM(Module):
    """Top-down fusion X4 -> X1 followed by four parallel multi-rate branches."""

    def __init__(self, channels, width: int, out_dim: int, rng):
        c1, c2, c3, c4 = channels
        w = width
        self.fuse3 = ConvBnRelu(c4 + c3, w, rng)
        self.fuse2 = ConvBnRelu(w + c2, w, rng)
        self.fuse1 = ConvBnRelu(w + c1, w, rng)
        self.point = Conv2d(w, w, 1, rng)
        self.factorized = [FactorizedConv(w, w, k, rng) for k in (3, 5, 7)]
        self.dilated = [Conv2d(w, w, 3, rng, padding=r, dilation=r) for r in (3, 5, 7)]
        self.out = Conv2d(4 * w, out_dim, 1, rng)

    def forward(self, pyr: FeaturePyramid) -> Tensor:
        x = self.fuse3(T.concat_channels([T.upsample_bilinear(pyr.x4, 2), pyr.x3]))
        x = self.fuse2(T.concat_channels([T.upsample_bilinear(x, 2), pyr.x2]))
        x = self.fuse1(T.concat_channels([T.upsample_bilinear(x, 2), pyr.x1]))
        branches = [self.point(x)] + [d(f(x)) for f, d in zip(self.factorized, self.dilated)]
        return self.out(T.concat_channels(branches))


class PGM(Module):
    """Four prototypes from the pyramid plus a fifth from the fused map."""

    def __init__(self, channels, width: int, dim: int, use_effm: bool, rng, normalized: bool = True):
        self.project = [ConvBnRelu(c, dim, rng) for c in channels]
        # without EFFM the fifth source is a plain 3x3 Conv-BN-ReLU over X1
        self.fusion = EFFM(channels, width, dim, rng) if use_effm else ConvBnRelu(channels[0], dim, rng)
        self.use_effm = use_effm
        self.normalized = normalized

    def fused(self, pyr: FeaturePyramid) -> Tensor:
        return self.fusion(pyr) if self.use_effm else self.fusion(pyr.x1)

    def forward(self, pyr: FeaturePyramid, coarse_mask: Tensor) -> list[Tensor]:
        protos = [masked_avg_pool(proj(x), coarse_mask, normalized=self.normalized)
                  for proj, x in zip(self.project, pyr)]
        protos.append(masked_avg_pool(self.fused(pyr), coarse_mask, normalized=self.normalized))
        return protos


class Decoder(Module):
    def __init__(self, c1: int, c2: int, skip: int, dim: int, rng):
        self.res8 = ResidualBlock(skip + c2, dim, rng)
        self.res4 = ResidualBlock(dim + c1, dim, rng)
        self.res1 = ResidualBlock(dim + 3, dim, rng)

    def forward(self, image: Tensor, pyr: FeaturePyramid, feature: Tensor) -> Tensor:
        x = self.res8(T.concat_channels([feature, pyr.x2]))
        x = self.res4(T.concat_channels([T.upsample_bilinear(x, 2), pyr.x1]))
        return self.res1(T.concat_channels([T.upsample_bilinear(x, 4), image]))


def pmgm_forward(dec: Tensor, prototypes, eps: float = COSINE_EPS) -> Tensor:
    """One cosine-similarity channel per prototype."""
    return T.concat_channels([T.cosine_similarity_map(dec, p, eps) for p in prototypes])


class FinalHead(Module):
    def __init__(self, cin: int, dim: int, rng):
        self.res = ResidualBlock(cin, dim, rng)
        self.out = Conv2d(dim, 1, 1, rng)

    def forward(self, dec: Tensor, proto_masks: Tensor | None = None) -> Tensor:
        x = dec if proto_masks is None else T.concat_channels([dec, proto_masks])
        return T.sigmoid(self.out(self.res(x)))


# ------------------------------------------------------------------- model


class PrototypeLab(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = T.make_rng(seed)
        ch = cfg.encoder.channels
        w, d = cfg.width, cfg.proto_dim
        self.encoder = Encoder(cfg.encoder, rng)
        if cfg.use_cmgm:
            self.cmgm = CMGM(ch[2], ch[3], w, cfg.use_lkdc, rng)
        else:
            # fuses X4 and X3 like the CMGM entry so the decoder keeps its shapes
            self.bridge = ConvBnRelu(ch[2] + ch[3], w, rng)
        if cfg.use_pgm_pmgm:
            self.pgm = PGM(ch, w, d, cfg.use_effm, rng, normalized=cfg.pool_mode == "normalized")
        self.decoder = Decoder(ch[0], ch[1], w, d, rng)
        self.head = FinalHead(d + (5 if cfg.use_pgm_pmgm else 0), d, rng)

    def forward(self, image: Tensor) -> ForwardOutput:
        check_input_size(*image.shape[-2:])
        pyr = self.encoder(image)
        coarse = protos = masks = None
        if self.cfg.use_cmgm:
            coarse, feature = self.cmgm(pyr)
        else:
            fused = self.bridge(T.concat_channels([T.upsample_bilinear(pyr.x4, 2), pyr.x3]))
            feature = T.upsample_bilinear(fused, 2)
        dec = self.decoder(image, pyr, feature)
        if self.cfg.use_pgm_pmgm:
            protos = self.pgm(pyr, coarse)
            masks = pmgm_forward(dec, protos)
        return ForwardOutput(self.head(dec, masks), coarse, protos, masks)

    def predict(self, image) -> np.ndarray:
        """Eval-mode probabilities (N,1,H,W) without building a tape."""
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                return self.forward(T.as_tensor(image)).final_mask.data
        finally:
            self.train(was)


def build_model(cfg: ModelConfig, seed: int = 0) -> PrototypeLab:
    return PrototypeLab(cfg, seed)


# ------------------------------------------------------------- checkpoints

PARAMS_FILE = "model.bin"
CONFIG_FILE = "model.json"


def save_checkpoint(model: PrototypeLab, directory) -> Path:
    """Write ``model.bin`` (weights + BN stats) and ``model.json`` (ModelConfig)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(directory / PARAMS_FILE, model.state_dict())
    (directory / CONFIG_FILE).write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> PrototypeLab:
    directory = Path(directory)
    if not (directory / PARAMS_FILE).is_file() or not (directory / CONFIG_FILE).is_file():
        raise FileNotFoundError(f"no checkpoint at {directory} (expected {PARAMS_FILE} and {CONFIG_FILE})")
    cfg = ModelConfig.from_dict(json.loads((directory / CONFIG_FILE).read_text()))
    model = PrototypeLab(cfg)
    model.load_state_dict(load_params(directory / PARAMS_FILE))
    return model


__all__ = [
    "ABLATIONS", "CMGM", "Decoder", "EFFM", "FinalHead", "ForwardOutput", "LKDC", "ModelConfig",
    "PGM", "PrototypeLab", "build_model", "load_checkpoint", "masked_avg_pool", "param_count",
    "pmgm_forward", "save_checkpoint",
]
