"""Model assembly: two encoder stages (AGLRFE + ALPM merged by CFM), two
decoder stages (MRFFAM + identity), and the deep-supervision heads."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import AGLRFE, ALPM, CFM, ConcatProjection, DecoderStage, DownProjection, ConvBlockB
from .config import ABLATION_FLAGS, ConfigurationError, ModelConfig

SITES = ("AGLRFE", "ALPM", "CFM", "MRFFAM", "CFMD")
KINDS = ("saliency", "contour")
# Sites carrying a contour head in addition to the saliency head.
CONTOUR_SITES = ("MRFFAM", "CFMD")


class HeadId(NamedTuple):
    """Identity of one supervised output head."""

    site: str
    stage: int
    kind: str

    @property
    def key(self) -> str:
        return f"{self.site.lower()}{self.stage}_{'sal' if self.kind == 'saliency' else 'con'}"

    def __str__(self) -> str:
        return self.key


def full_head_set() -> tuple[HeadId, ...]:
    """The 14 heads of the unablated model: saliency at all five sites x two
    stages, contour at MRFFAM and CFMD x two stages."""
    heads = [HeadId(site, stage, "saliency") for site in SITES for stage in (1, 2)]
    heads += [HeadId(site, stage, "contour") for site in CONTOUR_SITES for stage in (1, 2)]
    return tuple(heads)


def head_set_for_ablation(ablation: frozenset[str]) -> tuple[HeadId, ...]:
    """Active heads after removing the supervised sites named by the flags."""
    removed = {flag[3:].upper() for flag in ablation if flag.startswith("no_")}
    return tuple(h for h in full_head_set() if h.site not in removed)


class SODAWideNetPP(nn.Module):
    """Encoder-decoder saliency network with hybrid dilated-conv/attention
    encoding and deep supervision at every stage.

    `forward` returns a dict mapping :class:`HeadId` to pre-sigmoid logit maps
    (one channel each, at the native resolution of the supervised site).
    """

    def __init__(self, config: ModelConfig, ablation: frozenset[str] | set[str] = frozenset()):
        super().__init__()
        ablation = frozenset(ablation)
        unknown = ablation - set(ABLATION_FLAGS)
        if unknown:
            raise ConfigurationError(f"unknown ablation flags: {sorted(unknown)}")
        self.config = config
        self.ablation = ablation

        s = config.stem_channels
        c1, c2 = config.stage_channels
        groups = config.groupnorm_groups
        dk = config.gate_dk

        self.stem = ConvBlockB(3, s)

        if "no_aglrfe" in ablation:
            self.global1 = DownProjection(s, c1)
            self.global2 = DownProjection(c1, c2)
        else:
            self.global1 = AGLRFE(s, c1, config.aglrfe_dilations,
                                  config.encoder_pool_stride(1), dk, groups, site="AGLRFE_1")
            self.global2 = AGLRFE(c1, c2, config.aglrfe_dilations,
                                  config.encoder_pool_stride(2), dk, groups, site="AGLRFE_2")
        if "no_alpm" in ablation:
            self.local1 = DownProjection(s, c1)
            self.local2 = DownProjection(c1, c2)
        else:
            self.local1 = ALPM(s, c1, attn_width=dk, groups=groups, site="ALPM_1")
            self.local2 = ALPM(c1, c2, attn_width=dk, groups=groups, site="ALPM_2")
        if "no_cfm" in ablation:
            self.merge1 = ConcatProjection(c1, c1, c1)
            self.merge2 = ConcatProjection(c2, c2, c2)
        else:
            self.merge1 = CFM(c1, c1, c1, groups=groups)
            self.merge2 = CFM(c2, c2, c2, groups=groups)

        use_mrffam = "no_mrffam" not in ablation
        self.decoder1 = DecoderStage(c2, c1, c1, config.decoder_mrffam_dilations,
                                     groups=groups, use_mrffam=use_mrffam)
        self.decoder2 = DecoderStage(c1, s, s, config.decoder_mrffam_dilations,
                                     groups=groups, use_mrffam=use_mrffam)

        site_channels = {
            ("AGLRFE", 1): c1, ("AGLRFE", 2): c2,
            ("ALPM", 1): c1, ("ALPM", 2): c2,
            ("CFM", 1): c1, ("CFM", 2): c2,
            ("MRFFAM", 1): c2, ("MRFFAM", 2): c1,
            ("CFMD", 1): c1, ("CFMD", 2): s,
        }
        self.heads = nn.ModuleDict(
            {h.key: nn.Conv2d(site_channels[(h.site, h.stage)], 1, 1)
             for h in head_set_for_ablation(ablation)}
        )

    @property
    def head_ids(self) -> tuple[HeadId, ...]:
        return head_set_for_ablation(self.ablation)

    def _check_input(self, image: torch.Tensor):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected a (B, 3, H, W) image tensor, got {tuple(image.shape)}")
        if not torch.isfinite(image).all():
            raise ValueError("input image contains non-finite values")
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"input spatial size must be divisible by 8, got {h}x{w}")

    def forward(self, image: torch.Tensor) -> dict[HeadId, torch.Tensor]:
        self._check_input(image)
        stem = self.stem(image)
        g1 = self.global1(stem)
        l1 = self.local1(stem)
        e1 = self.merge1(g1, l1)
        g2 = self.global2(e1)
        l2 = self.local2(e1)
        e2 = self.merge2(g2, l2)
        d1, m1 = self.decoder1(e2, skip=e1)
        d2, m2 = self.decoder2(d1, skip=stem)

        features = {
            ("AGLRFE", 1): g1, ("AGLRFE", 2): g2,
            ("ALPM", 1): l1, ("ALPM", 2): l2,
            ("CFM", 1): e1, ("CFM", 2): e2,
            ("MRFFAM", 1): m1, ("MRFFAM", 2): m2,
            ("CFMD", 1): d1, ("CFMD", 2): d2,
        }
        return {h: self.heads[h.key](features[(h.site, h.stage)]) for h in self.head_ids}

    def predict_logits(self, image: torch.Tensor) -> torch.Tensor:
        """Final-stage saliency logits upsampled to the input resolution."""
        logits = self.forward(image)[HeadId("CFMD", 2, "saliency")]
        if logits.shape[-2:] != image.shape[-2:]:
            logits = F.interpolate(logits, size=image.shape[-2:],
                                   mode="bilinear", align_corners=False)
        return logits

    def predict_saliency(self, image: torch.Tensor) -> torch.Tensor:
        """Saliency probability map in [0, 1] at the input resolution."""
        return torch.sigmoid(self.predict_logits(image))


def init_weights(model: nn.Module, seed: int | None = None) -> nn.Module:
    """Gaussian fan-in initialization: conv weights ~ N(0, sqrt(2/N)) with N the
    number of incoming nodes per unit, zero biases, identity norm affines."""
    if seed is not None:
        torch.manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            nn.init.normal_(m.weight, mean=0.0, std=math.sqrt(2.0 / fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
            if isinstance(m, nn.BatchNorm2d):
                m.reset_running_stats()
    return model


def build_model(config: ModelConfig, ablation=frozenset(), seed: int | None = None) -> SODAWideNetPP:
    model = SODAWideNetPP(config, ablation=ablation)
    init_weights(model, seed=seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
