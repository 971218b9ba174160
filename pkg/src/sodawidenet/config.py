"""Model configuration and the calibrated variant presets."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

VARIANTS = ("full", "medium", "small")

# Published trainable-parameter targets (in millions) per variant.
PARAM_TARGETS_M = {"full": 26.58, "medium": 6.66, "small": 1.67}
PARAM_TOLERANCE = 0.05

ABLATION_FLAGS = ("no_aglrfe", "no_alpm", "no_cfm", "no_mrffam", "fg_only")


class ConfigurationError(ValueError):
    """A structurally invalid model configuration (raised at build time)."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    stem_channels: int
    stage_channels: tuple[int, ...]
    encoder_stages: int = 2
    decoder_stages: int = 2
    aglrfe_dilations: tuple[int, ...] = (6, 10, 14, 18, 22)
    decoder_mrffam_dilations: tuple[int, ...] = (2, 4, 6, 8)
    # Average-pool stride in front of the encoder stage-1 attention branch;
    # stage 2 always pools by 2 (its maps are already half size).
    attn_pool_stride: int = 4
    # Key/query/value width d_k at the gate-producing attention sites. The
    # residual attention inside ALPM derives d_k from its own feature width.
    attn_dk: int = 0
    groupnorm_groups: int = 4
    input_size: tuple[int, int] = (384, 384)

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "aglrfe_dilations", tuple(self.aglrfe_dilations))
        object.__setattr__(
            self, "decoder_mrffam_dilations", tuple(self.decoder_mrffam_dilations)
        )
        object.__setattr__(self, "input_size", tuple(self.input_size))
        self._validate()

    def _validate(self):
        if not self.variant:
            raise ConfigurationError("variant must be a non-empty string")
        if self.encoder_stages != 2 or self.decoder_stages != 2:
            raise ConfigurationError(
                "architecture is fixed at 2 encoder and 2 decoder stages, got "
                f"{self.encoder_stages}/{self.decoder_stages}"
            )
        if self.stem_channels <= 0:
            raise ConfigurationError(f"stem_channels must be positive, got {self.stem_channels}")
        if len(self.stage_channels) != self.encoder_stages:
            raise ConfigurationError(
                f"stage_channels must have {self.encoder_stages} entries, got "
                f"{len(self.stage_channels)}"
            )
        if not self.aglrfe_dilations:
            raise ConfigurationError("aglrfe_dilations must not be empty")
        if any(d < 1 for d in self.aglrfe_dilations):
            raise ConfigurationError(f"dilations must be >= 1, got {self.aglrfe_dilations}")
        if list(self.aglrfe_dilations) != sorted(set(self.aglrfe_dilations)):
            raise ConfigurationError(
                f"aglrfe_dilations must be strictly increasing, got {self.aglrfe_dilations}"
            )
        if not self.decoder_mrffam_dilations:
            raise ConfigurationError("decoder_mrffam_dilations must not be empty")
        if self.attn_pool_stride not in (2, 4):
            raise ConfigurationError(
                f"attn_pool_stride must be 2 or 4, got {self.attn_pool_stride}"
            )
        if self.attn_dk < 0:
            raise ConfigurationError(f"attn_dk must be >= 0, got {self.attn_dk}")
        if self.groupnorm_groups <= 0:
            raise ConfigurationError(f"groupnorm_groups must be positive")
        n_chunks = len(self.decoder_mrffam_dilations)
        for c in self.stage_channels:
            if c <= 0:
                raise ConfigurationError(f"stage channels must be positive, got {c}")
            if c % self.groupnorm_groups:
                raise ConfigurationError(
                    f"stage width {c} not divisible by groupnorm_groups={self.groupnorm_groups}"
                )
            if c % n_chunks:
                raise ConfigurationError(
                    f"stage width {c} not divisible by the {n_chunks} MRFFAM chunks"
                )
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise ConfigurationError(
                f"input_size must be positive and divisible by 8, got {self.input_size}"
            )

    @property
    def gate_dk(self) -> int:
        """Effective d_k for the AGLRFE attention branches (0 = stage width)."""
        return self.attn_dk if self.attn_dk > 0 else self.stage_channels[0]

    def encoder_pool_stride(self, stage: int) -> int:
        """Average-pool stride before attention at encoder stage 1 or 2."""
        return self.attn_pool_stride if stage == 1 else 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["aglrfe_dilations"] = list(self.aglrfe_dilations)
        d["decoder_mrffam_dilations"] = list(self.decoder_mrffam_dilations)
        d["input_size"] = list(self.input_size)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls.from_dict(json.loads(s))

    def diff(self, other: "ModelConfig") -> list[str]:
        """Names of fields whose values differ between two configs."""
        mine, theirs = self.to_dict(), other.to_dict()
        return sorted(k for k in mine if mine[k] != theirs[k])


# Channel widths are calibrated so that the instantiated models land on the
# published parameter budgets; they are not taken from any external source.
# The small preset narrows stage 1 (which runs at the highest resolution) and
# widens stage 2 instead, keeping CPU inference cheap at the same budget.
_PRESETS = {
    "full": dict(stem_channels=92, stage_channels=(184, 184), attn_dk=184),
    "medium": dict(stem_channels=46, stage_channels=(92, 92), attn_dk=92),
    "small": dict(stem_channels=24, stage_channels=(36, 60), attn_dk=36),
}


def preset(variant: str) -> ModelConfig:
    """Calibrated configuration for one of the named variants."""
    aliases = {"m": "medium", "s": "small", "f": "full"}
    variant = aliases.get(variant, variant)
    if variant not in _PRESETS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return ModelConfig(variant=variant, **_PRESETS[variant])
