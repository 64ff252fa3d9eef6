"""Architecture hyperparameters and named presets."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and widths of the context/detail transformer.

    The context stream embeds `ctx_patch`-pixel sub-patches of a
    `input_px`-pixel low-resolution patch; the detail stream embeds
    `det_subpatch`-pixel sub-patches of the co-located `det_patch`-pixel
    high-resolution patches.
    """

    depth: int
    ctx_dim: int
    ctx_heads: int
    det_dim: int
    det_heads: int
    ctx_patch: int
    det_patch: int
    det_subpatch: int
    input_px: int
    mlp_ratio: int

    @property
    def mag_ratio(self) -> int:
        """Linear magnification between the detail and context levels."""
        return self.det_patch // self.ctx_patch

    @property
    def ctx_tokens(self) -> int:
        """Context tokens per input patch (CLS excluded)."""
        return (self.input_px // self.ctx_patch) ** 2

    @property
    def det_subtokens(self) -> int:
        """Detail sub-tokens per detail patch."""
        return (self.det_patch // self.det_subpatch) ** 2

    @property
    def detail_px(self) -> int:
        """Side length of the high-resolution image matching one input patch."""
        return self.mag_ratio * self.input_px

    @property
    def grid(self) -> int:
        """Context token grid side: grid**2 == ctx_tokens."""
        return self.input_px // self.ctx_patch

    def validate(self) -> "ModelConfig":
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.det_patch % self.ctx_patch != 0 or self.det_patch // self.ctx_patch < 2:
            raise ConfigError(
                f"det_patch ({self.det_patch}) must be an integer multiple >= 2 "
                f"of ctx_patch ({self.ctx_patch})"
            )
        if self.input_px % self.ctx_patch != 0:
            raise ConfigError(
                f"input_px ({self.input_px}) not divisible by ctx_patch ({self.ctx_patch})"
            )
        if self.det_patch % self.det_subpatch != 0:
            raise ConfigError(
                f"det_patch ({self.det_patch}) not divisible by det_subpatch "
                f"({self.det_subpatch})"
            )
        if self.ctx_dim % self.ctx_heads != 0:
            raise ConfigError(
                f"ctx_dim ({self.ctx_dim}) not divisible by ctx_heads ({self.ctx_heads})"
            )
        if self.det_dim % self.det_heads != 0:
            raise ConfigError(
                f"det_dim ({self.det_dim}) not divisible by det_heads ({self.det_heads})"
            )
        return self

    def to_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


PRESETS: dict[str, ModelConfig] = {
    # full-size configuration; used for cost reports and shape checks only
    "reference": ModelConfig(
        depth=12, ctx_dim=384, ctx_heads=6, det_dim=24, det_heads=4,
        ctx_patch=16, det_patch=64, det_subpatch=16, input_px=224, mlp_ratio=4,
    ),
    # trains in minutes on a CPU; used by the synthetic-data experiments
    "toy": ModelConfig(
        depth=2, ctx_dim=32, ctx_heads=4, det_dim=8, det_heads=2,
        ctx_patch=16, det_patch=64, det_subpatch=16, input_px=64, mlp_ratio=2,
    ),
}


def parse_config_file(path: str | Path) -> ModelConfig:
    """Read a flat key=value file with one ModelConfig field per line."""
    values: dict[str, int] = {}
    known = {f.name for f in fields(ModelConfig)}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = int(val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {key} must be an integer") from exc
    missing = known - values.keys()
    if missing:
        raise ConfigError(f"{path}: missing config keys: {sorted(missing)}")
    return ModelConfig(**values).validate()


def get_config(preset: str | None = None, config_path: str | Path | None = None) -> ModelConfig:
    if config_path is not None:
        return parse_config_file(config_path)
    name = preset or "toy"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[name].validate()
