"""Closed-form token counts and self-attention cost accounting.

The cost unit is attention-score entries (query-key pairs) per
self-attention block, counted once per pair regardless of head count.
Following the convention of published per-block counts, the CLS token is
excluded from the headline figure; the CLS-inclusive count is exposed as a
secondary field.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .config import ModelConfig
from .errors import ConfigError


@dataclass(frozen=True)
class CostReport:
    name: str
    context_tokens: int
    detail_tokens: int
    sa_pairs: int           # per self-attention block, CLS excluded
    sa_pairs_with_cls: int

    @property
    def tokens(self) -> int:
        return self.context_tokens + self.detail_tokens

    def validate(self) -> "CostReport":
        if self.context_tokens <= 0 or self.detail_tokens < 0 or self.sa_pairs <= 0:
            raise ConfigError(f"cost report fields must be positive: {self}")
        return self


def vit_cost(image_px: int, patch_px: int, name: str | None = None) -> CostReport:
    """Single-resolution ViT: T = (image_px / patch_px)**2 tokens, T**2
    score pairs per block."""
    if image_px % patch_px != 0:
        raise ConfigError(f"image size {image_px} not divisible by patch {patch_px}")
    t = (image_px // patch_px) ** 2
    return CostReport(
        name=name or f"ViT {image_px}x{image_px}",
        context_tokens=t, detail_tokens=0,
        sa_pairs=t * t, sa_pairs_with_cls=(t + 1) * (t + 1),
    ).validate()


def cd_cost(cfg: ModelConfig, name: str | None = None) -> CostReport:
    """Joint model: n global context tokens plus n local attentions over m
    detail sub-tokens, so n**2 + n * m**2 score pairs per block."""
    cfg.validate()
    n, m = cfg.ctx_tokens, cfg.det_subtokens
    return CostReport(
        name=name or f"CD ({cfg.input_px}x{cfg.input_px}, "
                     f"{cfg.detail_px}x{cfg.detail_px})",
        context_tokens=n, detail_tokens=n * m,
        sa_pairs=n * n + n * m * m,
        sa_pairs_with_cls=(n + 1) * (n + 1) + n * m * m,
    ).validate()


def speedup(baseline: CostReport, target: CostReport) -> tuple[Fraction, float]:
    """Cost ratio baseline/target as a reduced fraction and a decimal."""
    if target.sa_pairs <= 0:
        raise ConfigError("target cost must be positive")
    ratio = Fraction(baseline.sa_pairs, target.sa_pairs)
    return ratio, float(ratio)


def measured_sa_pairs(attn_record: list[dict]) -> list[int]:
    """Count the distinct query-key score pairs actually materialized per
    block by a forward pass, from its attention record.

    Attention arrays are (..., heads, T, S); batch and head axes do not
    multiply the count, but the per-patch axis of local detail attention
    does (its slices attend independently).
    """
    counts = []
    for block in attn_record:
        total = 0
        for kind, attn in block.items():
            a = attn.data if hasattr(attn, "data") else np.asarray(attn)
            t, s = a.shape[-2], a.shape[-1]
            pairs = t * s
            if kind == "detail":
                pairs *= a.shape[1]  # independent local attention per patch
            total += pairs
        counts.append(total)
    return counts


def standard_reports(cfg: ModelConfig) -> list[CostReport]:
    """The three-way comparison at a config's geometry: ViT at the context
    resolution, ViT at the detail resolution, and the joint model."""
    return [
        vit_cost(cfg.input_px, cfg.ctx_patch),
        vit_cost(cfg.detail_px, cfg.ctx_patch),
        cd_cost(cfg),
    ]


def render_table(reports: list[CostReport], baseline_index: int = 1) -> str:
    """Aligned plain-text comparison; ratio column is vs the baseline row."""
    base = reports[baseline_index]
    headers = ["model", "tokens", "sa_pairs", "sa_pairs_with_cls", "reduction"]
    rows = []
    for r in reports:
        frac, dec = speedup(base, r)
        rows.append([r.name, f"{r.tokens:,}", f"{r.sa_pairs:,}",
                     f"{r.sa_pairs_with_cls:,}", f"{dec:.2f}x"])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def render_records(reports: list[CostReport], baseline_index: int = 1) -> str:
    """Machine-readable newline-delimited records, tab-separated:
    name, context_tokens, detail_tokens, sa_pairs, sa_pairs_with_cls,
    reduction_vs_baseline (reduced fraction)."""
    base = reports[baseline_index]
    lines = []
    for r in reports:
        frac, _ = speedup(base, r)
        lines.append(f"{r.name}\t{r.context_tokens}\t{r.detail_tokens}"
                     f"\t{r.sa_pairs}\t{r.sa_pairs_with_cls}\t{frac}")
    return "\n".join(lines) + "\n"