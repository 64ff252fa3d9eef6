"""Frozen-feature extraction: manifest + checkpoint to per-slide files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as mdl
from .autodiff import Tensor, no_grad
from .checkpoint import config_from_header, load_checkpoint
from .config import ModelConfig
from .errors import CheckpointError, ConfigError
from .mil import write_features
from .pyramid import load_pair, read_manifest, tissue_filter


@dataclass
class ExtractResult:
    feature_dir: Path
    slide_ids: list[str]
    skipped: list[str]
    feat_dim: int


def load_backbone(checkpoint_path: str | Path, which: str = "teacher"):
    """Backbone parameters and metadata from a pretraining checkpoint.

    The teacher (EMA) weights are the default feature extractor; they are
    the smoother of the two copies.
    """
    header, arrays = load_checkpoint(checkpoint_path)
    cfg = config_from_header(header)
    prefix = f"{which}.backbone."
    params = {k[len(prefix):]: Tensor(v) for k, v in arrays.items()
              if k.startswith(prefix)}
    if not params:
        raise CheckpointError(
            f"{checkpoint_path}: no parameters under {prefix!r}")
    arch = header.get("kind")
    if arch not in ("cd", "vit"):
        raise CheckpointError(f"{checkpoint_path}: unknown model kind {arch!r}")
    return params, cfg, arch


def _embed_batch(params, cfg: ModelConfig, arch: str,
                 ctx: np.ndarray, det: np.ndarray | None) -> np.ndarray:
    with no_grad():
        if arch == "cd":
            emb, _ = mdl.cd_forward_patches(
                params, cfg, mdl.context_patch_matrix(cfg, ctx),
                mdl.detail_patch_matrix(cfg, det))
        else:
            emb, _ = mdl.vit_forward_patches(
                params, cfg, mdl.context_patch_matrix(cfg, ctx))
    return emb.data


def extract_features(
    manifest_path: str | Path,
    checkpoint_path: str | Path,
    out_dir: str | Path,
    batch_size: int = 32,
    which: str = "teacher",
) -> ExtractResult:
    """One feature file per slide (instance order follows the manifest),
    plus labels.tsv and a skip log for slides left empty by the tissue
    filter. Stored as float32; all math upstream is float64.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params, cfg, arch = load_backbone(checkpoint_path, which=which)

    entries = read_manifest(manifest_path)
    by_slide: dict[str, list] = {}
    labels: dict[str, int] = {}
    for e in entries:
        by_slide.setdefault(e.slide_id, []).append(e)
        labels[e.slide_id] = e.label

    slide_ids: list[str] = []
    skipped: list[str] = []
    for slide_id in sorted(by_slide):
        kept = []
        for e in by_slide[slide_id]:
            pair = load_pair(manifest_path, e)
            if pair.context_img.shape[0] != cfg.input_px:
                raise ConfigError(
                    f"{e.pair_id}: context patch {pair.context_img.shape[0]}px "
                    f"does not match checkpoint geometry {cfg.input_px}px")
            if tissue_filter(pair):
                kept.append(pair)
        if not kept:
            skipped.append(slide_id)
            continue
        chunks = []
        for s in range(0, len(kept), batch_size):
            part = kept[s:s + batch_size]
            ctx = np.stack([p.context_img for p in part])
            det = (np.stack([p.detail_img for p in part]) if arch == "cd" else None)
            chunks.append(_embed_batch(params, cfg, arch, ctx, det))
        write_features(out_dir / f"{slide_id}.fea", np.concatenate(chunks))
        slide_ids.append(slide_id)

    lines = [f"{sid}\t{labels[sid]}" for sid in sorted(labels)]
    (out_dir / "labels.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out_dir / "skipped.txt").write_text(
        "".join(f"{sid}\n" for sid in skipped), encoding="utf-8")
    return ExtractResult(feature_dir=out_dir, slide_ids=slide_ids,
                         skipped=skipped, feat_dim=cfg.ctx_dim)


def read_labels(path: str | Path) -> dict[str, int]:
    labels: dict[str, int] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        slide_id, label = line.split("\t")
        labels[slide_id] = int(label)
    return labels