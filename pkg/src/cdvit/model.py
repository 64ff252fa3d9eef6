"""The context/detail transformer and its single-resolution ViT twin.

Both models share the same kernels: the ViT is exactly the context stream,
and the joint model inserts a per-patch detail transformer whose aggregated
sub-tokens are added residually onto the matching context token before each
context block. Parameters live in a flat dict with dotted names.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError

CHANNELS = 3


def subtree(params: dict[str, Tensor], prefix: str) -> dict:
    """View of a flat param dict under `prefix`, grouped one level deep."""
    out: dict = {}
    plen = len(prefix)
    for key, value in params.items():
        if not key.startswith(prefix):
            continue
        rest = key[plen:]
        if "." in rest:
            head, tail = rest.split(".", 1)
            out.setdefault(head, {})[tail] = value
        else:
            out[rest] = value
    return out


def _block_params(rng: np.random.Generator, dim: int, heads: int, ratio: int,
                  store: dict[str, Tensor], prefix: str) -> None:
    for name, tensor in nn.ln_params(dim).items():
        store[f"{prefix}ln1.{name}"] = tensor
    for name, tensor in nn.attn_params(rng, dim, heads).items():
        store[f"{prefix}attn.{name}"] = tensor
    for name, tensor in nn.ln_params(dim).items():
        store[f"{prefix}ln2.{name}"] = tensor
    for name, tensor in nn.mlp_params(rng, dim, ratio).items():
        store[f"{prefix}mlp.{name}"] = tensor


def init_vit_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Single-resolution ViT: context tokenization plus context blocks."""
    cfg.validate()
    p: dict[str, Tensor] = {}
    patch_dim = cfg.ctx_patch * cfg.ctx_patch * CHANNELS
    p["embed_ctx.w"] = nn.param(nn.trunc_normal(rng, (patch_dim, cfg.ctx_dim)))
    p["embed_ctx.b"] = nn.param(np.zeros(cfg.ctx_dim))
    p["pos_ctx"] = nn.param(nn.trunc_normal(rng, (cfg.ctx_tokens + 1, cfg.ctx_dim)))
    p["cls"] = nn.param(nn.trunc_normal(rng, (cfg.ctx_dim,)))
    for i in range(cfg.depth):
        _block_params(rng, cfg.ctx_dim, cfg.ctx_heads, cfg.mlp_ratio, p, f"blk{i}.ctx.")
    for name, tensor in nn.ln_params(cfg.ctx_dim).items():
        store_key = f"final_ln.{name}"
        p[store_key] = tensor
    return p


def init_cd_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Joint model: ViT context stream plus detail stream and zero-initialized
    fusion projections (so a fresh model computes exactly the ViT forward)."""
    p = init_vit_params(cfg, rng)
    sub_dim = cfg.det_subpatch * cfg.det_subpatch * CHANNELS
    p["embed_det.w"] = nn.param(nn.trunc_normal(rng, (sub_dim, cfg.det_dim)))
    p["embed_det.b"] = nn.param(np.zeros(cfg.det_dim))
    p["pos_det"] = nn.param(nn.trunc_normal(rng, (cfg.det_subtokens, cfg.det_dim)))
    for i in range(cfg.depth):
        _block_params(rng, cfg.det_dim, cfg.det_heads, cfg.mlp_ratio, p, f"blk{i}.det.")
        p[f"blk{i}.fuse.w"] = nn.param(
            np.zeros((cfg.det_subtokens * cfg.det_dim, cfg.ctx_dim)))
        p[f"blk{i}.fuse.b"] = nn.param(np.zeros(cfg.ctx_dim))
    return p


def context_keys(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """The subset of joint-model parameters that the ViT twin shares."""
    return {
        k: v for k, v in params.items()
        if ".det." not in k and ".fuse." not in k
        and not k.startswith("embed_det") and k != "pos_det"
    }


def zero_fusion(params: dict[str, Tensor]) -> None:
    for key, tensor in params.items():
        if ".fuse." in key:
            tensor.data[...] = 0.0


# ---------------------------------------------------------------------------
# tokenization


def _check_image(name: str, imgs: np.ndarray, side: int) -> np.ndarray:
    imgs = np.asarray(imgs)
    if imgs.ndim != 4 or imgs.shape[1] != side or imgs.shape[2] != side \
            or imgs.shape[3] != CHANNELS:
        raise ConfigError(
            f"{name} images must have shape (B, {side}, {side}, {CHANNELS}), "
            f"got {imgs.shape}"
        )
    return imgs


def reorder_context(cfg: ModelConfig, img: np.ndarray) -> np.ndarray:
    """One context image to (ctx_tokens, ctx_patch**2 * 3) in the input
    dtype and 0..255 range, row-major grid order."""
    g, p = cfg.grid, cfg.ctx_patch
    mat = img.reshape(g, p, g, p, CHANNELS).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(mat).reshape(cfg.ctx_tokens, p * p * CHANNELS)


def reorder_detail(cfg: ModelConfig, img: np.ndarray) -> np.ndarray:
    """One detail image to (ctx_tokens, det_subtokens, det_subpatch**2 * 3)
    in the input dtype and 0..255 range; detail patches and their
    sub-patches are both in row-major grid order."""
    g, s = cfg.grid, cfg.det_subpatch
    gs = cfg.det_patch // s
    mat = img.reshape(g, gs, s, g, gs, s, CHANNELS).transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(mat).reshape(
        cfg.ctx_tokens, cfg.det_subtokens, s * s * CHANNELS)


def context_patch_matrix(cfg: ModelConfig, ctx_imgs: np.ndarray) -> np.ndarray:
    """(B, input_px, input_px, 3) images in 0..255 to flattened patches
    (B, ctx_tokens, ctx_patch**2 * 3) float64 in 0..1, row-major grid order.

    The reordering runs in the input dtype; the 1/255 scaling is a single
    float64 pass, so integer-valued float32 inputs lose nothing.
    """
    x = _check_image("context", ctx_imgs, cfg.input_px)
    mat = np.stack([reorder_context(cfg, img) for img in x])
    return np.divide(mat, 255.0, dtype=np.float64)


def detail_patch_matrix(cfg: ModelConfig, det_imgs: np.ndarray) -> np.ndarray:
    """(B, detail_px, detail_px, 3) images in 0..255 to flattened sub-patches
    (B, ctx_tokens, det_subtokens, det_subpatch**2 * 3) float64 in 0..1;
    detail patches and their sub-patches are both in row-major grid order."""
    x = _check_image("detail", det_imgs, cfg.detail_px)
    mat = np.stack([reorder_detail(cfg, img) for img in x])
    return np.divide(mat, 255.0, dtype=np.float64)


def _context_tokens_from(params: dict[str, Tensor], cfg: ModelConfig,
                         ctx_mat: np.ndarray) -> Tensor:
    tokens = ad.affine(Tensor(ctx_mat), params["embed_ctx.w"], params["embed_ctx.b"])
    b = ctx_mat.shape[0]
    cls_row = params["cls"].reshape(1, 1, cfg.ctx_dim) + Tensor(
        np.zeros((b, 1, cfg.ctx_dim)))
    return ad.concat([cls_row, tokens], axis=1) + params["pos_ctx"]


def _detail_tokens_from(params: dict[str, Tensor], det_mat: np.ndarray) -> Tensor:
    tokens = ad.affine(Tensor(det_mat), params["embed_det.w"], params["embed_det.b"])
    return tokens + params["pos_det"]


def tokenize_context(params: dict[str, Tensor], cfg: ModelConfig,
                     ctx_imgs: np.ndarray) -> Tensor:
    """Context tokens with CLS prepended and position encoding added:
    shape (B, ctx_tokens + 1, ctx_dim)."""
    return _context_tokens_from(params, cfg, context_patch_matrix(cfg, ctx_imgs))


def tokenize_detail(params: dict[str, Tensor], cfg: ModelConfig,
                    det_imgs: np.ndarray) -> Tensor:
    """Detail sub-tokens with position encoding added:
    shape (B, ctx_tokens, det_subtokens, det_dim)."""
    return _detail_tokens_from(params, detail_patch_matrix(cfg, det_imgs))


def tokenize(params: dict[str, Tensor], cfg: ModelConfig,
             ctx_imgs: np.ndarray, det_imgs: np.ndarray) -> tuple[Tensor, Tensor]:
    return (tokenize_context(params, cfg, ctx_imgs),
            tokenize_detail(params, cfg, det_imgs))


# ---------------------------------------------------------------------------
# blocks and full forwards


def detail_block(d: Tensor, heads: int, p: dict) -> tuple[Tensor, Tensor]:
    """Residual transformer block applied independently per detail patch:
    attention is local to the sub-tokens of each patch."""
    return nn.transformer_block(d, heads, p)


def context_block(c: Tensor, heads: int, p: dict) -> tuple[Tensor, Tensor]:
    """Residual transformer block over all context tokens including CLS."""
    return nn.transformer_block(c, heads, p)


def fuse(c: Tensor, d: Tensor, p: dict) -> Tensor:
    """Add a linear projection of each patch's concatenated sub-tokens onto
    the matching context token; the CLS row is left untouched."""
    b, n, m, dd = d.shape
    delta = ad.affine(d.reshape(b, n, m * dd), p["w"], p["b"])
    pad = Tensor(np.zeros((b, 1, c.shape[-1])))
    return c + ad.concat([pad, delta], axis=1)


def cd_forward_patches(params: dict[str, Tensor], cfg: ModelConfig,
                       ctx_mat: np.ndarray, det_mat: np.ndarray):
    """Joint forward from precomputed patch matrices (see cd_forward)."""
    c = _context_tokens_from(params, cfg, ctx_mat)
    d = _detail_tokens_from(params, det_mat)
    record: list[dict[str, Tensor]] = []
    for i in range(cfg.depth):
        d, det_attn = detail_block(d, cfg.det_heads, subtree(params, f"blk{i}.det."))
        c = fuse(c, d, subtree(params, f"blk{i}.fuse."))
        c, ctx_attn = context_block(c, cfg.ctx_heads, subtree(params, f"blk{i}.ctx."))
        record.append({"detail": det_attn, "context": ctx_attn})
    c = ad.layer_norm(c, params["final_ln.g"], params["final_ln.b"], nn.LN_EPS)
    return c[:, 0, :], record


def cd_forward(params: dict[str, Tensor], cfg: ModelConfig,
               ctx_imgs: np.ndarray, det_imgs: np.ndarray):
    """Joint forward pass.

    Returns (embedding, attn_record): embedding is the (B, ctx_dim) CLS row
    after the final layer norm; attn_record holds one dict per block with
    the detail attention (B, n, det_heads, m, m) and the context attention
    (B, ctx_heads, n+1, n+1).
    """
    return cd_forward_patches(params, cfg, context_patch_matrix(cfg, ctx_imgs),
                              detail_patch_matrix(cfg, det_imgs))


def vit_forward_patches(params: dict[str, Tensor], cfg: ModelConfig,
                        ctx_mat: np.ndarray):
    """Baseline forward from a precomputed patch matrix (see vit_forward)."""
    c = _context_tokens_from(params, cfg, ctx_mat)
    record: list[dict[str, Tensor]] = []
    for i in range(cfg.depth):
        c, ctx_attn = context_block(c, cfg.ctx_heads, subtree(params, f"blk{i}.ctx."))
        record.append({"context": ctx_attn})
    c = ad.layer_norm(c, params["final_ln.g"], params["final_ln.b"], nn.LN_EPS)
    return c[:, 0, :], record


def vit_forward(params: dict[str, Tensor], cfg: ModelConfig, ctx_imgs: np.ndarray):
    """Single-resolution baseline: context tokenization and context blocks."""
    return vit_forward_patches(params, cfg, context_patch_matrix(cfg, ctx_imgs))


def attention_map(record: list[dict[str, Tensor]], layer: int) -> np.ndarray:
    """CLS attention over the context grid at a 1-based block index.

    Head-averaged, reshaped to (grid, grid) and min-max normalized to [0,1];
    a constant field maps to all zeros.
    """
    if not 1 <= layer <= len(record):
        raise ConfigError(f"layer must be in 1..{len(record)}, got {layer}")
    attn = record[layer - 1]["context"]
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn)
    a = a[0]  # first sample: (heads, T, T)
    cls_row = a.mean(axis=0)[0, 1:]
    grid = int(round(np.sqrt(cls_row.size)))
    field = cls_row.reshape(grid, grid)
    lo, hi = field.min(), field.max()
    if hi - lo == 0.0:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)
