"""Self-distillation pretraining: student/teacher with EMA weights,
centering and temperature sharpening, cross-entropy between the two
augmented views' output distributions.

The teacher is never touched by gradients: its forward runs with graph
recording disabled and its weights move only through `ema_update`.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import nn
from .augment import AugmentationPolicy, augment_pair
from .autodiff import Tensor, backward, no_grad
from .checkpoint import save_checkpoint
from .config import ModelConfig
from .errors import ConfigError, IntegrityError, TrainingDiverged
from .optim import AdamW, clip_grad_norm, cosine_momentum, warmup_cosine_lr
from .pyramid import ManifestEntry, PatchPair, load_pair, read_manifest, tissue_filter


@dataclass(frozen=True)
class SSLConfig:
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = 5e-4          # scaled by batch_size / 256
    final_lr: float = 1e-6
    weight_decay: float = 0.04
    warmup_epochs: int = 1
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_base: float = 0.996
    ema_final: float = 1.0
    proto_count: int = 256
    head_hidden: int = 128
    head_bottleneck: int = 32
    grad_clip: float = 3.0
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    # augment/patchify batches on a worker thread while the main thread runs
    # the graph; augmentation randomness is keyed by (seed, epoch, batch), so
    # results do not depend on scheduling. 0 disables the worker.
    prefetch: int = 1


@dataclass
class TeacherState:
    """EMA copy of the student (backbone + head) plus the centering vector."""

    params: dict[str, Tensor]
    center: np.ndarray
    ema_momentum: float
    center_momentum: float


# ---------------------------------------------------------------------------
# projection head


def init_head_params(rng: np.random.Generator, in_dim: int,
                     cfg: SSLConfig) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    dims = [(in_dim, cfg.head_hidden), (cfg.head_hidden, cfg.head_hidden),
            (cfg.head_hidden, cfg.head_bottleneck)]
    for i, (fi, fo) in enumerate(dims, start=1):
        p[f"fc{i}.w"] = nn.param(nn.trunc_normal(rng, (fi, fo)))
        p[f"fc{i}.b"] = nn.param(np.zeros(fo))
    p["proto"] = nn.param(nn.trunc_normal(rng, (cfg.proto_count, cfg.head_bottleneck)))
    return p


def _unit_rows(x: Tensor) -> Tensor:
    norm = ad.sqrt((x * x).sum(axis=-1, keepdims=True) + 1e-12)
    return x / norm


def head_forward(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """3-layer MLP, unit-normalized bottleneck, row-normalized prototypes."""
    h = ad.gelu(ad.affine(x, p["fc1.w"], p["fc1.b"]))
    h = ad.gelu(ad.affine(h, p["fc2.w"], p["fc2.b"]))
    z = _unit_rows(ad.affine(h, p["fc3.w"], p["fc3.b"]))
    protos = _unit_rows(p["proto"])
    return z @ protos.transpose((1, 0))


# ---------------------------------------------------------------------------
# loss and state updates


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dino_loss(student_logits: Tensor, teacher_logits, student_temp: float,
              teacher_temp: float, center: np.ndarray) -> Tensor:
    """Cross-entropy H(P_t, P_s) between the centered, sharpened teacher
    distribution (a constant target) and the student distribution, averaged
    over rows."""
    if student_temp <= 0.0 or teacher_temp <= 0.0:
        raise ConfigError("temperatures must be positive")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    s = student_logits if student_logits.ndim > 1 else student_logits.reshape(1, -1)
    p_teacher = _softmax_rows((t - center) / teacher_temp)
    log_p_student = ad.log_softmax(s * (1.0 / student_temp), axis=-1)
    return -(Tensor(p_teacher) * log_p_student).sum(axis=-1).mean()


def ema_update(teacher_params: dict[str, Tensor], student_params: dict[str, Tensor],
               momentum: float) -> None:
    """theta_t <- momentum * theta_t + (1 - momentum) * theta_s, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
    if set(teacher_params) != set(student_params):
        missing = set(teacher_params) ^ set(student_params)
        raise IntegrityError(f"teacher/student parameter names differ: {sorted(missing)}")
    for name in sorted(teacher_params):
        t = teacher_params[name].data
        t *= momentum
        t += (1.0 - momentum) * student_params[name].data


def center_update(center: np.ndarray, teacher_batch_logits: np.ndarray,
                  momentum: float) -> np.ndarray:
    """center <- momentum * center + (1 - momentum) * batch mean."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"center momentum must be in [0, 1], got {momentum}")
    batch = np.atleast_2d(np.asarray(teacher_batch_logits, dtype=np.float64))
    return momentum * center + (1.0 - momentum) * batch.mean(axis=0)


# ---------------------------------------------------------------------------
# pretraining loop


def _with_prefix(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {prefix + k: v for k, v in params.items()}


def strip_prefix(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _clone_detached(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy()) for k, v in params.items()}


@dataclass
class PretrainResult:
    arch: str
    model_config: ModelConfig
    ssl_config: SSLConfig
    student: dict[str, Tensor]      # backbone.* and head.*
    teacher: TeacherState
    loss_log: list[tuple[int, float, float, float]]
    epoch_loss: list[float]


class _PairSet:
    """Tissue-filtered pairs from a manifest, cached in memory as uint8."""

    def __init__(self, manifest_path: str | Path, patch_px: int):
        self.entries: list[ManifestEntry] = []
        self.context: list[np.ndarray] = []
        self.detail: list[np.ndarray] = []
        for entry in read_manifest(manifest_path):
            pair = load_pair(manifest_path, entry)
            if pair.context_img.shape[0] != patch_px:
                raise ConfigError(
                    f"{entry.pair_id}: context patch is {pair.context_img.shape[0]}px, "
                    f"model expects {patch_px}px"
                )
            if not tissue_filter(pair):
                continue
            self.entries.append(entry)
            self.context.append(pair.context_img)
            self.detail.append(pair.detail_img)

    def __len__(self) -> int:
        return len(self.entries)


def _forward_patches(arch: str, backbone: dict[str, Tensor], cfg: ModelConfig,
                     ctx_mat: np.ndarray, det_mat: np.ndarray | None) -> Tensor:
    if arch == "cd":
        emb, _ = mdl.cd_forward_patches(backbone, cfg, ctx_mat, det_mat)
    else:
        emb, _ = mdl.vit_forward_patches(backbone, cfg, ctx_mat)
    return emb


def _make_batch(data: "_PairSet", model_cfg: ModelConfig, ssl_cfg: SSLConfig,
                arch: str, seed: int, epoch: int, batch_index: int,
                idx: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Augment one batch of pairs into stacked patch matrices: both views of
    every pair, view-1 rows first. Randomness depends only on the keys, not
    on when or where this runs."""
    rng = np.random.default_rng([seed, 31, epoch, batch_index])
    b = len(idx)
    ctx32 = np.empty((2 * b, model_cfg.ctx_tokens,
                      model_cfg.ctx_patch ** 2 * 3), np.float32)
    det32 = None
    if arch == "cd":
        det32 = np.empty((2 * b, model_cfg.ctx_tokens, model_cfg.det_subtokens,
                          model_cfg.det_subpatch ** 2 * 3), np.float32)
    for j, i in enumerate(idx):
        pair = PatchPair(context_img=data.context[i], detail_img=data.detail[i],
                         origin=(0, 0))
        for v, view in enumerate(augment_pair(pair, ssl_cfg.policy, rng)):
            ctx32[v * b + j] = mdl.reorder_context(model_cfg, view.context_img)
            if det32 is not None:
                det32[v * b + j] = mdl.reorder_detail(model_cfg, view.detail_img)
    ctx_mat = np.divide(ctx32, 255.0, dtype=np.float64)
    det_mat = np.divide(det32, 255.0, dtype=np.float64) if det32 is not None else None
    return ctx_mat, det_mat


def _batch_feed(data: "_PairSet", model_cfg: ModelConfig, ssl_cfg: SSLConfig,
                arch: str, seed: int, epoch: int, batches: list[np.ndarray]):
    """Yield (idx, ctx_mat, det_mat) per batch, optionally prepared ahead of
    time on a worker thread."""
    if ssl_cfg.prefetch <= 0:
        for bi, idx in enumerate(batches):
            ctx_mat, det_mat = _make_batch(data, model_cfg, ssl_cfg, arch,
                                           seed, epoch, bi, idx)
            yield idx, ctx_mat, det_mat
        return

    out: queue.Queue = queue.Queue(maxsize=1 + ssl_cfg.prefetch)

    def worker():
        for bi, idx in enumerate(batches):
            ctx_mat, det_mat = _make_batch(data, model_cfg, ssl_cfg, arch,
                                           seed, epoch, bi, idx)
            out.put((idx, ctx_mat, det_mat))

    thread = threading.Thread(target=worker, name="cdvit-augment", daemon=True)
    thread.start()
    try:
        for _ in batches:
            yield out.get()
    finally:
        thread.join()


def pretrain(
    manifest_path: str | Path,
    model_cfg: ModelConfig,
    ssl_cfg: SSLConfig,
    seed: int,
    arch: str = "cd",
    log_path: str | Path | None = None,
    progress: bool = False,
) -> PretrainResult:
    """Run the self-distillation loop over all tissue pairs in a manifest.

    Each step: sample a batch, make two augmented views per pair, run the
    student on both views and the teacher on both views (no gradients),
    take the symmetric cross-view loss, step the student, then refresh the
    teacher EMA and the center.
    """
    if arch not in ("cd", "vit"):
        raise ConfigError(f"arch must be 'cd' or 'vit', got {arch!r}")
    model_cfg.validate()
    data = _PairSet(manifest_path, model_cfg.input_px)
    if len(data) == 0:
        raise IntegrityError(f"{manifest_path}: no usable pairs after tissue filter")

    init_rng = np.random.default_rng([seed, 17])
    order_rng = np.random.default_rng([seed, 29])

    if arch == "cd":
        backbone = mdl.init_cd_params(model_cfg, init_rng)
    else:
        backbone = mdl.init_vit_params(model_cfg, init_rng)
    head = init_head_params(init_rng, model_cfg.ctx_dim, ssl_cfg)
    student = {**_with_prefix(backbone, "backbone."), **_with_prefix(head, "head.")}
    teacher = TeacherState(
        params=_clone_detached(student),
        center=np.zeros(ssl_cfg.proto_count),
        ema_momentum=ssl_cfg.ema_base,
        center_momentum=ssl_cfg.center_momentum,
    )

    n = len(data)
    batch = min(ssl_cfg.batch_size, n)
    steps_per_epoch = (n + batch - 1) // batch
    total_steps = ssl_cfg.epochs * steps_per_epoch
    peak_lr = ssl_cfg.base_lr * batch / 256.0
    warmup_steps = ssl_cfg.warmup_epochs * steps_per_epoch

    opt = AdamW(student, lr=0.0, weight_decay=ssl_cfg.weight_decay)
    t_backbone = strip_prefix(teacher.params, "backbone.")
    t_head = strip_prefix(teacher.params, "head.")

    loss_log: list[tuple[int, float, float, float]] = []
    epoch_loss: list[float] = []
    log_lines: list[str] = []
    step = 0
    t_start = time.time()

    for epoch in range(ssl_cfg.epochs):
        order = order_rng.permutation(n)
        batches = [order[s:s + batch] for s in range(0, n, batch)]
        feed = _batch_feed(data, model_cfg, ssl_cfg, arch, seed, epoch, batches)
        running: list[float] = []
        for idx, ctx_mat, det_mat in feed:
            b = len(idx)
            emb = _forward_patches(arch, backbone, model_cfg, ctx_mat, det_mat)
            s_logits = head_forward(emb, head)
            with no_grad():
                t_emb = _forward_patches(arch, t_backbone, model_cfg, ctx_mat, det_mat)
                t_logits = head_forward(t_emb, t_head).data
            swapped = np.concatenate([t_logits[b:], t_logits[:b]])

            loss = dino_loss(s_logits, swapped, ssl_cfg.student_temp,
                             ssl_cfg.teacher_temp, teacher.center)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                ids = [data.entries[i].pair_id for i in idx]
                raise TrainingDiverged(
                    f"non-finite loss at step {step}; pairs: {ids}",
                    step=step, pair_ids=ids,
                )

            opt.zero_grad()
            backward(loss)
            if ssl_cfg.grad_clip > 0:
                clip_grad_norm(student, ssl_cfg.grad_clip)
            lr = warmup_cosine_lr(step, total_steps, warmup_steps, peak_lr,
                                  ssl_cfg.final_lr)
            opt.lr = lr
            opt.step()

            momentum = cosine_momentum(step, total_steps, ssl_cfg.ema_base,
                                       ssl_cfg.ema_final)
            teacher.ema_momentum = momentum
            ema_update(teacher.params, student, momentum)
            teacher.center = center_update(teacher.center, t_logits,
                                           teacher.center_momentum)

            loss_log.append((step, loss_val, momentum, lr))
            log_lines.append(f"{step}\t{loss_val:.6f}\t{momentum:.6f}\t{lr:.8g}")
            running.append(loss_val)
            step += 1
        epoch_loss.append(float(np.mean(running)))
        if progress:
            rate = (time.time() - t_start) / step
            print(f"epoch {epoch + 1}/{ssl_cfg.epochs}  loss {epoch_loss[-1]:.4f}  "
                  f"({rate * 1000:.0f} ms/step)", flush=True)

    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n", encoding="utf-8")

    return PretrainResult(
        arch=arch, model_config=model_cfg, ssl_config=ssl_cfg,
        student=student, teacher=teacher, loss_log=loss_log, epoch_loss=epoch_loss,
    )


def save_pretrain_checkpoint(path: str | Path, result: PretrainResult,
                             meta: dict | None = None) -> None:
    params = {f"student.{k}": v.data for k, v in result.student.items()}
    params.update({f"teacher.{k}": v.data for k, v in result.teacher.params.items()})
    params["center"] = result.teacher.center
    info = {"arch": result.arch, "epochs": result.ssl_config.epochs,
            "steps": len(result.loss_log)}
    info.update(meta or {})
    save_checkpoint(path, kind=result.arch, config=result.model_config,
                    params=params, meta=info)
