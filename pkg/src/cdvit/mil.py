"""Dual-stream multiple-instance classifier over frozen patch embeddings.

One stream scores instances and takes the top one; the other attends over
instances with the critical instance's query and classifies the attention-
weighted bag embedding. The slide score averages both streams' sigmoids.

All reductions over instances run in value-sorted order, so a bag's score
is bit-identical under any permutation of its rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor, backward
from .errors import ConfigError, IntegrityError
from .optim import AdamW

FEATURE_MAGIC = b"FEA1"


@dataclass
class Bag:
    """All patch embeddings of one slide plus its label."""

    features: np.ndarray  # (N, d) float
    label: int
    slide_id: str

    def validate(self) -> "Bag":
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise IntegrityError(
                f"{self.slide_id}: bag features must be (N>=1, d), "
                f"got {self.features.shape}"
            )
        return self


def init_mil_params(rng: np.random.Generator, feat_dim: int,
                    query_dim: int = 128, value_dim: int = 128) -> dict[str, Tensor]:
    p = {}
    for name, (fi, fo) in (("inst", (feat_dim, 1)), ("query", (feat_dim, query_dim)),
                           ("value", (feat_dim, value_dim)), ("bag", (value_dim, 1))):
        lp = nn.linear_params(rng, fi, fo)
        p[f"{name}.w"] = lp["w"]
        p[f"{name}.b"] = lp["b"]
    return p


def _check_width(feats: np.ndarray, params: dict[str, Tensor]) -> None:
    d = params["inst.w"].shape[0]
    if feats.shape[1] != d:
        raise ConfigError(
            f"bag feature width {feats.shape[1]} does not match classifier "
            f"width {d}"
        )


def instance_scores(feats, params: dict[str, Tensor]) -> Tensor:
    """Per-instance logits, shape (N,)."""
    f = ad.as_tensor(feats)
    _check_width(f.data, params)
    return ad.affine(f, params["inst.w"], params["inst.b"]).reshape(-1)


@dataclass
class BagOutput:
    bag_logit: Tensor        # scalar
    instance_max_logit: Tensor  # scalar
    attention: Tensor        # (N,)
    critical_index: int


def bag_forward(feats, params: dict[str, Tensor]) -> BagOutput:
    """Dual-stream forward for one bag.

    The critical instance is the instance-score argmax (lowest index on
    ties); attention over instances is the softmax of each query's inner
    product with the critical query.
    """
    f = ad.as_tensor(feats)
    n = f.shape[0]
    scores = instance_scores(f, params)
    k = int(np.argmax(scores.data))
    max_logit = scores[k]

    q = ad.affine(f, params["query.w"], params["query.b"])  # (N, dq)
    sims = (q @ q[k].reshape(-1, 1)).reshape(-1)            # (N,)
    shifted = sims - float(sims.data.max())
    e = ad.exp(shifted)
    attn = e / ad.sorted_sum(e.reshape(n, 1), axis=0).reshape(())

    v = ad.affine(f, params["value.w"], params["value.b"])  # (N, dv)
    bag_emb = ad.sorted_sum(v * attn.reshape(n, 1), axis=0)  # (dv,)
    bag_logit = ad.affine(bag_emb.reshape(1, -1), params["bag.w"],
                          params["bag.b"]).reshape(())
    return BagOutput(bag_logit=bag_logit, instance_max_logit=max_logit,
                     attention=attn, critical_index=k)


def slide_score(out: BagOutput) -> Tensor:
    """Equal average of the two streams' sigmoid probabilities."""
    return 0.5 * (ad.sigmoid(out.bag_logit) + ad.sigmoid(out.instance_max_logit))


def _bce(prob: Tensor, label: int) -> Tensor:
    p = ad.clip(prob, 1e-12, 1.0 - 1e-12)
    if label == 1:
        return -ad.log(p)
    return -ad.log(1.0 - p)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass(frozen=True)
class MILHyper:
    epochs: int = 40
    lr: float = 2e-4
    weight_decay: float = 0.05
    query_dim: int = 128
    value_dim: int = 128
    seed: int = 0


@dataclass
class MILTrainResult:
    params: dict[str, Tensor]
    epoch_loss: list[float]
    val_auc: list[float]
    best_epoch: int


def rank_auc(labels: np.ndarray, scores: np.ndarray) -> float | None:
    """AUC via the rank statistic: P(score_pos > score_neg) with ties
    counted half. None when only one class is present."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        return None
    greater = (pos[:, None] > neg[None, :]).sum()
    equal = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * equal) / (pos.size * neg.size))


def _bag_scores(bags: list[Bag], params: dict[str, Tensor]) -> np.ndarray:
    with ad.no_grad():
        return np.array([float(slide_score(bag_forward(b.features, params)).data)
                         for b in bags])


def evaluate(bags: list[Bag], params: dict[str, Tensor]):
    """Accuracy at threshold 0.5 and rank AUC (None for single-class sets)."""
    scores = _bag_scores(bags, params)
    labels = np.array([b.label for b in bags])
    accuracy = float(((scores >= 0.5).astype(int) == labels).mean())
    return accuracy, rank_auc(labels, scores)


def train_mil(bags_train: list[Bag], bags_val: list[Bag],
              hyper: MILHyper = MILHyper()) -> MILTrainResult:
    """Binary cross-entropy on the slide score, one bag per optimizer step;
    returns the parameters with the best validation AUC."""
    if not bags_train or not bags_val:
        raise IntegrityError("train and validation splits must be non-empty")
    labels = {b.label for b in bags_train}
    if labels != {0, 1}:
        raise IntegrityError(
            f"training split must contain both classes, got labels {sorted(labels)}"
        )
    for b in bags_train + bags_val:
        b.validate()

    feat_dim = bags_train[0].features.shape[1]
    rng = np.random.default_rng([hyper.seed, 101])
    params = init_mil_params(rng, feat_dim, hyper.query_dim, hyper.value_dim)
    opt = AdamW(params, lr=hyper.lr, weight_decay=hyper.weight_decay)

    best_auc = -1.0
    best_epoch = -1
    best = {k: v.data.copy() for k, v in params.items()}
    epoch_loss: list[float] = []
    val_auc: list[float] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(bags_train))
        losses = []
        for i in order:
            bag = bags_train[i]
            out = bag_forward(bag.features, params)
            loss = _bce(slide_score(out), bag.label)
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(float(loss.data))
        epoch_loss.append(float(np.mean(losses)))
        auc = rank_auc(np.array([b.label for b in bags_val]),
                       _bag_scores(bags_val, params))
        auc = -1.0 if auc is None else auc
        val_auc.append(auc)
        if auc > best_auc:
            best_auc = auc
            best_epoch = epoch
            best = {k: v.data.copy() for k, v in params.items()}

    final = {k: Tensor(v, requires_grad=True) for k, v in best.items()}
    return MILTrainResult(params=final, epoch_loss=epoch_loss, val_auc=val_auc,
                          best_epoch=best_epoch)


# ---------------------------------------------------------------------------
# feature files and splits


def write_features(path: str | Path, features: np.ndarray) -> None:
    """Per-slide binary feature file: FEA1, u32 N, u32 d, then N*d
    little-endian float32, row-major."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2:
        raise IntegrityError(f"features must be 2-d, got shape {feats.shape}")
    n, d = feats.shape
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", n, d) + feats.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise IntegrityError(f"{path}: bad magic {raw[:4]!r}")
    n, d = struct.unpack_from("<II", raw, 4)
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=12)
    if data.size != n * d:
        raise IntegrityError(f"{path}: truncated feature data")
    return data.reshape(n, d).astype(np.float64)


def load_bags(feature_dir: str | Path, labels: dict[str, int]) -> list[Bag]:
    bags = []
    for path in sorted(Path(feature_dir).glob("*.fea")):
        slide_id = path.stem
        if slide_id not in labels:
            raise IntegrityError(f"no label for slide {slide_id!r}")
        bags.append(Bag(features=read_features(path), label=labels[slide_id],
                        slide_id=slide_id).validate())
    return bags


def stratified_split(slide_labels: dict[str, int], seed: int,
                     test_fraction: float = 0.25, val_fraction: float = 0.15):
    """Split slide ids into (train, val, test), stratified by label.

    The validation set is val_fraction of the non-test slides.
    """
    rng = np.random.default_rng([seed, 7])
    train, val, test = [], [], []
    for label in sorted(set(slide_labels.values())):
        ids = sorted(s for s, l in slide_labels.items() if l == label)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_test = max(1, int(round(test_fraction * len(ids))))
        rest = ids[n_test:]
        n_val = max(1, int(round(val_fraction * len(rest))))
        test.extend(ids[:n_test])
        val.extend(rest[:n_val])
        train.extend(rest[n_val:])
    return sorted(train), sorted(val), sorted(test)


def write_predictions(path: str | Path, bags: list[Bag],
                      params: dict[str, Tensor]) -> None:
    scores = _bag_scores(bags, params)
    lines = [f"{b.slide_id}\t{s:.6f}\t{b.label}" for b, s in zip(bags, scores)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")