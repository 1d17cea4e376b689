"""Joint training: triplet sampling, multi-task loss, momentum SGD,
learning-rate decay and the tanh-scale continuation schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import ContinuationSchedule, advance_schedule, quantization_gap, triplet_hinge
from .errors import DataError, TrainingError
from .hamming import CodeDatabase, precision_at_k, query_topk
from .model import DMCHModel, TrainConfig
from .synth import DatasetManifest, load_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


def sample_triplets(manifest: DatasetManifest, ratio: int, seed: int, split: str = "train") -> list[Triplet]:
    """For each (user anchor, shop positive) pair draw ``ratio`` distinct shop
    negatives from other products, uniformly without replacement."""
    shop_by_product: dict[str, list[str]] = {}
    for r in manifest.shop():
        shop_by_product.setdefault(r.product_id, []).append(r.item_id)
    all_shop = sorted((r.item_id, r.product_id) for r in manifest.shop())
    rng = np.random.default_rng([seed, 2])
    out = []
    for anchor in sorted(manifest.user(split), key=lambda r: r.item_id):
        positives = sorted(shop_by_product.get(anchor.product_id, []))
        if not positives:
            raise DataError(f"product {anchor.product_id} has no shop image")
        pool = [i for i, p in all_shop if p != anchor.product_id]
        if len(pool) < ratio:
            raise DataError(
                f"product {anchor.product_id}: only {len(pool)} negatives for ratio {ratio}")
        for pos in positives:
            for k in rng.choice(len(pool), size=ratio, replace=False):
                out.append(Triplet(anchor.item_id, pos, pool[k]))
    return out


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.lr_decay ** (epoch // config.lr_decay_every)


class SGDMomentum:
    """v <- momentum * v + grad; param <- param - lr * v; grads cleared."""

    def __init__(self, params: dict[str, Tensor], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, lr: float) -> None:
        sgd_momentum_step(self.params, self.velocity, lr, self.momentum)


def sgd_momentum_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise TrainingError(f"no gradient for parameters: {missing}")
    for k, p in params.items():
        v = velocity[k]
        v *= momentum
        v += p.grad
        p.data -= lr * v
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if total > max_norm:
        f = max_norm / total
        for p in params:
            p.grad = p.grad * f
    return total


class ImageCache:
    """Loads manifest images once, keyed by item id."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.by_id = {r.item_id: r for r in manifest.records}
        self._pixels: dict[str, np.ndarray] = {}

    def pixels(self, item_id: str) -> np.ndarray:
        if item_id not in self._pixels:
            self._pixels[item_id] = load_image(self.manifest.resolve(self.by_id[item_id]))
        return self._pixels[item_id]

    def batch(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.pixels(i) for i in ids])


@dataclass
class LossParts:
    total: Tensor
    tag: float
    emb: float


def multi_task_loss(model: DMCHModel, batch: Sequence[Triplet], images: ImageCache,
                    sequences: dict[str, list[int]] | None = None) -> LossParts:
    """Batch mean of L_tag(I) + L_tag(I_p) + L_tag(I_q) + eta * L_emb(I, I_p, I_q).

    Each distinct image in the batch is encoded once; its tag loss is weighted
    by how many triplet slots it fills.
    """
    cfg = model.config
    if not batch:
        raise DataError("empty triplet batch")
    slots = [t.anchor for t in batch] + [t.positive for t in batch] + [t.negative for t in batch]
    unique = sorted(set(slots))
    pos = {item: i for i, item in enumerate(unique)}
    counts = np.zeros(len(unique))
    for s in slots:
        counts[pos[s]] += 1
    seqs = []
    for item in unique:
        if sequences is not None and item in sequences:
            seqs.append(sequences[item])
            continue
        rec = images.by_id.get(item)
        if rec is None or not rec.attributes:
            raise DataError(f"no attribute sequence for {item}")
        seqs.append(model.vocab.encode(rec.attributes))
    B = len(batch)
    tag, e = model.forward(images.batch(unique), seqs, weights=counts / B)
    idx = np.array([pos[s] for s in slots]).reshape(3, B)
    hinge = triplet_hinge(ad.take_rows(e, idx[0]), ad.take_rows(e, idx[1]), ad.take_rows(e, idx[2]),
                          cfg.margin)
    emb = ad.mean(hinge)
    if cfg.use_tag_loss:
        total = ad.add(tag, ad.scale(emb, cfg.eta)) if cfg.eta > 0 else tag
    else:
        total = emb
    return LossParts(total, float(tag.data), float(emb.data))


# ---------------------------------------------------------------- evaluation


def build_database(model: DMCHModel, manifest: DatasetManifest, images: ImageCache) -> CodeDatabase:
    shop = manifest.shop()
    _, packed, _, _ = model.infer(images.batch([r.item_id for r in shop]))
    return CodeDatabase(model.config.code_bits, [r.item_id for r in shop], packed,
                        [r.product_id for r in shop])


def evaluate_retrieval(model: DMCHModel, manifest: DatasetManifest, images: ImageCache,
                       ks: Sequence[int] = (1, 10), split: str = "test",
                       products: set[str] | None = None) -> dict[int, float]:
    """P@K of ``split`` user queries against every shop image."""
    db = build_database(model, manifest, images)
    queries = [r for r in manifest.user(split) if products is None or r.product_id in products]
    if not queries:
        raise DataError(f"no {split} queries")
    _, packed, _, _ = model.infer(images.batch([r.item_id for r in queries]))
    kmax = max(ks)
    results = [query_topk(db, q, kmax) for q in packed]
    item_products = dict(zip(db.ids, db.products))
    return {k: precision_at_k(results, [r.product_id for r in queries], item_products, k) for k in ks}


def relaxed_codes(model: DMCHModel, images: np.ndarray, phi: float) -> np.ndarray:
    relaxed, _, _, _ = model.infer(images, phi=phi)
    return relaxed


# ---------------------------------------------------------------- training


@dataclass
class EpochLog:
    epoch: int
    tag: float
    emb: float
    total: float
    phi: float
    lr: float

    def to_tsv(self) -> str:
        return f"{self.epoch}\t{self.tag:.6f}\t{self.emb:.6f}\t{self.total:.6f}\t{self.phi:g}\t{self.lr:g}"


@dataclass
class TrainResult:
    model: DMCHModel
    history: list[EpochLog] = field(default_factory=list)
    stage_gaps: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


class PlateauDetector:
    """Fires after ``patience`` consecutive epochs whose relative loss
    improvement is below ``tol``, or when the stage hits ``cap`` epochs."""

    def __init__(self, tol: float, patience: int, cap: int):
        self.tol, self.patience, self.cap = tol, patience, cap
        self.reset()

    def reset(self) -> None:
        self.prev: float | None = None
        self.flat = 0
        self.epochs = 0

    def update(self, loss: float) -> bool:
        self.epochs += 1
        if self.prev is not None:
            rel = (self.prev - loss) / max(abs(self.prev), 1e-12)
            self.flat = self.flat + 1 if rel < self.tol else 0
        self.prev = loss
        return self.flat >= self.patience or self.epochs >= self.cap


def train(config: TrainConfig, manifest: DatasetManifest, out_dir=None,
          model: DMCHModel | None = None,
          on_epoch: Callable[[EpochLog, DMCHModel], None] | None = None,
          gap_items: Sequence[str] | None = None) -> TrainResult:
    """Train for ``config.max_epochs`` epochs.

    With continuation on, phi grows by ``phi_growth`` each time the plateau
    detector fires, for at most ``n_stages`` stages; the last stage runs to the
    epoch budget. A checkpoint is written at the end of every stage and a
    final one at the end. The quantisation gap over ``gap_items`` (default:
    the shop images) is recorded at the end of each stage.
    """
    config.validate()
    model = model or DMCHModel(config)
    images = ImageCache(manifest)
    seq_cache = {r.item_id: model.vocab.encode(r.attributes) for r in manifest.records}
    opt = SGDMomentum(model.params, config.momentum)
    schedule = ContinuationSchedule(config.phi0, 0, config.phi_growth)
    model.phi = schedule.phi
    plateau = PlateauDetector(config.plateau_tol, config.plateau_patience, config.stage_epoch_cap)
    result = TrainResult(model)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
        log_fh = open(out / "metrics.tsv", "w", encoding="utf-8")
        log_fh.write("epoch\tL_tag\tL_emb\tL_total\tphi\tlr\n")
    gap_ids = list(gap_items) if gap_items is not None else [r.item_id for r in manifest.shop()]

    def close_stage():
        gap = float(np.mean(quantization_gap(relaxed_codes(model, images.batch(gap_ids), schedule.phi))))
        result.stage_gaps.append(gap)
        if out is not None:
            path = out / f"stage{schedule.stage}.ckpt"
            model.save(path)
            result.checkpoints.append(path)

    try:
        for epoch in range(config.max_epochs):
            lr = lr_at(epoch, config)
            triplets = sample_triplets(manifest, config.neg_ratio, config.seed * 100003 + epoch)
            order = np.random.default_rng([config.seed, epoch, 3]).permutation(len(triplets))
            sums = np.zeros(3)
            n_batches = 0
            for b0 in range(0, len(order), config.batch_size):
                batch = [triplets[i] for i in order[b0:b0 + config.batch_size]]
                parts = multi_task_loss(model, batch, images, seq_cache)
                value = float(parts.total.data)
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches} "
                        f"(first triplet {batch[0]})")
                ad.backward(parts.total)
                for p in model.params.values():
                    if p.grad is None:
                        p.grad = np.zeros(p.shape)
                clip_grad_norm(model.params.values(), config.clip_norm)
                opt.step(lr)
                sums += (parts.tag, parts.emb, value)
                n_batches += 1
            tag, emb, total = sums / n_batches
            entry = EpochLog(epoch, tag, emb, total, schedule.phi, lr)
            result.history.append(entry)
            log.info(entry.to_tsv())
            if log_fh is not None:
                log_fh.write(entry.to_tsv() + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(entry, model)
            last_epoch = epoch == config.max_epochs - 1
            if (config.continuation and schedule.stage < config.n_stages - 1
                    and plateau.update(total) and not last_epoch):
                close_stage()
                schedule = advance_schedule(schedule)
                model.phi = schedule.phi
                plateau.reset()
        close_stage()
        if out is not None:
            final = out / "final.ckpt"
            model.save(final)
            result.checkpoints.append(final)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
