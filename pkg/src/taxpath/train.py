"""Losses, analytic gradients, optimizers, and the epoch loop.

The objective combines a hierarchical classification loss (cross-entropy at
every level, leaf level weighted against the rest) with an auxiliary semantic
consistency loss over judge verdicts. All gradients are derived by hand and
checked against central finite differences in the test suite.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dataset import ProductRecord
from .encoder import EncodedBatch, assemble_batch, prepare_records
from .infer import predict_batch
from .moe import ForwardCache, MoEModel, forward_batch
from .semantic import judge_verdict
from .taxonomy import NULL_CODE, Taxonomy
from .util import stream_rng

PROB_FLOOR = 1e-12

SEMANTIC_CLASS_INDEX = {"Y": 0, "N": 1, "U": -1}  # U is excluded from the loss


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    omega_c: float = 0.2
    omega_s: float = 0.2

    def __post_init__(self):
        if not (0.0 <= self.omega_c <= 1.0 and 0.0 <= self.omega_s <= 1.0):
            raise ValueError(f"loss weights must lie in [0,1]: {self}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_weights: LossWeights = LossWeights()
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("batch_size, epochs, learning_rate must be non-negative (batch >= 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer: {self.optimizer}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("adam betas must lie in (0,1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


@dataclass(frozen=True)
class LevelTargets:
    indices: np.ndarray  # (B, levels) target index per level
    leaf_level: np.ndarray  # (B,) deepest annotated level per sample


def build_level_targets(
    records: list[ProductRecord],
    model: MoEModel,
    target_overrides: dict[str, tuple[str, ...]] | None = None,
) -> LevelTargets:
    """Per-level target indices: the label path's code at each level, NULL beyond."""
    levels = model.moe_config.levels
    index_maps = [{code: i for i, code in enumerate(labels)} for labels in model.level_labels]
    indices = np.zeros((len(records), levels), dtype=np.int64)
    leaf_level = np.zeros(len(records), dtype=np.int64)
    for i, rec in enumerate(records):
        codes = list(rec.label_path)
        if target_overrides is not None and rec.id in target_overrides:
            codes = list(target_overrides[rec.id])
        leaf_level[i] = len(rec.label_path)
        for level in range(1, levels + 1):
            code = codes[level - 1] if level <= len(codes) else NULL_CODE
            try:
                indices[i, level - 1] = index_maps[level - 1][code]
            except KeyError:
                raise TrainingError(
                    f"record {rec.id!r}: code {code!r} not in level-{level} label space"
                ) from None
    return LevelTargets(indices=indices, leaf_level=leaf_level)


def level_loss(probs: np.ndarray, target_index: int) -> float:
    """Cross-entropy of one level distribution against its target index."""
    if not 0 <= target_index < probs.shape[-1]:
        raise IndexError(f"target index {target_index} out of range for {probs.shape[-1]} labels")
    return float(-np.log(max(float(probs[target_index]), PROB_FLOOR)))


def hierarchical_loss(level_losses: list[float], leaf_level: int, omega_c: float) -> float:
    """Blend of the summed non-leaf losses and the leaf-level loss."""
    if not 1 <= leaf_level <= len(level_losses):
        raise IndexError(f"leaf level {leaf_level} out of range 1..{len(level_losses)}")
    rest = sum(x for i, x in enumerate(level_losses, start=1) if i != leaf_level)
    return omega_c * rest + (1.0 - omega_c) * level_losses[leaf_level - 1]


def semantic_loss(semantic_probs: np.ndarray, target: str) -> float:
    """Cross-entropy against the consistency class; uncertain samples cost 0."""
    idx = SEMANTIC_CLASS_INDEX[target]
    if idx < 0:
        return 0.0
    return float(-np.log(max(float(semantic_probs[idx]), PROB_FLOOR)))


def total_loss(l_c: float, l_s: float, omega_s: float) -> float:
    return omega_s * l_c + (1.0 - omega_s) * l_s


def backward(
    model: MoEModel,
    batch: EncodedBatch,
    targets: LevelTargets,
    semantic_targets: np.ndarray,
    weights: LossWeights,
    sample_ids: list[str] | None = None,
    cache: ForwardCache | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean total loss over the batch and its gradient for every parameter.

    `semantic_targets` holds class indices with -1 marking excluded samples.
    The gradient is exact for the clamped loss: levels whose target probability
    sits at the clamp floor contribute zero.
    """
    cfg = model.moe_config
    enc = model.encoder_config
    if cache is None:
        cache = forward_batch(model, batch)
    n = batch.dense.shape[0]
    ar = np.arange(n)
    omega_c, omega_s = weights.omega_c, weights.omega_s

    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    d_dense = np.zeros_like(batch.dense)

    # Semantic branch
    sp = cache.semantic_probs
    sem_mask = semantic_targets >= 0
    sem_losses = np.zeros(n)
    d_sem = np.zeros_like(sp)
    if sem_mask.any():
        pt = sp[ar[sem_mask], semantic_targets[sem_mask]]
        sem_losses[sem_mask] = -np.log(np.maximum(pt, PROB_FLOOR))
        live = np.zeros(n, dtype=bool)
        live[sem_mask] = pt > PROB_FLOOR
        coef = np.where(live, (1.0 - omega_s) / n, 0.0)
        onehot = np.zeros_like(sp)
        onehot[ar[sem_mask], semantic_targets[sem_mask]] = 1.0
        d_sem = coef[:, None] * (sp - onehot)
    grads["semantic/W"] += cache.pool.T @ d_sem
    grads["semantic/b"] += d_sem.sum(axis=0)
    d_pool = d_sem @ model.params["semantic/W"].T

    # Hierarchical branch
    hier_losses = np.zeros(n)
    d_hidden_levels = []
    for level in range(1, cfg.levels + 1):
        p = cache.probs[level - 1]
        t_idx = targets.indices[:, level - 1]
        pt = p[ar, t_idx]
        losses_l = -np.log(np.maximum(pt, PROB_FLOOR))
        is_leaf_level = targets.leaf_level == level
        level_w = np.where(is_leaf_level, 1.0 - omega_c, omega_c)
        hier_losses += level_w * losses_l

        coef = omega_s * level_w / n
        coef = np.where(pt > PROB_FLOOR, coef, 0.0)
        onehot = np.zeros_like(p)
        onehot[ar, t_idx] = 1.0
        d_logits = coef[:, None] * (p - onehot)

        u = cache.hidden[level - 1]
        grads[f"level{level}/head/W"] += u.T @ d_logits
        grads[f"level{level}/head/b"] += d_logits.sum(axis=0)
        d_hidden_levels.append(d_logits @ model.params[f"level{level}/head/W"].T)

    per_sample = omega_s * hier_losses + (1.0 - omega_s) * sem_losses
    if not np.isfinite(per_sample).all():
        bad = int(np.argmax(~np.isfinite(per_sample)))
        label = sample_ids[bad] if sample_ids else f"batch index {bad}"
        raise TrainingError(f"non-finite loss for sample {label}")

    # Mixture and expert backward, plus pooled semantic path
    for level in range(1, cfg.levels + 1):
        d_u = d_hidden_levels[level - 1] + d_pool / cfg.levels
        g = cache.gates[level - 1]
        d_gate = np.zeros_like(g)
        for e in range(cfg.experts_per_level):
            d_gate[:, e] = np.einsum("bh,bh->b", d_u, cache.expert_out[level - 1][e])
        d_gate_logits = g * (d_gate - (g * d_gate).sum(axis=1, keepdims=True))
        grads[f"level{level}/gate/W"] += batch.routing.T @ d_gate_logits
        grads[f"level{level}/gate/b"] += d_gate_logits.sum(axis=0)

        for e in range(cfg.experts_per_level):
            t = cache.tanh_out[level - 1][e]
            d_h = g[:, e : e + 1] * d_u
            grads[f"level{level}/expert{e}/W2"] += t.T @ d_h
            grads[f"level{level}/expert{e}/b2"] += d_h.sum(axis=0)
            d_t = d_h @ model.params[f"level{level}/expert{e}/W2"].T
            d_a = d_t * (1.0 - t * t)
            grads[f"level{level}/expert{e}/W1"] += batch.dense.T @ d_a
            grads[f"level{level}/expert{e}/b1"] += d_a.sum(axis=0)
            d_dense += d_a @ model.params[f"level{level}/expert{e}/W1"].T

    # Scatter dense-feature gradients back into the embedding tables
    dt = enc.text_dim
    if batch.title_tok.size:
        contrib = d_dense[batch.title_sample, :dt] * batch.title_weight[:, None]
        np.add.at(grads["text_table"], batch.title_tok, contrib)
    if batch.cat_tok.size:
        contrib = d_dense[batch.cat_sample, dt : 2 * dt] * batch.cat_weight[:, None]
        np.add.at(grads["text_table"], batch.cat_tok, contrib)
    off = 2 * dt
    for f_pos, name in enumerate(enc.fields):
        block = d_dense[:, off : off + enc.cat_dim]
        np.add.at(grads[f"field/{name}/table"], batch.field_idx[:, f_pos], block)
        off += enc.cat_dim

    return float(per_sample.mean()), grads


class SGD:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            params[name] -= self.learning_rate * g


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    return Adam(config.learning_rate, config.beta1, config.beta2, config.eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def semantic_targets_for(
    records: list[ProductRecord], judge, taxonomy: Taxonomy
) -> np.ndarray:
    """Class index per record from the judge's verdict on (title, leaf); -1 if no judge."""
    if judge is None:
        return np.full(len(records), -1, dtype=np.int64)
    return np.array(
        [SEMANTIC_CLASS_INDEX[judge_verdict(judge, r.title, r.leaf(), taxonomy)] for r in records],
        dtype=np.int64,
    )


def leaf_accuracy(model: MoEModel, records: list[ProductRecord], taxonomy: Taxonomy, tau_leaf: float = 0.5) -> float:
    if not records:
        return float("nan")
    preds = predict_batch(model, records, taxonomy, tau_leaf=tau_leaf, use_repath=False)
    hits = sum(1 for p, r in zip(preds, records) if p.selected_leaf == r.leaf())
    return hits / len(records)


def fit(
    model: MoEModel,
    train_records: list[ProductRecord],
    val_records: list[ProductRecord],
    taxonomy: Taxonomy,
    judge,
    config: TrainConfig,
    target_overrides: dict[str, tuple[str, ...]] | None = None,
) -> tuple[MoEModel, list[dict]]:
    """Mini-batch training; returns the parameters of the best validation epoch.

    Consistency targets come from `judge` (None trains without the semantic
    task, as in the preliminary stage). Shuffling draws from per-epoch named
    streams of `config.seed`, so runs replay exactly.
    """
    if not train_records:
        raise TrainingError("empty training set")
    enc = model.encoder_config
    prepared = prepare_records(train_records, enc)
    targets = build_level_targets(train_records, model, target_overrides)
    sem_targets = semantic_targets_for(train_records, judge, taxonomy)
    ids = [r.id for r in train_records]

    optimizer = make_optimizer(config)
    logs: list[dict] = []
    best_params = model.clone_params()
    best_acc = -1.0
    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        order = stream_rng(config.seed, f"shuffle-epoch-{epoch}").permutation(len(train_records))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            take = order[start : start + config.batch_size]
            batch = assemble_batch([prepared[i] for i in take], model.params, enc)
            sub_targets = LevelTargets(
                indices=targets.indices[take], leaf_level=targets.leaf_level[take]
            )
            loss, grads = backward(
                model,
                batch,
                sub_targets,
                sem_targets[take],
                config.loss_weights,
                sample_ids=[ids[i] for i in take],
            )
            if config.grad_clip is not None:
                clip_gradients(grads, config.grad_clip)
            optimizer.step(model.params, grads)
            epoch_loss += loss * len(take)
        epoch_loss /= len(train_records)

        val_acc = leaf_accuracy(model, val_records, taxonomy)
        logs.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss,
                "val_leaf_acc": None if np.isnan(val_acc) else val_acc,
                "seconds": time.monotonic() - t0,
            }
        )
        score = val_acc if not np.isnan(val_acc) else float(epoch)  # no val: keep last
        if score > best_acc:
            best_acc = score
            best_params = model.clone_params()

    model.params = best_params
    return model, logs
