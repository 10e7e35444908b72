"""Adam training loop with seeding, logging, and exact-resume checkpoints.

Training is deterministic for a fixed seed: parameter init, the per-epoch
shuffle, and the update order all derive from it, and the shuffle rng is
re-derived per epoch so a resumed run needs no carried rng state. Each epoch
appends one JSON line of loss components and wall time to the training log.
Checkpoints bundle parameters, model config, vocabulary, cluster map, and
optimizer state in one versioned JSON file; reloading one and continuing
reproduces an uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from .data import (
    ClusterMap,
    Ctas,
    Vocab,
    append_eos_corpus,
    build_clusters,
    median_gap,
    observed_marks_by_goal,
    split_by_goal,
)
from .model import Model, ModelConfig
from .numerics import GradTape, NumericError, ParamStore
from .objectives import LossBreakdown, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(ArithmeticError):
    """The total loss left the finite range; the last checkpoint survives."""


@dataclass
class TrainConfig:
    """Optimization settings; loss weights live here too."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    margin_weight: float = 0.1
    l2_coeff: float = 0.001
    gamma: float = 0.9
    eos_time_term: bool = True
    apply_margin: bool = True

    def validate(self) -> None:
        # lr == 0 is allowed: it freezes parameters, which is useful in tests
        if self.lr < 0.0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be at least 1, got {self.batch_size}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.margin_weight < 0.0 or self.l2_coeff < 0.0:
            raise ValueError("margin_weight and l2_coeff must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown train config key {sorted(unknown)[0]!r}")
        cfg = cls(**payload)
        cfg.validate()
        return cfg


class Adam:
    """Bias-corrected Adam over a ParamStore, iterating in name order."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    def update(self, store: ParamStore) -> None:
        """Apply one step using the gradients currently on the store."""
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for name, p in store.items():
            g = store.grad(name)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "m": {k: {"shape": list(a.shape), "values": a.ravel().tolist()}
                  for k, a in sorted(self.m.items())},
            "v": {k: {"shape": list(a.shape), "values": a.ravel().tolist()}
                  for k, a in sorted(self.v.items())},
        }

    def load_state_dict(self, payload: dict) -> None:
        self.step = int(payload["step"])
        for attr in ("m", "v"):
            target = getattr(self, attr)
            target.clear()
            for k, entry in payload[attr].items():
                target[k] = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_payload(model: Model, train_cfg: TrainConfig | None = None,
                       optimizer: Adam | None = None, epoch: int = 0,
                       best_total: float | None = None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "clusters": model.clusters.to_dict(),
        "params": model.store.to_dict(),
        "train_config": None if train_cfg is None else train_cfg.to_dict(),
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "epoch": epoch,
        "best_total": best_total,
    }


def save_checkpoint(path, model: Model, train_cfg: TrainConfig | None = None,
                    optimizer: Adam | None = None, epoch: int = 0,
                    best_total: float | None = None) -> None:
    payload = checkpoint_payload(model, train_cfg, optimizer, epoch, best_total)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


@dataclass
class Checkpoint:
    """A deserialized checkpoint: the model plus resumable training state."""

    model: Model
    train_config: TrainConfig | None
    optimizer: Adam | None
    epoch: int
    best_total: float | None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    config = ModelConfig.from_dict(payload["model_config"])
    vocab = Vocab.from_dict(payload["vocab"])
    clusters = ClusterMap.from_dict(payload["clusters"])
    store = ParamStore.from_dict(payload["params"])
    model = Model(config, vocab, clusters, store)
    train_cfg = None
    if payload.get("train_config") is not None:
        train_cfg = TrainConfig.from_dict(payload["train_config"])
    optimizer = None
    if payload.get("optimizer") is not None:
        optimizer = Adam() if train_cfg is None else Adam.from_config(train_cfg)
        optimizer.load_state_dict(payload["optimizer"])
    return Checkpoint(model=model, train_config=train_cfg, optimizer=optimizer,
                      epoch=int(payload.get("epoch", 0)),
                      best_total=payload.get("best_total"))


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def train(corpus: list[Ctas], vocab: Vocab, clusters: ClusterMap,
          model_cfg: ModelConfig, train_cfg: TrainConfig, *,
          ckpt_dir: str | None = None,
          resume: Checkpoint | None = None) -> tuple[Model, list[dict]]:
    """Optimize a model on an already-prepared (terminal-augmented) corpus.

    Returns the trained model and the per-epoch log entries. When ckpt_dir
    is given, writes final.json after every epoch, best.json whenever the
    epoch total improves, and train_log.jsonl incrementally; a divergent
    loss aborts with those files intact.
    """
    train_cfg.validate()
    if not corpus:
        raise ValueError("empty training corpus")
    if resume is not None:
        model = resume.model
        optimizer = resume.optimizer or Adam.from_config(train_cfg)
        start_epoch = resume.epoch + 1
        best_total = resume.best_total if resume.best_total is not None else math.inf
    else:
        model = Model.init(model_cfg, vocab, clusters, seed=train_cfg.seed)
        optimizer = Adam.from_config(train_cfg)
        start_epoch = 1
        best_total = math.inf
    if ckpt_dir is not None:
        os.makedirs(ckpt_dir, exist_ok=True)
    log_path = None if ckpt_dir is None else os.path.join(ckpt_dir, "train_log.jsonl")
    entries: list[dict] = []
    n = len(corpus)
    for epoch in range(start_epoch, train_cfg.epochs + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([train_cfg.seed, 1, epoch])
        order = rng.permutation(n)
        sums = {"nll": 0.0, "goal_ce": 0.0, "margin_goal": 0.0, "margin_action": 0.0}
        last_l2 = 0.0
        for lo in range(0, n, train_cfg.batch_size):
            batch = [corpus[i] for i in order[lo:lo + train_cfg.batch_size]]
            model.store.zero_grads()
            try:
                with GradTape() as tape:
                    total, bd = total_loss(
                        model, batch,
                        gamma=train_cfg.gamma,
                        margin_weight=train_cfg.margin_weight,
                        l2_coeff=train_cfg.l2_coeff,
                        apply_margin=train_cfg.apply_margin,
                        eos_time_term=train_cfg.eos_time_term,
                    )
                    tape.backward(total)
            except NumericError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}") from None
            optimizer.update(model.store)
            for key in sums:
                sums[key] += getattr(bd, key) * len(batch)
            last_l2 = bd.l2
        breakdown = LossBreakdown.build(
            nll=sums["nll"] / n, goal_ce=sums["goal_ce"] / n,
            margin_goal=sums["margin_goal"] / n, margin_action=sums["margin_action"] / n,
            l2=last_l2,
            margin_weight=train_cfg.margin_weight if train_cfg.apply_margin else 0.0,
            l2_coeff=train_cfg.l2_coeff,
        )
        entry = {"epoch": epoch, **breakdown.to_dict(),
                 "seconds": time.perf_counter() - started}
        entries.append(entry)
        log.info("epoch %d: total %.6f (nll %.6f, goal_ce %.6f)",
                 epoch, breakdown.total, breakdown.nll, breakdown.goal_ce)
        if ckpt_dir is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
            if breakdown.total < best_total:
                best_total = breakdown.total
                save_checkpoint(os.path.join(ckpt_dir, "best.json"), model,
                                train_cfg, optimizer, epoch, best_total)
            save_checkpoint(os.path.join(ckpt_dir, "final.json"), model,
                            train_cfg, optimizer, epoch, best_total)
        else:
            best_total = min(best_total, breakdown.total)
    return model, entries


# ---------------------------------------------------------------------------
# corpus preparation + one-call driver
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    """Everything train() needs, derived from a raw corpus."""

    train_raw: list[Ctas]
    test_raw: list[Ctas]
    train_aug: list[Ctas]
    vocab: Vocab
    clusters: ClusterMap
    eos_gap: float
    model_config: ModelConfig


def resolve_max_len(model_cfg: ModelConfig, train_raw: list[Ctas]) -> ModelConfig:
    """Fill in max_len as 1.5x the longest raw training sequence, rounded up."""
    if model_cfg.max_len is not None:
        return model_cfg
    longest = max(len(seq) for seq in train_raw)
    return ModelConfig.from_dict(
        {**model_cfg.to_dict(), "max_len": max(2, math.ceil(1.5 * longest))})


def prepare(corpus: list[Ctas], vocab: Vocab, model_cfg: ModelConfig,
            train_cfg: TrainConfig, *, do_split: bool = True,
            train_fraction: float = 0.8) -> Prepared:
    """Split, cluster, derive candidate action sets, and append terminals.

    Clustering and the per-goal action sets come from the raw training side
    only; the terminal gap is the training corpus' median inter-action gap.
    """
    if do_split:
        train_raw, test_raw = split_by_goal(corpus, train_fraction, seed=train_cfg.seed)
    else:
        train_raw, test_raw = list(corpus), []
    clusters = build_clusters(train_raw, model_cfg.clusters, seed=train_cfg.seed,
                              eos_id=vocab.eos_id)
    vocab.goal_marks = observed_marks_by_goal(train_raw)
    gap = median_gap(train_raw)
    train_aug = append_eos_corpus(train_raw, gap, vocab.eos_id)
    resolved = resolve_max_len(model_cfg, train_raw)
    resolved.validate()
    return Prepared(train_raw=train_raw, test_raw=test_raw, train_aug=train_aug,
                    vocab=vocab, clusters=clusters, eos_gap=gap, model_config=resolved)


def run_training(corpus: list[Ctas], vocab: Vocab, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, *, do_split: bool = True,
                 train_fraction: float = 0.8,
                 ckpt_dir: str | None = None) -> tuple[Model, Prepared, list[dict]]:
    """Prepare a raw corpus and train on it; the usual entry point."""
    prep = prepare(corpus, vocab, model_cfg, train_cfg, do_split=do_split,
                   train_fraction=train_fraction)
    model, entries = train(prep.train_aug, prep.vocab, prep.clusters,
                           prep.model_config, train_cfg, ckpt_dir=ckpt_dir)
    return model, prep, entries
