"""Multi-task training: cross-entropy plus the scaled intent constraint loss."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from hid import autograd as ag
from hid.dataset import Dataset, Session
from hid.encoder import SessionModel, prediction_loss
from hid.evaluator import topk_from_scores
from hid.icloss import LossConfig, icloss_batch
from hid.intent import (
    HybridIntentSet,
    IntentAssignment,
    assign_intents,
    compose_semantic_intents,
    item_spectral_clusters,
    semantic_preliminary_intents,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.02
    weight_decay: float = 1e-5
    lr_decay_per_epoch: float = 0.6
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    mode: str = "attribute"  # or "attribute-free"
    n: int = 8
    q: int | None = None
    k_sem: int = 16
    encoder: str = "mean"
    d: int = 32
    K: int = 20
    val_fraction: float = 0.1
    icloss_reduction: str = "mean"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.mode not in ("attribute", "attribute-free"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @classmethod
    def paper(cls, **overrides) -> TrainConfig:
        """The published hyper-parameter set."""
        base = dict(batch_size=256, learning_rate=0.001, weight_decay=1e-5, lr_decay_per_epoch=0.6,
                    max_epochs=20, patience=3, d=100, n=300,
                    loss=LossConfig(sigma=0.14, eta=0.2, lambda_p=0.3, epsilon=0.2))
        base.update(overrides)
        return cls(**base)

    def to_flat(self) -> dict:
        flat = {k: v for k, v in asdict(self).items() if k != "loss"}
        flat.update({f"{k}": v for k, v in asdict(self.loss).items()})
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> TrainConfig:
        """Build from string or typed values keyed by field name (loss fields inline)."""
        own = {f.name: f for f in fields(cls) if f.name != "loss"}
        loss_fields = {f.name: f for f in fields(LossConfig)}
        kw, loss_kw = {}, {}
        for key, value in flat.items():
            if key in own:
                kw[key] = _coerce(value, cls.__dataclass_fields__[key].default)
            elif key in loss_fields:
                loss_kw[key] = _coerce(value, loss_fields[key].default)
        if loss_kw:
            kw["loss"] = LossConfig(**loss_kw)
        return cls(**kw)


def _coerce(value, default):
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if default is None:
        try:
            return int(value)
        except ValueError:
            return value
    return value


@dataclass
class EpochRecord:
    epoch: int
    lp: float
    lc: float
    total: float
    val_hr: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best: int = -1

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lp", "lc", "total", "val_hr", "seconds"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.lp), repr(r.lc), repr(r.total), repr(r.val_hr), f"{r.seconds:.3f}"])


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 0.0, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
    """One in-place Adam update; L2 regularization enters as ``weight_decay * param`` in the gradient."""
    b1, b2 = betas
    state.step += 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**state.step)
        v_hat = v / (1 - b2**state.step)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# -- training -----------------------------------------------------------------

def split_validation(sessions: list[Session], fraction: float, seed: int):
    if not 0 <= fraction < 1:
        raise ValueError("val_fraction must lie in [0, 1)")
    order = np.random.default_rng([seed, 7919]).permutation(len(sessions))
    n_val = int(round(fraction * len(sessions)))
    val = sorted(order[:n_val].tolist())
    fit = sorted(order[n_val:].tolist())
    return [sessions[i] for i in fit], [sessions[i] for i in val]


def hit_rate(model: SessionModel, sessions: list[Session], K: int) -> float:
    if not sessions:
        return 0.0
    topk = topk_from_scores(model.scores([s.items for s in sessions]), min(K, model.m))
    labels = np.array([s.label for s in sessions])
    return float((topk == labels[:, None]).any(axis=1).mean())


class IntentLoss:
    """Live intent embeddings for one batch, restricted to the intents the batch touches."""

    def __init__(self, intents: HybridIntentSet):
        self.set(intents)

    def set(self, intents: HybridIntentSet) -> None:
        self.intents = intents
        self.pooling = intents.pooling_matrix()

    def __call__(self, model: SessionModel, session_emb: ag.Tensor, labels, cfg: LossConfig,
                 reduction: str = "mean"):
        full = assign_intents(labels, self.intents.item_to_intent, self.intents.n)
        used, compact = np.unique(full.target, return_inverse=True)
        assignment = IntentAssignment(compact, full.noise[:, used])
        intent_emb = ag.Tensor(self.pooling[used]) @ model.item_embeddings
        return icloss_batch(ag.l2_normalize(session_emb), assignment, ag.l2_normalize(intent_emb), cfg, reduction)


def batch_loss(model: SessionModel, batch: list[Session], cfg: TrainConfig, intent_loss: IntentLoss | None):
    emb = model.encode([s.items for s in batch])
    labels = np.array([s.label for s in batch], dtype=np.int64)
    lp = prediction_loss(model, emb, labels)
    if intent_loss is None or cfg.loss.epsilon == 0:
        return lp, lp, None
    lc = intent_loss(model, emb, labels, cfg.loss, cfg.icloss_reduction).loss
    return lp + cfg.loss.epsilon * lc, lp, lc


def train(dataset: Dataset, intents: HybridIntentSet | None, config: TrainConfig,
          progress: bool = False) -> tuple[SessionModel, TrainHistory]:
    """Fit a session model; returns the parameters from the best validation epoch."""
    sessions = dataset.train
    if not sessions:
        raise ValueError("training split is empty")
    fit, val = split_validation(sessions, config.val_fraction, config.seed)
    if not val:
        val = fit
    m = dataset.catalog.m
    model = SessionModel(m, config.d, config.encoder, config.seed)
    use_hid = config.loss.epsilon > 0

    item_clusters = None
    intent_loss = None
    if use_hid:
        if config.mode == "attribute":
            if intents is None:
                raise ValueError("attribute mode needs a hybrid intent set")
            intent_loss = IntentLoss(intents)
        else:
            item_clusters = item_spectral_clusters(dataset.sequences("train"), m, config.n, config.seed)

    state = AdamState()
    history = TrainHistory()
    best_hr, best_params, since_best = -np.inf, None, 0
    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        lr = config.learning_rate * config.lr_decay_per_epoch**epoch
        if item_clusters is not None:
            semantic = semantic_preliminary_intents(model.item_embeddings, config.k_sem, seed=config.seed + epoch)
            hybrid = compose_semantic_intents(semantic, item_clusters)
            if intent_loss is None:
                intent_loss = IntentLoss(hybrid)
            else:
                intent_loss.set(hybrid)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(fit))
        sums = np.zeros(3)
        n_batches = 0
        for b in range(0, len(order), config.batch_size):
            batch = [fit[i] for i in order[b : b + config.batch_size]]
            total, lp, lc = batch_loss(model, batch, config, intent_loss)
            if not np.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {n_batches}: "
                                       f"lp={lp.item()} lc={None if lc is None else lc.item()}")
            total.backward()
            adam_step({k: p.data for k, p in model.params.items()}, model.grads(), state, lr,
                      config.weight_decay)
            model.zero_grad()
            sums += (lp.item(), 0.0 if lc is None else lc.item(), total.item())
            n_batches += 1
        means = sums / max(n_batches, 1)
        val_hr = hit_rate(model, val, config.K)
        rec = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]), val_hr, lr,
                          time.perf_counter() - start)
        history.epochs.append(rec)
        if progress:
            log.info("epoch %d lp=%.4f lc=%.4f total=%.4f val_hr=%.4f (%.1fs)",
                     epoch, rec.lp, rec.lc, rec.total, val_hr, rec.seconds)
        if val_hr > best_hr:
            best_hr, since_best = val_hr, 0
            history.best = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    for k, arr in best_params.items():
        model.params[k].data = arr
    return model, history
