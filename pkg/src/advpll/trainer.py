"""The training loop: two augmented views, prototype disambiguation, combined loss.

Per mini-batch:

1. draw query and key views of the batch;
2. run the query network and the EMA key network;
3. predict each instance's label as the classifier argmax within its
   candidate set;
4. move the predicted class prototypes toward the query embeddings, one
   instance at a time;
5. update the pseudo labels from the nearest candidate prototypes;
6. build the contrastive pool (queries, keys and the queue);
7. evaluate the combined loss (contrastive weight forced to zero during
   warm-up) and backpropagate;
8. take an SGD step, then move the key network by EMA;
9. push the key embeddings into the queue (frozen during warm-up).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import atm, losses, nn
from .labelgen import CleanDataset, PllDataset

QBAR_INITS = ("uniform", "candidate")


@dataclass
class TrainConfig:
    widths: tuple = (64, 64)
    d_embed: int = 128
    alpha: float = 0.1
    beta: float = 0.01
    phi: float = 0.99
    lam: float = 0.5
    tau: float = 0.07
    ema: float = 0.999
    queue_capacity: int | None = None
    batch_size: int = 256
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 300
    warmup_epochs: int | None = None
    noise_std: float = 0.3
    mask_prob: float = 0.1
    qbar_init: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        checks = [
            (0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)"),
            (self.beta >= 0.0, "beta must be non-negative"),
            (0.0 <= self.phi <= 1.0, "phi must lie in [0, 1]"),
            (self.lam >= 0.0, "lam must be non-negative"),
            (self.tau > 0.0, "tau must be positive"),
            (0.0 <= self.ema <= 1.0, "ema must lie in [0, 1]"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.lr > 0.0, "lr must be positive"),
            (0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be non-negative"),
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.d_embed >= 1 and all(w >= 1 for w in self.widths), "layer widths must be positive"),
            (self.qbar_init in QBAR_INITS, f"qbar_init must be one of {QBAR_INITS}"),
        ]
        if self.warmup_epochs is not None:
            checks.append((0 <= self.warmup_epochs <= self.epochs, "warmup_epochs must lie in [0, epochs]"))
        if self.queue_capacity is not None:
            checks.append((self.queue_capacity >= 0, "queue_capacity must be non-negative"))
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    @property
    def warmup(self) -> int:
        if self.warmup_epochs is not None:
            return self.warmup_epochs
        return int(round(0.1 * self.epochs))

    def capacity(self, n: int) -> int:
        if self.queue_capacity is not None:
            return self.queue_capacity
        return min(8192, n // 2)


@dataclass
class MetricsRow:
    epoch: int
    cls_loss: float
    con_loss: float
    combined: float
    test_acc: float
    proto_acc: float
    skipped_queries: int
    seconds: float = field(default=0.0, compare=False)

    # wall-clock time is kept out of the deterministic metrics file
    HEADER = ("epoch", "cls_loss", "con_loss", "combined", "test_acc", "proto_acc", "skipped_queries")

    def csv_fields(self) -> list:
        return [str(self.epoch), repr(self.cls_loss), repr(self.con_loss), repr(self.combined),
                repr(self.test_acc), repr(self.proto_acc), str(self.skipped_queries)]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, rows: list):
        super().__init__(f"non-finite loss in epoch {epoch}")
        self.epoch = epoch
        self.rows = rows


@dataclass
class TrainState:
    net: nn.Network
    key: nn.Network
    bank: atm.PrototypeBank
    store: atm.PseudoLabelStore
    queue: atm.EmbeddingQueue
    opt: nn.SGD
    epoch: int = 0


def init_state(train: PllDataset, cfg: TrainConfig) -> TrainState:
    c = train.n_classes
    arch = nn.Architecture(train.clean.d, c, cfg.widths, cfg.d_embed)
    net = nn.Network.init(arch, cfg.seed)
    bank = atm.PrototypeBank.random(c, cfg.d_embed, cfg.seed + 1)
    if cfg.qbar_init == "uniform":
        store = atm.PseudoLabelStore.uniform(train.clean.n, c, cfg.phi)
    else:
        cand = train.candidates.astype(np.float64)
        store = atm.PseudoLabelStore(cand / cand.sum(axis=1, keepdims=True), cfg.phi)
    queue = atm.EmbeddingQueue(cfg.capacity(train.clean.n), cfg.d_embed)
    opt = nn.SGD(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.epochs)
    return TrainState(net, net.copy(), bank, store, queue, opt)


def accuracy(net: nn.Network, data: CleanDataset) -> float:
    """Unrestricted top-1 accuracy against the true labels."""
    pred = np.argmax(nn.forward(net, data.features).logits, axis=1)
    return float(np.mean(pred == data.labels))


def prototype_accuracy(net: nn.Network, bank: atm.PrototypeBank, train: PllDataset) -> float:
    u = nn.forward(net, train.clean.features).embedding
    return atm.prototype_accuracy(u, bank, train.candidates, train.clean.labels)


def train_epoch(state: TrainState, train: PllDataset, M, cfg: TrainConfig, aug: nn.AugmentationSpec):
    epoch = state.epoch
    warm = epoch < cfg.warmup
    lam = 0.0 if warm else cfg.lam
    n = train.clean.n
    x, cand = train.clean.features, train.candidates
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    cls_sum = con_sum = 0.0
    con_batches = 0
    skipped = 0
    for s in range(steps_per_epoch):
        idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
        step = epoch * steps_per_epoch + s
        xq = nn.augment(x[idx], aug, cfg.seed, "q", idx, step)
        xk = nn.augment(x[idx], aug, cfg.seed, "k", idx, step)
        fq = nn.forward(state.net, xq)
        zk = nn.forward(state.key, xk).embedding
        u = fq.embedding
        y_hat = atm.predict_label(fq.probs, cand[idx])
        for b in range(len(idx)):
            atm.prototype_update(state.bank, u[b], int(y_hat[b]), cfg.alpha, cfg.beta)
        atm.pseudo_label_update(state.store, idx, u, state.bank, cand[idx])
        pool = atm.build_pool(u, zk, y_hat, None if warm else state.queue)
        bd, g_logits, g_u = losses.combined_loss(
            fq.probs, state.store.targets[idx], M, u, pool.embeddings,
            pool.positives, pool.denominators, lam, cfg.tau)
        if not np.isfinite(bd.combined):
            return None
        grads = nn.backward(state.net, fq, g_logits, g_u)
        nn.sgd_step(state.opt, state.net, grads, epoch)
        nn.ema_update(state.key, state.net, cfg.ema)
        if not warm:
            state.queue.push(zk, y_hat)
        w = len(idx) / n
        cls_sum += w * bd.classification
        if lam > 0.0:
            con_sum += bd.contrastive
            con_batches += 1
        skipped += bd.skipped_queries
    state.epoch += 1
    con = con_sum / con_batches if con_batches else 0.0
    return cls_sum, con, lam * con + cls_sum, skipped


def fit(train: PllDataset, M, cfg: TrainConfig, test: CleanDataset | None = None,
        on_epoch=None, state: TrainState | None = None):
    """Train for ``cfg.epochs`` epochs; returns ``(state, metrics_rows)``.

    ``on_epoch(row, state)`` is called after every epoch so callers can
    flush metrics incrementally. Raises ``TrainingDiverged`` on a
    non-finite loss, carrying the rows of the finite epochs.
    """
    state = state or init_state(train, cfg)
    aug = nn.AugmentationSpec(cfg.noise_std, cfg.mask_prob)
    test = test or train.clean
    rows = []
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        out = train_epoch(state, train, M, cfg, aug)
        if out is None or not all(np.isfinite(v) for v in out[:3]):
            raise TrainingDiverged(state.epoch, rows)
        cls, con, comb, skipped = out
        row = MetricsRow(state.epoch - 1, cls, con, comb, accuracy(state.net, test),
                         prototype_accuracy(state.net, state.bank, train), skipped,
                         time.perf_counter() - t0)
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row, state)
    return state, rows


def config_fields() -> list:
    return [f.name for f in fields(TrainConfig)]
