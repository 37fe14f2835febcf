"""Training loops: standard and adversarial LSP training, the instance-discrimination
pretext task for the feature extractor, and the mixup baseline.

All randomness derives from ``TrainConfig.seed`` through fixed offsets, so two
runs with the same config are bit-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .attack import AttackConfig, evaluate_robust_accuracy, pgd
from .data import Dataset, stratified_split
from .errors import ConfigError, NumericError
from .model import (MlpModel, cross_entropy, init_model, logits, one_hot, predict_labels,
                    soft_cross_entropy)
from .structure import (LSP_KINDS, STRUCTURES, MemoryBank, NeighborPrior, bank_init, bank_update,
                        lsp_loss_adversarial, lsp_loss_standard, neighbor_purity)

# seed offsets per subsystem
SPLIT_SEED = 1
SHUFFLE_SEED = 2
ATTACK_SEED = 3
NAT_BANK_SEED = 4
ADV_BANK_SEED = 5
EVAL_SEED = 6
GLOBAL_SEED = 7
MIXUP_SEED = 8
PRETEXT_BANK_SEED = 9
PROBE_SEED = 10

LOG_COLUMNS = ("epoch", "ce", "lsp", "total", "clean_acc", "robust_acc", "purity", "lr")


def _default_attack() -> AttackConfig:
    return AttackConfig(norm="linf", epsilon=8 / 255, steps=10, step_size=2 / 255)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.1
    lr_schedule: dict = field(default_factory=lambda: {75: 10.0, 90: 10.0})
    momentum: float = 0.9
    lam: float = 1.0
    m: int = 8
    lsp_kind: str = "l2"
    structure: str = "local"
    adversarial: bool = False
    attack: AttackConfig = field(default_factory=_default_attack)
    early_stopping: bool = False
    seed: int = 0
    hidden: list = field(default_factory=lambda: [32, 32])
    val_fraction: float = 0.1
    bank_momentum: float = 0.5
    mixup_alpha: float = 0.0
    pretext_tau: float = 0.07
    pretext_dim: int = 16
    pretext_hidden: list = field(default_factory=lambda: [64])

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig.from_dict(self.attack)
        self.lr_schedule = {int(k): float(v) for k, v in dict(self.lr_schedule).items()}
        self.hidden = [int(h) for h in self.hidden]
        self.pretext_hidden = [int(h) for h in self.pretext_hidden]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.m < 2:
            raise ConfigError("m must be >= 2")
        if self.lsp_kind not in LSP_KINDS:
            raise ConfigError(f"lsp_kind must be one of {LSP_KINDS}")
        if self.structure not in STRUCTURES:
            raise ConfigError(f"structure must be one of {STRUCTURES}")
        if any(v <= 0 for v in self.lr_schedule.values()):
            raise ConfigError("learning-rate divisors must be > 0")
        if any(k < 1 for k in self.lr_schedule):
            raise ConfigError("learning-rate milestones must be epochs >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        if not 0 < self.bank_momentum <= 1:
            raise ConfigError("bank_momentum must be in (0, 1]")
        if self.mixup_alpha < 0:
            raise ConfigError("mixup_alpha must be >= 0")
        if self.pretext_tau <= 0:
            raise ConfigError("pretext_tau must be > 0")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; each milestone reached divides it."""
        lr = self.learning_rate
        for start in sorted(self.lr_schedule):
            if epoch >= start:
                lr /= self.lr_schedule[start]
        return lr

    @property
    def uses_lsp(self) -> bool:
        return self.structure != "off"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = {str(k): v for k, v in sorted(self.lr_schedule.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    """Per-epoch metrics; epoch 0 describes the model before any update."""

    records: list = field(default_factory=list)
    n_skipped: int = 0

    def append(self, **row) -> None:
        if self.records and row["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epochs must increase")
        self.records.append({k: row.get(k, math.nan) for k in LOG_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for r in rows:
            log.records.append({k: (int(r[k]) if k == "epoch" else float(r[k])) for k in LOG_COLUMNS})
        return log


def sgd_step(model: MlpModel, grads: dict, lr: float, momentum: float, velocity: dict) -> None:
    """Heavy-ball SGD: v <- momentum * v + g, param <- param - lr * v.

    ``grads`` and ``velocity`` are keyed by parameter name; ``velocity`` is
    updated in place.
    """
    params = model.named_parameters()
    missing = set(params) - set(grads)
    if missing:
        raise ConfigError(f"missing gradients for {sorted(missing)}")
    for name, p in params.items():
        g = grads[name]
        g = np.asarray(g.data if isinstance(g, nx.Tensor) else g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        model.set_parameter(name, p.data - lr * v)


def _param_grads(model: MlpModel, tape: nx.GradTape, loss: nx.Tensor) -> dict:
    names = model.param_names()
    grads = tape.gradient(loss, model.parameters())
    return dict(zip(names, grads))


def _split(dataset: Dataset, cfg: TrainConfig) -> tuple[Dataset, Dataset | None]:
    if cfg.val_fraction == 0:
        return dataset, None
    tr, va = stratified_split(dataset.labels, cfg.val_fraction, cfg.seed + SPLIT_SEED)
    return dataset.subset(tr, "train"), dataset.subset(va, "val")


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _validate(model: MlpModel, val: Dataset | None, cfg: TrainConfig) -> tuple[float, float]:
    if val is None or len(val) == 0:
        return math.nan, math.nan
    atk = AttackConfig.from_dict({**cfg.attack.to_dict(), "seed": cfg.seed + EVAL_SEED})
    return evaluate_robust_accuracy(model, val, atk, "pgd")


def _check_fits(n_train: int, cfg: TrainConfig) -> None:
    if cfg.uses_lsp and cfg.m >= n_train:
        raise ConfigError(f"m={cfg.m} needs more than {n_train} training samples")


# -- mixup --------------------------------------------------------------------

def mix_pair(x_i, y_i, x_j, y_j, lam_mix: float, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    x = lam_mix * x_i + (1 - lam_mix) * x_j
    y = lam_mix * one_hot(np.atleast_1d(y_i), n_classes) + (1 - lam_mix) * one_hot(np.atleast_1d(y_j), n_classes)
    return x, y if np.ndim(y_i) else y[0]


def mixup_batch(x_i, y_i, x_j, y_j, alpha: float, seed, n_classes: int):
    """Convex combination with a Beta(alpha, alpha) weight.

    ``seed`` may be an int or a ``numpy.random.Generator``. Returns
    (mixed inputs, soft labels, weight).
    """
    if alpha <= 0:
        raise ConfigError("mixup alpha must be > 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lam_mix = float(rng.beta(alpha, alpha))
    x, y = mix_pair(x_i, y_i, x_j, y_j, lam_mix, n_classes)
    return x, y, lam_mix


# -- standard training --------------------------------------------------------

def _standard_losses(model, x_train, y_train, ids, prior, cfg, *, mix=None):
    """Returns (total, ce, lsp-or-None, n_skipped); records on the active tape."""
    x_b, y_b = x_train[ids], y_train[ids]
    lsp = None
    skipped = 0
    in_graph = cfg.uses_lsp and cfg.lam > 0
    if mix is not None:
        x_mix, soft = mix
        ce = soft_cross_entropy(logits(model, x_mix), soft)
        if in_graph:
            res = lsp_loss_standard(model, x_train, ids, prior, cfg.lsp_kind)
            lsp, skipped = res.loss, res.n_skipped
    elif in_graph:
        res = lsp_loss_standard(model, x_train, ids, prior, cfg.lsp_kind)
        lsp, skipped = res.loss, res.n_skipped
        ce = cross_entropy(res.anchor_logits, y_b)
    else:
        ce = cross_entropy(logits(model, x_b), y_b)
    total = nx.add(ce, nx.mul(cfg.lam, lsp)) if lsp is not None else ce
    return total, ce, lsp, skipped


def train_standard(model: MlpModel, g, dataset: Dataset, cfg: TrainConfig,
                   on_epoch=None) -> tuple[MlpModel, TrainLog]:
    """Minimize CE + lam * LSP with a neighbor structure fixed from extractor ``g``.

    ``g`` is ``None``/Identity (raw-input metric) or a trained encoder. With
    ``lam == 0`` the LSP term is only monitored and never enters the gradient.
    """
    model = model.copy()
    train, val = _split(dataset, cfg)
    x_tr, y_tr = train.features, train.labels
    _check_fits(len(train), cfg)
    prior = None
    if cfg.uses_lsp:
        prior = NeighborPrior.build(g, x_tr, cfg.m, cfg.structure, cfg.seed + GLOBAL_SEED)
    shuffle = np.random.default_rng(cfg.seed + SHUFFLE_SEED)
    mix_rng = np.random.default_rng(cfg.seed + MIXUP_SEED)
    velocity: dict = {}
    log = TrainLog()
    best = (-1.0, None)

    def record(epoch, sums, count, lr):
        clean, robust = _validate(model, val, cfg)
        purity = neighbor_purity(logits(model, x_tr).data, y_tr, min(cfg.m, len(train) - 1))
        ce = sums["ce"] / count
        lsp = sums["lsp"] / count if cfg.uses_lsp else math.nan
        total = sums["total"] / count
        log.append(epoch=epoch, ce=ce, lsp=lsp, total=total, clean_acc=clean,
                   robust_acc=robust, purity=purity, lr=lr)
        if on_epoch:
            on_epoch(log.records[-1])
        return robust

    def monitor(ids):
        if not cfg.uses_lsp:
            return 0.0, 0
        res = lsp_loss_standard(model, x_tr, ids, prior, cfg.lsp_kind)
        return res.loss.item(), res.n_skipped

    sums = {"ce": 0.0, "lsp": 0.0, "total": 0.0}
    for ids in _batches(len(train), cfg.batch_size, None):
        total, ce, lsp, _ = _standard_losses(model, x_tr, y_tr, ids, prior, cfg)
        lsp_v = lsp.item() if lsp is not None else monitor(ids)[0]
        sums["ce"] += ce.item() * len(ids)
        sums["lsp"] += lsp_v * len(ids)
        sums["total"] += (total.item() if lsp is not None else ce.item() + cfg.lam * lsp_v) * len(ids)
    record(0, sums, len(train), cfg.lr_at(1))

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        if prior is not None and cfg.structure == "global" and epoch > 1:
            prior = prior.resample(cfg.seed + GLOBAL_SEED + epoch)
        sums = {"ce": 0.0, "lsp": 0.0, "total": 0.0}
        for ids in _batches(len(train), cfg.batch_size, shuffle):
            mix = None
            if cfg.mixup_alpha > 0:
                partner = ids[mix_rng.permutation(len(ids))]
                x_mix, soft, _ = mixup_batch(x_tr[ids], y_tr[ids], x_tr[partner], y_tr[partner],
                                             cfg.mixup_alpha, mix_rng, train.n_classes)
                mix = (x_mix, soft)
            with nx.GradTape() as tape:
                total, ce, lsp, skipped = _standard_losses(model, x_tr, y_tr, ids, prior, cfg, mix=mix)
            if lsp is not None:
                lsp_v = lsp.item()
            else:
                lsp_v, skipped = monitor(ids)
            log.n_skipped += skipped
            sums["ce"] += ce.item() * len(ids)
            sums["lsp"] += lsp_v * len(ids)
            sums["total"] += (total.item() if lsp is not None else ce.item() + cfg.lam * lsp_v) * len(ids)
            sgd_step(model, _param_grads(model, tape, total), lr, cfg.momentum, velocity)
        robust = record(epoch, sums, len(train), lr)
        if cfg.early_stopping and robust > best[0]:
            best = (robust, model.copy())
    if cfg.early_stopping and best[1] is not None:
        model = best[1]
    return model, log


# -- adversarial training -----------------------------------------------------

@dataclass
class AdversarialState:
    nat_bank: MemoryBank
    adv_bank: MemoryBank
    train: Dataset
    val: Dataset | None


def train_adversarial(model: MlpModel, dataset: Dataset, cfg: TrainConfig, on_epoch=None,
                      return_state: bool = False):
    """PGD adversarial training with the memory-bank LSP term.

    Per batch: attack the current model, take CE on the adversarial inputs plus
    lam times the bank-based LSP term, step, then refresh both banks with the
    pre-step natural and adversarial logits.
    """
    model = model.copy()
    train, val = _split(dataset, cfg)
    x_tr, y_tr = train.features, train.labels
    _check_fits(len(train), cfg)
    c = model.n_classes
    nat_bank = bank_init(len(train), c, cfg.seed + NAT_BANK_SEED, cfg.bank_momentum)
    adv_bank = bank_init(len(train), c, cfg.seed + ADV_BANK_SEED, cfg.bank_momentum)
    shuffle = np.random.default_rng(cfg.seed + SHUFFLE_SEED)
    attack_rng = np.random.default_rng(cfg.seed + ATTACK_SEED)
    global_rng = np.random.default_rng(cfg.seed + GLOBAL_SEED)
    velocity: dict = {}
    log = TrainLog()
    best = (-1.0, None)
    in_graph = cfg.uses_lsp and cfg.lam > 0

    def global_neighbors(ids):
        if cfg.structure != "global":
            return None
        n = len(train)
        out = np.empty((len(ids), cfg.m), dtype=np.intp)
        for r, i in enumerate(ids):
            pick = global_rng.choice(n - 1, size=cfg.m, replace=False)
            out[r] = pick + (pick >= i)
        return out

    def batch_losses(ids, x_adv):
        xb, yb = x_tr[ids], y_tr[ids]
        if cfg.uses_lsp:
            res = lsp_loss_adversarial(model, xb, x_adv, ids, nat_bank, adv_bank, cfg.m,
                                       cfg.lsp_kind, neighbor_ids=global_neighbors(ids))
            z_adv, lsp, nat = res.anchor_logits, res.loss, res.extra["natural_logits"]
            skipped = res.n_skipped
        else:
            z_adv, lsp, skipped = logits(model, x_adv), None, 0
            nat = logits(model, xb).data
        ce = cross_entropy(z_adv, yb)
        return ce, lsp, z_adv, nat, skipped

    def record(epoch, sums, lr):
        clean, robust = _validate(model, val, cfg)
        purity = neighbor_purity(nat_bank, y_tr, min(cfg.m, len(train) - 1))
        n = len(train)
        log.append(epoch=epoch, ce=sums["ce"] / n,
                   lsp=sums["lsp"] / n if cfg.uses_lsp else math.nan,
                   total=sums["total"] / n, clean_acc=clean, robust_acc=robust,
                   purity=purity, lr=lr)
        if on_epoch:
            on_epoch(log.records[-1])
        return robust

    eval_rng = np.random.default_rng(cfg.seed + EVAL_SEED)
    sums = {"ce": 0.0, "lsp": 0.0, "total": 0.0}
    for ids in _batches(len(train), cfg.batch_size, None):
        x_adv = pgd(model, x_tr[ids], y_tr[ids], cfg.attack, eval_rng)
        ce, lsp, _, _, _ = batch_losses(ids, x_adv)
        lsp_v = lsp.item() if lsp is not None else 0.0
        sums["ce"] += ce.item() * len(ids)
        sums["lsp"] += lsp_v * len(ids)
        sums["total"] += (ce.item() + cfg.lam * lsp_v) * len(ids)
    record(0, sums, cfg.lr_at(1))

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        sums = {"ce": 0.0, "lsp": 0.0, "total": 0.0}
        for ids in _batches(len(train), cfg.batch_size, shuffle):
            xb, yb = x_tr[ids], y_tr[ids]
            x_adv = pgd(model, xb, yb, cfg.attack, attack_rng)
            if in_graph:
                with nx.GradTape() as tape:
                    ce, lsp, z_adv, nat, skipped = batch_losses(ids, x_adv)
                    total = nx.add(ce, nx.mul(cfg.lam, lsp))
                lsp_v = lsp.item()
            else:
                with nx.GradTape() as tape:
                    z_adv = logits(model, x_adv)
                    ce = cross_entropy(z_adv, yb)
                    total = ce
                nat = logits(model, xb).data
                lsp_v, skipped = 0.0, 0
                if cfg.uses_lsp:
                    res = lsp_loss_adversarial(model, xb, x_adv, ids, nat_bank, adv_bank, cfg.m,
                                               cfg.lsp_kind, neighbor_ids=global_neighbors(ids))
                    lsp_v, skipped = res.loss.item(), res.n_skipped
            log.n_skipped += skipped
            sums["ce"] += ce.item() * len(ids)
            sums["lsp"] += lsp_v * len(ids)
            sums["total"] += (total.item() if in_graph else ce.item() + cfg.lam * lsp_v) * len(ids)
            sgd_step(model, _param_grads(model, tape, total), lr, cfg.momentum, velocity)
            bank_update(nat_bank, ids, nat)
            bank_update(adv_bank, ids, z_adv.data)
        robust = record(epoch, sums, lr)
        if cfg.early_stopping and robust > best[0]:
            best = (robust, model.copy())
    if cfg.early_stopping and best[1] is not None:
        model = best[1]
    if return_state:
        return model, log, AdversarialState(nat_bank, adv_bank, train, val)
    return model, log


# -- instance-discrimination pretext -----------------------------------------

def pretext_loss(z: nx.Tensor, bank_vectors: np.ndarray, ids, tau: float) -> nx.Tensor:
    """Mean of -log softmax(v . bank / tau)[own id] with v the normalized encoding.

    Rows whose encoding is exactly zero have no direction and are left out.
    """
    ids = np.asarray(ids, dtype=np.intp)
    live = np.flatnonzero(np.abs(z.data).sum(axis=1) > 0)
    if len(live) == 0:
        raise NumericError("every encoding in the batch is zero")
    if len(live) < z.shape[0]:
        z, ids = nx.take_rows(z, live), ids[live]
    v = nx.div(z, nx.norm(z, axis=-1, keepdims=True))
    scores = nx.mul(nx.matmul(v, bank_vectors.T), 1.0 / tau)
    picked = nx.sum_(nx.mul(nx.log_softmax(scores), one_hot(ids, len(bank_vectors))), axis=1)
    return nx.neg(nx.mean(picked))


@dataclass
class PretextResult:
    encoder: MlpModel
    bank: MemoryBank
    losses: list


def init_encoder(input_dim: int, cfg: TrainConfig) -> MlpModel:
    return init_model([input_dim, *cfg.pretext_hidden, cfg.pretext_dim], cfg.seed)


def train_pretext(encoder: MlpModel, dataset: Dataset, cfg: TrainConfig) -> PretextResult:
    """Instance discrimination against a unit-norm memory bank; labels are ignored."""
    encoder = encoder.copy()
    x = dataset.features
    n = len(x)
    bank = bank_init(n, encoder.n_classes, cfg.seed + PRETEXT_BANK_SEED, cfg.bank_momentum)
    shuffle = np.random.default_rng(cfg.seed + SHUFFLE_SEED)
    velocity: dict = {}
    losses = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        total = 0.0
        for ids in _batches(n, cfg.batch_size, shuffle):
            with nx.GradTape() as tape:
                z = logits(encoder, x[ids])
                loss = pretext_loss(z, bank.vectors, ids, cfg.pretext_tau)
            total += loss.item() * len(ids)
            sgd_step(encoder, _param_grads(encoder, tape, loss), lr, cfg.momentum, velocity)
            bank_update(bank, ids, z.data)
        losses.append(total / n)
    return PretextResult(encoder, bank, losses)


def new_classifier(dataset: Dataset, cfg: TrainConfig) -> MlpModel:
    return init_model([dataset.dim, *cfg.hidden, dataset.n_classes], cfg.seed)


def accuracy(model: MlpModel, dataset: Dataset) -> float:
    return float((predict_labels(model, dataset.features) == dataset.labels).mean())
