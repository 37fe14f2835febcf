"""White-box gradient attacks (FGSM, PGD with CE or CW-margin loss) and robust accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .model import MlpModel, cross_entropy, logits, one_hot, predict_labels

NORMS = ("linf", "l2")
ATTACK_LOSSES = ("ce", "cw_margin")
GRAD_FLOOR = 1e-12


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float = 2 / 255
    loss: str = "ce"
    random_init: bool = True
    data_min: float = 0.0
    data_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.loss not in ATTACK_LOSSES:
            raise ConfigError(f"attack loss must be one of {ATTACK_LOSSES}, got {self.loss!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not self.data_min < self.data_max:
            raise ConfigError("data_min must be < data_max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def cw_margin_loss(z, y) -> nx.Tensor:
    """Mean of true-class logit minus the best other logit."""
    z = nx.as_tensor(z)
    y = np.asarray(y, dtype=np.intp)
    mask = one_hot(y, z.shape[1])
    true = nx.sum_(nx.mul(z, mask), axis=1)
    # push the true class out of the running for the max; constant offset only
    span = float(np.ptp(z.data)) + 1.0
    others = nx.max_(nx.sub(z, mask * span), axis=1)
    return nx.mean(nx.sub(true, others))


def _attack_loss(model: MlpModel, x: nx.Tensor, y, kind: str) -> nx.Tensor:
    z = logits(model, x)
    if kind == "ce":
        return cross_entropy(z, y)
    return nx.neg(cw_margin_loss(z, y))


def input_gradient(model: MlpModel, x: np.ndarray, y, kind: str = "ce") -> np.ndarray:
    """Gradient of the (ascent) attack loss with respect to the inputs.

    Losses are batch means, so the batch size is multiplied back in; each row
    then holds its own per-sample gradient.
    """
    xt = nx.Tensor(x, requires_grad=True)
    with nx.GradTape() as tape:
        loss = _attack_loss(model, xt, y, kind)
    (g,) = tape.gradient(loss, [xt])
    return g.data * len(x)


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    """Project each row of ``x_adv`` onto the ``epsilon`` ball around ``x``."""
    if norm == "linf":
        return np.clip(x_adv, x - epsilon, x + epsilon)
    delta = x_adv - x
    r = np.sqrt((delta * delta).sum(axis=1, keepdims=True))
    scale = np.where(r > epsilon, epsilon / np.where(r > 0, r, 1.0), 1.0)
    return x + delta * scale


def _direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    n = np.sqrt((g * g).sum(axis=1, keepdims=True))
    return g / np.maximum(n, GRAD_FLOOR)


def random_start(x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the epsilon ball around each row."""
    if cfg.norm == "linf":
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    else:
        d = x.shape[1]
        u = rng.standard_normal(x.shape)
        u /= np.maximum(np.sqrt((u * u).sum(axis=1, keepdims=True)), GRAD_FLOOR)
        radius = cfg.epsilon * rng.uniform(0.0, 1.0, size=(len(x), 1)) ** (1.0 / d)
        delta = u * radius
    return np.clip(x + delta, cfg.data_min, cfg.data_max)


def fgsm(model: MlpModel, x, y, cfg: AttackConfig) -> np.ndarray:
    if cfg.norm != "linf":
        raise ConfigError("FGSM is defined for the linf norm only")
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    g = input_gradient(model, x, y, cfg.loss)
    return np.clip(x + cfg.epsilon * np.sign(g), cfg.data_min, cfg.data_max)


def pgd(model: MlpModel, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Projected gradient ascent on the attack loss inside the epsilon ball.

    ``rng`` drives the random start; by default one is seeded from ``cfg.seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.epsilon == 0:
        return x.copy()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x_adv = random_start(x, cfg, rng) if cfg.random_init else x.copy()
    for _ in range(cfg.steps):
        g = input_gradient(model, x_adv, y, cfg.loss)
        stepped = np.clip(x_adv + cfg.step_size * _direction(g, cfg.norm), cfg.data_min, cfg.data_max)
        x_adv = project(stepped, x, cfg.epsilon, cfg.norm)
    return x_adv


def run_attack(name: str, model: MlpModel, x, y, cfg: AttackConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Dispatch by attack name: ``fgsm``, ``pgd`` or ``cw`` (margin-loss PGD)."""
    if name == "fgsm":
        return fgsm(model, x, y, cfg)
    if name == "pgd":
        return pgd(model, x, y, cfg, rng)
    if name == "cw":
        return pgd(model, x, y, AttackConfig.from_dict({**cfg.to_dict(), "loss": "cw_margin"}), rng)
    raise ConfigError(f"unknown attack {name!r}")


def evaluate_robust_accuracy(model: MlpModel, dataset, cfg: AttackConfig, attack: str = "pgd",
                             batch_size: int = 256) -> tuple[float, float]:
    """Return (clean accuracy, robust accuracy) of ``model`` on ``dataset``.

    A sample counts as robust only if it is classified correctly both before and
    after the attack.
    """
    x, y = dataset.features, dataset.labels
    if len(y) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    clean = np.empty(len(y), dtype=bool)
    robust = np.empty(len(y), dtype=bool)
    for s in range(0, len(y), batch_size):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        ok = predict_labels(model, xb) == yb
        x_adv = run_attack(attack, model, xb, yb, cfg, rng)
        clean[s:s + batch_size] = ok
        robust[s:s + batch_size] = ok & (predict_labels(model, x_adv) == yb)
    return float(clean.mean()), float(robust.mean())
