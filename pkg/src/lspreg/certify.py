"""Lipschitz-margin certificates on the probability output, in the L2 input norm.

If the class-probability map is L-Lipschitz around x, no perturbation of L2
size below (p_a - p_b) / (2 L) can change the predicted class. Two estimators
for L are provided:

* ``analytic``: half the product of layer spectral norms. Softmax is
  1/2-Lipschitz in L2 and ReLU is 1-Lipschitz, so this is a sound global upper
  bound and the resulting radius is a real guarantee.
* ``empirical``: the largest observed difference quotient over random probes
  plus one gradient-refined probe. It is a lower bound on the local constant, so
  the radius it gives is a heuristic only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .attack import AttackConfig, pgd
from .errors import ConfigError
from .model import MlpModel, logits, predict_labels

MODES = ("empirical", "analytic")
SOFTMAX_LIPSCHITZ = 0.5


@dataclass
class CertificateReport:
    sample_id: int
    predicted: int
    p_a: float
    p_b: float
    lipschitz_estimate: float
    certified_radius: float
    mode: str
    sound: bool
    falsified: bool
    falsification_budget: int
    norm: str = "l2"

    def to_row(self) -> dict:
        return asdict(self)


def certified_radius(p_a: float, p_b: float, lipschitz: float) -> float:
    if lipschitz <= 0:
        raise ConfigError(f"Lipschitz constant must be > 0, got {lipschitz}")
    if not 0 <= p_b <= p_a <= 1:
        raise ConfigError(f"need 0 <= p_b <= p_a <= 1, got p_a={p_a}, p_b={p_b}")
    return (p_a - p_b) / (2.0 * lipschitz)


def probabilities(model: MlpModel, x) -> np.ndarray:
    z = logits(model, np.atleast_2d(x)).data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def top_two(p: np.ndarray) -> tuple[int, float, float]:
    order = np.argsort(-p, kind="stable")
    return int(order[0]), float(p[order[0]]), float(p[order[1]])


def spectral_norm(w: np.ndarray) -> float:
    return float(np.linalg.norm(w, ord=2))


def analytic_lipschitz(model: MlpModel) -> float:
    """Sound L2 Lipschitz bound of the probability output of ``model``."""
    bound = SOFTMAX_LIPSCHITZ
    for w in model.weights:
        bound *= spectral_norm(w.data)
    return bound


def _ball_probes(x: np.ndarray, radius: float, n: int, rng: np.random.Generator,
                 surface_fraction: float = 0.0) -> np.ndarray:
    """Uniform points in the ball; directions and radii come from separate
    streams so the first n probes do not depend on how many are drawn."""
    d = x.shape[0]
    dir_rng, rad_rng = rng.spawn(2)
    u = dir_rng.standard_normal((n, d))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    r = radius * rad_rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
    n_surface = int(round(surface_fraction * n))
    if n_surface:
        r[:n_surface] = radius
    return x[None, :] + u * r


def _refine_probe(model: MlpModel, x: np.ndarray, start: np.ndarray, radius: float,
                  steps: int) -> np.ndarray:
    """Power-iteration style ascent of ||p(x + v) - p(x)|| over the radius sphere."""
    p0 = probabilities(model, x)[0]
    v = start - x
    nv = np.linalg.norm(v)
    v = v / nv * radius if nv > 0 else np.eye(len(x))[0] * radius
    for _ in range(steps):
        xt = nx.Tensor((x + v)[None, :], requires_grad=True)
        with nx.GradTape() as tape:
            diff = nx.sub(nx.softmax(logits(model, xt)), p0[None, :])
            obj = nx.sum_(nx.square(diff))
        (g,) = tape.gradient(obj, [xt])
        gn = np.linalg.norm(g.data[0])
        if gn == 0:
            break
        v = g.data[0] / gn * radius
    return x + v


def estimate_local_lipschitz(model: MlpModel, x, radius: float, n_probes: int, seed: int = 0,
                             refine_steps: int = 25) -> float:
    """Largest difference quotient of the probability map around ``x``.

    The first random probe seeds the refined probe, so enlarging ``n_probes``
    (same seed) can only raise the estimate.
    """
    if radius <= 0:
        raise ConfigError("radius must be > 0")
    if n_probes < 1:
        raise ConfigError("n_probes must be >= 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    probes = _ball_probes(x, radius, n_probes, rng)
    refined = _refine_probe(model, x, probes[0], radius, refine_steps)
    probes = np.vstack([probes, refined[None, :]])
    p0 = probabilities(model, x)[0]
    dp = np.linalg.norm(probabilities(model, probes) - p0, axis=1)
    dx = np.linalg.norm(probes - x, axis=1)
    keep = dx > 0
    if not keep.any():
        return 0.0
    return float((dp[keep] / dx[keep]).max())


def falsify_certificate(model: MlpModel, x, delta: float, n_probes: int, seed: int = 0,
                        chunk: int = 4096) -> bool:
    """Search the closed delta-ball around ``x`` for a point with a different argmax.

    Probes are uniform in the ball (a fifth of them on its surface), plus the
    end point of an L2 margin-loss PGD run with budget ``delta``.
    """
    if delta <= 0:
        return False
    x = np.asarray(x, dtype=np.float64).ravel()
    label = int(predict_labels(model, x[None, :])[0])
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_probes:
        n = min(chunk, n_probes - done)
        probes = _ball_probes(x, delta, n, rng, surface_fraction=0.2)
        if np.any(predict_labels(model, probes) != label):
            return True
        done += n
    cfg = AttackConfig(norm="l2", epsilon=delta, steps=20, step_size=delta / 4, loss="cw_margin",
                       random_init=False, data_min=-np.inf, data_max=np.inf, seed=seed)
    x_adv = pgd(model, x[None, :], np.array([label]), cfg)
    return bool(predict_labels(model, x_adv)[0] != label)


def certify_sample(model: MlpModel, x, sample_id: int, mode: str, n_probes: int,
                   lipschitz_radius: float = 0.1, falsify_probes: int | None = None,
                   seed: int = 0, analytic_bound: float | None = None) -> CertificateReport:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if n_probes < 1:
        raise ConfigError("probe count must be >= 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    label, p_a, p_b = top_two(probabilities(model, x)[0])
    if mode == "analytic":
        lip = analytic_bound if analytic_bound is not None else analytic_lipschitz(model)
    else:
        lip = estimate_local_lipschitz(model, x, lipschitz_radius, n_probes, seed)
    radius = certified_radius(p_a, p_b, lip) if lip > 0 else float("inf")
    budget = n_probes if falsify_probes is None else falsify_probes
    falsified = falsify_certificate(model, x, radius, budget, seed + 1) if np.isfinite(radius) else False
    return CertificateReport(sample_id, label, p_a, p_b, lip, radius, mode,
                             mode == "analytic", falsified, budget)


def certify_dataset(model: MlpModel, features, mode: str, n_probes: int,
                    lipschitz_radius: float = 0.1, falsify_probes: int | None = None,
                    seed: int = 0) -> list[CertificateReport]:
    bound = analytic_lipschitz(model) if mode == "analytic" else None
    return [certify_sample(model, x, i, mode, n_probes, lipschitz_radius, falsify_probes,
                           seed + i, bound)
            for i, x in enumerate(np.asarray(features))]
