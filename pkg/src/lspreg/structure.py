"""Local neighborhood structure: kNN search, structure vectors, LSP losses, memory banks.

A structure vector for an anchor is the vector of its distances to ``m``
neighbors divided by their sum, so it lies on the probability simplex and does
not depend on the overall scale of the space. The LSP penalty compares the
input-space vector (a constant target) with the vector measured on live model
outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DegenerateNeighborhoodError, FormatError, NumericError, ShapeError
from .model import Identity, MlpModel, logits
from .numerics import Tensor

LSP_KINDS = ("kl", "cosine", "l1", "l2")
STRUCTURES = ("local", "global", "off")
KL_Q_FLOOR = 1e-12
Q_SUM_FLOOR = 1e-12
BANK_MAGIC = b"LSPB"
BANK_VERSION = 1


def embed(g, x) -> np.ndarray:
    """Features of ``x`` under extractor ``g`` (``None`` or Identity = raw input)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if g is None or isinstance(g, Identity):
        return x
    if isinstance(g, MlpModel):
        return logits(g, x).data
    out = g(x)
    return np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64)


def input_metric(g, x_i, x_j) -> float:
    a = np.atleast_2d(np.asarray(x_i, dtype=np.float64))
    b = np.atleast_2d(np.asarray(x_j, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"input_metric shapes {a.shape} vs {b.shape}")
    return float(np.sqrt(((embed(g, a) - embed(g, b)) ** 2).sum()))


def pairwise_distances(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Exact Euclidean distances, [Q, N]; computed from differences, not the Gram trick."""
    q = np.atleast_2d(queries)
    out = np.empty((len(q), len(refs)))
    step = max(1, 2_000_000 // max(1, refs.size))
    for s in range(0, len(q), step):
        diff = q[s:s + step, None, :] - refs[None, :, :]
        out[s:s + step] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def _smallest(dist_row: np.ndarray, m: int, exclude: int | None) -> np.ndarray:
    order = np.argsort(dist_row, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    return order[:m]


@dataclass
class NeighborIndex:
    """Exhaustive Euclidean kNN over a fixed reference matrix."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("index features must be [N, k]")

    def __len__(self) -> int:
        return len(self.features)

    def _check_m(self, m: int) -> None:
        if m < 1:
            raise ConfigError(f"m must be >= 1, got {m}")
        if m >= len(self):
            raise ConfigError(f"m={m} needs more than {len(self)} reference points")

    def query(self, anchor_id: int, m: int) -> np.ndarray:
        self._check_m(m)
        if not 0 <= anchor_id < len(self):
            raise ConfigError(f"anchor id {anchor_id} out of range")
        d = pairwise_distances(self.features[anchor_id], self.features)[0]
        return _smallest(d, m, anchor_id)

    def query_vectors(self, queries, m: int, exclude=None) -> tuple[np.ndarray, np.ndarray]:
        """Neighbors of arbitrary query rows; ``exclude[i]`` is dropped from row i.

        Returns (ids [Q, m], distances [Q, m]).
        """
        self._check_m(m)
        d = pairwise_distances(np.asarray(queries, dtype=np.float64), self.features)
        ids = np.empty((len(d), m), dtype=np.intp)
        for i, row in enumerate(d):
            ids[i] = _smallest(row, m, None if exclude is None else int(exclude[i]))
        return ids, np.take_along_axis(d, ids, axis=1)

    def query_all(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        return self.query_vectors(self.features, m, exclude=np.arange(len(self)))


def knn_query(index: NeighborIndex, anchor_id: int, m: int) -> np.ndarray:
    return index.query(anchor_id, m)


@dataclass
class StructureVector:
    values: np.ndarray
    anchor_id: int | None = None
    neighbor_ids: np.ndarray | None = None


def structure_vector(distances, anchor_id: int | None = None, neighbor_ids=None) -> StructureVector:
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or len(d) < 2:
        raise ConfigError("a structure vector needs m >= 2 distances")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ConfigError("distances must be finite and non-negative")
    s = d.sum()
    if s <= 0:
        raise DegenerateNeighborhoodError("all neighbor distances are zero")
    ids = None if neighbor_ids is None else np.asarray(neighbor_ids)
    return StructureVector(d / s, anchor_id, ids)


def structure_rows(distances: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise structure vectors of a [B, m] distance matrix.

    Returns (P, valid); rows whose distances are all zero are marked invalid and
    left as zeros.
    """
    d = np.asarray(distances, dtype=np.float64)
    s = d.sum(axis=1, keepdims=True)
    valid = s[:, 0] > 0
    p = np.divide(d, s, out=np.zeros_like(d), where=s > 0)
    return p, valid


def live_structure(anchor: Tensor, neighbors: Tensor) -> Tensor:
    """Structure vectors from live embeddings: anchor [B, k], neighbors [B, m, k]."""
    b, k = anchor.shape
    diff = nx.sub(neighbors, nx.reshape(anchor, (b, 1, k)))
    d = nx.norm(diff, axis=-1)
    total = nx.clamp(nx.sum_(d, axis=1, keepdims=True), lo=Q_SUM_FLOOR)
    return nx.div(d, total)


def discrepancy_rows(p, q: Tensor, kind: str) -> Tensor:
    """Per-row discrepancy between constant targets ``p`` and live ``q``, both [B, m]."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    q = nx.as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"P {p.shape} vs Q {q.shape}")
    if kind == "l2":
        return nx.mean(nx.square(nx.sub(p, q)), axis=-1)
    if kind == "l1":
        return nx.mean(nx.abs_(nx.sub(p, q)), axis=-1)
    if kind == "kl":
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)
        cross = nx.sum_(nx.mul(p, nx.log(nx.clamp(q, lo=KL_Q_FLOOR))), axis=-1)
        return nx.clamp(nx.sub(plogp, cross), lo=0.0)
    if kind == "cosine":
        pn = np.sqrt((p * p).sum(axis=-1))
        dot = nx.sum_(nx.mul(p, q), axis=-1)
        return nx.clamp(nx.sub(1.0, nx.div(dot, nx.mul(pn, nx.norm(q, axis=-1)))), lo=0.0)
    raise ConfigError(f"unknown LSP kind {kind!r}; choose from {LSP_KINDS}")


def lsp_discrepancy(p, q, kind: str = "l2") -> Tensor:
    """Discrepancy of two structure vectors; ``p`` is a constant target."""
    p = np.asarray(p.values if isinstance(p, StructureVector) else
                   (p.data if isinstance(p, Tensor) else p), dtype=np.float64)
    if isinstance(q, StructureVector):
        q = q.values
    q = nx.as_tensor(q)
    if p.ndim != 1 or q.ndim != 1:
        raise ShapeError("lsp_discrepancy takes two vectors")
    row = discrepancy_rows(p[None, :], nx.reshape(q, (1, q.shape[0])), kind)
    return nx.reshape(row, ())


# -- standard training prior --------------------------------------------------

@dataclass
class NeighborPrior:
    """Fixed neighbor ids and input-space structure vectors for a training set."""

    neighbor_ids: np.ndarray
    targets: np.ndarray
    valid: np.ndarray
    features: np.ndarray = field(repr=False)
    structure: str = "local"

    @property
    def m(self) -> int:
        return self.neighbor_ids.shape[1]

    @property
    def n_degenerate(self) -> int:
        return int((~self.valid).sum())

    @classmethod
    def build(cls, g, x_train, m: int, structure: str = "local", seed: int = 0) -> "NeighborPrior":
        if structure not in ("local", "global"):
            raise ConfigError(f"prior structure must be local or global, got {structure!r}")
        if m < 2:
            raise ConfigError(f"m must be >= 2, got {m}")
        feats = embed(g, x_train)
        index = NeighborIndex(feats)
        if structure == "local":
            ids, dist = index.query_all(m)
        else:
            index._check_m(m)
            ids, dist = _random_neighbors(feats, m, np.random.default_rng(seed))
        p, valid = structure_rows(dist)
        return cls(ids, p, valid, feats, structure)

    def resample(self, seed: int) -> "NeighborPrior":
        """Fresh random non-anchor neighbors (global ablation only)."""
        if self.structure != "global":
            return self
        ids, dist = _random_neighbors(self.features, self.m, np.random.default_rng(seed))
        p, valid = structure_rows(dist)
        return NeighborPrior(ids, p, valid, self.features, "global")


def _random_neighbors(feats: np.ndarray, m: int, rng: np.random.Generator):
    n = len(feats)
    ids = np.empty((n, m), dtype=np.intp)
    for i in range(n):
        pick = rng.choice(n - 1, size=m, replace=False)
        ids[i] = pick + (pick >= i)
    diff = feats[ids] - feats[:, None, :]
    return ids, np.sqrt((diff * diff).sum(axis=-1))


@dataclass
class LSPResult:
    loss: Tensor
    anchor_logits: Tensor
    n_skipped: int
    neighbor_ids: np.ndarray
    extra: dict = field(default_factory=dict)


def lsp_loss_standard(f: MlpModel, x_train, batch_ids, prior: NeighborPrior,
                      kind: str = "l2") -> LSPResult:
    """Mean discrepancy between input-space and logit-space structure over a batch.

    Anchors and their neighbors go through ``f`` in one forward pass; the
    anchor logits are returned so the caller can reuse them for the CE term.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    ids = np.asarray(batch_ids, dtype=np.intp)
    b, m = len(ids), prior.m
    nbr = prior.neighbor_ids[ids]
    z = logits(f, np.concatenate([x_train[ids], x_train[nbr.reshape(-1)]]))
    anchor = nx.slice_rows(z, 0, b)
    neigh = nx.reshape(nx.slice_rows(z, b, b + b * m), (b, m, z.shape[1]))
    valid = prior.valid[ids]
    n_skip = int((~valid).sum())
    if not valid.any():
        return LSPResult(Tensor(0.0), anchor, n_skip, nbr)
    rows = np.flatnonzero(valid)
    q = live_structure(nx.take_rows(anchor, rows), nx.take_rows(neigh, rows))
    loss = nx.mean(discrepancy_rows(prior.targets[ids][rows], q, kind))
    return LSPResult(loss, anchor, n_skip, nbr)


# -- memory banks -------------------------------------------------------------

def _normalize_rows(v: np.ndarray) -> np.ndarray:
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    if np.any(n == 0):
        raise NumericError("cannot normalize a zero-norm representation")
    return v / n


@dataclass
class MemoryBank:
    vectors: np.ndarray
    momentum: float = 0.5

    def __post_init__(self):
        if not 0 < self.momentum <= 1:
            raise ConfigError(f"bank momentum must be in (0, 1], got {self.momentum}")

    def __len__(self) -> int:
        return len(self.vectors)

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.vectors.copy(), self.momentum)


def bank_init(n: int, k: int, seed: int, momentum: float = 0.5) -> MemoryBank:
    rng = np.random.default_rng(seed)
    return MemoryBank(_normalize_rows(rng.standard_normal((n, k))), momentum)


def bank_update(bank: MemoryBank, ids, reps) -> None:
    ids = np.asarray(ids, dtype=np.intp)
    r = np.atleast_2d(np.asarray(reps.data if isinstance(reps, Tensor) else reps, dtype=np.float64))
    if r.shape != (len(ids), bank.vectors.shape[1]):
        raise ShapeError(f"reps {r.shape} for {len(ids)} ids of width {bank.vectors.shape[1]}")
    if not np.all(np.isfinite(r)):
        raise NumericError("non-finite representation")
    # a zero representation has no direction; its row is left as is
    keep = np.sqrt((r * r).sum(axis=1)) > 0
    ids, r = ids[keep], _normalize_rows(r[keep])
    mu = bank.momentum
    if len(np.unique(ids)) == len(ids):
        bank.vectors[ids] = _normalize_rows((1 - mu) * bank.vectors[ids] + mu * r)
    else:
        for i, row in zip(ids, r):
            bank.vectors[i] = _normalize_rows((1 - mu) * bank.vectors[i] + mu * row)


def lsp_loss_adversarial(f: MlpModel, x, x_adv, batch_ids, nat_bank: MemoryBank,
                         adv_bank: MemoryBank, m: int, kind: str = "l2",
                         neighbor_ids=None) -> LSPResult:
    """Structure discrepancy between the natural bank and the adversarial space.

    Neighbors of each anchor are mined over ``nat_bank`` with the anchor's
    current (detached, normalized) natural representation as the query. The
    target uses natural-bank distances; the live vector uses the normalized
    adversarial logits of the anchor against the neighbors' adversarial-bank rows.
    The natural logits are returned in ``extra['natural_logits']`` for bank updates.
    ``neighbor_ids`` [B, m] replaces kNN mining (global-structure ablation).
    """
    ids = np.asarray(batch_ids, dtype=np.intp)
    nat = logits(f, np.asarray(x.data if isinstance(x, Tensor) else x)).data
    nat_norm = np.sqrt((nat * nat).sum(axis=1, keepdims=True))
    query = nat / np.where(nat_norm > 0, nat_norm, 1.0)
    if neighbor_ids is None:
        nbr, dist = NeighborIndex(nat_bank.vectors).query_vectors(query, m, exclude=ids)
    else:
        nbr = np.asarray(neighbor_ids, dtype=np.intp)
        diff = nat_bank.vectors[nbr] - query[:, None, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
    z_adv = logits(f, x_adv)
    p, valid = structure_rows(dist)
    # all-zero logits (every unit inactive) have no direction to normalize
    valid &= (nat_norm[:, 0] > 0) & (np.abs(z_adv.data).sum(axis=1) > 0)
    n_skip = int((~valid).sum())
    extra = {"natural_logits": nat}
    if not valid.any():
        return LSPResult(Tensor(0.0), z_adv, n_skip, nbr, extra)
    rows = np.flatnonzero(valid)
    live = nx.take_rows(z_adv, rows)
    unit = nx.div(live, nx.norm(live, axis=-1, keepdims=True))
    q = live_structure(unit, Tensor(adv_bank.vectors[nbr[rows]], _check=False))
    loss = nx.mean(discrepancy_rows(p[rows], q, kind))
    return LSPResult(loss, z_adv, n_skip, nbr, extra)


def neighbor_purity(source, labels, m: int) -> float:
    """Mean fraction of each point's m nearest neighbors sharing its label."""
    if isinstance(source, MemoryBank):
        feats = source.vectors
    elif isinstance(source, NeighborIndex):
        feats = source.features
    else:
        feats = np.asarray(source, dtype=np.float64)
    y = np.asarray(labels)
    if len(y) != len(feats):
        raise ShapeError(f"{len(y)} labels for {len(feats)} points")
    ids, _ = NeighborIndex(feats).query_all(m)
    return float((y[ids] == y[:, None]).mean())


# -- bank checkpoints ---------------------------------------------------------

def bank_to_bytes(bank: MemoryBank) -> bytes:
    n, k = bank.vectors.shape
    head = BANK_MAGIC + struct.pack("<HIId", BANK_VERSION, n, k, bank.momentum)
    return head + bank.vectors.astype("<f8").tobytes()


def bank_from_bytes(blob: bytes) -> MemoryBank:
    if blob[:4] != BANK_MAGIC:
        raise FormatError("not a memory-bank checkpoint (bad magic)")
    fmt = "<HIId"
    try:
        version, n, k, mu = struct.unpack_from(fmt, blob, 4)
    except struct.error:
        raise FormatError("truncated bank header") from None
    if version != BANK_VERSION:
        raise FormatError(f"bank version {version}, expected {BANK_VERSION}")
    off = 4 + struct.calcsize(fmt)
    if len(blob) - off != 8 * n * k:
        raise FormatError("bank payload size mismatch")
    vec = np.frombuffer(blob, "<f8", n * k, off).reshape(n, k).astype(np.float64)
    return MemoryBank(vec, mu)


def save_bank(bank: MemoryBank, path) -> None:
    Path(path).write_bytes(bank_to_bytes(bank))


def load_bank(path) -> MemoryBank:
    return bank_from_bytes(Path(path).read_bytes())
