"""Hard-pair attention, soft-classification and domain-alignment losses.

All losses take raw (unnormalized) gallery/probe embeddings as autodiff Vars
and l2-normalize them internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .tensor import DegenerateEmbeddingError


class DegenerateTemplateError(DegenerateEmbeddingError):
    """A class template (F_g + F_p) / 2 collapsed to zero."""


@dataclass
class PairBatch:
    """B identities, row i of ``gallery`` and ``probe`` sharing identity i.

    ``gallery`` and ``probe`` are observation matrices when produced by the
    sampler and embedding Vars when handed to the losses.
    """

    gallery: object
    probe: object
    identity_labels: np.ndarray
    domain_tags: np.ndarray

    def __post_init__(self):
        self.identity_labels = np.asarray(self.identity_labels, dtype=np.int64)
        self.domain_tags = np.asarray(self.domain_tags, dtype=np.int64)
        n = len(self.identity_labels)
        if len(np.unique(self.identity_labels)) != n:
            raise ValueError("identity labels must be unique within a batch")
        if len(self.domain_tags) != n:
            raise ValueError("need one domain tag per identity")
        for name in ("gallery", "probe"):
            rows = _shape(getattr(self, name))[0]
            if rows != n:
                raise ValueError(f"{name} has {rows} rows for {n} identities")

    @property
    def size(self) -> int:
        return len(self.identity_labels)


def _shape(x):
    return x.value.shape if isinstance(x, Var) else np.shape(x)


@dataclass(frozen=True)
class Thresholds:
    tau_p: float = 0.3
    tau_n: float = 0.04

    def __post_init__(self):
        if not (-1.0 <= self.tau_n <= 1.0 and -1.0 <= self.tau_p <= 1.0):
            raise ValueError(f"thresholds must lie in [-1, 1], got {self}")
        if self.tau_n > self.tau_p:
            raise ValueError(f"tau_n={self.tau_n} exceeds tau_p={self.tau_p}")


@dataclass(frozen=True)
class LossConfig:
    scale: float = 64.0
    thresholds: Thresholds = Thresholds()
    use_hp: bool = True
    use_cls: bool = True
    use_da: bool = True
    da_weight: float = 1.0
    stop_template_grad: bool = True


class LossTerms(NamedTuple):
    total: Var
    hp: float
    cls: float
    da: float
    num_pos: int
    num_neg: int


def mine_hard_pairs(M: np.ndarray, t: Thresholds) -> tuple[np.ndarray, np.ndarray]:
    """Hard positives ``M[i,i] < tau_p`` and hard negatives ``M[i,j] > tau_n``.

    Returns the positive indices and an ``(k, 2)`` array of negative pairs in
    row-major order.
    """
    M = np.asarray(M)
    pos = np.flatnonzero(np.diagonal(M) < t.tau_p)
    mask = M > t.tau_n
    np.fill_diagonal(mask, False)
    neg = np.argwhere(mask)
    return pos, neg


def _normalized(batch: PairBatch) -> tuple[Var, Var]:
    return ad.l2_normalize_rows(batch.gallery), ad.l2_normalize_rows(batch.probe)


def _hard_pair(g: Var, p: Var, t: Thresholds) -> tuple[Var, int, int]:
    M = g.value @ p.value.T
    pos, neg = mine_hard_pairs(M, t)
    loss = ad.Var(np.asarray(0.0))
    if pos.size:
        diff = ad.sub(ad.take(g, pos), ad.take(p, pos))
        loss = ad.div(ad.square_sum(diff), 2.0 * pos.size)
    if len(neg):
        diff = ad.sub(ad.take(g, neg[:, 0]), ad.take(p, neg[:, 1]))
        loss = ad.sub(loss, ad.div(ad.square_sum(diff), 2.0 * len(neg)))
    return loss, int(pos.size), int(len(neg))


def hard_pair_loss(batch: PairBatch, t: Thresholds) -> Var:
    g, p = _normalized(batch)
    return _hard_pair(g, p, t)[0]


def template_matrix(batch: PairBatch) -> np.ndarray:
    """Class templates ``(F_g + F_p) / 2`` of the normalized embeddings."""
    g, p = _normalized(batch)
    return 0.5 * (g.value + p.value)


def _soft_classification(g: Var, p: Var, s: float, stop_template: bool, template=None) -> Var:
    if template is not None:
        template = ad.as_var(template)
    else:
        template = ad.mul(ad.add(g, p), 0.5)
        if stop_template:
            template = ad.stop_gradient(template)
    norms = np.sqrt(np.sum(template.value**2, axis=1))
    if np.any(norms < 1e-12):
        i = int(np.argmin(norms))
        raise DegenerateTemplateError(f"template row {i} has norm {norms[i]:.3e}")
    W = ad.l2_normalize_rows(template)
    labels = np.arange(g.value.shape[0])
    ce_g = ad.cross_entropy_rows(ad.mul(s, ad.matmul(g, ad.transpose(W))), labels)
    ce_p = ad.cross_entropy_rows(ad.mul(s, ad.matmul(p, ad.transpose(W))), labels)
    return ad.div(ad.add(ce_g, ce_p), 2.0 * len(labels))


def soft_classification_loss(
    batch: PairBatch, s: float, stop_template_grad: bool = True, template=None
) -> Var:
    """Cross-entropy of gallery and probe rows against per-identity templates.

    ``template`` fixes the class weights to a given ``(B, C)`` matrix instead
    of deriving them from the batch; it is always treated as a constant.
    """
    if s <= 0:
        raise ValueError(f"scaling factor must be positive, got {s}")
    g, p = _normalized(batch)
    return _soft_classification(g, p, s, stop_template_grad, template)


def _domain_alignment(g: Var, p: Var, tags: np.ndarray, s: float) -> Var:
    domains = np.unique(tags)
    n = len(domains)
    if n == 1:
        return ad.Var(np.asarray(0.0))
    avg = np.zeros((n, len(tags)))
    for j, d in enumerate(domains):
        members = tags == d
        avg[j, members] = 1.0 / members.sum()
    mid = ad.mul(ad.add(g, p), 0.5)
    centers = ad.matmul(avg, mid)
    overall = ad.div(ad.sum_axis(centers, 0), float(n))
    spread = ad.mul(s, ad.sub(centers, overall))
    return ad.div(ad.square_sum(spread), float(n))


def domain_alignment_loss(batch: PairBatch, s: float) -> Var:
    g, p = _normalized(batch)
    return _domain_alignment(g, p, batch.domain_tags, s)


def loss_terms(batch: PairBatch, cfg: LossConfig, with_da: bool) -> LossTerms:
    """Evaluate the enabled losses once and report each component."""
    g, p = _normalized(batch)
    parts: list[Var] = []
    hp_val = cls_val = da_val = 0.0
    num_pos = num_neg = 0
    if cfg.use_hp:
        hp, num_pos, num_neg = _hard_pair(g, p, cfg.thresholds)
        parts.append(hp)
        hp_val = float(hp.value)
    if cfg.use_cls:
        cls = _soft_classification(g, p, cfg.scale, cfg.stop_template_grad)
        parts.append(cls)
        cls_val = float(cls.value)
    if with_da and cfg.use_da:
        da = _domain_alignment(g, p, batch.domain_tags, cfg.scale)
        if cfg.da_weight != 1.0:
            da = ad.mul(cfg.da_weight, da)
        parts.append(da)
        da_val = float(da.value)
    return LossTerms(_sum(parts), hp_val, cls_val, da_val, num_pos, num_neg)


def _sum(parts: Sequence[Var]) -> Var:
    if not parts:
        return ad.Var(np.asarray(0.0))
    total = parts[0]
    for part in parts[1:]:
        total = ad.add(total, part)
    return total


def meta_train_loss(batch: PairBatch, cfg: LossConfig) -> Var:
    """``L_hp + L_cls + L_da`` on a multi-domain meta-train batch."""
    return loss_terms(batch, cfg, with_da=True).total


def meta_test_loss(batch: PairBatch, cfg: LossConfig) -> Var:
    """``L_hp + L_cls``; the meta-test side has a single domain."""
    return loss_terms(batch, cfg, with_da=False).total
