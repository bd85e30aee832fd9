"""Open-set verification and identification metrics on a held-out domain."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .model import ParameterSet, apply
from .synth import DomainDataset
from .tensor import l2_normalize_rows

DEFAULT_FARS = (1e-2, 1e-3, 1e-4)


class SampleSizeError(ValueError):
    """Too few impostor pairs to resolve the requested FAR."""


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    far_levels: tuple[float, ...] = DEFAULT_FARS
    # Extra deterministic view of each observation; its embedding is
    # concatenated with the plain one. None means a single representation.
    augment: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass
class EvalReport:
    vr_at_far: dict[float, float]
    rank1: float
    auc: float
    num_genuine: int
    num_impostor: int
    roc: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        d: dict[str, float] = {}
        for far in sorted(self.vr_at_far, reverse=True):
            d[f"vr@far={far:g}"] = self.vr_at_far[far]
        d["rank1"] = self.rank1
        d["auc"] = self.auc
        d["num_genuine"] = self.num_genuine
        d["num_impostor"] = self.num_impostor
        return d

    def write_text(self, path) -> None:
        lines = [f"{k}={_fmt(v)}" for k, v in self.as_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n")

    def write_csv(self, path, extra: dict | None = None) -> None:
        row = dict(extra or {})
        row.update(self.as_dict())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(row))
            w.writerow([_fmt(v) for v in row.values()])


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def read_report_text(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        k, v = line.rsplit("=", 1)
        out[k] = float(v)
    return out


def represent(theta: ParameterSet, obs: np.ndarray, augment=None) -> np.ndarray:
    feats = apply(theta, obs).value
    if augment is not None:
        feats = np.hstack([feats, apply(theta, augment(obs)).value])
    return l2_normalize_rows(feats)


def score_all(theta: ParameterSet, gallery: np.ndarray, probe: np.ndarray, augment=None) -> np.ndarray:
    """Cosine similarity ``score[p, g]`` between every probe and gallery."""
    g = represent(theta, gallery, augment)
    p = represent(theta, probe, augment)
    return p @ g.T


def vr_at_far(genuine, impostor, far: float) -> float:
    """Verification rate at the threshold admitting ``floor(far * n)`` impostors.

    Impostor scores are sorted descending; the threshold is the score at
    rank ``k = floor(far * n_impostor)`` (1-based), so tied impostors count
    by position. Genuine scores ``>=`` the threshold are accepts.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    n = impostor.size
    need = math.ceil(1.0 / far - 1e-9)
    if n < need:
        raise SampleSizeError(f"FAR={far:g} needs at least {need} impostor scores, got {n}")
    if genuine.size == 0:
        raise SampleSizeError("no genuine scores")
    k = int(math.floor(far * n + 1e-9))
    threshold = np.sort(impostor)[::-1][k - 1]
    return float(np.count_nonzero(genuine >= threshold) / genuine.size)


def roc_counts(genuine, impostor) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative (true, false) accept counts at each distinct score, descending."""
    scores = np.concatenate([genuine, impostor])
    is_gen = np.concatenate([np.ones(len(genuine), bool), np.zeros(len(impostor), bool)])
    order = np.argsort(-scores, kind="stable")
    scores, is_gen = scores[order], is_gen[order]
    last = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tp = np.cumsum(is_gen, dtype=np.int64)[last]
    fp = np.cumsum(~is_gen, dtype=np.int64)[last]
    return np.r_[0, tp], np.r_[0, fp], scores[last]


def auc(genuine, impostor) -> float:
    """Trapezoidal area under the full ROC, accumulated in integer counts."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    tp, fp, _ = roc_counts(genuine, impostor)
    twice = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice / (2 * genuine.size * impostor.size)


def rank1(scores: np.ndarray, probe_labels, gallery_labels) -> float:
    """Fraction of probes whose best gallery (lowest index on ties) matches."""
    scores = np.asarray(scores)
    probe_labels = np.asarray(probe_labels)
    gallery_labels = np.asarray(gallery_labels)
    missing = np.setdiff1d(probe_labels, gallery_labels)
    if missing.size:
        raise ProtocolError(f"probe identity {missing[0]} has no gallery entry")
    best = np.argmax(scores, axis=1)
    return float(np.mean(gallery_labels[best] == probe_labels))


def split_gallery_probe(domain: DomainDataset):
    """First observation of each identity is gallery, the rest are probes."""
    gallery = np.stack([obs[0] for obs in domain.observations])
    probe = np.vstack([obs[1:] for obs in domain.observations])
    gallery_labels = domain.identity_ids
    probe_labels = np.concatenate(
        [np.full(obs.shape[0] - 1, gid) for gid, obs in zip(domain.identity_ids, domain.observations)]
    )
    return gallery, gallery_labels, probe, probe_labels


def genuine_impostor(scores, probe_labels, gallery_labels) -> tuple[np.ndarray, np.ndarray]:
    same = np.asarray(probe_labels)[:, None] == np.asarray(gallery_labels)[None, :]
    return scores[same], scores[~same]


def metrics_from_scores(scores, probe_labels, gallery_labels, far_levels=DEFAULT_FARS) -> EvalReport:
    gen, imp = genuine_impostor(scores, probe_labels, gallery_labels)
    tp, fp, _ = roc_counts(gen, imp)
    return EvalReport(
        vr_at_far={far: vr_at_far(gen, imp, far) for far in far_levels},
        rank1=rank1(scores, probe_labels, gallery_labels),
        auc=auc(gen, imp),
        num_genuine=int(gen.size),
        num_impostor=int(imp.size),
        roc=(fp / imp.size, tp / gen.size),
    )


def evaluate(
    theta: ParameterSet, domain: DomainDataset, protocol: ProtocolConfig = ProtocolConfig()
) -> EvalReport:
    gallery, g_labels, probe, p_labels = split_gallery_probe(domain)
    scores = score_all(theta, gallery, probe, protocol.augment)
    return metrics_from_scores(scores, p_labels, g_labels, protocol.far_levels)
