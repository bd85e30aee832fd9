"""Domain-level episodic sampling of meta-train / meta-test batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import PairBatch
from .synth import DomainDataset


class CapacityError(ValueError):
    """A domain holds too few identities for the requested batch."""


class ArityError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingStrategy:
    """How many domains play meta-train and meta-test in an episode.

    ``meta_train=None`` means every domain that is not meta-test (the default
    leave-one-domain-out split). ``random_train`` redraws the meta-train count
    uniformly from ``1..N-1`` each episode.
    """

    meta_train: int | None = None
    meta_test: int = 1
    random_train: bool = False

    @property
    def label(self) -> str:
        if self.random_train:
            return "rand"
        if self.meta_train is None:
            return "default"
        return f"S{self.meta_train}T{self.meta_test}"


DEFAULT_STRATEGY = SamplingStrategy()


def strategy_variants(m, n: int = 1, num_domains: int | None = None) -> SamplingStrategy:
    """``SmTn``: m meta-train and n meta-test domains; ``m="random"`` for rand."""
    if m == "random":
        if n != 1:
            raise ArityError("the random variant uses a single meta-test domain")
        return SamplingStrategy(meta_train=None, meta_test=1, random_train=True)
    m, n = int(m), int(n)
    if m < 1 or n < 1:
        raise ArityError(f"need m >= 1 and n >= 1, got m={m}, n={n}")
    if num_domains is not None and m + n > num_domains:
        raise ArityError(f"S{m}T{n} needs {m + n} domains, only {num_domains} available")
    return SamplingStrategy(meta_train=m, meta_test=n)


@dataclass(frozen=True)
class Episode:
    meta_train: PairBatch
    meta_test: PairBatch
    train_domains: tuple[int, ...]
    test_domains: tuple[int, ...]


@dataclass(frozen=True)
class MetaBatch:
    episodes: tuple[Episode, ...]

    def __len__(self) -> int:
        return len(self.episodes)


def allocate(total: int, parts: int, rng: np.random.Generator) -> list[int]:
    """Split ``total`` as evenly as possible; rng picks who gets the remainder."""
    base, rem = divmod(total, parts)
    counts = [base] * parts
    if rem:
        for k in sorted(rng.choice(parts, size=rem, replace=False)):
            counts[int(k)] += 1
    return counts


def sample_pairs(
    domains: list[DomainDataset], counts: list[int], rng: np.random.Generator
) -> PairBatch:
    """Draw ``counts[k]`` identities from ``domains[k]``, two observations each."""
    gallery, probe, labels, tags = [], [], [], []
    for dom, count in zip(domains, counts):
        if count > dom.num_identities:
            raise CapacityError(
                f"domain {dom.domain_id} has {dom.num_identities} identities, "
                f"{count} requested"
            )
        if count == 0:
            continue
        chosen = rng.choice(dom.num_identities, size=count, replace=False)
        for i in chosen:
            obs = dom.observations[i]
            a, b = rng.choice(obs.shape[0], size=2, replace=False)
            gallery.append(obs[a])
            probe.append(obs[b])
            labels.append(dom.identity_ids[i])
            tags.append(dom.domain_id)
    return PairBatch(np.stack(gallery), np.stack(probe), labels, tags)


def _split(n_domains: int, test_idx: int, strategy: SamplingStrategy, rng) -> tuple[list, list]:
    rest = [k for k in range(n_domains) if k != test_idx]
    test = [test_idx]
    if strategy.meta_test > 1:
        extra = rng.choice(len(rest), size=strategy.meta_test - 1, replace=False)
        test += [rest[int(k)] for k in extra]
        rest = [k for k in rest if k not in test]
        test.sort()
    if strategy.random_train:
        m = int(rng.integers(1, n_domains))
    elif strategy.meta_train is None:
        m = len(rest)
    else:
        m = strategy.meta_train
    if m > len(rest):
        raise ArityError(f"{m} meta-train domains requested, {len(rest)} left")
    if m < len(rest):
        picked = rng.choice(len(rest), size=m, replace=False)
        rest = sorted(rest[int(k)] for k in picked)
    return rest, test


def build_meta_batch(
    domains: list[DomainDataset],
    batch_size: int,
    rng: np.random.Generator,
    strategy: SamplingStrategy = DEFAULT_STRATEGY,
) -> MetaBatch:
    """One episode per source domain, that domain serving as meta-test.

    Meta-train and meta-test each get ``batch_size`` identities, spread as
    evenly as possible across the participating domains.
    """
    n = len(domains)
    if n < 2:
        raise ArityError(f"need at least 2 source domains, got {n}")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    if strategy.meta_train is not None and strategy.meta_train + strategy.meta_test > n:
        raise ArityError(f"{strategy.label} does not fit {n} domains")
    episodes = []
    for i in range(n):
        train_idx, test_idx = _split(n, i, strategy, rng)
        train_doms = [domains[k] for k in train_idx]
        test_doms = [domains[k] for k in test_idx]
        tr = sample_pairs(train_doms, allocate(batch_size, len(train_doms), rng), rng)
        te = sample_pairs(test_doms, allocate(batch_size, len(test_doms), rng), rng)
        episodes.append(
            Episode(
                tr,
                te,
                tuple(d.domain_id for d in train_doms),
                tuple(d.domain_id for d in test_doms),
            )
        )
    return MetaBatch(tuple(episodes))


def build_pooled_batch(
    domains: list[DomainDataset], batch_size: int, rng: np.random.Generator
) -> PairBatch:
    """A single batch pooled over all domains, every identity tagged domain 0."""
    batch = sample_pairs(domains, allocate(batch_size, len(domains), rng), rng)
    return PairBatch(batch.gallery, batch.probe, batch.identity_labels, np.zeros(batch.size))
