from dataclasses import replace

import numpy as np
import pytest

from mfr.evaluation import rank1, score_all
from mfr.model import Architecture, init_params
from mfr.synth import (
    ChecksumError,
    ConfigError,
    DatasetError,
    DatasetVersionError,
    GeneratorConfig,
    TruncatedFileError,
    domain_transforms,
    generate,
    load_dataset,
    read_header,
    save_dataset,
)

SMALL = GeneratorConfig(num_domains=3, identities_per_domain=12, observations_per_identity=3, latent_dim=4, obs_dim=10)


def test_shapes_and_disjoint_ids():
    domains = generate(SMALL)
    assert [d.domain_id for d in domains] == [0, 1, 2]
    ids = np.concatenate([d.identity_ids for d in domains])
    assert len(np.unique(ids)) == len(ids) == 36
    for d in domains:
        assert d.num_identities == 12 and d.obs_dim == 10
        assert all(o.shape == (3, 10) for o in d.observations)


def test_same_seed_is_bit_identical():
    a, b = generate(SMALL), generate(SMALL)
    assert all(x.equal(y) for x, y in zip(a, b))
    c = generate(replace(SMALL, seed=1))
    assert not a[0].equal(c[0])


def test_zero_shift_shares_one_transform():
    cfg = replace(SMALL, shift=0.0)
    T = domain_transforms(cfg, np.random.default_rng(cfg.seed))
    assert all(np.array_equal(T[0], t) for t in T[1:])
    # zero-padding embedding: latent lives in the leading coordinates
    obs = generate(replace(cfg, noise=0.0))[1].observations[0]
    assert np.all(obs[:, cfg.latent_dim :] == 0.0)
    assert np.linalg.norm(obs[0]) == pytest.approx(1.0, abs=1e-12)


def test_noiseless_observations_coincide():
    for d in generate(replace(SMALL, noise=0.0)):
        for obs in d.observations:
            assert np.array_equal(obs[0], obs[1]) and np.array_equal(obs[0], obs[2])


def test_full_shift_decorrelates_domains():
    cfg = GeneratorConfig(num_domains=2, latent_dim=4, obs_dim=256, shift=1.0, seed=3)
    rng = np.random.default_rng(cfg.seed)
    T = domain_transforms(cfg, rng)
    z = rng.standard_normal((1000, cfg.latent_dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    a, b = z @ T[0].T, z @ T[1].T
    corr = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    # same latent, independent orthonormal maps: cosine has sd ~ 1/sqrt(D)
    assert abs(corr.mean()) < 0.05
    same = np.sum(a * a, axis=1) / np.sum(a * a, axis=1)
    assert np.allclose(same, 1.0)


def test_within_identity_distance_concentrates():
    cfg = GeneratorConfig(num_domains=1, identities_per_domain=200, obs_dim=256, noise=0.2, seed=4)
    d = generate(cfg)[0]
    dists = [np.linalg.norm(o[0] - o[1]) for o in d.observations]
    expected = cfg.noise * np.sqrt(2 * cfg.obs_dim)
    assert abs(np.mean(dists) - expected) <= 0.15 * expected


def test_shift_degrades_cross_domain_rank1():
    """A fixed network matches one latent seen through two domains' transforms."""
    theta = init_params(Architecture(64, (128, 128), 64), 0)
    trend = []
    for shift in (0.0, 0.25, 0.5, 0.75, 1.0):
        scores = []
        for seed in range(5):
            cfg = GeneratorConfig(num_domains=2, shift=shift, seed=seed)
            rng = np.random.default_rng(seed)
            T = domain_transforms(cfg, rng)
            z = rng.standard_normal((200, cfg.latent_dim))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            g = z @ T[0].T + cfg.noise * rng.standard_normal((200, cfg.obs_dim))
            p = z @ T[1].T + cfg.noise * rng.standard_normal((200, cfg.obs_dim))
            scores.append(rank1(score_all(theta, g, p), np.arange(200), np.arange(200)))
        trend.append(np.mean(scores))
    assert all(b <= a for a, b in zip(trend, trend[1:])), trend
    assert trend[0] > trend[-1]


@pytest.mark.parametrize(
    "field,value",
    [
        ("observations_per_identity", 1),
        ("latent_dim", 11),
        ("noise", -0.1),
        ("shift", 1.5),
        ("num_domains", 0),
    ],
)
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError, match=field):
        generate(replace(SMALL, **{field: value}))


def test_file_round_trip(tmp_path):
    path = tmp_path / "d.bin"
    domains = generate(SMALL)
    save_dataset(domains, path, SMALL)
    back = load_dataset(path)
    assert len(back) == len(domains)
    assert all(a.equal(b) for a, b in zip(domains, back))
    assert read_header(path)["identities_per_domain"] == 12
    save_dataset(back, tmp_path / "e.bin", SMALL)
    assert (tmp_path / "e.bin").read_bytes() == path.read_bytes()


def test_file_errors(tmp_path):
    path = tmp_path / "d.bin"
    save_dataset(generate(SMALL), path, SMALL)
    good = path.read_bytes()

    flipped = bytearray(good)
    flipped[len(good) // 2] ^= 0x10
    path.write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_dataset(path)

    future = bytearray(good)
    future[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(future))
    with pytest.raises(DatasetVersionError):
        load_dataset(path)

    path.write_bytes(good[: len(good) - 100])
    with pytest.raises(TruncatedFileError):
        load_dataset(path)

    path.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(DatasetError):
        load_dataset(path)
