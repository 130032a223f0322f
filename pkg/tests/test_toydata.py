from __future__ import annotations

import numpy as np
import pytest

from sidflow import flowmath as fm
from sidflow.errors import ConfigError, DomainError
from sidflow.evalmetrics import chain_designable_proxy
from sidflow.toydata import (ChainMotifSpec, ChainTarget, MixtureSpec, analytic_mixture_score,
                             analytic_mixture_velocity, analytic_mixture_x_pred, assemble_batch,
                             mixture_log_density, pad_batch, read_batch_xyz, read_xyz, ring_mixture,
                             sample_chain, sample_lengths, sample_mixture, standard_gaussian,
                             target_from_dict, write_batch_xyz, write_xyz)

HELIX_BOND = float(np.hypot(2 * 2.3 * np.sin(np.deg2rad(50)), 1.5))


def test_mixture_spec_validation():
    with pytest.raises(ConfigError):
        MixtureSpec([0.5, 0.6], [[0, 0], [1, 1]], [1, 1])
    with pytest.raises(ConfigError):
        MixtureSpec([1.0], [[0, 0]], [0.0])
    with pytest.raises(ConfigError):
        MixtureSpec([0.5, 0.5], [[0, 0]], [1, 1])


def test_standard_gaussian_mean(rng):
    b = sample_mixture(standard_gaussian(2), 10 ** 5, rng)
    assert np.all(np.abs(b.coords[:, 0].mean(axis=0)) < 0.02)
    b.validate()


def test_degenerate_weights_labels():
    spec = MixtureSpec([1.0, 0.0], [[0, 0], [5, 5]], [1, 1])
    b = sample_mixture(spec, 500, np.random.default_rng(0))
    assert np.all(b.labels == 0)


def test_symmetric_pair_mean(rng):
    spec = MixtureSpec([0.5, 0.5], [[3, 0], [-3, 0]], [1, 1])
    b = sample_mixture(spec, 10 ** 5, rng)
    assert np.all(np.abs(b.coords[:, 0].mean(axis=0)) < 0.05)


def test_sample_mixture_rejects_empty(rng):
    with pytest.raises(DomainError):
        sample_mixture(standard_gaussian(), 0, rng)


def test_gaussian_velocity_closed_form(rng):
    x = rng.normal(size=(100, 2))
    for t in (0.1, 0.3, 0.5, 0.77):
        v = analytic_mixture_velocity(standard_gaussian(), x, t)
        expect = (2 * t - 1) / (t ** 2 + (1 - t) ** 2) * x
        assert np.max(np.abs(v - expect)) < 1e-12
    assert np.max(np.abs(analytic_mixture_velocity(standard_gaussian(), x, 0.5))) < 1e-15


def test_gaussian_score_hand_value():
    s = analytic_mixture_score(standard_gaussian(), np.array([[1.0, 0.0]]), 0.5)
    assert np.allclose(s, [[-2.0, 0.0]], rtol=0, atol=1e-14)


def test_mixture_score_matches_density_finite_difference(rng):
    spec = ring_mixture()
    x = rng.normal(size=(40, 2)) * 2
    h = 1e-5
    for t in (0.2, 0.5, 0.9):
        s = analytic_mixture_score(spec, x, t)
        num = np.zeros_like(x)
        for d in range(2):
            e = np.zeros(2)
            e[d] = h
            num[:, d] = (mixture_log_density(spec, x + e, t)
                         - mixture_log_density(spec, x - e, t)) / (2 * h)
        rel = np.abs(s - num) / np.maximum(np.abs(num), 1e-3)
        assert rel.max() < 1e-6


def test_oracle_self_consistency_grid(rng):
    spec = ring_mixture()
    for t in np.linspace(0.05, 0.95, 19):
        x = rng.normal(size=(200, 2)) * 2
        f = analytic_mixture_x_pred(spec, x, t)
        s = analytic_mixture_score(spec, x, t)
        v = analytic_mixture_velocity(spec, x, t)
        assert np.max(np.abs(fm.score_from_x_pred(x, f, t) - s)) < 1e-10
        assert np.max(np.abs(fm.velocity_from_x_pred(x, f, t) - v)) < 1e-10


def test_oracles_finite_far_away():
    spec = ring_mixture()
    x = np.array([[1e6, -1e6], [-1e6, 3.0]])
    for fn in (analytic_mixture_velocity, analytic_mixture_score, analytic_mixture_x_pred):
        assert np.isfinite(fn(spec, x, 0.5)).all()


def test_oracle_rejects_endpoints():
    with pytest.raises(DomainError):
        analytic_mixture_velocity(standard_gaussian(), np.zeros((1, 2)), 1.0)


def test_marginal_variance(rng):
    n = 10 ** 5
    for t in (0.2, 0.5, 0.8):
        x = sample_mixture(standard_gaussian(1), n, rng).coords[:, 0, 0]
        var = fm.interpolate(x, rng.normal(size=n), t).var()
        expect = t ** 2 + (1 - t) ** 2
        assert abs(var / expect - 1) < 0.01


def test_pure_helix_bonds():
    m = ChainMotifSpec(helix_fraction=1.0, noise=0.0, segment_range=(30, 30))
    x = sample_chain(20, m, np.random.default_rng(0))
    bonds = np.linalg.norm(np.diff(x, axis=0), axis=1)
    assert abs(HELIX_BOND - 3.83) < 0.01
    assert np.all(np.abs(bonds - 3.83) < 0.05)
    assert np.allclose(bonds, HELIX_BOND, rtol=0, atol=1e-12)


def test_pure_strand_bonds():
    m = ChainMotifSpec(helix_fraction=0.0, noise=0.0)
    x = sample_chain(25, m, np.random.default_rng(1))
    bonds = np.linalg.norm(np.diff(x, axis=0), axis=1)
    assert np.allclose(bonds, 3.8, rtol=0, atol=1e-12)


def test_chains_centred_and_noise_bounds(rng):
    m = ChainMotifSpec(noise=0.1)
    bonds = []
    for n in (8, 16, 40):
        for _ in range(20):
            x = sample_chain(n, m, rng)
            assert np.abs(x.mean(axis=0)).max() < 1e-9
            bonds.append(np.linalg.norm(np.diff(x, axis=0), axis=1))
    bonds = np.concatenate(bonds)
    lo = 3.8 - 3 * 0.1 * np.sqrt(2) - (HELIX_BOND - 3.8)
    hi = HELIX_BOND + 3 * 0.1 * np.sqrt(2)
    assert np.mean((bonds >= lo) & (bonds <= hi)) >= 0.99


def test_noiseless_chains_pass_proxy(rng):
    for n in (3, 8, 16, 64):
        for _ in range(10):
            assert chain_designable_proxy(sample_chain(n, ChainMotifSpec(), rng)).passed


def test_chain_too_short(rng):
    with pytest.raises(DomainError):
        sample_chain(2, ChainMotifSpec(), rng)


def test_motif_validation():
    with pytest.raises(ConfigError):
        ChainMotifSpec(strand_step=4.5)
    with pytest.raises(ConfigError):
        ChainMotifSpec(helix_fraction=1.5)


def test_length_histogram_uniform():
    L = sample_lengths((8, 64), 10 ** 5, np.random.default_rng(0))
    counts = np.bincount(L, minlength=65)[8:65]
    assert L.min() == 8 and L.max() == 64
    expect = 10 ** 5 / 57
    assert np.all(np.abs(counts / expect - 1) < 0.15)


def test_assemble_batch_and_padding(rng):
    s = [sample_chain(n, ChainMotifSpec(), rng) for n in (5, 9)]
    b = assemble_batch(s, 9)
    assert b.mask[1].all() and b.mask[0].sum() == 5
    b.validate(centered=True)
    p = pad_batch(b, 20)
    assert p.n_max == 20 and np.array_equal(p.coords[:, :9], b.coords)
    with pytest.raises(DomainError):
        assemble_batch(s, 8)


def test_validate_detects_nonzero_padding(rng):
    b = assemble_batch([np.ones((3, 3))], 5)
    b.coords[0, 4] = 1.0
    with pytest.raises(ConfigError):
        b.validate()


def test_chain_target_units(rng):
    tgt = ChainTarget(length_range=(8, 16), scale=0.25)
    b = tgt.sample(4, rng)
    assert b.n_max == 16
    phys = tgt.to_physical(b.coords[0, : b.lengths[0]])
    bonds = np.linalg.norm(np.diff(phys, axis=0), axis=1)
    assert np.all((bonds > 3.7) & (bonds < 3.9))
    again = target_from_dict(tgt.to_dict())
    assert again == tgt


def test_xyz_roundtrip(tmp_path, rng):
    x = sample_chain(7, ChainMotifSpec(), rng)
    path = write_xyz(tmp_path / "a.xyz", x)
    lines = path.read_text().splitlines()
    assert len(lines) == 7 and all(l.startswith("CA ") and len(l.split()) == 4 for l in lines)
    assert np.max(np.abs(read_xyz(path) - x)) < 1e-6
    b = assemble_batch([x, x[:4]], 7)
    write_batch_xyz(tmp_path / "d", b)
    back = read_batch_xyz(tmp_path / "d")
    assert list(back.lengths) == [7, 4]


def test_read_empty_dir(tmp_path):
    with pytest.raises(DomainError):
        read_batch_xyz(tmp_path)
