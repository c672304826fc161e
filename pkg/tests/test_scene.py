import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsep.denoiser.conditions import Composite, Label
from zsep.scene import (DEFAULT_DIMS, LabelRegistry, SourceLabel, band_energies, default_labels, envelope,
                        expected_energy, gen_source, make_dataset, make_scene, make_scenes, mix)

DIMS = DEFAULT_DIMS


def test_zero_amplitude_gives_zero_grid():
    lab = SourceLabel(0, "silent", fundamental=4, amplitude=0.0)
    assert not np.any(gen_source(lab, DIMS, seed=3))


def test_generation_is_deterministic_and_non_negative():
    lab = default_labels()[1]
    a, b = gen_source(lab, DIMS, 9), gen_source(lab, DIMS, 9)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.shape == DIMS
    assert not np.array_equal(a, gen_source(lab, DIMS, 10))


def test_harmonic_energy_concentration_closed_form():
    lab = SourceLabel(1, "chime", fundamental=4, harmonics=3)
    C, Tf, F = DIMS
    # closed-form share of the expected energy that sits on bins {4, 8, 12}
    jitter_part = C * Tf * (F - 3) * (lab.amplitude * lab.jitter) ** 2 / 3.0
    share = 1.0 - jitter_part / expected_energy(lab, DIMS)
    assert share >= 0.9
    g = gen_source(lab, DIMS, 1)
    e = band_energies(g)
    assert e[[4, 8, 12]].sum() / e.sum() >= 0.9


def test_dataset_energy_matches_closed_form():
    labels = default_labels()
    n = 40
    data = make_dataset(labels, n, False, DIMS, seed=5)
    for lab in labels:
        grids = [g for c, g in data if c == Label(lab.id)]
        emp = np.mean([np.sum(g ** 2) for g in grids])
        assert emp == pytest.approx(expected_energy(lab, DIMS), rel=0.05)


def test_expected_energy_monte_carlo_oracle():
    # 10x the dataset sample count, straight from the generator
    lab = default_labels()[2]
    emp = np.mean([np.sum(gen_source(lab, DIMS, s) ** 2) for s in range(400)])
    assert emp == pytest.approx(expected_energy(lab, DIMS), rel=0.02)


def test_envelope_range():
    lab = default_labels()[0]
    env = envelope(lab, 64, 0.3)
    assert env.min() >= 1 - lab.depth - 1e-12 and env.max() <= 1 + 1e-12


def test_clipped_harmonics_recorded():
    lab = SourceLabel(5, "high", fundamental=12, harmonics=3)
    notes = []
    g = gen_source(lab, (1, 4, 32), 0, warnings=notes)
    assert lab.harmonic_bins(32) == [12, 24]
    assert notes and "clipped" in notes[0]
    assert g.shape == (1, 4, 32)
    with pytest.raises(ValueError):
        gen_source(SourceLabel(6, "x", fundamental=40), (1, 4, 32), 0)


def test_mix_identities_and_loop_oracle():
    labs = default_labels()
    g1, g2 = gen_source(labs[0], DIMS, 1), gen_source(labs[1], DIMS, 2)
    assert np.array_equal(mix([g1]), g1)
    assert np.array_equal(mix([g1, np.zeros(DIMS)]), g1)
    m = mix([g1, g2])
    loop = np.empty(DIMS)
    for idx in itertools.product(*(range(d) for d in DIMS)):
        loop[idx] = g1[idx] + g2[idx]
    assert np.array_equal(m, loop)
    with pytest.raises(ValueError):
        mix([g1, np.zeros((1, 2, 3))])
    with pytest.raises(ValueError):
        mix([])


@given(st.lists(st.integers(0, 2**31), min_size=2, max_size=5), st.randoms(use_true_random=False))
@settings(max_examples=30, deadline=None)
def test_mix_permutation_property(seeds, rnd):
    labs = default_labels()
    grids = [gen_source(labs[i % 4], DIMS, s) for i, s in enumerate(seeds)]
    perm = grids[:]
    rnd.shuffle(perm)
    np.testing.assert_allclose(mix(perm), mix(grids), rtol=1e-9, atol=1e-12)


def test_scene_mixture_is_exact_sum():
    reg = LabelRegistry(default_labels())
    s = make_scene([reg[0], reg[2]], DIMS, seed=4, scene_id=3)
    assert np.array_equal(s.mixture, s.sources[0][1] + s.sources[1][1])
    assert s.label_ids == [0, 2]
    with pytest.raises(KeyError):
        s.source_for(1)


def test_make_scenes_prefix_stable():
    reg = LabelRegistry(default_labels())
    few = make_scenes(reg, 3, DIMS, seed=11)
    many = make_scenes(reg, 8, DIMS, seed=11)
    for a, b in zip(few, many):
        assert np.array_equal(a.mixture, b.mixture) and a.label_ids == b.label_ids
    # label pairs cycle through all unordered combinations
    assert {tuple(s.label_ids) for s in many[:6]} == set(itertools.combinations(range(4), 2))
    with pytest.raises(ValueError):
        make_scenes(reg, 0, DIMS, seed=1)


def test_dataset_counts_and_labels():
    labs = default_labels()[:2]
    assert len(make_dataset(labs, 1, False, DIMS, 0)) == 2
    data = make_dataset(labs, 1, True, DIMS, 0)
    assert len(data) == 3
    assert data[2][0] == Composite.of(0, 1)
    assert len(make_dataset(default_labels(), 2, True, DIMS, 0)) == 4 * 2 + 6 * 2
    with pytest.raises(ValueError):
        make_dataset([], 1, True, DIMS, 0)
    with pytest.raises(ValueError):
        make_dataset(labs, 0, True, DIMS, 0)


def test_dataset_deterministic():
    a = make_dataset(default_labels(), 3, True, DIMS, seed=2)
    b = make_dataset(default_labels(), 3, True, DIMS, seed=2)
    assert all(ca == cb and np.array_equal(ga, gb) for (ca, ga), (cb, gb) in zip(a, b))


def test_registry_rejects_duplicates():
    with pytest.raises(ValueError):
        LabelRegistry([SourceLabel(0, "a", 3), SourceLabel(0, "b", 4)])
