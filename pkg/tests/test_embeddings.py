import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from denkf.embeddings import EmbeddingConfig, embed_frequency, embed_placement, sinusoid_embed
from denkf.errors import InvalidArgumentError
from denkf.simulator import CANONICAL_PLACEMENTS
from denkf.types import PlacementSet, SamplingFrequency


def test_config_validation():
    for bad in (dict(d_model=7), dict(d_model=0), dict(base=1.0)):
        with pytest.raises(InvalidArgumentError):
            EmbeddingConfig(**bad)


def test_position_zero():
    e = sinusoid_embed(0)
    assert np.array_equal(e, np.tile([0.0, 1.0], 32))


def test_known_values():
    # frozen from math.sin / math.cos evaluated independently
    assert sinusoid_embed(5)[0] == pytest.approx(-0.9589242746631385, abs=1e-15)
    assert sinusoid_embed(1)[2] == pytest.approx(0.6815613503552693, abs=1e-15)
    assert sinusoid_embed(3)[5] == pytest.approx(-0.11596614150993839, abs=1e-15)


@given(st.integers(0, 10_000), st.sampled_from([2, 8, 64, 128]))
def test_pythagorean_pairs_and_range(pos, d):
    e = sinusoid_embed(pos, EmbeddingConfig(d))
    assert np.all(np.abs(e[0::2] ** 2 + e[1::2] ** 2 - 1) < 1e-12)
    assert np.all(np.abs(e) <= 1)


def test_vectorized_matches_scalar():
    batch = sinusoid_embed(np.array([[1, 2], [3, 4]]))
    assert batch.shape == (2, 2, 64)
    assert np.array_equal(batch[1, 0], sinusoid_embed(3))


def test_negative_position_rejected():
    with pytest.raises(InvalidArgumentError):
        sinusoid_embed(-1)


@pytest.mark.parametrize("d", [8, 16, 64])
def test_injective_over_locations(d):
    rows = sinusoid_embed(np.arange(21), EmbeddingConfig(d))
    dists = np.linalg.norm(rows[:, None] - rows[None], axis=-1)
    assert np.all(dists[~np.eye(21, dtype=bool)] > 1e-6)


def test_placement_rows_distinct():
    e = embed_placement(PlacementSet((1, 5, 9, 14, 18)))
    assert e.shape == (5, 64)
    for i, j in itertools.combinations(range(5), 2):
        assert np.linalg.norm(e[i] - e[j]) > 0


def test_placement_rows_follow_labels():
    a = embed_placement(PlacementSet((1, 5, 9, 14, 18)))
    b = embed_placement(PlacementSet((1, 5, 9, 15, 18)))
    differs = [not np.array_equal(a[i], b[i]) for i in range(5)]
    assert differs == [False, False, False, True, False]
    assert np.array_equal(b[3], sinusoid_embed(15))


def test_canonical_embeddings_pairwise_distinct():
    flat = [embed_placement(z).ravel() for z in CANONICAL_PLACEMENTS.values()]
    assert len(flat) == 10
    for a, b in itertools.combinations(flat, 2):
        assert not np.allclose(a, b)


def test_frequency_embedding_uses_ordinal():
    assert np.array_equal(embed_frequency(SamplingFrequency.HZ5), sinusoid_embed(0))
    assert np.array_equal(embed_frequency(50), sinusoid_embed(3))
    vecs = [embed_frequency(f) for f in SamplingFrequency]
    for a, b in itertools.combinations(vecs, 2):
        assert not np.allclose(a, b)
    assert np.array_equal(embed_frequency(30), embed_frequency(30))
