import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from keylock.blockshuffle import (ShuffleConfig, block_vector_index, position_change_fraction,
                                  read_ppm, shuffle_batch, shuffle_image, shuffle_reference,
                                  unshuffle_batch, unshuffle_image, write_ppm)
from keylock.keycore import Permutation, SecretKey, derive_permutation, generate_key, invert


def blocks(x, m):
    """Every block of a (c, h, w) image as a flat vector, in block_vector_index order."""
    c, h, w = x.shape
    out = {}
    for bi in range(h // m):
        for bj in range(w // m):
            out[bi, bj] = x[:, bi * m:(bi + 1) * m, bj * m:(bj + 1) * m].reshape(-1)
    return out


def test_block_vector_index_examples():
    assert block_vector_index(0, 0, 0, 2) == 0
    assert block_vector_index(0, 0, 1, 2) == 1
    assert block_vector_index(1, 0, 0, 2) == 4


def test_block_vector_index_bijective():
    m, c = 4, 3
    seen = {block_vector_index(ch, r, k, m, c) for ch in range(c) for r in range(m) for k in range(m)}
    assert seen == set(range(c * m * m))


@pytest.mark.parametrize("coords", [(0, 2, 0), (0, 0, -1), (3, 0, 0)])
def test_block_vector_index_out_of_range(coords):
    with pytest.raises(IndexError):
        block_vector_index(*coords, 2, channels=3)


def test_identity_permutation_is_noop(rng):
    x = rng.random((3, 32, 32))
    cfg = ShuffleConfig(4)
    assert np.array_equal(shuffle_image(x, cfg, Permutation.identity(48)), x)


def test_hand_computed_single_block():
    a, b, d, e = 0.1, 0.2, 0.3, 0.4
    x = np.array([[[a, b], [d, e]]])
    y = shuffle_image(x, ShuffleConfig(2, 1), Permutation([3, 2, 1, 0]))
    assert np.array_equal(y, np.array([[[e, d], [b, a]]]))


@pytest.mark.parametrize("m", [2, 4, 8])
def test_matches_loop_reference(rng, m):
    x = rng.random((3, 32, 32))
    cfg = ShuffleConfig(m)
    p = derive_permutation(SecretKey(rng.bytes(32)), cfg.vector_length)
    assert np.array_equal(shuffle_image(x, cfg, p), shuffle_reference(x, cfg, p))


def test_input_not_modified(rng):
    x = rng.random((3, 32, 32))
    before = x.copy()
    shuffle_image(x, ShuffleConfig(4), derive_permutation(generate_key(0), 48))
    assert np.array_equal(x, before)


@pytest.mark.parametrize("m", [2, 4, 8])
def test_round_trip(rng, m):
    cfg = ShuffleConfig(m)
    p = derive_permutation(generate_key(m), cfg.vector_length)
    xs = rng.random((100, 3, 32, 32)).astype(np.float32)
    for x in xs:
        assert np.array_equal(unshuffle_image(shuffle_image(x, cfg, p), cfg, p), x)
    assert np.array_equal(unshuffle_batch(shuffle_batch(xs, cfg, p), cfg, p), xs)


def test_unshuffle_equals_shuffle_with_inverse(rng):
    x = rng.random((3, 32, 32))
    cfg = ShuffleConfig(4)
    p = derive_permutation(generate_key(1), 48)
    assert np.array_equal(unshuffle_image(x, cfg, p), shuffle_image(x, cfg, invert(p)))


def test_errors(rng):
    x = rng.random((3, 32, 32))
    with pytest.raises(ValueError, match="block size does not divide image"):
        shuffle_image(x, ShuffleConfig(5), Permutation.identity(75))
    with pytest.raises(ValueError, match="permutation length mismatch"):
        shuffle_image(x, ShuffleConfig(4), Permutation.identity(12))
    with pytest.raises(ValueError):
        shuffle_image(x * 2, ShuffleConfig(4), Permutation.identity(48))


def test_batch_examples(rng):
    cfg = ShuffleConfig(4)
    p = derive_permutation(generate_key(4), 48)
    assert len(shuffle_batch([], cfg, p)) == 0
    x = rng.random((3, 32, 32))
    assert np.array_equal(shuffle_batch([x], cfg, p)[0], shuffle_image(x, cfg, p))
    batch = rng.random((128, 3, 32, 32))
    out = shuffle_batch(batch, cfg, p)
    for i in range(128):
        assert np.array_equal(out[i], shuffle_image(batch[i], cfg, p))


def test_batch_rejects_mixed_shapes(rng):
    with pytest.raises(ValueError, match="heterogeneous"):
        shuffle_batch([rng.random((3, 32, 32)), rng.random((3, 16, 16))],
                      ShuffleConfig(4), Permutation.identity(48))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 3), st.binary(min_size=32, max_size=32),
       st.integers(0, 2**32 - 1))
def test_value_preserving_and_block_local(m, c, key, seed):
    x = np.random.default_rng(seed).random((c, 16, 16))
    cfg = ShuffleConfig(m, c)
    p = derive_permutation(SecretKey(key), cfg.vector_length)
    y = shuffle_image(x, cfg, p)
    assert np.array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
    bx, by = blocks(x, m), blocks(y, m)
    for ij in bx:
        assert np.array_equal(np.sort(bx[ij]), np.sort(by[ij]))
        assert np.array_equal(by[ij], bx[ij][p.map])


def test_same_permutation_for_every_block(rng):
    # distinct values let us read the index mapping back out of each block
    cfg = ShuffleConfig(4)
    x = rng.permutation(3 * 32 * 32).reshape(3, 32, 32) / (3 * 32 * 32)
    p = derive_permutation(generate_key(12), 48)
    y = shuffle_image(x, cfg, p)
    bx, by = blocks(x, 4), blocks(y, 4)
    mappings = set()
    for ij in bx:
        where = {v: k for k, v in enumerate(bx[ij])}
        mappings.add(tuple(where[v] for v in by[ij]))
    assert mappings == {tuple(p.map.tolist())}


def test_oracle_equivalence_many_instances():
    rng = np.random.default_rng(5)
    for t in range(200):
        m = [2, 4, 8][t % 3]
        cfg = ShuffleConfig(m)
        x = rng.random((3, 16, 16))
        p = derive_permutation(SecretKey(rng.bytes(32)), cfg.vector_length)
        assert np.array_equal(shuffle_image(x, cfg, p), shuffle_reference(x, cfg, p))


def test_avalanche_report():
    rng = np.random.default_rng(8)
    fracs = []
    for _ in range(50):
        k = SecretKey(rng.bytes(32))
        k2 = k.flip_bit(int(rng.integers(256)))
        fracs.append(position_change_fraction(derive_permutation(k, 48), derive_permutation(k2, 48),
                                               (3, 32, 32), 4))
    print(f"one-bit key change moves {np.mean(fracs):.3f} of pixel positions (M=4)")
    assert 0.0 <= np.mean(fracs) <= 1.0


def test_ppm_round_trip(tmp_path, rng):
    x = rng.integers(0, 256, size=(3, 8, 16)) / 255.0
    path = tmp_path / "a.ppm"
    write_ppm(path, x)
    assert path.read_bytes().startswith(b"P6\n16 8\n255\n")
    assert np.array_equal(read_ppm(path), x)
    g = rng.integers(0, 256, size=(1, 4, 4)) / 255.0
    write_ppm(tmp_path / "g.pgm", g)
    assert np.array_equal(read_ppm(tmp_path / "g.pgm"), g)


def test_ppm_rounds_half_to_even(tmp_path):
    x = np.full((3, 1, 2), 0.5)  # 127.5 -> 128 (even)
    write_ppm(tmp_path / "h.ppm", x)
    assert set(open(tmp_path / "h.ppm", "rb").read()[-6:]) == {128}
