import numpy as np
import pytest

from pathsmooth.rng import MAX_SEED, map_repetitions, stream


def test_same_key_same_stream():
    a = stream(11, "neff", 3).standard_normal(5)
    b = stream(11, "neff", 3).standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_keys_separate_streams():
    base = stream(11, "neff", 3).standard_normal(5)
    for other in (stream(12, "neff", 3), stream(11, "clt", 3), stream(11, "neff", 4), stream(11, "neff")):
        assert not np.array_equal(base, other.standard_normal(5))


def test_seed_range():
    stream(MAX_SEED)
    with pytest.raises(ValueError):
        stream(-1)
    with pytest.raises(ValueError):
        stream(MAX_SEED + 1)
    with pytest.raises(ValueError):
        stream(0, -2)


def test_map_repetitions_keeps_order_across_threads():
    def draw(r):
        return float(stream(5, "rep", r).random())

    serial = map_repetitions(draw, 16, threads=1)
    threaded = map_repetitions(draw, 16, threads=4)
    assert serial == threaded
    assert len(set(serial)) == 16
