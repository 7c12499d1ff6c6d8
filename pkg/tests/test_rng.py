"""Tests for keyed random streams."""

import numpy as np
import pytest

from carbseg.rng import stream


class TestStream:
    def test_same_key_same_draws(self):
        a = stream(3, "crop", "scene_0001", 7).random(5)
        b = stream(3, "crop", "scene_0001", 7).random(5)
        assert a.tolist() == b.tolist()

    @pytest.mark.parametrize("other", [
        (4, "crop", "scene_0001", 7),
        (3, "noise", "scene_0001", 7),
        (3, "crop", "scene_0002", 7),
        (3, "crop", "scene_0001", 8),
        (3, "crop", "scene_0001"),
    ])
    def test_any_key_change_gives_new_stream(self, other):
        base = stream(3, "crop", "scene_0001", 7).random(5)
        assert stream(*other).random(5).tolist() != base.tolist()

    def test_order_of_creation_is_irrelevant(self):
        first = [stream(0, "it", k).integers(0, 1000) for k in range(10)]
        second = [stream(0, "it", k).integers(0, 1000) for k in reversed(range(10))]
        assert first == second[::-1]

    def test_streams_look_independent(self):
        a = stream(0, "x", 1).standard_normal(20_000)
        b = stream(0, "x", 2).standard_normal(20_000)
        assert abs(float(np.corrcoef(a, b)[0, 1])) < 0.05

    def test_negative_seed(self):
        with pytest.raises(ValueError):
            stream(-1, "x")

    def test_negative_key(self):
        with pytest.raises(ValueError):
            stream(0, "x", -2)
