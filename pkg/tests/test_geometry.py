import pytest
from hypothesis import given
from hypothesis import strategies as st

from zoomrnn.errors import InputError
from zoomrnn.geometry import BBox, boxes_from_csv, boxes_to_csv, clamp_to_image, derive_regions

coord = st.floats(-1e4, 1e4, allow_nan=False)
size = st.floats(1e-3, 1e4, allow_nan=False)


def test_square_head():
    upper, whole = derive_regions(BBox(200, 300, 100, 100))
    assert upper.as_tuple() == (150, 300, 200, 400)
    assert whole.as_tuple() == (150, 300, 200, 700)


def test_non_square_head():
    upper, whole = derive_regions(BBox(10, 20, 50, 80))
    assert upper.as_tuple() == (-15, 20, 100, 200)
    assert whole.as_tuple() == (-15, 20, 100, 350)


def test_thin_head_uses_min_side():
    upper, _ = derive_regions(BBox(0, 0, 1, 1000))
    assert (upper.w, upper.h) == (2, 4)


def test_non_positive_head_rejected():
    with pytest.raises(InputError):
        BBox(0, 0, 0, 5)
    with pytest.raises(InputError):
        BBox(0, 0, 5, -1)


@given(coord, coord, size, size)
def test_derived_box_relations(lx, ly, w, h):
    upper, whole = derive_regions(BBox(lx, ly, w, h))
    assert (upper.l_x, upper.l_y) == (whole.l_x, whole.l_y)
    assert upper.w == whole.w == 2 * min(w, h)
    # 7/4 height ratio, stated without a rounding division
    assert 4 * whole.h == 7 * upper.h


@given(coord, coord, size, size, st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
def test_power_of_two_scaling_is_exact(lx, ly, w, h, s):
    u1, w1 = derive_regions(BBox(lx, ly, w, h))
    u2, w2 = derive_regions(BBox(lx * s, ly * s, w * s, h * s))
    assert u2.as_tuple() == tuple(v * s for v in u1.as_tuple())
    assert w2.as_tuple() == tuple(v * s for v in w1.as_tuple())


class TestClamp:
    def test_inside_unchanged(self):
        b = BBox(10, 10, 20, 30)
        assert clamp_to_image(b, 100, 100) == b

    def test_partial_overlap(self):
        # [-15, 85] x [20, 220] intersected with [0, 80] x [0, 80]
        out = clamp_to_image(BBox(-15, 20, 100, 200), 80, 80)
        assert out.as_tuple() == (0, 20, 80, 60)
        assert not out.flagged

    def test_entirely_left_is_flagged(self):
        out = clamp_to_image(BBox(-50, 30, 10, 10), 80, 80)
        assert out.flagged
        assert out.as_tuple() == (0, 30, 1, 1)

    def test_entirely_below(self):
        out = clamp_to_image(BBox(5, 500, 10, 10), 80, 60)
        assert out.flagged
        assert out.as_tuple() == (5, 59, 1, 1)

    @given(coord, coord, size, size, st.floats(1, 5000), st.floats(1, 5000))
    def test_always_within_image(self, lx, ly, w, h, iw, ih):
        out = clamp_to_image(BBox(lx, ly, w, h), iw, ih)
        assert 0 <= out.l_x and out.right <= iw
        assert 0 <= out.l_y and out.bottom <= ih


def test_csv_round_trip():
    upper, whole = derive_regions(BBox(10, 20, 50, 80))
    rows = [("s1", "upper", upper), ("s1", "whole", whole)]
    text = boxes_to_csv(rows)
    assert text.splitlines()[0] == "sample_id,region,l_x,l_y,w,h"
    assert text.splitlines()[1] == "s1,upper,-15,20,100,200"
    back = boxes_from_csv(text)
    assert [(s, r, b.as_tuple()) for s, r, b in back] == [(s, r, b.as_tuple()) for s, r, b in rows]
