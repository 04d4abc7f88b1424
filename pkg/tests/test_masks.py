import pytest
from hypothesis import given
from hypothesis import strategies as st

from soe.errors import GeometryError
from soe.masks import GridRegion, RectMask, project_mask_to_grid, scale_mask


def test_scale_interior_box():
    m = RectMask(100, 100, 40, 40, 512, 512)
    assert scale_mask(m, 2) == RectMask(100, 100, 80, 80, 512, 512)


def test_scale_identity():
    m = RectMask(33, 70, 21, 17, 128, 128)
    assert scale_mask(m, 1) == m


def test_scale_shifts_at_edge():
    # box would be [-40, 80] wide; shifting right by 40 puts it at [0, 120]
    out = scale_mask(RectMask(20, 256, 40, 40, 512, 512), 3)
    assert (out.cx, out.cy, out.w, out.h) == (60, 256, 120, 120)
    assert out.x0 == 0


def test_scale_clamps_to_image():
    out = scale_mask(RectMask(50, 50, 60, 60, 100, 100), 3)
    assert (out.w, out.h, out.cx, out.cy) == (100, 100, 50, 50)


def test_scale_rejects_shrinking():
    with pytest.raises(GeometryError):
        scale_mask(RectMask(50, 50, 10, 10, 100, 100), 0.5)


@given(st.integers(1, 100), st.integers(1, 100), st.floats(0, 1), st.floats(0, 1),
       st.floats(1, 4), st.floats(0, 3))
def test_scale_monotone_area(w, h, fx, fy, s1, ds):
    m = RectMask(w / 2 + fx * (200 - w), h / 2 + fy * (150 - h), w, h, 200, 150)
    a, b = scale_mask(m, s1), scale_mask(m, s1 + ds)
    assert b.area >= a.area
    assert 0 <= b.x0 and b.x1 <= 200 and 0 <= b.y0 and b.y1 <= 150


def test_rectmask_must_fit():
    with pytest.raises(GeometryError):
        RectMask(5, 5, 20, 20, 100, 100)
    with pytest.raises(GeometryError):
        RectMask(50, 50, 0, 20, 100, 100)


def test_project_aligned_64_mask_to_single_cell():
    r = project_mask_to_grid(RectMask(288, 288, 64, 64, 512, 512), 8, 8)
    assert (r.r0, r.r1, r.c0, r.c1) == (4, 5, 4, 5)


def test_project_full_image():
    r = project_mask_to_grid(RectMask(256, 256, 512, 512, 512, 512), 8, 8)
    assert r.shape == (8, 8)


def test_project_straddling_mask_falls_back_to_center_cell():
    # each of the four touched cells is exactly 25% covered
    r = project_mask_to_grid(RectMask(256, 256, 64, 64, 512, 512), 8, 8)
    assert (r.r0, r.r1, r.c0, r.c1) == (4, 5, 4, 5)


@given(st.sampled_from([8, 16, 32, 64]), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 7), st.integers(0, 7))
def test_project_aligned_multiples(grid, kw, kh, c0, r0):
    cell = 512 // grid
    c0, r0 = min(c0, grid - kw), min(r0, grid - kh)
    m = RectMask.from_xywh(c0 * cell, r0 * cell, kw * cell, kh * cell, 512, 512)
    r = project_mask_to_grid(m, grid, grid)
    assert r.shape == (kh, kw) and (r.r0, r.c0) == (r0, c0)


def test_grid_region_validates():
    with pytest.raises(GeometryError):
        GridRegion(4, 4, 2, 2, 0, 1)
