import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tactforge import gelsim, wrench


PARAMS = wrench.FoundationParams()


def test_params_validation():
    with pytest.raises(ValueError):
        wrench.FoundationParams(k=0.0)
    with pytest.raises(ValueError):
        wrench.FoundationParams(mu=2.0)


def test_wrench_array_roundtrip():
    w = wrench.Wrench(force=(1.0, 2.0, -3.0), torque=(0.1, -0.2, 0.3))
    assert np.array_equal(wrench.Wrench.from_array(w.as_array()).as_array(),
                          w.as_array())


# ---------------------------------------------------------------- quadrature

def test_zero_for_undeformed(small_geom):
    dm = gelsim.undeformed(small_geom)
    w = wrench.compute_wrench(dm, small_geom, PARAMS)
    assert np.all(w.as_array() == 0.0)


def test_central_contact_symmetry(small_geom):
    dm = gelsim.analytic_sphere_indent(small_geom, (0, 0, 19.0), 5.0)
    w = wrench.compute_wrench(dm, small_geom, PARAMS)
    fz = w.force[2]
    assert fz < 0
    for v in (w.force[0], w.force[1], *w.torque):
        assert abs(v) <= 1e-9 * abs(fz)


def test_mirror_contact_flips_fx(small_geom):
    a = gelsim.analytic_sphere_indent(small_geom, (4.0, 0.0, 17.5), 4.0)
    b = gelsim.analytic_sphere_indent(small_geom, (-4.0, 0.0, 17.5), 4.0)
    wa = wrench.compute_wrench(a, small_geom, PARAMS)
    wb = wrench.compute_wrench(b, small_geom, PARAMS)
    assert wa.force[0] == pytest.approx(-wb.force[0], rel=1e-9)
    assert wa.force[2] == pytest.approx(wb.force[2], rel=1e-9)


def test_linearity_in_stiffness(small_geom):
    dm = gelsim.analytic_sphere_indent(small_geom, (2.0, 1.0, 18.0), 5.0)
    w1 = wrench.compute_wrench(dm, small_geom, wrench.FoundationParams(k=0.01))
    w3 = wrench.compute_wrench(dm, small_geom, wrench.FoundationParams(k=0.03))
    # torque components of a frictionless Winkler field are ~1e-17 rounding
    # noise (position and traction are parallel), so an absolute floor is
    # needed alongside the exact relative check on the force components.
    assert np.allclose(w3.as_array(), 3.0 * w1.as_array(), rtol=1e-12, atol=1e-12)


def test_superposition_disjoint_contacts(small_geom):
    a = gelsim.analytic_sphere_indent(small_geom, (6.0, 0.0, 16.0), 3.0)
    b = gelsim.analytic_sphere_indent(small_geom, (-6.0, 0.0, 16.0), 3.0)
    both = gelsim.DepthMap(values=np.minimum(a.values, b.values))
    contact_a = a.values < 15.5
    contact_b = b.values < 15.5
    assert not np.any(contact_a & contact_b)  # genuinely disjoint
    wa = wrench.compute_wrench(a, small_geom, PARAMS).as_array()
    wb = wrench.compute_wrench(b, small_geom, PARAMS).as_array()
    wab = wrench.compute_wrench(both, small_geom, PARAMS).as_array()
    assert np.allclose(wab, wa + wb, atol=1e-12)


def test_grid_convergence():
    lo = gelsim.SensorGeometry(resolution=320)
    hi = gelsim.SensorGeometry(resolution=640)
    c, r = (1.0, -2.0, 18.0), 5.0
    w_lo = wrench.compute_wrench(gelsim.analytic_sphere_indent(lo, c, r), lo,
                                 PARAMS).as_array()
    w_hi = wrench.compute_wrench(gelsim.analytic_sphere_indent(hi, c, r), hi,
                                 PARAMS).as_array()
    scale = max(np.max(np.abs(w_hi)), 1e-12)
    assert np.max(np.abs(w_lo - w_hi)) / scale <= 0.01


def test_frame_rotation_consistency(small_geom):
    a = gelsim.analytic_sphere_indent(small_geom, (4.0, 0.0, 17.0), 4.0)
    b = gelsim.analytic_sphere_indent(small_geom, (0.0, 4.0, 17.0), 4.0)
    wa = wrench.compute_wrench(a, small_geom, PARAMS).as_array()
    wb = wrench.compute_wrench(b, small_geom, PARAMS).as_array()
    # 90 deg rotation about z: (Fx,Fy) -> (-Fy,Fx), same for torque
    rot = np.array([-wa[1], wa[0], wa[2], -wa[4], wa[3], wa[5]])
    scale = max(np.max(np.abs(wa)), 1e-12)
    assert np.max(np.abs(rot - wb)) / scale <= 0.02  # quadrature tolerance


def test_tangential_term(small_geom):
    dm = gelsim.analytic_sphere_indent(small_geom, (0, 0, 19.0), 5.0)
    p = wrench.FoundationParams(mu=0.5, tangential_dir=(1.0, 0.0, 0.0))
    w = wrench.compute_wrench(dm, small_geom, p)
    assert w.force[0] > 0  # friction drags along +x
    w0 = wrench.compute_wrench(dm, small_geom, PARAMS)
    assert w.force[2] == pytest.approx(w0.force[2], rel=1e-12)  # normal unchanged


def test_tuned_stiffness_midrange(small_geom):
    # 2 mm central indentation of a 10 mm sphere lands near mid Fz range
    dm = gelsim.analytic_sphere_indent(small_geom, (0, 0, 15.5 - 2.0 + 10.0), 10.0)
    w = wrench.compute_wrench(dm, small_geom, PARAMS)
    assert -8.0 < w.force[2] < -2.0


# ---------------------------------------------------------------- ranges

def test_ranges_validation():
    with pytest.raises(ValueError):
        wrench.WrenchRanges(ranges=(((0.0, 0.0),) * 6))


def test_normalize_endpoints():
    ranges = wrench.WrenchRanges(ranges=(
        (-1, 1), (-1, 1), (-11.0, 3.0), (-1, 1), (-1, 1), (-1, 1)))
    w = wrench.Wrench(force=(0, 0, -11.0), torque=(0, 0, 0))
    vec, _ = wrench.normalize(w, ranges)
    assert vec[2] == pytest.approx(0.0)
    w = wrench.Wrench(force=(0, 0, 3.0), torque=(0, 0, 0))
    vec, _ = wrench.normalize(w, ranges)
    assert vec[2] == pytest.approx(1.0)


def test_normalize_midrange():
    ranges = wrench.WrenchRanges(ranges=(((-2.0, 4.0),) * 6))
    w = wrench.Wrench(force=(1.0, 1.0, 1.0), torque=(1.0, 1.0, 1.0))
    vec, sat = wrench.normalize(w, ranges)
    assert np.allclose(vec, 0.5)
    assert sat == 0


def test_normalize_saturation_counter():
    ranges = wrench.WrenchRanges(ranges=(((0.0, 1.0),) * 6))
    w = wrench.Wrench(force=(2.0, 0.5, 0.5), torque=(0.5, 0.5, -1.0))
    vec, sat = wrench.normalize(w, ranges)
    assert sat == 2
    assert vec.min() >= 0.0 and vec.max() <= 1.0


@given(st.lists(st.floats(min_value=-10.9, max_value=2.9), min_size=6, max_size=6))
@settings(max_examples=50, deadline=None)
def test_normalize_roundtrip(vals):
    ranges = wrench.WrenchRanges(ranges=(((-11.0, 3.0),) * 6))
    w = wrench.Wrench(force=tuple(vals[:3]), torque=tuple(vals[3:]))
    vec, _ = wrench.normalize(w, ranges)
    back = wrench.denormalize(vec, ranges)
    assert np.allclose(back.as_array(), w.as_array(), atol=1e-12)


def test_ranges_from_samples_padding():
    samples = [np.array([0, 0, -5.0, 0, 0, 0]), np.array([1, 2, -1.0, 3, 4, 5])]
    ranges = wrench.WrenchRanges.from_samples(samples)
    lo, hi = ranges.as_arrays()
    assert np.all(lo < hi)
    assert lo[2] < -5.0  # padded beyond the observed extreme


def test_ranges_json_roundtrip():
    ranges = wrench.WrenchRanges(ranges=(((-11.0, 3.0),) * 6))
    back = wrench.WrenchRanges.from_json(ranges.to_json())
    assert back == ranges
