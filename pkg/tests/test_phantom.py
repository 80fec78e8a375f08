import math

import numpy as np
import pytest

from volseg.phantom import PhantomSpec, generate_phantoms, write_phantom_dir
from volseg.volume import bounding_box


def test_same_spec_is_bitwise_identical():
    spec = PhantomSpec(count=2, seed=9)
    for (v1, l1, r1), (v2, l2, r2) in zip(generate_phantoms(spec), generate_phantoms(spec)):
        assert v1.data.tobytes() == v2.data.tobytes()
        assert l1.data.tobytes() == l2.data.tobytes() and r1.data.tobytes() == r2.data.tobytes()


def test_samples_depend_on_index_not_count():
    a = generate_phantoms(PhantomSpec(count=3, seed=4))
    b = generate_phantoms(PhantomSpec(count=1, seed=4))
    assert a[0][0].data.tobytes() == b[0][0].data.tobytes()
    assert a[0][0].data.tobytes() != a[1][0].data.tobytes()


def test_noise_free_volume_is_two_valued():
    v, left, right = generate_phantoms(PhantomSpec(noise_std=0.0, foreground_mean=3.0, background_mean=1.0))[0]
    assert set(np.unique(v.data)) == {1.0, 3.0}
    assert np.array_equal(v.data == 3.0, (left.data | right.data).astype(bool))


def test_ellipsoid_voxel_count_near_analytic():
    spec = PhantomSpec(semi_axis_min=(6, 4, 4), semi_axis_max=(6, 4, 4), center_jitter=0.0)
    _, left, right = generate_phantoms(spec)[0]
    analytic = 4 / 3 * math.pi * 6 * 4 * 4
    for m in (left, right):
        assert abs(m.count() - analytic) / analytic < 0.05


def test_masks_disjoint_nonempty_and_contrast():
    spec = PhantomSpec(count=20, seed=2)
    for v, left, right in generate_phantoms(spec):
        assert not np.any(left.data & right.data)
        assert left.count() > 0 and right.count() > 0
        bounding_box(left), bounding_box(right)
        fg = v.data[(left.data | right.data).astype(bool)].mean()
        bg = v.data[~(left.data | right.data).astype(bool)].mean()
        assert fg - bg >= (spec.foreground_mean - spec.background_mean) - 3 * spec.noise_std


@pytest.mark.parametrize("kw", [dict(semi_axis_min=(1, 4, 4)), dict(size=12), dict(semi_axis_max=(9, 7, 7)),
                                dict(semi_axis_min=(7, 7, 7), semi_axis_max=(6, 6, 6))])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


def test_write_phantom_dir(tmp_path):
    write_phantom_dir(PhantomSpec(count=2, seed=1), tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["0_maskL.srv", "0_maskR.srv", "0_vol.srv", "1_maskL.srv", "1_maskR.srv", "1_vol.srv",
                     "manifest.json"]
