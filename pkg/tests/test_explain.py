import json

import numpy as np
import pytest
from PIL import Image

from scanet import archspec as A
from scanet import explain as E
from scanet.explain import SaliencyMap

from tasks import planted_run

SMALL = "input 3 32 32\nconv c1 out=4 k=3 s=2\nconv c2 out=4 k=3 s=2\nhead 3\n"


@pytest.fixture(scope="module")
def planted():
    return planted_run()


def _blind_network():
    net = A.build_network(A.parse_archspec(SMALL), seed=0)
    net.params()[0].data[...] = 0  # first conv ignores the input
    return net


def test_positions_shape_rule():
    for size, patch, stride in [(224, 32, 16), (224, 32, 8), (224, 30, 7), (32, 32, 4)]:
        pos = E.occlusion_positions(size, patch, stride)
        assert len(pos) == -(-(size - patch) // stride) + 1
        assert pos[0] == 0 and pos[-1] == size - patch


def test_grid_dimensions(rng):
    net = A.build_network(A.parse_archspec(SMALL), seed=0)
    sm = E.occlusion_saliency(net, rng.random((3, 32, 32)), 1, patch=10, stride=4)
    n = -(-(32 - 10) // 4) + 1
    assert sm.grid.shape == (n, n)
    assert sm.values.shape == (32, 32)
    assert sm.values.min() >= 0 and sm.values.max() == pytest.approx(1.0)


@pytest.mark.parametrize("baseline", ["mean", "edge"])
def test_input_ignoring_network_gives_constant_map(baseline, rng):
    sm = E.occlusion_saliency(_blind_network(), rng.random((3, 32, 32)), 1, 8, 4, baseline)
    assert np.var(sm.grid) < 1e-8
    assert np.all(sm.values == 0)


def test_invariant_to_non_target_relabeling(rng):
    net = A.build_network(A.parse_archspec(SMALL), seed=4)
    img = rng.random((3, 32, 32)).astype(np.float32)
    a = E.occlusion_saliency(net, img, 1, 8, 4)
    head_w, head_b = net.params()[-2], net.params()[-1]
    head_w.data = head_w.data[:, [2, 1, 0]].copy()
    head_b.data = head_b.data[[2, 1, 0]].copy()
    b = E.occlusion_saliency(net, img, 1, 8, 4)
    np.testing.assert_allclose(a.values, b.values, atol=1e-6)


def test_argument_validation(rng):
    net = A.build_network(A.parse_archspec(SMALL))
    img = rng.random((3, 32, 32))
    with pytest.raises(ValueError):
        E.occlusion_saliency(net, img, 1, patch=40)
    with pytest.raises(ValueError):
        E.occlusion_saliency(net, img, 1, patch=8, stride=0)
    with pytest.raises(ValueError):
        E.occlusion_saliency(net, img, 1, patch=8, baseline="black")
    with pytest.raises(TypeError):
        E.occlusion_saliency(object(), img, 1)


def test_edge_fill_is_ring_mean():
    img = np.zeros((3, 6, 6), dtype=np.float32)
    img[:, 0, :] = 1.0  # top row bright
    fill = E._fill_value(img, 1, 1, 2, "edge", np.zeros(3))
    # the 4x4 ring around a 2x2 patch at (1,1) has 12 cells, 4 of them on row 0
    np.testing.assert_allclose(fill, np.full(3, 4 / 12))


def test_normalize_constant_map():
    assert np.all(E.normalize_map(np.full((4, 4), 3.0)) == 0)
    m = E.normalize_map(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert m.min() == 0 and m.max() == 1


def test_planted_patch_is_found(planted):
    net, task = planted
    pos = np.flatnonzero(task.data.labels == 1)[:4]
    for i in pos:
        sm = E.occlusion_saliency(net, task.data.images[i], 1, 32, 16)
        peak = np.unravel_index(np.argmax(sm.values), sm.values.shape)
        assert task.masks[i][peak]
        assert E.iou(E.top_fraction_mask(sm.values), task.masks[i]) >= 0.3


def test_planted_audit_passes(planted):
    net, task = planted
    pos = np.flatnonzero(task.data.labels == 1)[:4]
    report, maps = E.audit(net, [task.data.images[i] for i in pos], border_mass_max=0.5,
                           top_region_min_overlap=0.3,
                           reference_masks=[task.masks[i] for i in pos])
    assert report.pass_rate == 1.0
    assert len(report.entries) == len(maps) == 4
    doc = json.loads(report.to_json())
    assert doc["rules"]["border_mass_max"] == 0.5 and len(doc["entries"]) == 4


def _map(values):
    return SaliencyMap(np.asarray(values, dtype=float), "test", 1)


def test_audit_rule_arithmetic():
    central = np.zeros((64, 64))
    central[24:40, 24:40] = 1.0
    border = np.zeros((64, 64))
    border[:16, :] = 1.0
    border[28:36, 28:36] = 1.0  # some central mass so border mass is < 1
    bm = E.border_mass(border)
    assert 0.5 < bm < 1.0
    rep = E.audit_maps([_map(central), _map(border)], border_mass_max=0.5)
    assert [e.passed for e in rep.entries] == [True, False]
    assert rep.entries[1].flags == ["border_mass"]
    assert rep.pass_rate == 0.5


def test_border_mass_example():
    m = np.zeros((100, 100))
    m[:16, :] = 0.8 / (16 * 100)
    m[50, 50] = 0.2
    assert E.border_mass(m) == pytest.approx(0.8)
    assert E.audit_maps([_map(m)], 0.5).entries[0].flags == ["border_mass"]


def test_audit_needs_images():
    with pytest.raises(ValueError):
        E.audit(_blind_network(), [])


def test_overlay_properties(tmp_path, rng):
    img = rng.random((3, 20, 30)).astype(np.float32)
    zero = _map(np.zeros((20, 30)))
    out = np.asarray(Image.open(E.overlay_export(img, zero, tmp_path / "z.png")))
    assert out.shape == (20, 30, 3)
    dim = np.round(E.dimmed_source(img) * 255).astype(np.uint8)
    np.testing.assert_array_equal(out[..., 0], dim)
    vals = np.zeros((20, 30))
    vals[5, 7] = 1.0
    lit = np.asarray(Image.open(E.overlay_export(img, _map(vals), tmp_path / "p.png")))
    assert lit[5, 7, 0] > dim[5, 7]
    with pytest.raises(OSError):
        E.overlay_export(img, zero, tmp_path / "missing" / "x.png")
    with pytest.raises(ValueError):
        E.overlay_export(img, _map(np.full((20, 30), 2.0)), tmp_path / "n.png")
