import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from _gradcheck import directional_error, single_precision_error
from skytomo.errors import ConfigError
from skytomo.geometry import GridSpec, HeightSweep, Rig, default_rig, pixel_to_plane, project
from skytomo.features import (FeatureVolume, HeightConditioning, ImageEncoder, LiftPlan,
                              condition_on_height, encode_image, flatten_volume, height_embedding,
                              lift_features, unflatten_volume)

SPEC = GridSpec(dims=(16, 16, 16), voxel_size=(100.0, 100.0, 100.0))
SWEEP = HeightSweep((500.0, 900.0, 1300.0))


@pytest.fixture(scope="module")
def rig():
    return default_rig(SPEC, width=24, height=20)


@pytest.fixture(scope="module")
def plan(rig):
    return LiftPlan.build(rig, SWEEP, SPEC)


def _bilinear(img, u, v):
    """Independent bilinear oracle on a (C, H, W) array; u is the column coordinate."""
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    fu, fv = u - u0, v - v0
    out = 0.0
    for du, dv, w in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)),
                      (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = min(u0 + du, img.shape[2] - 1), min(v0 + dv, img.shape[1] - 1)
        out = out + w * img[:, vv, uu]
    return out


def test_encoder_shape_and_purity():
    enc = ImageEncoder(d_f=16, hidden=8)
    img = np.random.default_rng(0).random((20, 24, 3)).astype(np.float32)
    a, b = encode_image(enc, img), encode_image(enc, img.copy())
    assert a.shape == (16, 20, 24)
    assert torch.equal(a, b)


def test_encoder_channel_mismatch():
    enc = ImageEncoder()
    with pytest.raises(ConfigError):
        encode_image(enc, torch.zeros(4, 8, 8))


def _encoder_case(seed):
    torch.manual_seed(seed)
    enc = ImageEncoder(d_f=4, hidden=6)
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    w = torch.randn(4, 16, 16, dtype=torch.float64)
    return enc, lambda m, dt: (m(x.to(dt))[0].double() * w).sum()


@pytest.mark.parametrize("seed", [0, 1])
def test_encoder_gradient_single(seed):
    enc, f = _encoder_case(seed)
    assert single_precision_error(enc, f, seed=seed) < 1e-3


def test_encoder_gradient_double():
    enc, f = _encoder_case(2)
    enc = enc.double()
    assert directional_error(lambda: f(enc, torch.float64), enc.parameters(), 1e-6) < 1e-5


def test_single_view_lift_matches_projection_oracle(rig, plan):
    feats = torch.rand(1, 5, 20, 24)
    vol = lift_features([feats[0]], LiftPlan([plan.grids[2]], [plan.masks[2]], plan.heights, SPEC),
                        views=[0])
    cam = rig[2]
    img = feats[0].numpy()
    cols = SPEC.column_centers()
    checked = 0
    for k, h in enumerate(SWEEP.heights):
        for ix in range(0, 16, 3):
            for iy in range(0, 16, 3):
                x, y = cols[ix, iy]
                u, v = project(cam, (x, y, h))
                if 0 <= u <= 23 and 0 <= v <= 19:
                    np.testing.assert_allclose(vol.values[k, :, ix, iy].numpy(),
                                               _bilinear(img, u, v), atol=1e-5)
                    assert vol.hits[k, ix, iy] == 1
                    checked += 1
                else:
                    assert vol.hits[k, ix, iy] == 0
                    assert not vol.values[k, :, ix, iy].any()
    assert checked > 10


def test_constant_features_average_to_constant(plan):
    c = 0.37
    feats = [torch.full((3, 20, 24), c), torch.full((3, 20, 24), c)]
    vol = lift_features(feats, plan, views=[0, 3])
    hit = vol.hits > 0
    assert hit.any()
    vals = vol.values.permute(0, 2, 3, 1)[hit]
    np.testing.assert_allclose(vals.numpy(), c, rtol=1e-6)


def test_painted_pixel_lands_on_its_cells(rig, plan):
    cam, k, (ix, iy) = rig[0], 1, (7, 9)
    x, y = SPEC.column_centers()[ix, iy]
    h = SWEEP.heights[k]
    u, v = project(cam, (x, y, h))
    np.testing.assert_allclose(pixel_to_plane(cam, (u, v), h), (x, y), atol=1e-6)
    img = torch.zeros(1, 20, 24)
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    img[0, v0:v0 + 2, u0:u0 + 2] = 1.0
    vol = lift_features([img], LiftPlan([plan.grids[0]], [plan.masks[0]], plan.heights, SPEC), [0])
    assert float(vol.values[k, 0, ix, iy]) == pytest.approx(1.0, abs=1e-6)
    # cells projecting far from the painted block stay dark
    lit = vol.values[k, 0] > 0
    for jx, jy in zip(*np.nonzero(lit.numpy())):
        uu, vv = project(cam, (*SPEC.column_centers()[jx, jy], h))
        assert abs(uu - u) < 2 and abs(vv - v) < 2


def test_lift_view_permutation_invariant(plan):
    feats = [torch.rand(4, 20, 24) for _ in range(6)]
    a = lift_features(feats, plan)
    perm = [3, 0, 5, 1, 4, 2]
    sub = LiftPlan([plan.grids[i] for i in perm], [plan.masks[i] for i in perm], plan.heights, SPEC)
    b = lift_features([feats[i] for i in perm], sub)
    torch.testing.assert_close(a.values, b.values, rtol=1e-6, atol=1e-6)
    assert torch.equal(a.hits, b.hits)


@given(st.integers(0, 5))
def test_dropping_a_view_leaves_unseen_cells(plan, drop):
    gen = torch.Generator().manual_seed(drop)
    feats = [torch.rand(4, 20, 24, generator=gen) for _ in range(6)]
    full = lift_features(feats, plan)
    keep = [i for i in range(6) if i != drop]
    part = lift_features([feats[i] for i in keep], plan, views=keep)
    unseen = ~plan.masks[drop].reshape(len(SWEEP.heights), 16, 16)
    torch.testing.assert_close(part.values.permute(0, 2, 3, 1)[unseen],
                               full.values.permute(0, 2, 3, 1)[unseen], rtol=1e-6, atol=1e-7)


def test_unhit_cells_are_zero(plan):
    vol = lift_features([torch.rand(4, 20, 24) for _ in range(6)], plan)
    miss = vol.hits == 0
    assert torch.all(vol.values.permute(0, 2, 3, 1)[miss] == 0)
    assert torch.isfinite(vol.values).all()


def test_empty_volume_warns():
    spec = GridSpec(dims=(4, 4, 4))
    far = default_rig(GridSpec(origin=(1e6, 1e6, 0), dims=(4, 4, 4)), width=8, height=8)
    plan = LiftPlan.build(far, HeightSweep((50.0,)), spec)
    with pytest.warns(RuntimeWarning):
        vol = lift_features([torch.rand(2, 8, 8) for _ in range(6)], plan)
    assert not vol.hits.any()


def test_adaln_identity_is_layer_norm():
    cond = HeightConditioning(d_f=6)
    vals = torch.randn(3, 6, 5, 5)
    hits = torch.ones(3, 5, 5)
    out = cond(FeatureVolume(vals, hits), SWEEP.heights).values
    x = vals.permute(0, 2, 3, 1)
    ref = (x - x.mean(-1, keepdim=True)) / torch.sqrt(x.var(-1, unbiased=False, keepdim=True) + 1e-6)
    torch.testing.assert_close(out.permute(0, 2, 3, 1), ref, rtol=1e-5, atol=1e-5)
    gamma, delta = cond.modulation(SWEEP.heights)
    assert torch.all(gamma == 1) and torch.all(delta == 0)


def test_adaln_equal_heights_equal_modulation():
    torch.manual_seed(1)
    cond = HeightConditioning(d_f=4)
    torch.nn.init.normal_(cond.mlp[-1].weight)
    gamma, delta = cond.modulation([700.0, 1500.0, 700.0])
    assert torch.equal(gamma[0], gamma[2]) and torch.equal(delta[0], delta[2])
    assert not torch.equal(gamma[0], gamma[1])


def _adaln_case(seed):
    torch.manual_seed(seed)
    cond = HeightConditioning(d_f=4, embed_dim=8, hidden=8)
    torch.nn.init.normal_(cond.mlp[-1].weight, std=0.3)
    vals = torch.randn(3, 4, 4, 4, dtype=torch.float64)
    hits = torch.ones(3, 4, 4, dtype=torch.float64)
    w = torch.randn(3, 4, 4, 4, dtype=torch.float64)

    def f(m, dt):
        vol = FeatureVolume(vals.to(dt), hits.to(dt))
        return (m(vol, SWEEP.heights).values.double() * w).sum()
    return cond, f


@pytest.mark.parametrize("seed", [0, 1])
def test_adaln_gradient_single(seed):
    cond, f = _adaln_case(seed)
    assert single_precision_error(cond, f, seed=seed) < 1e-3


def test_adaln_gradient_double():
    cond, f = _adaln_case(2)
    cond = cond.double()
    assert directional_error(lambda: f(cond, torch.float64), cond.parameters(), 1e-6) < 1e-5


def test_height_embedding_distinguishes_planes():
    e = height_embedding(HeightSweep().heights, 32)
    assert e.shape == (18, 32)
    assert torch.cdist(e, e).fill_diagonal_(1.0).min() > 1e-3


def test_condition_on_height_checks_plane_count():
    cond = HeightConditioning(d_f=2)
    with pytest.raises(ConfigError):
        condition_on_height(FeatureVolume(torch.zeros(2, 2, 3, 3), torch.ones(2, 3, 3)), SWEEP, cond)


def test_flatten_round_trip_and_channels():
    v = torch.randn(18, 16, 7, 5)
    flat = flatten_volume(v)
    assert flat.shape == (288, 7, 5)
    assert torch.equal(unflatten_volume(flat, 18), v)
    one = torch.randn(1, 16, 7, 5)
    assert torch.equal(flatten_volume(one), one[0])
