import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import griddata
from scipy.ndimage import map_coordinates

from artspot.arm import (
    ArmExtract,
    BilinearSample,
    TpsGrid,
    arm_extract,
    bilinear_sample,
    build_tps_basis,
    destination_sites,
    gen_grid,
    image_to_level,
    rectify_image,
    select_level,
)
from artspot.checks import _Chain
from artspot.errors import DomainError, ShapeError, SingularSystemError
from artspot.geometry import CubicBezier, bezier_eval
from artspot.nn.gradcheck import grad_check

BASIS = build_tps_basis(4, (8, 32))


def box_points(x0, y0, x1, y1, n):
    xs = np.linspace(x0, x1, n)
    return np.concatenate([np.stack([xs, np.full(n, y0)], 1), np.stack([xs, np.full(n, y1)], 1)])


def test_basis_rows_sum_to_one():
    for n, size in ((3, (2, 2)), (4, (8, 32)), (8, (8, 32)), (6, (5, 17))):
        b = build_tps_basis(n, size)
        assert b.matrix.shape == (size[0] * size[1], 2 * n)
        assert np.max(np.abs(b.matrix.sum(1) - 1.0)) <= 1e-12


@pytest.mark.parametrize("n,size", [(8, (8, 29)), (4, (8, 31)), (3, (2, 5))])
def test_basis_unit_rows_at_sites(n, size):
    # widths chosen so every destination site falls on an output pixel
    b = build_tps_basis(n, size)
    w = size[1]
    for k, (x, y) in enumerate(b.sites):
        assert float(x).is_integer()
        np.testing.assert_allclose(b.matrix[int(y) * w + int(x)], np.eye(2 * n)[k], atol=1e-9)


def test_large_basis_well_conditioned():
    b = build_tps_basis(8, (96, 384))
    assert np.max(np.abs(b.matrix.sum(1) - 1.0)) <= 1e-12


def test_identity_grid():
    grid = gen_grid(BASIS, destination_sites(4, (8, 32)))
    ys, xs = np.mgrid[0:8, 0:32]
    assert np.max(np.abs(grid - np.stack([xs, ys], -1))) <= 1e-9


def test_basis_errors():
    with pytest.raises(SingularSystemError):
        build_tps_basis(4, (1, 32))
    with pytest.raises(DomainError):
        build_tps_basis(2, (8, 32))


def _dense_basis(n):
    """A basis whose output grid contains every destination site (integer x)."""
    return build_tps_basis(n, (4, 3 * (n - 1) + 1))


@pytest.mark.parametrize("trial", range(100))
def test_interpolates_any_points(trial):
    rng = np.random.default_rng(trial)
    n = int(rng.integers(3, 9))
    b = _dense_basis(n)
    pts = rng.uniform(-50, 150, size=(2 * n, 2))
    grid = gen_grid(b, pts)
    for k, (x, y) in enumerate(b.sites):
        assert np.max(np.abs(grid[int(y), int(x)] - pts[k])) <= 1e-9


def test_affine_reproduction_and_translation():
    sites = destination_sites(4, (8, 32))
    sx, sy, tx, ty = 2.5, 1.5, 7.0, -4.0
    grid = gen_grid(BASIS, sites * [sx, sy] + [tx, ty])
    ys, xs = np.mgrid[0:8, 0:32]
    np.testing.assert_allclose(grid, np.stack([xs * sx + tx, ys * sy + ty], -1), atol=1e-9)
    pts = np.random.default_rng(0).normal(size=(8, 2)) * 20
    np.testing.assert_allclose(gen_grid(BASIS, pts + [5, -3]), gen_grid(BASIS, pts) + [5, -3], atol=1e-9)


@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_affine_combination(seed, a):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(2, 8, 2)) * 30
    lhs = gen_grid(BASIS, a * p + (1 - a) * q)
    rhs = a * gen_grid(BASIS, p) + (1 - a) * gen_grid(BASIS, q)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_gen_grid_shape_error():
    with pytest.raises(ShapeError):
        gen_grid(BASIS, np.zeros((6, 2)))


def test_grid_gradient_is_transpose(rng):
    g = rng.standard_normal((8, 32, 2))
    (gp,) = TpsGrid(BASIS).backward(g)
    np.testing.assert_allclose(gp, BASIS.matrix.T @ g.reshape(-1, 2), atol=1e-12)
    assert grad_check(TpsGrid(BASIS), [rng.standard_normal((8, 2)) * 10]) <= 1e-6


def test_bilinear_examples():
    f = np.array([[[2.0, 4.0], [6.0, 8.0]]])
    assert bilinear_sample(f, np.array([[0.5, 0.0]]))[0, 0] == pytest.approx(3.0)
    feats = np.random.default_rng(0).standard_normal((3, 5, 6))
    ix = np.array([[0, 0], [5, 4], [2, 3]], dtype=float)
    out = bilinear_sample(feats, ix)
    for j, (x, y) in enumerate(ix.astype(int)):
        np.testing.assert_array_equal(out[:, j], feats[:, y, x])


def test_bilinear_matches_scipy_with_zero_border(rng):
    feats = rng.standard_normal((2, 6, 9))
    pts = rng.uniform(-1.5, 10.0, size=(40, 2))
    out = bilinear_sample(feats, pts)
    for c in range(2):
        ref = map_coordinates(feats[c], [pts[:, 1], pts[:, 0]], order=1, mode="grid-constant", cval=0.0)
        np.testing.assert_allclose(out[c], ref, atol=1e-12)


def _off_lattice(rng, shape, lo, hi, margin=0.01):
    return rng.integers(lo, hi, size=shape) + rng.uniform(margin, 1 - margin, size=shape)


class _Fixed:
    def __init__(self, op, other, which):
        self.op, self.other, self.which = op, other, which

    def forward(self, x):
        args = (x, self.other) if self.which == 0 else (self.other, x)
        return self.op.forward(*args)

    def backward(self, g):
        return (self.op.backward(g)[self.which],)


def test_bilinear_grad_checks(rng):
    feats = rng.standard_normal((3, 6, 7))
    grid = np.stack([_off_lattice(rng, (4, 5), -1, 7), _off_lattice(rng, (4, 5), -1, 6)], -1)
    assert grad_check(_Fixed(BilinearSample(), grid, 0), [feats]) <= 1e-4
    assert grad_check(_Fixed(BilinearSample(), feats, 1), [grid]) <= 1e-4


def test_identity_rectification_matches_resize(rng):
    feat = rng.standard_normal((4, 20, 40))
    # crop spanning feature coords x in [3.2, 30.7], y in [2.4, 11.9]
    fx0, fy0, fx1, fy1 = 3.2, 2.4, 30.7, 11.9
    pts = (box_points(fx0, fy0, fx1, fy1, 4) + 0.5) * 4  # image pixels at stride 4
    (crop,) = arm_extract([feat], [pts], BASIS, strides=[4])
    ys = np.linspace(fy0, fy1, 8)
    xs = np.linspace(fx0, fx1, 32)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    for c in range(4):
        ref = map_coordinates(feat[c], [yy, xx], order=1)
        assert np.max(np.abs(crop[c] - ref)) <= 1e-6


def test_arm_extract_properties(rng):
    feat = rng.standard_normal((2, 16, 32))
    pts = (box_points(2, 2, 20, 8, 4) + 0.5) * 4
    assert arm_extract([feat], [], BASIS) == []
    a, b = arm_extract([feat], [pts, pts.copy()], BASIS, strides=[4])
    np.testing.assert_array_equal(a, b)

    op = ArmExtract(BASIS, [4])
    p = pts[None] + rng.uniform(0.1, 0.4, size=(1, 8, 2))
    base = op.forward([feat], p).sum()
    _, gp = op.backward(np.ones((1, 2, 8, 32)))
    assert np.abs(gp).sum() > 0
    p2 = p.copy()
    p2[0, 3, 1] += 0.05
    assert ArmExtract(BASIS, [4]).forward([feat], p2).sum() != base


def test_arm_grad_check_both_paths(rng):
    feats = [rng.standard_normal((2, 10, 12))]
    pts = (box_points(1.3, 1.2, 9.6, 6.7, 4) + 0.5) * 4 + rng.uniform(-0.3, 0.3, (8, 2))

    class Op:
        def forward(self, f, p):
            self.a = ArmExtract(BASIS, [4])
            return self.a.forward([f], p[None])

        def backward(self, g):
            gl, gp = self.a.backward(g)
            return gl[0], gp[0]

    assert grad_check(Op(), [feats[0], pts]) <= 1e-4


def test_composite_chain_grad_check():
    chain = _Chain(seed=3)
    rng = np.random.default_rng(3)
    for _ in range(50):
        pts = chain.points(rng)
        if chain.stable(pts, 1e-3):
            break
    assert grad_check(chain, [pts], eps=1e-3) <= 1e-3


def test_select_level():
    def tall(h):
        return box_points(0, 0, 100, h, 4)

    assert select_level(tall(30), [4, 8, 16], 8) == 0
    assert select_level(tall(64), [4, 8, 16], 8) == 1
    assert select_level(tall(48), [4, 8, 16], 8) == 0  # 6 is equidistant from 4 and 8
    assert select_level(tall(200), [4, 8, 16], 8) == 2
    assert image_to_level(np.array([[2.0, 6.0]]), 4).tolist() == [[0.0, 1.0]]


def _arch_points(n, height=18.0):
    c = CubicBezier([[20, 60], [60, 20], [140, 20], [180, 60]])
    t = np.linspace(0, 1, n)
    top = bezier_eval(c, t)
    d = np.gradient(top, axis=0)
    nrm = np.stack([-d[:, 1], d[:, 0]], 1)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return np.concatenate([top, top + height * nrm])


def test_rectification_fidelity():
    # build a warped image from a template through a known TPS map, then undo it
    n, (th, tw) = 8, (24, 96)
    yy, xx = np.mgrid[0:th, 0:tw]
    template = 0.5 + 0.25 * np.sin(xx / 3.0) + 0.25 * np.cos(yy / 2.5)
    pts = _arch_points(n)
    fine = build_tps_basis(n, (th * 4, tw * 4))
    src = gen_grid(fine, pts).reshape(-1, 2)
    fy, fx = np.mgrid[0 : th * 4, 0 : tw * 4] / 4.0 * [[[(th - 1) / (th - 0.25)]], [[(tw - 1) / (tw - 0.25)]]]
    vals = map_coordinates(template, [fy.ravel(), fx.ravel()], order=1)
    gy, gx = np.mgrid[0:100, 0:200]
    image = griddata(src, vals, (gx + 0.0, gy + 0.0), method="linear", fill_value=0.0)
    img3 = np.repeat(image[None], 3, axis=0)
    # image pixel (x, y) has centre (x + 0.5, y + 0.5) in the half-pixel convention
    crop = rectify_image(img3, pts + 0.5, n, (th, tw))
    inner = (slice(2, -2), slice(2, -2))
    mae = np.mean(np.abs(crop[0][inner] - template[inner]))
    print("rectification MAE", mae)
    assert mae <= 0.05 * (template.max() - template.min())
