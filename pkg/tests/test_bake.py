import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from garmentdiff.bake import (
    DisplacementTexture,
    NormalizationSpec,
    bake,
    bake_offsets,
    export_png,
    load_disp,
    reconstruct_garment,
    sample_texture,
    save_disp,
)
from garmentdiff.dataset import generate_procedural
from garmentdiff.design import DesignParams, DesignTemplate, design_mesh
from garmentdiff.errors import StructuralError, ValidationError
from garmentdiff.geometry import GarmentMesh, Pose, desk_body, skin
from garmentdiff.metrics import position_error

TEMPLATE = DesignTemplate()
BODY = desk_body()


def grid_mesh(n=3):
    """Flat n x n vertex grid over the unit uv square, cells split along (i,j)-(i+1,j+1)."""
    g = np.linspace(0, 1, n)
    U, V = np.meshgrid(g, g)
    uv = np.stack([U.ravel(), V.ravel()], axis=1)
    verts = np.concatenate([uv, np.zeros((n * n, 1))], axis=1)
    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            a, b, c, d = j * n + i, j * n + i + 1, (j + 1) * n + i + 1, (j + 1) * n + i
            faces += [[a, b, c], [a, c, d]]
    return GarmentMesh(verts, np.array(faces), uv)


def texel_centres(res):
    c = (np.arange(res) + 0.5) / res
    U, V = np.meshgrid(c, c)  # rows follow v
    return U, V


def test_hat_function_at_resolution_64():
    mesh = grid_mesh(3)
    offsets = np.zeros((9, 3))
    offsets[4] = [1.0, 0.0, 0.0]  # the centre vertex (0.5, 0.5)
    tex = bake_offsets(mesh, offsets, 64)
    U, V = texel_centres(64)
    dx, dy = (U - 0.5) / 0.5, (V - 0.5) / 0.5
    hat = np.where(dx * dy >= 0, 1 - np.maximum(np.abs(dx), np.abs(dy)), 1 - np.abs(dx) - np.abs(dy))
    hat = np.clip(hat, 0, None)
    assert tex.mask.all()
    assert np.max(np.abs(tex.offsets[..., 0] - hat)) < 1e-6
    assert np.all(tex.offsets[..., 1:] == 0)


def test_zero_deformation_bakes_to_zero():
    p = DesignParams(0.4, 0.6, 0.3)
    canon = design_mesh(TEMPLATE, p)
    W = TEMPLATE.weights(canon.vertices)
    pose = Pose(np.random.default_rng(0).uniform(-0.5, 0.5, (4, 3)))
    tex = bake(skin(canon, W, BODY, [0.3, -0.2], pose), canon, W, BODY, [0.3, -0.2], pose, 64)
    assert np.max(np.abs(tex.offsets)) < 1e-12
    ident = bake(canon, canon, W, BODY, np.zeros(2), Pose.identity(4), 64)
    assert np.all(ident.offsets == 0)
    from garmentdiff.bake import coverage_count

    assert np.array_equal(ident.mask, coverage_count(canon.uv, canon.faces, 64) > 0)


def test_constant_offset_fills_mask():
    canon = design_mesh(TEMPLATE, DesignParams())
    d = np.array([0.003, -0.01, 0.02])
    tex = bake_offsets(canon, np.tile(d, (canon.n_vertices, 1)), 64)
    assert np.max(np.abs(tex.offsets[tex.mask] - d)) < 1e-6
    assert np.all(tex.offsets[~tex.mask] == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bake_is_linear(seed):
    rng = np.random.default_rng(seed)
    canon = design_mesh(TEMPLATE, DesignParams())
    a = rng.normal(size=(canon.n_vertices, 3)) * 0.01
    b = rng.normal(size=(canon.n_vertices, 3)) * 0.01
    ta, tb, tab = (bake_offsets(canon, x, 32).offsets for x in (a, b, a + b))
    assert np.max(np.abs(ta + tb - tab)) < 1e-6


def test_bake_rejects_topology_mismatch():
    canon = design_mesh(TEMPLATE, DesignParams())
    other = GarmentMesh(canon.vertices, canon.faces[:-2], canon.uv)
    W = TEMPLATE.weights(canon.vertices)
    with pytest.raises(StructuralError):
        bake(other, canon, W, BODY, np.zeros(2), Pose.identity(4), 32)


# --- sampling --------------------------------------------------------------


def random_texture(rng, res=16, holes=True):
    offsets = rng.normal(size=(res, res, 3))
    mask = rng.uniform(size=(res, res)) > 0.3 if holes else np.ones((res, res), bool)
    offsets[~mask] = 0
    return DisplacementTexture(offsets, mask)


def test_exact_at_texel_centres():
    rng = np.random.default_rng(1)
    tex = random_texture(rng)
    for j, i in zip(*np.nonzero(tex.mask)):
        uv = np.array([(i + 0.5) / 16, (j + 0.5) / 16])
        assert np.array_equal(sample_texture(tex, uv), tex.offsets[j, i])


def test_midpoint_between_two_texels():
    offsets = np.zeros((8, 8, 3))
    mask = np.zeros((8, 8), bool)
    offsets[3, 2] = [1.0, 2.0, 3.0]
    offsets[3, 3] = [-1.0, 0.5, 7.0]
    mask[3, 2] = mask[3, 3] = True
    tex = DisplacementTexture(offsets, mask)
    out = sample_texture(tex, np.array([3.0 / 8, 3.5 / 8]))
    np.testing.assert_allclose(out, [0.0, 1.25, 5.0], atol=1e-7)


def test_all_neighbours_unmasked_gives_zero():
    tex = DisplacementTexture(np.zeros((8, 8, 3)), np.zeros((8, 8), bool))
    assert np.array_equal(sample_texture(tex, np.array([0.5, 0.5])), np.zeros(3))


@pytest.mark.parametrize("uv", [[-0.01, 0.5], [0.5, 1.01], [np.nan, 0.2]])
def test_sample_outside_unit_square(uv):
    tex = random_texture(np.random.default_rng(2))
    with pytest.raises(ValidationError):
        sample_texture(tex, np.array(uv))


def test_linear_field_quantisation_bound():
    mesh = grid_mesh(5)
    A = np.array([[0.02, -0.01], [0.005, 0.03], [-0.015, 0.01]])
    b = np.array([0.001, -0.002, 0.003])
    field = lambda uv: uv @ A.T + b
    res = 64
    tex = bake_offsets(mesh, field(mesh.uv), res)
    L = np.linalg.norm(A, 2)
    uv = np.random.default_rng(3).uniform(0, 1, (1000, 2))
    err = np.linalg.norm(sample_texture(tex, uv) - field(uv), axis=1)
    assert err.max() < 2 * L / res


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sample_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    tex = random_texture(rng)
    out = sample_texture(tex, rng.uniform(0, 1, (50, 2)))
    vals = tex.offsets[tex.mask]
    assert np.all(out.min(axis=0) >= np.minimum(vals.min(axis=0), 0) - 1e-12)
    assert np.all(out.max(axis=0) <= np.maximum(vals.max(axis=0), 0) + 1e-12)


# --- reconstruction --------------------------------------------------------


def test_zero_texture_reconstructs_skinned_design():
    p = DesignParams(0.7, 0.2, 0.5)
    pose = Pose(np.random.default_rng(4).uniform(-0.4, 0.4, (4, 3)))
    tex = DisplacementTexture(np.zeros((32, 32, 3)), np.ones((32, 32), bool))
    canon = design_mesh(TEMPLATE, p)
    out = reconstruct_garment(tex, TEMPLATE, p, None, BODY, [0.1, 0.2], pose)
    ref = skin(canon, TEMPLATE.weights(canon.vertices), BODY, [0.1, 0.2], pose)
    assert np.array_equal(out.vertices, ref.vertices)


def test_constant_texture_translates_design():
    p = DesignParams(0.5, 0.5, 0.5)
    d = np.array([0.01, -0.02, 0.005])
    tex = DisplacementTexture(np.tile(d, (32, 32, 1)), np.ones((32, 32), bool))
    out = reconstruct_garment(tex, TEMPLATE, p, None, BODY, np.zeros(2), Pose.identity(4))
    np.testing.assert_allclose(out.vertices, design_mesh(TEMPLATE, p).vertices + d, atol=1e-12)


def test_round_trip_improves_with_resolution():
    rng = np.random.default_rng(5)
    errs = {32: [], 64: [], 128: []}
    for k in range(4):
        p = DesignParams(*rng.uniform(0, 1, 3))
        beta = rng.uniform(-1, 1, 2)
        pose = Pose(rng.uniform(-0.5, 0.5, (4, 3)))
        frame = generate_procedural(p, beta, pose, wrinkle_seed=k)
        canon = design_mesh(TEMPLATE, p)
        W = TEMPLATE.weights(canon.vertices)
        for res in errs:
            tex = bake(frame, canon, W, BODY, beta, pose, res)
            errs[res].append(position_error(reconstruct_garment(tex, TEMPLATE, p, W, BODY, beta, pose), frame))
    m = {r: np.mean(v) for r, v in errs.items()}
    assert m[32] > m[64] > m[128]
    assert m[128] < 1e-3


# --- files -----------------------------------------------------------------


def test_disp_round_trip(tmp_path):
    tex = random_texture(np.random.default_rng(6), res=32)
    spec = NormalizationSpec(0.05, [0.001, 0.0, -0.002])
    save_disp(tmp_path / "t.disp", tex, spec, {"frame": 3})
    back = load_disp(tmp_path / "t.disp")
    assert np.array_equal(back.mask, tex.mask)
    assert np.array_equal(back.offsets, tex.offsets.astype("<f4").astype(np.float64))
    assert back.normalization.scale == 0.05
    assert back.provenance == {"frame": 3}


def test_disp_rejects_foreign_file(tmp_path):
    (tmp_path / "x.disp").write_bytes(b"nope")
    with pytest.raises(StructuralError):
        load_disp(tmp_path / "x.disp")


def test_texture_invariants():
    with pytest.raises(ValidationError):
        DisplacementTexture(np.full((4, 4, 3), np.nan), np.ones((4, 4), bool))
    with pytest.raises((ValidationError, StructuralError)):
        DisplacementTexture(np.zeros((4, 8, 3)), np.ones((4, 8), bool))


def test_normalization_round_trip():
    spec = NormalizationSpec(0.04, [0.01, 0.0, -0.01])
    x = np.random.default_rng(7).normal(size=(5, 3))
    np.testing.assert_allclose(spec.denormalize(spec.normalize(x)), x, atol=1e-15)
    with pytest.raises(ValidationError):
        NormalizationSpec(0.0)


def test_png_preview_orientation(tmp_path):
    offsets = np.zeros((8, 8, 3))
    offsets[0, :, 0] = 1.0  # lowest v row
    tex = DisplacementTexture(offsets, np.ones((8, 8), bool), NormalizationSpec(1.0))
    export_png(tmp_path / "p.png", tex)
    img = np.asarray(Image.open(tmp_path / "p.png"))
    assert img.shape == (8, 8, 3)
    assert np.all(img[-1, :, 0] == 255) and np.all(img[0, :, 0] == 128)
