import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from garmentdiff.errors import SingularTransformError, StructuralError, ValidationError
from garmentdiff.geometry import (
    BodyModel,
    GarmentMesh,
    Pose,
    SkinningWeights,
    Sphere,
    TriangleMesh,
    capped_tube,
    desk_body,
    load_body,
    read_obj,
    resolve_collisions,
    rodrigues,
    save_body,
    signed_distance,
    skin,
    unpose,
    winding_number,
    write_obj,
)


def dense_lbs(verts, W, joints, parents, rotations, translation):
    """Reference LBS: world transforms G_j = G_p [R_j | J_j - J_p], then remove rest joints."""
    def rot(r):
        th = np.linalg.norm(r)
        if th == 0:
            return np.eye(3)
        k = r / th
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        return np.cos(th) * np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * np.outer(k, k)

    n = len(joints)
    G = [None] * n
    done = 0
    while done < n:
        for j in range(n):
            if G[j] is not None:
                continue
            p = parents[j]
            T = np.eye(4)
            T[:3, :3] = rot(rotations[j])
            if p < 0:
                T[:3, 3] = joints[j] + translation
                G[j] = T
                done += 1
            elif G[p] is not None:
                T[:3, 3] = joints[j] - joints[p]
                G[j] = G[p] @ T
                done += 1
    out = np.zeros_like(verts)
    for v in range(len(verts)):
        acc = np.zeros(4)
        for j in range(n):
            if W[v, j] == 0:
                continue
            A = G[j].copy()
            A[:3, 3] -= A[:3, :3] @ joints[j]
            acc += W[v, j] * (A @ np.append(verts[v], 1.0))
        out[v] = acc[:3]
    return out


def chain_body():
    return BodyModel(np.array([[0.0, 0, 0], [0, 1, 0], [0, 2, 0]]), np.array([-1, 0, 1]), np.zeros((3, 3, 0)))


def random_weights(rng, n, j):
    W = rng.uniform(0.05, 1, size=(n, j))
    return W / W.sum(axis=1, keepdims=True)


def cloud(rng, n=40):
    pts = rng.normal(size=(n, 3)) * [0.3, 1.0, 0.3] + [0, 1, 0]
    return TriangleMesh(pts, np.array([[0, 1, 2]]))


# --- skin ---------------------------------------------------------------


def test_identity_pose_is_exact():
    body = desk_body()
    rng = np.random.default_rng(0)
    mesh = cloud(rng)
    W = SkinningWeights(random_weights(rng, mesh.n_vertices, 4))
    out = skin(mesh, W, body, np.zeros(2), Pose.identity(4))
    assert np.array_equal(out.vertices, mesh.vertices)


def test_single_joint_quarter_turn():
    body = BodyModel(np.zeros((1, 3)), np.array([-1]), np.zeros((1, 3, 0)))
    rng = np.random.default_rng(1)
    mesh = cloud(rng)
    W = SkinningWeights(np.ones((mesh.n_vertices, 1)))
    out = skin(mesh, W, body, None, Pose(np.array([[0, 0, np.pi / 2]])))
    x, y, z = mesh.vertices.T
    np.testing.assert_allclose(out.vertices, np.stack([-y, x, z], axis=1), atol=1e-6)


def test_half_half_weights_average_the_rigid_maps():
    body = BodyModel(np.array([[0.0, 0, 0], [0, 1, 0]]), np.array([-1, 0]), np.zeros((2, 3, 0)))
    pose = Pose(np.array([[0.3, 0.1, -0.2], [0.0, 0.7, 0.4]]), np.array([0.1, 0, -0.2]))
    v = TriangleMesh(np.array([[0.2, 1.3, -0.1]]), np.array([[0, 0, 0]]))
    half = skin(v, SkinningWeights(np.array([[0.5, 0.5]])), body, None, pose).vertices
    a = skin(v, SkinningWeights(np.array([[1.0, 0.0]])), body, None, pose).vertices
    b = skin(v, SkinningWeights(np.array([[0.0, 1.0]])), body, None, pose).vertices
    np.testing.assert_allclose(half, 0.5 * (a + b), atol=1e-12)
    ref = dense_lbs(v.vertices, np.array([[0.5, 0.5]]), body.rest_joints, body.parents, pose.rotations, pose.translation)
    np.testing.assert_allclose(half, ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_skin_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    body = desk_body()
    beta = rng.uniform(-1, 1, 2)
    mesh = cloud(rng, 12)
    W = random_weights(rng, 12, 4)
    W[rng.uniform(size=W.shape) < 0.4] = 0
    W[np.arange(12), rng.integers(0, 4, 12)] += 0.1
    W /= W.sum(axis=1, keepdims=True)
    pose = Pose(rng.uniform(-1, 1, (4, 3)), rng.uniform(-0.3, 0.3, 3))
    out = skin(mesh, SkinningWeights(W), body, beta, pose)
    ref = dense_lbs(mesh.vertices, W, body.joints(beta), body.parents, pose.rotations, pose.translation)
    np.testing.assert_allclose(out.vertices, ref, atol=1e-12)


def test_global_rigid_motion_of_root():
    rng = np.random.default_rng(3)
    body = desk_body()
    mesh = cloud(rng)
    W = SkinningWeights(random_weights(rng, mesh.n_vertices, 4))
    rot = rng.uniform(-0.5, 0.5, (4, 3))
    base = skin(mesh, W, body, None, Pose(rot)).vertices
    r0 = np.array([0.2, -0.4, 0.9])
    t = np.array([0.3, -0.1, 0.5])
    R0 = rodrigues(r0)
    # rotating the root by R0 about the root joint equals composing with that rigid motion
    moved_rot = rot.copy()
    R_new = R0 @ rodrigues(rot[0])
    ang = np.arccos(np.clip((np.trace(R_new) - 1) / 2, -1, 1))
    axis = np.array([R_new[2, 1] - R_new[1, 2], R_new[0, 2] - R_new[2, 0], R_new[1, 0] - R_new[0, 1]])
    moved_rot[0] = axis / (2 * np.sin(ang)) * ang
    moved = skin(mesh, W, body, None, Pose(moved_rot, t)).vertices
    J0 = body.rest_joints[0]
    expect = (base - J0) @ R0.T + J0 + t
    np.testing.assert_allclose(moved, expect, atol=1e-6)


def test_skin_rejects_weight_count_mismatch():
    body = desk_body()
    mesh = cloud(np.random.default_rng(0), 10)
    with pytest.raises(StructuralError):
        skin(mesh, SkinningWeights(np.full((9, 4), 0.25)), body, None, Pose.identity(4))


def test_weights_validation():
    with pytest.raises(ValidationError):
        SkinningWeights(np.array([[0.5, 0.6]]))
    with pytest.raises(ValidationError):
        SkinningWeights(np.array([[1.5, -0.5]]))
    with pytest.raises(ValidationError):
        SkinningWeights.from_sparse([[(3, 1.0)]], 2)
    w = SkinningWeights.from_sparse([[(0, 0.25), (1, 0.75)], [(1, 1.0)]], 2)
    assert w.to_sparse() == [[(0, 0.25), (1, 0.75)], [(1, 1.0)]]


def test_body_tree_validation():
    with pytest.raises(StructuralError):
        BodyModel(np.zeros((2, 3)), np.array([-1, -1]), np.zeros((2, 3, 0)))
    with pytest.raises(StructuralError):
        BodyModel(np.zeros((3, 3)), np.array([-1, 2, 1]), np.zeros((3, 3, 0)))
    with pytest.raises(StructuralError):
        BodyModel(np.zeros((2, 3)), np.array([-1, 0]), np.zeros((3, 3, 1)))


# --- unpose -------------------------------------------------------------


def test_unpose_identity_is_exact():
    rng = np.random.default_rng(4)
    body = desk_body()
    mesh = cloud(rng)
    W = SkinningWeights(random_weights(rng, mesh.n_vertices, 4))
    out = unpose(mesh, W, body, np.zeros(2), Pose.identity(4))
    assert np.array_equal(out.vertices, mesh.vertices)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_unpose_inverts_skin_on_chain(seed):
    rng = np.random.default_rng(seed)
    body = chain_body()
    axis = rng.normal(size=(3, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    pose = Pose(axis * rng.uniform(0, np.pi / 3, (3, 1)), rng.uniform(-0.2, 0.2, 3))
    mesh = cloud(rng, 30)
    W = SkinningWeights(random_weights(rng, 30, 3))
    posed = skin(mesh, W, body, None, pose)
    back = unpose(posed, W, body, None, pose)
    assert np.max(np.abs(back.vertices - mesh.vertices)) < 1e-6
    again = skin(back, W, body, None, pose)
    assert np.max(np.linalg.norm(again.vertices - posed.vertices, axis=1)) < 1e-6


def test_unpose_reports_singular_vertex():
    body = BodyModel(np.array([[0.0, 0, 0], [1, 0, 0]]), np.array([-1, 0]), np.zeros((2, 3, 0)))
    # the child turns by pi about z relative to the root: a 50/50 blend of I and
    # diag(-1, -1, 1) collapses x and y
    pose = Pose(np.array([[0, 0, 0], [0, 0, np.pi]]))
    mesh = TriangleMesh(np.array([[0.0, 1, 0], [0.5, 0.5, 0.1]]), np.array([[0, 1, 1]]))
    W = SkinningWeights(np.array([[1.0, 0.0], [0.5, 0.5]]))
    with pytest.raises(SingularTransformError) as info:
        unpose(mesh, W, body, None, pose)
    assert info.value.vertex == 1
    assert "1" in str(info.value)


# --- signed distance and collisions ----------------------------------------


def test_desk_body_is_closed_and_outward():
    body = desk_body()
    assert body.surface.is_closed()
    assert body.surface.signed_volume() > 0


def test_signed_distance_of_tube_matches_brute_force():
    tube = capped_tube([0, 0, 0], [0, 1, 0], (0.2, 0.2), segments=12)
    rng = np.random.default_rng(5)
    pts = rng.uniform([-0.4, -0.3, -0.4], [0.4, 1.3, 0.4], size=(60, 3))
    sd, closest, _ = signed_distance(tube, pts, return_closest=True)
    # brute force: densely sampled triangles give an upper bound that converges
    tri = tube.triangles()
    u, v = np.meshgrid(np.linspace(0, 1, 41), np.linspace(0, 1, 41))
    keep = u + v <= 1
    bary = np.stack([1 - u[keep] - v[keep], u[keep], v[keep]], axis=1)
    samples = np.einsum("kb,fbd->fkd", bary, tri).reshape(-1, 3)
    d = np.min(np.linalg.norm(pts[:, None] - samples[None], axis=2), axis=1)
    assert np.all(np.abs(sd) <= d + 1e-12)
    assert np.all(d - np.abs(sd) < 0.01)
    np.testing.assert_allclose(np.linalg.norm(closest - pts, axis=1), np.abs(sd), atol=1e-12)
    inside = winding_number(tube, pts) > 0.5
    assert np.array_equal(inside, sd < 0)


def test_winding_number_of_unit_tube():
    tube = capped_tube([0, 0, 0], [0, 1, 0], (0.3, 0.3))
    w = winding_number(tube, np.array([[0, 0.5, 0], [0, 2, 0], [1, 0.5, 0]]))
    np.testing.assert_allclose(w, [1, 0, 0], atol=1e-9)


def test_sphere_push_to_radius_plus_epsilon():
    sphere = Sphere(np.zeros(3), 1.0)
    d = np.array([0.3, -0.5, 0.8])
    d /= np.linalg.norm(d)
    g = TriangleMesh(np.array([0.995 * d, [0, 0, 2.0], [2.0, 0, 0]]), np.array([[0, 1, 2]]))
    out = resolve_collisions(g, sphere, epsilon=1e-3)
    np.testing.assert_allclose(np.linalg.norm(out.vertices[0]), 1.001, atol=1e-12)
    np.testing.assert_allclose(out.vertices[0] / np.linalg.norm(out.vertices[0]), d, atol=1e-12)
    assert np.array_equal(out.vertices[1:], g.vertices[1:])


def test_vertex_on_surface_is_pushed_out():
    sphere = Sphere(np.zeros(3), 1.0)
    g = TriangleMesh(np.array([[0, 1.0, 0], [0, 3.0, 0], [3.0, 0, 0]]), np.array([[0, 1, 2]]))
    out = resolve_collisions(g, sphere, epsilon=1e-3)
    np.testing.assert_allclose(out.vertices[0], [0, 1.001, 0], atol=1e-12)


def test_garment_outside_is_untouched():
    body = desk_body()
    far = TriangleMesh(np.array([[2.0, 0, 0], [0, 3.0, 0], [0, 0, 2.0]]), np.array([[0, 1, 2]]))
    out = resolve_collisions(far, body.surface, 2e-3)
    assert np.array_equal(out.vertices, far.vertices)


def test_open_surface_rejected():
    tube = capped_tube([0, 0, 0], [0, 1, 0], (0.2, 0.2))
    open_mesh = TriangleMesh(tube.vertices, tube.faces[:-1])
    g = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(ValidationError):
        resolve_collisions(g, open_mesh, 1e-3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 5e-3))
def test_collision_postcondition_on_desk_body(seed, eps):
    rng = np.random.default_rng(seed)
    body = desk_body(segments=12)
    pts = rng.uniform([-0.8, 0.6, -0.3], [0.8, 1.6, 0.3], size=(80, 3))
    g = TriangleMesh(pts, np.array([[0, 1, 2]]))
    out = resolve_collisions(g, body.surface, eps)
    sd = signed_distance(body.surface, out.vertices)
    assert np.all(sd >= eps - 1e-6)
    before = signed_distance(body.surface, pts)
    keep = before >= eps
    assert np.array_equal(out.vertices[keep], pts[keep])



class CountingMesh(TriangleMesh):
    calls = 0

    def query(self, points):
        CountingMesh.calls += 1
        return super().query(points)


def test_pushed_vertices_settle_within_two_passes():
    body = desk_body(segments=12)
    pts = np.random.default_rng(3).uniform([-0.8, 0.6, -0.3], [0.8, 1.6, 0.3], size=(200, 3))
    surface = CountingMesh(body.surface.vertices, body.surface.faces)
    out = resolve_collisions(TriangleMesh(pts, np.array([[0, 1, 2]])), surface, 1e-3)
    assert CountingMesh.calls <= 3
    assert np.all(signed_distance(body.surface, out.vertices) >= 1e-3 - 1e-9)

# --- files ----------------------------------------------------------------


def test_obj_round_trip(tmp_path):
    uv = np.array([[0.1, 0.2], [0.9, 0.2], [0.5, 0.8], [0.3, 0.3]])
    mesh = GarmentMesh(np.random.default_rng(6).normal(size=(4, 3)), np.array([[0, 1, 2], [0, 2, 3]]), uv)
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.array_equal(back.uv, mesh.uv)


def test_obj_rejects_quads_and_split_uvs(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(StructuralError):
        read_obj(tmp_path / "q.obj")
    (tmp_path / "s.obj").write_text(
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0.5 0.5\nf 1/1 2/2 3/3\nf 1/4 3/3 2/2\n"
    )
    with pytest.raises(StructuralError):
        read_obj(tmp_path / "s.obj")


def test_body_round_trip(tmp_path):
    body = desk_body()
    save_body(tmp_path / "body.json", body)
    back = load_body(tmp_path / "body.json")
    assert np.array_equal(back.rest_joints, body.rest_joints)
    assert np.array_equal(back.shape_basis, body.shape_basis)
    assert np.array_equal(back.surface.vertices, body.surface.vertices)
    assert np.array_equal(back.surface_joints, body.surface_joints)


def test_uv_validation_catches_overlap():
    verts = np.zeros((6, 3))
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    uv = np.array([[0.1, 0.1], [0.6, 0.1], [0.1, 0.6], [0.2, 0.2], [0.7, 0.2], [0.2, 0.7]])
    with pytest.raises(ValidationError):
        GarmentMesh(verts, faces, uv).validate_uv()
    uv2 = np.array([[0.1, 0.1], [0.4, 0.1], [0.1, 0.4], [0.6, 0.6], [0.9, 0.6], [0.6, 0.9]])
    GarmentMesh(verts, faces, uv2).validate_uv()
    degenerate = uv2.copy()
    degenerate[2] = [0.25, 0.1]
    with pytest.raises(ValidationError):
        GarmentMesh(verts, faces, degenerate).validate_uv()
