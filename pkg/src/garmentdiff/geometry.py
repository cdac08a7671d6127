"""Articulated body, linear blend skinning and body/garment collision push-out.

Coordinates are metres, y up, x towards the body's left, z forward.  A
`BodyModel` is a joint tree with a linear shape basis; joint positions for a
shape vector ``beta`` are ``rest_joints + shape_basis @ beta``.  Posing uses
plain linear blend skinning (LBS):

    v' = sum_j w_j A_j v

where ``A_j`` maps rest space to posed space for joint ``j`` (forward
kinematics over the shaped joints).  Because LBS blends matrices per vertex,
it is inverted vertex by vertex in `unpose`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SingularTransformError, StructuralError, ValidationError

__all__ = [
    "TriangleMesh",
    "GarmentMesh",
    "Sphere",
    "BodyModel",
    "Pose",
    "SkinningWeights",
    "rodrigues",
    "joint_transforms",
    "skin",
    "unpose",
    "resolve_collisions",
    "signed_distance",
    "desk_body",
    "capped_tube",
    "read_obj",
    "write_obj",
    "load_body",
    "save_body",
]

SINGULAR_DET = 1e-9


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise StructuralError(f"vertices must be (N, 3), got {self.vertices.shape}")
        if self.faces.size == 0:
            self.faces = self.faces.reshape(0, 3)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise StructuralError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise StructuralError("face index out of range")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def triangles(self):
        return self.vertices[self.faces]

    def face_normals(self):
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def is_closed(self):
        """True if every directed edge is matched by its reverse exactly once."""
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        keys = directed[:, 0] * self.n_vertices + directed[:, 1]
        rev = directed[:, 1] * self.n_vertices + directed[:, 0]
        uniq, counts = np.unique(keys, return_counts=True)
        if np.any(counts != 1):
            return False
        return bool(np.all(np.isin(rev, uniq)))

    def signed_volume(self):
        tri = self.triangles()
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def query(self, points):
        """Signed distance, closest surface point and outward direction.

        The mesh must be closed; inside is decided by the generalised winding
        number, so overlapping closed components behave as their union.
        """
        return signed_distance(self, points, return_closest=True)


@dataclass
class GarmentMesh(TriangleMesh):
    uv: np.ndarray | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64)
            if self.uv.shape != (self.n_vertices, 2):
                raise StructuralError(
                    f"uv must be ({self.n_vertices}, 2), got {self.uv.shape}"
                )

    def with_vertices(self, vertices):
        return GarmentMesh(np.array(vertices, dtype=np.float64), self.faces, self.uv)

    def same_topology(self, other):
        if self.faces.shape != other.faces.shape or self.n_vertices != other.n_vertices:
            return False
        return bool(np.array_equal(self.faces, other.faces))

    def uv_areas(self):
        t = self.uv[self.faces]
        e1, e2 = t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def validate_uv(self, check_overlap=True, resolution=512):
        """Check UV triangles are non-degenerate and pairwise disjoint.

        Overlap is estimated on a ``resolution``-square sample grid: no sample
        point may fall strictly inside two triangles.
        """
        if self.uv is None:
            raise StructuralError("mesh has no uv coordinates")
        if np.any(self.uv < 0) or np.any(self.uv > 1):
            raise ValidationError("uv coordinates outside [0, 1]^2")
        area = np.abs(self.uv_areas())
        if np.any(area <= 1e-12):
            bad = int(np.argmin(area))
            raise ValidationError(f"degenerate uv triangle {bad} (area {area[bad]:.2e})")
        if check_overlap:
            from .bake import coverage_count

            hits = coverage_count(self.uv, self.faces, resolution, strict=True)
            if hits.max() > 1:
                raise ValidationError("uv triangles overlap")


@dataclass
class Sphere:
    """Analytic closed surface, handy as an exact collision oracle."""

    center: np.ndarray
    radius: float

    def query(self, points):
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.center, dtype=np.float64)
        r = np.linalg.norm(p, axis=1)
        direction = np.where(r[:, None] > 0, p / np.maximum(r, 1e-300)[:, None], [0.0, 0.0, 1.0])
        closest = np.asarray(self.center) + self.radius * direction
        return r - self.radius, closest, direction


# ---------------------------------------------------------------------------
# closest point / signed distance
# ---------------------------------------------------------------------------


def _closest_on_triangles(p, a, b, c):
    """Closest points from p (N,1,3) to triangles a,b,c (1,F,3).

    Region tests follow Ericson, Real-Time Collision Detection, 5.1.5.  Each
    region sets barycentric weights (v, w) on ab and ac; the point is formed
    once at the end.
    """
    # component-wise: a dot over a trailing axis of 3 is slow in numpy
    a, b, c, p = (np.moveaxis(x, -1, 0) for x in (a, b, c, p))
    ab, ac = b - a, c - a
    dot = lambda x, y: x[0] * y[0] + x[1] * y[1] + x[2] * y[2]
    ap = p - a
    d1, d2 = dot(ab, ap), dot(ac, ap)
    bp = p - b
    d3, d4 = dot(ab, bp), dot(ac, bp)
    cp = p - c
    d5, d6 = dot(ab, cp), dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom

        # edges, lowest priority first so vertex regions win
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        v, w = np.where(m, 1.0 - t, v), np.where(m, t, w)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        v, w = np.where(m, 0.0, v), np.where(m, d2 / (d2 - d6), w)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        v, w = np.where(m, d1 / (d1 - d3), v), np.where(m, 0.0, w)

    m = (d6 >= 0) & (d5 <= d6)
    v, w = np.where(m, 0.0, v), np.where(m, 1.0, w)
    m = (d3 >= 0) & (d4 <= d3)
    v, w = np.where(m, 1.0, v), np.where(m, 0.0, w)
    m = (d1 <= 0) & (d2 <= 0)
    v, w = np.where(m, 0.0, v), np.where(m, 0.0, w)
    return np.moveaxis(a + ab * v + ac * w, 0, -1)


def winding_number(mesh, points, chunk=64):
    """Generalised winding number of a closed, outward-oriented mesh."""
    points = np.asarray(points, dtype=np.float64)
    tri = mesh.triangles()
    corners = [tri[:, k].T[:, None, :] for k in range(3)]  # each (3, 1, F)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk].T[:, :, None]  # (3, n, 1)
        (ax, ay, az), (bx, by, bz), (cx, cy, cz) = (q - p for q in corners)
        la = np.sqrt(ax * ax + ay * ay + az * az)
        lb = np.sqrt(bx * bx + by * by + bz * bz)
        lc = np.sqrt(cx * cx + cy * cy + cz * cz)
        num = ax * (by * cz - bz * cy) + ay * (bz * cx - bx * cz) + az * (bx * cy - by * cx)
        den = (
            la * lb * lc
            + (ax * bx + ay * by + az * bz) * lc
            + (bx * cx + by * cy + bz * cz) * la
            + (cx * ax + cy * ay + cz * az) * lb
        )
        out[s : s + chunk] = np.arctan2(num, den).sum(axis=1) / (2.0 * np.pi)
    return out


def _nearest(mesh, points, chunk=64):
    """Closest surface point, face and squared distance, testing every face."""
    tri = mesh.triangles()
    d2_out = np.empty(len(points))
    closest = np.empty_like(points)
    face = np.empty(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk, None, :]
        q = _closest_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        d2 = np.sum((q - p) ** 2, axis=-1)
        k = np.argmin(d2, axis=1)
        rows = np.arange(len(k))
        d2_out[s : s + chunk] = d2[rows, k]
        closest[s : s + chunk] = q[rows, k]
        face[s : s + chunk] = k
    return d2_out, closest, face


def signed_distance(mesh, points, return_closest=False):
    """Signed distance from points to a closed triangle mesh (negative inside)."""
    points = np.asarray(points, dtype=np.float64)
    fn = mesh.face_normals()
    d2, closest, nearest_face = _nearest(mesh, points)
    dist = np.sqrt(d2)
    inside = winding_number(mesh, points) > 0.5
    sd = np.where(inside, -dist, dist)
    if not return_closest:
        return sd
    delta = points - closest
    norm = np.linalg.norm(delta, axis=1)
    direction = fn[nearest_face].copy()
    ok = norm > 1e-12
    direction[ok] = np.where(inside[ok, None], -1.0, 1.0) * delta[ok] / norm[ok, None]
    return sd, closest, direction


def resolve_collisions(garment, body_surface, epsilon=1e-3, max_iter=8):
    """Push garment vertices out of a closed body surface.

    Every vertex whose signed distance is below ``epsilon`` is moved to the
    point ``epsilon`` outside its closest surface point, along the outward
    direction there.  Vertices already at least ``epsilon`` outside are
    returned bit-identical.  ``body_surface`` is a closed `TriangleMesh` or
    any object with the same ``query`` method (e.g. `Sphere`).

    When the body is a union of overlapping closed pieces, the closest surface
    point can lie on a wall buried inside another piece.  Such pushes are
    replaced by the shortest exit through any face that ends ``epsilon``
    outside the whole union.
    """
    if epsilon < 0:
        raise ValidationError("epsilon must be non-negative")
    if isinstance(body_surface, TriangleMesh) and not body_surface.is_closed():
        raise ValidationError("body surface is not a closed, consistently oriented mesh")
    verts = np.array(garment.vertices, dtype=np.float64)
    active = np.arange(len(verts))
    for it in range(max_iter):
        sd, closest, direction = body_surface.query(verts[active])
        # pushed vertices land at epsilon only up to rounding
        bad = sd < (epsilon if it == 0 else epsilon - 1e-9)
        if not np.any(bad):
            break
        active = active[bad]
        target = closest[bad] + epsilon * direction[bad]
        if isinstance(body_surface, TriangleMesh):
            target = _face_exits(body_surface, verts[active], target, epsilon)
        verts[active] = target
    if isinstance(garment, GarmentMesh):
        return garment.with_vertices(verts)
    return TriangleMesh(verts, garment.faces)


def _face_exits(surface, points, target, epsilon, tol=1e-9, chunk=16):
    """Replace pushes that stay within ``epsilon`` of the body by face exits."""
    reached = signed_distance(surface, target)
    fail = np.flatnonzero(reached < epsilon - tol)
    if not len(fail):
        return target
    tri = surface.triangles()
    p = points[fail][:, None, :]
    q = _closest_on_triangles(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
    cands = q + epsilon * surface.face_normals()[None]
    order = np.argsort(np.linalg.norm(cands - p, axis=-1), axis=1, kind="stable")
    # cheapest first: the first chunk holding a valid exit holds the cheapest one
    best = np.zeros(len(fail), dtype=np.int64)
    best_sd = np.full(len(fail), -np.inf)
    open_ = np.arange(len(fail))
    for s in range(0, order.shape[1], chunk):
        if not len(open_):
            break
        idx = order[open_, s : s + chunk]
        sd = signed_distance(surface, cands[open_[:, None], idx].reshape(-1, 3)).reshape(idx.shape)
        ok = sd >= epsilon - tol
        found = ok.any(axis=1)
        j = np.where(found, np.argmax(ok, axis=1), np.argmax(sd, axis=1))
        rows = np.arange(len(open_))
        better = found | (sd[rows, j] > best_sd[open_])
        best[open_[better]] = idx[rows, j][better]
        best_sd[open_[better]] = sd[rows, j][better]
        open_ = open_[~found]
    out = target.copy()
    take = best_sd > reached[fail]
    out[fail[take]] = cands[np.flatnonzero(take), best[take]]
    return out


# ---------------------------------------------------------------------------
# body model and skinning
# ---------------------------------------------------------------------------


@dataclass
class Pose:
    rotations: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls, joint_count):
        return cls(np.zeros((joint_count, 3)), np.zeros(3))

    @property
    def joint_count(self):
        return len(self.rotations)

    def flat(self):
        return self.rotations.reshape(-1).copy()


@dataclass
class SkinningWeights:
    """Per-vertex joint weights, stored dense as an (N, J) matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise StructuralError("skinning weights must be an (N, J) matrix")
        if np.any(self.matrix < 0):
            raise ValidationError("skinning weights must be non-negative")
        sums = self.matrix.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValidationError(f"weights of vertex {bad} sum to {sums[bad]!r}")

    @classmethod
    def from_sparse(cls, entries, joint_count):
        """Build from a list (per vertex) of (joint, weight) pairs."""
        m = np.zeros((len(entries), joint_count))
        for v, pairs in enumerate(entries):
            for j, w in pairs:
                if not 0 <= j < joint_count:
                    raise ValidationError(f"vertex {v}: joint index {j} out of range")
                m[v, j] += w
        return cls(m)

    @classmethod
    def rigid(cls, joint_of_vertex, joint_count):
        m = np.zeros((len(joint_of_vertex), joint_count))
        m[np.arange(len(joint_of_vertex)), np.asarray(joint_of_vertex)] = 1.0
        return cls(m)

    def to_sparse(self):
        return [
            [(int(j), float(row[j])) for j in np.flatnonzero(row)] for row in self.matrix
        ]

    @property
    def n_vertices(self):
        return self.matrix.shape[0]

    @property
    def joint_count(self):
        return self.matrix.shape[1]


@dataclass
class BodyModel:
    rest_joints: np.ndarray
    parents: np.ndarray
    shape_basis: np.ndarray
    surface: TriangleMesh | None = None
    surface_joints: np.ndarray | None = None
    names: list | None = None

    def __post_init__(self):
        self.rest_joints = np.asarray(self.rest_joints, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        n = len(self.rest_joints)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        if self.shape_basis.size == 0:
            self.shape_basis = self.shape_basis.reshape(n, 3, 0)
        if self.rest_joints.shape != (n, 3) or n == 0:
            raise StructuralError("rest_joints must be a non-empty (J, 3) array")
        if self.parents.shape != (n,):
            raise StructuralError("parents must have one entry per joint")
        if self.shape_basis.ndim != 3 or self.shape_basis.shape[:2] != (n, 3):
            raise StructuralError("shape_basis must be (J, 3, S)")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1:
            raise StructuralError(f"joint tree needs exactly one root, found {len(roots)}")
        self._order = _topological_order(self.parents)
        if self.surface is not None:
            if self.surface_joints is None:
                raise StructuralError("surface requires surface_joints")
            self.surface_joints = np.asarray(self.surface_joints, dtype=np.int64)
            if self.surface_joints.shape != (self.surface.n_vertices,):
                raise StructuralError("surface_joints must have one entry per surface vertex")

    @property
    def joint_count(self):
        return len(self.rest_joints)

    @property
    def shape_count(self):
        return self.shape_basis.shape[2]

    def joints(self, shape=None):
        if shape is None or self.shape_count == 0:
            return self.rest_joints.copy()
        shape = _check_shape(self, shape)
        return self.rest_joints + self.shape_basis @ shape

    def joint_offsets(self, shape):
        """Per-joint displacement ``shape_basis @ beta``."""
        return self.joints(shape) - self.rest_joints

    def surface_weights(self):
        return SkinningWeights.rigid(self.surface_joints, self.joint_count)

    def shaped_surface(self, shape=None):
        verts = self.surface.vertices + self.joint_offsets(shape)[self.surface_joints]
        return TriangleMesh(verts, self.surface.faces)

    def posed_surface(self, shape=None, pose=None):
        pose = pose if pose is not None else Pose.identity(self.joint_count)
        shaped = self.shaped_surface(shape)
        posed = skin(shaped, self.surface_weights(), self, shape, pose)
        return TriangleMesh(posed.vertices, shaped.faces)


def _topological_order(parents):
    order, seen = [], set()
    children = {}
    for j, p in enumerate(parents):
        children.setdefault(int(p), []).append(j)
    stack = list(children.get(-1, []))
    if any(p >= len(parents) for p in parents):
        raise StructuralError("parent index out of range")
    while stack:
        j = stack.pop(0)
        if j in seen:
            raise StructuralError("joint hierarchy contains a cycle")
        seen.add(j)
        order.append(j)
        stack.extend(children.get(j, []))
    if len(order) != len(parents):
        raise StructuralError("joint hierarchy is not a single tree")
    return order


def _check_shape(body, shape):
    shape = np.asarray(shape, dtype=np.float64).reshape(-1)
    if shape.shape != (body.shape_count,):
        raise StructuralError(f"expected {body.shape_count} shape coefficients, got {shape.size}")
    return shape


def rodrigues(axis_angle):
    """Rotation matrices from axis-angle vectors, shape (..., 3) -> (..., 3, 3)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    flat = r.reshape(-1, 3)
    theta = np.linalg.norm(flat, axis=1)
    out = np.tile(np.eye(3), (len(flat), 1, 1))
    nz = theta > 0
    if np.any(nz):
        k = flat[nz] / theta[nz, None]
        K = np.zeros((len(k), 3, 3))
        K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
        K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
        K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
        s = np.sin(theta[nz])[:, None, None]
        c = (1.0 - np.cos(theta[nz]))[:, None, None]
        out[nz] = np.eye(3) + s * K + c * (K @ K)
    return out.reshape(r.shape[:-1] + (3, 3))


def joint_transforms(body, shape, pose):
    """Rest-to-posed 4x4 transforms of every joint, shape (J, 4, 4)."""
    if pose.joint_count != body.joint_count:
        raise StructuralError(
            f"pose has {pose.joint_count} joints, body has {body.joint_count}"
        )
    J = body.joints(shape)
    R = rodrigues(pose.rotations)
    A = np.empty((body.joint_count, 4, 4))
    for j in body._order:
        local = np.eye(4)
        local[:3, :3] = R[j]
        local[:3, 3] = J[j] - R[j] @ J[j]
        p = body.parents[j]
        if p < 0:
            local[:3, 3] += pose.translation
            A[j] = local
        else:
            A[j] = A[p] @ local
    return A


def _blended(weights, body, shape, pose, n_vertices):
    if weights.n_vertices != n_vertices:
        raise StructuralError(
            f"{weights.n_vertices} weight rows for {n_vertices} vertices"
        )
    if weights.joint_count != body.joint_count:
        raise StructuralError("weights and body disagree on joint count")
    A = joint_transforms(body, shape, pose)
    # blend deviations from identity so that an identity pose is exact even
    # when the weights sum to 1 only up to rounding
    eye = np.eye(4)[:3]
    return eye + np.einsum("vj,jab->vab", weights.matrix, A[:, :3, :] - eye)


def skin(template, weights, body, shape, pose):
    """Pose a canonical mesh with linear blend skinning."""
    M = _blended(weights, body, shape, pose, template.n_vertices)
    verts = np.einsum("vab,vb->va", M[:, :, :3], template.vertices) + M[:, :, 3]
    if isinstance(template, GarmentMesh):
        return template.with_vertices(verts)
    return TriangleMesh(verts, template.faces)


def unpose(posed, weights, body, shape, pose):
    """Invert `skin` vertex by vertex.

    Raises `SingularTransformError` for the first vertex whose blended
    3x3 transform has ``|det| <= 1e-9``.
    """
    M = _blended(weights, body, shape, pose, posed.n_vertices)
    lin = M[:, :, :3]
    det = np.linalg.det(lin)
    bad = np.flatnonzero(np.abs(det) <= SINGULAR_DET)
    if len(bad):
        raise SingularTransformError(bad[0], det[bad[0]])
    rhs = posed.vertices - M[:, :, 3]
    verts = np.linalg.solve(lin, rhs[:, :, None])[:, :, 0]
    if isinstance(posed, GarmentMesh):
        return posed.with_vertices(verts)
    return TriangleMesh(verts, posed.faces)


# ---------------------------------------------------------------------------
# desk body
# ---------------------------------------------------------------------------


def capped_tube(start, end, radii, segments=16):
    """Closed elliptic cylinder between two points, faces oriented outward."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    axis = end - start
    length = np.linalg.norm(axis)
    a = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, a)
    u /= np.linalg.norm(u)
    w = np.cross(a, u)
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = radii[0] * np.cos(ang)[:, None] * u + radii[1] * np.sin(ang)[:, None] * w
    verts = np.concatenate([start + ring, end + ring, [start, end]])
    faces = []
    s0, s1, c0, c1 = 0, segments, 2 * segments, 2 * segments + 1
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[s0 + i, s0 + j, s1 + j], [s0 + i, s1 + j, s1 + i]]
        faces += [[c0, s0 + j, s0 + i], [c1, s1 + i, s1 + j]]
    mesh = TriangleMesh(verts, np.array(faces))
    if mesh.signed_volume() < 0:
        mesh = TriangleMesh(verts, mesh.faces[:, ::-1])
    return mesh


DESK_JOINTS = np.array(
    [
        [0.0, 0.95, 0.0],  # pelvis (root)
        [0.0, 1.10, 0.0],  # torso
        [0.19, 1.40, 0.0],  # left arm
        [-0.19, 1.40, 0.0],  # right arm
    ]
)


def desk_body(segments=16):
    """Four-joint body (pelvis, torso, two arms) with a closed rigid surface.

    Shape coefficient 0 widens the shoulders, coefficient 1 raises the upper
    body; both are sensible in [-1, 1].
    """
    basis = np.zeros((4, 3, 2))
    basis[2, 0, 0], basis[3, 0, 0] = 0.02, -0.02
    basis[1, 1, 1] = 0.01
    basis[2, 1, 1] = basis[3, 1, 1] = 0.015
    parts = [
        (capped_tube([0, 0.68, 0], [0, 1.02, 0], (0.145, 0.10), segments), 0),
        (capped_tube([0, 0.98, 0], [0, 1.50, 0], (0.14, 0.09), segments), 1),
        (capped_tube([0.13, 1.40, 0], [0.78, 1.40, 0], (0.04, 0.04), segments), 2),
        (capped_tube([-0.13, 1.40, 0], [-0.78, 1.40, 0], (0.04, 0.04), segments), 3),
    ]
    verts, faces, owners, base = [], [], [], 0
    for mesh, joint in parts:
        verts.append(mesh.vertices)
        faces.append(mesh.faces + base)
        owners.append(np.full(mesh.n_vertices, joint))
        base += mesh.n_vertices
    surface = TriangleMesh(np.concatenate(verts), np.concatenate(faces))
    return BodyModel(
        DESK_JOINTS.copy(),
        np.array([-1, 0, 1, 1]),
        basis,
        surface=surface,
        surface_joints=np.concatenate(owners),
        names=["pelvis", "torso", "left_arm", "right_arm"],
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_obj(path, mesh):
    """Write v/vt/f records; faces use ``f v/vt`` so uvs survive a round trip."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    uv = getattr(mesh, "uv", None)
    if uv is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in uv.tolist()]
        lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces.tolist()]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Read a triangle OBJ; returns a `GarmentMesh` (uv None if absent)."""
    verts, tex, faces, face_tex = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise StructuralError(f"{path}:{lineno}: only triangles are supported")
            vi, ti = [], []
            for corner in parts[1:]:
                fields = corner.split("/")
                v = int(fields[0])
                vi.append(v - 1 if v > 0 else len(verts) + v)
                if len(fields) > 1 and fields[1]:
                    t = int(fields[1])
                    ti.append(t - 1 if t > 0 else len(tex) + t)
            faces.append(vi)
            face_tex.append(ti)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    uv = None
    if tex and all(len(t) == 3 for t in face_tex):
        tex = np.array(tex)
        uv = np.full((len(verts), 2), np.nan)
        for vi, ti in zip(faces, face_tex):
            for v, t in zip(vi, ti):
                if not np.isnan(uv[v, 0]) and not np.array_equal(uv[v], tex[t]):
                    raise StructuralError(f"{path}: vertex {v + 1} has more than one uv")
                uv[v] = tex[t]
        if np.isnan(uv).any():
            raise StructuralError(f"{path}: some vertices carry no uv")
    return GarmentMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), faces, uv)


def save_body(path, body):
    path = Path(path)
    doc = {
        "joints": body.rest_joints.tolist(),
        "parents": body.parents.tolist(),
        "shape_basis": body.shape_basis.tolist(),
        "names": body.names,
    }
    if body.surface is not None:
        surf = path.with_suffix(".surface.obj")
        write_obj(surf, body.surface)
        doc["surface"] = surf.name
        doc["surface_joints"] = body.surface_joints.tolist()
    path.write_text(json.dumps(doc, indent=1))


def load_body(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    unknown = set(doc) - {"joints", "parents", "shape_basis", "names", "surface", "surface_joints"}
    if unknown:
        raise ValidationError(f"unknown body keys: {sorted(unknown)}")
    surface = None
    if doc.get("surface"):
        m = read_obj(path.parent / doc["surface"])
        surface = TriangleMesh(m.vertices, m.faces)
    n = len(doc["joints"])
    return BodyModel(
        np.array(doc["joints"]),
        np.array(doc["parents"]),
        np.array(doc.get("shape_basis", np.zeros((n, 3, 0)))),
        surface=surface,
        surface_joints=np.array(doc["surface_joints"]) if surface is not None else None,
        names=doc.get("names"),
    )
