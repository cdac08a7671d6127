"""UV displacement textures: baking meshes into textures and sampling them back.

Texel ``(row j, column i)`` of a ``W x H`` texture is centred at
``u = (i + 0.5) / W``, ``v = (j + 0.5) / H`` and is covered when that centre
lies inside (or on the boundary of) a uv triangle.  Covered texels hold the
barycentric interpolation of the per-vertex offsets; uncovered texels hold
zeros and are skipped by `sample_texture`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StructuralError, ValidationError
from .geometry import GarmentMesh, skin, unpose

MAGIC = b"DISP"
_EDGE_TOL = 1e-12


@dataclass
class NormalizationSpec:
    """Affine map between metre offsets and the diffusion model's units."""

    scale: float = 1.0
    offset_center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.scale = float(self.scale)
        self.offset_center = np.asarray(self.offset_center, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValidationError("normalisation scale must be positive")

    def normalize(self, offsets):
        return (offsets - self.offset_center) / self.scale

    def denormalize(self, values):
        return values * self.scale + self.offset_center

    def to_dict(self):
        return {"scale": self.scale, "offset_center": self.offset_center.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scale"], d["offset_center"])


@dataclass
class DisplacementTexture:
    offsets: np.ndarray
    mask: np.ndarray
    normalization: NormalizationSpec | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        h, w = self.mask.shape
        if self.offsets.shape != (h, w, 3):
            raise StructuralError(f"offsets {self.offsets.shape} do not match mask {self.mask.shape}")
        if h != w:
            raise StructuralError("displacement textures must be square")
        if not np.all(np.isfinite(self.offsets)):
            raise ValidationError("texture contains non-finite offsets")

    @property
    def width(self):
        return self.offsets.shape[1]

    @property
    def height(self):
        return self.offsets.shape[0]

    @property
    def resolution(self):
        return self.width

    def normalized(self, spec=None):
        """Channels-first array in model units, zero outside the mask."""
        spec = spec or self.normalization or NormalizationSpec()
        arr = spec.normalize(self.offsets) * self.mask[..., None]
        return np.ascontiguousarray(arr.transpose(2, 0, 1))

    @classmethod
    def from_normalized(cls, values, mask, spec, clamp=None, provenance=None):
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] == 3 and values.ndim == 3:
            values = values.transpose(1, 2, 0)
        if clamp is not None:
            values = np.clip(values, -clamp, clamp)
        offsets = spec.denormalize(values) * mask[..., None]
        return cls(offsets, mask, spec, dict(provenance or {}))


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------


@dataclass
class RasterPlan:
    """Which face covers each covered texel, with barycentric weights."""

    resolution: int
    texels: np.ndarray  # flat texel index j * W + i
    faces: np.ndarray  # covering face
    bary: np.ndarray  # (K, 3)

    @property
    def mask(self):
        m = np.zeros(self.resolution * self.resolution, dtype=bool)
        m[self.texels] = True
        return m.reshape(self.resolution, self.resolution)


def _face_candidates(uv, faces, res):
    """Yield (face, texel ids, barycentric coords) for centres inside each face."""
    tri = uv[faces]
    lo = np.floor(tri.min(axis=1) * res - 0.5).astype(int)
    hi = np.ceil(tri.max(axis=1) * res - 0.5).astype(int)
    lo = np.clip(lo, 0, res - 1)
    hi = np.clip(hi, 0, res - 1)
    for f in range(len(faces)):
        ii = np.arange(lo[f, 0], hi[f, 0] + 1)
        jj = np.arange(lo[f, 1], hi[f, 1] + 1)
        I, J = np.meshgrid(ii, jj)
        cu, cv = (I.ravel() + 0.5) / res, (J.ravel() + 0.5) / res
        a, b, c = tri[f]
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        l1 = ((cu - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (cv - a[1])) / det
        l2 = ((b[0] - a[0]) * (cv - a[1]) - (cu - a[0]) * (b[1] - a[1])) / det
        l0 = 1.0 - l1 - l2
        yield f, J.ravel() * res + I.ravel(), np.stack([l0, l1, l2], axis=1)


_PLAN_CACHE = {}


def raster_plan(uv, faces, resolution):
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    key = (uv.tobytes(), faces.tobytes(), int(resolution))
    plan = _PLAN_CACHE.get(key)
    if plan is not None:
        return plan
    texels, owner, bary = [], [], []
    for f, ids, lam in _face_candidates(uv, faces, resolution):
        inside = np.all(lam >= -_EDGE_TOL, axis=1)
        texels.append(ids[inside])
        owner.append(np.full(inside.sum(), f))
        bary.append(lam[inside])
    texels = np.concatenate(texels)
    owner = np.concatenate(owner)
    bary = np.concatenate(bary)
    # texels on shared edges are claimed by the lowest face index
    texels, first = np.unique(texels, return_index=True)
    plan = RasterPlan(int(resolution), texels, owner[first], bary[first])
    if len(_PLAN_CACHE) > 32:
        _PLAN_CACHE.clear()
    _PLAN_CACHE[key] = plan
    return plan


def coverage_count(uv, faces, resolution, strict=False):
    """Number of faces whose interior (``strict``) or closure holds each texel centre."""
    count = np.zeros(resolution * resolution, dtype=np.int64)
    tol = 1e-9 if strict else -_EDGE_TOL
    for _, ids, lam in _face_candidates(np.asarray(uv, float), np.asarray(faces), resolution):
        inside = np.all(lam > tol, axis=1) if strict else np.all(lam >= tol, axis=1)
        np.add.at(count, ids[inside], 1)
    return count.reshape(resolution, resolution)


def rasterize(uv, faces, values, resolution):
    """Barycentric fill of per-vertex ``values`` (N, C) into an (H, W, C) grid."""
    values = np.asarray(values, dtype=np.float64)
    plan = raster_plan(uv, faces, resolution)
    corner = values[np.asarray(faces)[plan.faces]]  # (K, 3, C)
    out = np.zeros((resolution * resolution, values.shape[1]))
    out[plan.texels] = np.einsum("kv,kvc->kc", plan.bary, corner)
    return out.reshape(resolution, resolution, -1), plan.mask


def bake_offsets(mesh, offsets, resolution, provenance=None):
    """Texture from per-vertex offsets defined on a uv-mapped mesh."""
    if mesh.uv is None:
        raise StructuralError("mesh has no uv coordinates")
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (mesh.n_vertices, 3):
        raise StructuralError("need one 3D offset per vertex")
    grid, mask = rasterize(mesh.uv, mesh.faces, offsets, resolution)
    return DisplacementTexture(grid, mask, provenance=dict(provenance or {}))


def bake(sim_frame, template_canonical, weights, body, shape, pose, resolution=128, provenance=None):
    """Encode a posed garment as canonical-space offsets from its template."""
    if not sim_frame.same_topology(template_canonical):
        raise StructuralError("simulated frame and template do not share topology")
    if sim_frame.uv is not None and template_canonical.uv is not None:
        if not np.array_equal(sim_frame.uv, template_canonical.uv):
            raise StructuralError("simulated frame and template uv layouts differ")
    canonical = unpose(sim_frame, weights, body, shape, pose)
    offsets = canonical.vertices - template_canonical.vertices
    return bake_offsets(template_canonical, offsets, resolution, provenance)


# ---------------------------------------------------------------------------
# sampling and reconstruction
# ---------------------------------------------------------------------------


def sample_texture(tex, uv):
    """Mask-aware bilinear lookup at uv points; returns metres.

    Accepts a single ``(2,)`` point or an ``(N, 2)`` array.
    """
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    if np.any(~np.isfinite(uv)) or np.any(uv < 0) or np.any(uv > 1):
        raise ValidationError("uv coordinates must lie in [0, 1]^2")
    W, H = tex.width, tex.height
    x = uv[:, 0] * W - 0.5
    y = uv[:, 1] * H - 0.5
    i0 = np.floor(x).astype(np.int64)
    j0 = np.floor(y).astype(np.int64)
    fx = x - i0
    fy = y - j0
    acc = np.zeros((len(uv), 3))
    wsum = np.zeros(len(uv))
    for di, wx in ((0, 1.0 - fx), (1, fx)):
        for dj, wy in ((0, 1.0 - fy), (1, fy)):
            i, j = i0 + di, j0 + dj
            valid = (i >= 0) & (i < W) & (j >= 0) & (j < H)
            ic, jc = np.clip(i, 0, W - 1), np.clip(j, 0, H - 1)
            w = wx * wy * (valid & tex.mask[jc, ic])
            acc += w[:, None] * tex.offsets[jc, ic]
            wsum += w
    out = np.zeros_like(acc)
    ok = wsum > 0
    out[ok] = acc[ok] / wsum[ok, None]
    return out[0] if single else out


def reconstruct_garment(tex, template, p, weights, body, shape, pose):
    """Canonical design mesh plus sampled offsets, posed by skinning."""
    from .design import design_mesh

    canonical = design_mesh(template, p)
    if weights is None:
        weights = template.weights(canonical.vertices, body.joint_count)
    rest = canonical.with_vertices(canonical.vertices + sample_texture(tex, canonical.uv))
    return skin(rest, weights, body, shape, pose)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def save_disp(path, tex, normalization=None, provenance=None):
    spec = normalization or tex.normalization or NormalizationSpec()
    header = {
        "width": tex.width,
        "height": tex.height,
        "normalization": spec.to_dict(),
        "provenance": dict(provenance if provenance is not None else tex.provenance),
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = np.ascontiguousarray(tex.offsets, dtype="<f4").tobytes()
    mask = np.packbits(tex.mask.ravel()).tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + blob + mask)


def load_disp(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise StructuralError(f"{path}: not a .disp file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + n])
    w, h = header["width"], header["height"]
    start = 8 + n
    count = w * h * 3
    offsets = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(h, w, 3)
    bits = np.frombuffer(raw, dtype=np.uint8, offset=start + 4 * count)
    mask = np.unpackbits(bits)[: w * h].astype(bool).reshape(h, w)
    return DisplacementTexture(
        offsets.astype(np.float64),
        mask,
        NormalizationSpec.from_dict(header["normalization"]),
        header.get("provenance", {}),
    )


def export_png(path, tex, normalization=None):
    """Lossy 8-bit preview; v increases upwards in the image."""
    from PIL import Image

    spec = normalization or tex.normalization or NormalizationSpec()
    values = np.clip(spec.normalize(tex.offsets), -1.0, 1.0)
    rgb = np.round((values + 1.0) * 127.5).astype(np.uint8)
    rgb[~tex.mask] = 0
    Image.fromarray(rgb[::-1]).save(path)
