"""Design space: procedural T-pose garment generator and its MLP regressor.

The generator builds a top/dress out of four fixed-topology pieces: a front
and a back torso panel (together an elliptic tube) and two sleeve tubes.  The
design vector controls

* ``length``   -- panel length, between ``min_length`` and ``max_length``;
* ``sleeve``   -- sleeve length, between ``min_sleeve`` and ``max_sleeve``;
* ``cleavage`` -- depth of a V cut lowering the top of the front panel.

Only vertex positions move with the design; faces and uv coordinates are
computed once per template and shared by every design.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import StructuralError, ValidationError
from .geometry import GarmentMesh, SkinningWeights

MAGIC = b"DTPL"

PART_FRONT, PART_BACK, PART_LEFT_SLEEVE, PART_RIGHT_SLEEVE = range(4)


@dataclass(frozen=True)
class DesignParams:
    length: float = 0.5
    sleeve: float = 0.5
    cleavage: float = 0.0

    def __post_init__(self):
        for name in ("length", "sleeve", "cleavage"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValidationError(f"design parameter {name}={value!r} outside [0, 1]")

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64).reshape(-1)
        if arr.shape != (3,):
            raise StructuralError("design vector must have 3 entries")
        return cls(*map(float, arr))

    def as_array(self):
        return np.array([self.length, self.sleeve, self.cleavage])


@dataclass
class DesignTemplate:
    """Generator parameters plus the derived, design-independent topology.

    Panel and sleeve constants are dyadic so that extreme designs land on
    exactly representable coordinates.
    """

    panel_cols: int = 17
    panel_rows: int = 17
    sleeve_around: int = 24
    sleeve_rows: int = 10
    y_top: float = 1.5
    min_length: float = 0.375
    max_length: float = 0.875
    torso_radii: tuple = (0.185, 0.135)
    sleeve_center_y: float = 1.40
    sleeve_radius: float = 0.065
    sleeve_root: float = 0.16
    min_sleeve: float = 0.0625
    max_sleeve: float = 0.5625
    max_cleavage: float = 0.1875
    cleavage_half_width: float = 0.3
    waist_blend: tuple = (1.0, 1.2)
    shoulder_blend: float = 0.08
    faces: np.ndarray = field(init=False, repr=False)
    uv: np.ndarray = field(init=False, repr=False)
    part: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if min(self.panel_cols, self.panel_rows, self.sleeve_rows) < 2 or self.sleeve_around < 4:
            raise ValidationError("generator resolution too small")
        self.torso_radii = tuple(float(r) for r in self.torso_radii)
        self.waist_blend = tuple(float(r) for r in self.waist_blend)
        self.faces, self.uv, self.part = self._topology()
        self.faces.setflags(write=False)
        self.uv.setflags(write=False)
        self.part.setflags(write=False)

    # -- topology --------------------------------------------------------

    @property
    def n_panel(self):
        return self.panel_cols * self.panel_rows

    @property
    def n_sleeve(self):
        return self.sleeve_around * self.sleeve_rows

    @property
    def n_vertices(self):
        return 2 * self.n_panel + 2 * self.n_sleeve

    def params(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("faces", "uv", "part")}
        d["torso_radii"] = list(d["torso_radii"])
        d["waist_blend"] = list(d["waist_blend"])
        return d

    def _topology(self):
        faces, uvs, parts = [], [], []
        base = 0
        charts = [
            (self.panel_cols, self.panel_rows, (0.02, 0.52), False, PART_FRONT),
            (self.panel_cols, self.panel_rows, (0.52, 0.52), False, PART_BACK),
            (self.sleeve_around, self.sleeve_rows, (0.02, 0.02), False, PART_LEFT_SLEEVE),
            (self.sleeve_around, self.sleeve_rows, (0.52, 0.02), True, PART_RIGHT_SLEEVE),
        ]
        for cols, rows, (u0, v0), flip, part in charts:
            c, r = np.meshgrid(np.arange(cols), np.arange(rows))
            u = u0 + 0.46 * c.ravel() / (cols - 1)
            v = v0 + 0.46 - 0.46 * r.ravel() / (rows - 1)
            uvs.append(np.stack([u, v], axis=1))
            parts.append(np.full(cols * rows, part))
            idx = np.arange(cols * rows).reshape(rows, cols) + base
            a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
            d, e = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
            # rows run downwards in 3D; this winding makes normals point outward
            quad = np.concatenate([np.stack([a, d, e], 1), np.stack([a, e, b], 1)])
            if flip:
                quad = quad[:, ::-1]
            faces.append(quad)
            base += cols * rows
        return np.concatenate(faces), np.concatenate(uvs), np.concatenate(parts)

    # -- geometry --------------------------------------------------------

    def panel_length(self, p):
        return self.min_length + (self.max_length - self.min_length) * p.length

    def sleeve_length(self, p):
        return self.min_sleeve + (self.max_sleeve - self.min_sleeve) * p.sleeve

    def _panel(self, p, back):
        cols, rows = self.panel_cols, self.panel_rows
        a, b = self.torso_radii
        t = np.arange(cols) / (cols - 1)
        phi = (np.pi / 2 + np.pi * t) if back else (-np.pi / 2 + np.pi * t)
        x, z = a * np.sin(phi), b * np.cos(phi)
        bottom = self.y_top - self.panel_length(p)
        top = np.full(cols, self.y_top)
        if not back:
            dip = np.maximum(0.0, 1.0 - np.abs(t - 0.5) / self.cleavage_half_width)
            top = top - self.max_cleavage * p.cleavage * dip
        s = np.arange(rows)[:, None] / (rows - 1)
        y = top[None, :] - (top[None, :] - bottom) * s
        y[-1] = bottom
        return np.stack(np.broadcast_arrays(x[None, :], y, z[None, :]), axis=-1).reshape(-1, 3)

    def _sleeve(self, p, side):
        k = np.arange(self.sleeve_around)
        psi = 2 * np.pi * k / (self.sleeve_around - 1)
        psi[-1] = 0.0
        s = np.arange(self.sleeve_rows)[:, None] / (self.sleeve_rows - 1)
        x = side * (self.sleeve_root + self.sleeve_length(p) * s)
        y = self.sleeve_center_y + self.sleeve_radius * np.cos(psi)[None, :]
        z = self.sleeve_radius * np.sin(psi)[None, :]
        return np.stack(np.broadcast_arrays(x, y, z), axis=-1).reshape(-1, 3)

    def vertices(self, p):
        return np.concatenate(
            [self._panel(p, False), self._panel(p, True), self._sleeve(p, 1.0), self._sleeve(p, -1.0)]
        )

    def outward_normals(self, vertices):
        """Analytic outward direction of each canonical vertex (unit length)."""
        n = np.zeros_like(vertices)
        torso = self.part <= PART_BACK
        a, b = self.torso_radii
        n[torso, 0] = vertices[torso, 0] / a**2
        n[torso, 2] = vertices[torso, 2] / b**2
        sl = ~torso
        n[sl, 1] = vertices[sl, 1] - self.sleeve_center_y
        n[sl, 2] = vertices[sl, 2]
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def weights(self, vertices, joint_count=4):
        """Skinning weights of a canonical garment on the four-joint desk body.

        Torso panels blend pelvis->torso across the waist band; sleeves blend
        torso->arm over the first ``shoulder_blend`` metres from the root.
        """
        m = np.zeros((len(vertices), joint_count))
        torso = self.part <= PART_BACK
        lo, hi = self.waist_blend
        w = _smoothstep((vertices[torso, 1] - lo) / (hi - lo))
        m[torso, 1] = w
        m[torso, 0] = 1.0 - w
        for part, joint in ((PART_LEFT_SLEEVE, 2), (PART_RIGHT_SLEEVE, 3)):
            sel = self.part == part
            w = _smoothstep((np.abs(vertices[sel, 0]) - self.sleeve_root) / self.shoulder_blend)
            m[sel, joint] = w
            m[sel, 1] = 1.0 - w
        return SkinningWeights(m)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def design_mesh(template, p):
    """Canonical T-pose garment for design ``p``."""
    if not isinstance(p, DesignParams):
        p = DesignParams.from_array(p)
    return GarmentMesh(template.vertices(p), template.faces.copy(), template.uv.copy())


def design_weights(template, p):
    return template.weights(design_mesh(template, p).vertices)


# ---------------------------------------------------------------------------
# regressor
# ---------------------------------------------------------------------------


class DesignRegressor:
    """Fully connected map from design vector to vertex positions and uv."""

    def __init__(self, net, faces, mean, scale, hidden):
        self.net = net
        self.faces = np.asarray(faces)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = float(scale)
        self.hidden = tuple(hidden)
        self.heldout_error = float("nan")
        self.train_error = float("nan")

    @property
    def n_vertices(self):
        return self.mean.shape[0] // 5

    def predict_raw(self, designs):
        import torch

        x = torch.as_tensor(np.atleast_2d(designs) * 2.0 - 1.0, dtype=torch.float32)
        with torch.no_grad():
            out = self.net(x).double().numpy()
        return self.mean + self.scale * out

    def predict(self, p):
        if isinstance(p, DesignParams):
            p = p.as_array()
        raw = self.predict_raw(p)[0]
        n = self.n_vertices
        verts = raw[: 3 * n].reshape(n, 3)
        uv = np.clip(raw[3 * n :].reshape(n, 2), 0.0, 1.0)
        return GarmentMesh(verts, self.faces.copy(), uv)


def _mlp(n_in, hidden, n_out):
    import torch.nn as nn

    layers, width = [], n_in
    for h in hidden:
        layers += [nn.Linear(width, h), nn.SiLU()]
        width = h
    layers.append(nn.Linear(width, n_out))
    return nn.Sequential(*layers)


def fit_design_mlp(samples, config=None, holdout=0.2):
    """Train a `DesignRegressor` on ``(DesignParams, GarmentMesh)`` pairs.

    A fraction ``holdout`` of the samples (at least one, when there are at
    least five) is withheld; its mean vertex error in metres is stored on the
    result as ``heldout_error``.
    """
    import torch

    from .denoiser import TrainConfig

    config = config or TrainConfig(steps=1500, lr=3e-3)
    if not samples:
        raise ValidationError("no design samples")
    ref = samples[0][1]
    for i, (_, mesh) in enumerate(samples):
        if not ref.same_topology(mesh):
            raise StructuralError(f"sample {i} does not share the reference topology")

    designs = np.stack([
        (p.as_array() if isinstance(p, DesignParams) else np.asarray(p, dtype=np.float64))
        for p, _ in samples
    ])
    targets = np.stack([np.concatenate([m.vertices.ravel(), m.uv.ravel()]) for _, m in samples])

    rng = np.random.default_rng(config.seed)
    n_hold = int(round(holdout * len(samples))) if len(samples) >= 5 else 0
    order = rng.permutation(len(samples))
    hold, train = order[:n_hold], order[n_hold:]

    mean = targets[train].mean(axis=0)
    scale = max(float(np.abs(targets[train] - mean).max()), 1e-6)

    torch.manual_seed(config.seed)
    net = _mlp(3, config.mlp_hidden, targets.shape[1])
    x = torch.as_tensor(designs[train] * 2.0 - 1.0, dtype=torch.float32)
    y = torch.as_tensor((targets[train] - mean) / scale, dtype=torch.float32)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.steps, 1))
    batch = min(config.batch_size, len(train)) if config.batch_size else len(train)
    gen = torch.Generator().manual_seed(config.seed)
    for _ in range(config.steps):
        idx = torch.randperm(len(train), generator=gen)[:batch]
        loss = torch.mean((net(x[idx]) - y[idx]) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()

    reg = DesignRegressor(net, ref.faces, mean, scale, config.mlp_hidden)
    n = ref.n_vertices

    def vertex_error(ids):
        pred = reg.predict_raw(designs[ids])[:, : 3 * n].reshape(len(ids), n, 3)
        true = targets[ids, : 3 * n].reshape(len(ids), n, 3)
        return float(np.linalg.norm(pred - true, axis=-1).mean())

    reg.train_error = vertex_error(train)
    if n_hold:
        reg.heldout_error = vertex_error(hold)
    return reg


# ---------------------------------------------------------------------------
# .dtpl files
# ---------------------------------------------------------------------------


def _write_blob(path, header, arrays):
    buf = io.BytesIO()
    entries = []
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": buf.tell()})
        buf.write(data.tobytes())
    header = dict(header, arrays=entries)
    head = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + buf.getvalue())


def _read_blob(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise StructuralError(f"{path}: not a .dtpl file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + n])
    body = raw[8 + n :]
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"]))
        arrays[e["name"]] = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
    return header, arrays


def save_template(path, template):
    _write_blob(
        path,
        {"kind": "template", "params": template.params()},
        [("faces", template.faces), ("uv", template.uv)],
    )


def load_template(path):
    header, arrays = _read_blob(path)
    if header.get("kind") != "template":
        raise StructuralError(f"{path}: expected a template, found {header.get('kind')!r}")
    template = DesignTemplate(**header["params"])
    if not np.array_equal(arrays["faces"].astype(np.int64), template.faces):
        raise StructuralError(f"{path}: stored faces disagree with generator parameters")
    return template


def save_regressor(path, reg):
    arrays = [("faces", reg.faces), ("mean", reg.mean)]
    arrays += [(f"net.{k}", v.detach().numpy()) for k, v in reg.net.state_dict().items()]
    _write_blob(
        path,
        {
            "kind": "regressor",
            "hidden": list(reg.hidden),
            "scale": reg.scale,
            "heldout_error": reg.heldout_error,
        },
        arrays,
    )


def load_regressor(path):
    import torch

    header, arrays = _read_blob(path)
    if header.get("kind") != "regressor":
        raise StructuralError(f"{path}: expected a regressor, found {header.get('kind')!r}")
    mean = arrays["mean"].astype(np.float64)
    net = _mlp(3, header["hidden"], len(mean))
    state = {k[4:]: torch.tensor(np.array(v)) for k, v in arrays.items() if k.startswith("net.")}
    net.load_state_dict(state)
    reg = DesignRegressor(net, arrays["faces"].astype(np.int64), mean, header["scale"], header["hidden"])
    reg.heldout_error = header.get("heldout_error", float("nan"))
    return reg
