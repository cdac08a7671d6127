"""Previous-frame conditioning: augmentation, teacher-forced training, rollout.

The temporal denoiser sees six input channels: the noisy texture followed by
the texture of the previous frame.  Training feeds ground-truth previous
frames passed through `augment`; rollout feeds the model's own output.  The
first frame of every sequence is conditioned on an all-zero texture.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .bake import DisplacementTexture, NormalizationSpec
from .denoiser import TextureSet, train
from .diffusion import CLAMP, sample_normalized
from .errors import StructuralError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentationConfig:
    """Perturbations applied to the previous-frame input during training.

    Ranges are closed intervals; sigma is in texels and jitter acts on
    normalised values.  ``erase_fraction`` is the total area of all erased
    rectangles as a fraction of the texture.
    """

    blur_sigma: tuple = (0.5, 2.0)
    blur_p: float = 0.5
    jitter_scale: tuple = (0.9, 1.1)
    jitter_offset: tuple = (-0.05, 0.05)
    jitter_p: float = 0.5
    erase_count: tuple = (1, 3)
    erase_fraction: tuple = (0.05, 0.25)
    erase_p: float = 0.3

    def __post_init__(self):
        for name in ("blur_p", "jitter_p", "erase_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")
        for name in ("blur_sigma", "jitter_scale", "jitter_offset", "erase_count", "erase_fraction"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} range is reversed: {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        if self.blur_sigma[0] < 0:
            raise ValidationError("blur sigma must be non-negative")
        if self.erase_count[0] < 1 or int(self.erase_count[0]) != self.erase_count[0]:
            raise ValidationError("erase_count must be positive integers")
        if not (0.0 <= self.erase_fraction[0] and self.erase_fraction[1] < 1.0):
            raise ValidationError("erase fraction must lie in [0, 1)")

    @classmethod
    def off(cls):
        return cls(blur_p=0.0, jitter_p=0.0, erase_p=0.0)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _blur(x, mask, sigma):
    """Mask-normalised Gaussian blur, so chart borders do not fade toward zero."""
    if sigma <= 0:
        return x
    m = mask.astype(np.float64)
    wsum = gaussian_filter(m, sigma, mode="constant")
    out = np.empty_like(x)
    for ch in range(x.shape[0]):
        num = gaussian_filter(x[ch] * m, sigma, mode="constant")
        out[ch] = np.where(wsum > 1e-12, num / np.maximum(wsum, 1e-12), 0.0)
    return out


def _erase(x, cfg, rng):
    _, h, w = x.shape
    count = int(rng.integers(cfg.erase_count[0], cfg.erase_count[1] + 1))
    total = rng.uniform(*cfg.erase_fraction)
    out = x.copy()
    rects = []
    for _ in range(count):
        area = total / count * h * w
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        rh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        rw = int(np.clip(round(area / rh), 1, w))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        out[:, top:top + rh, left:left + rw] = 0.0
        rects.append((top, left, rh, rw))
    return out, rects


def augment_array(x, mask, cfg, rng):
    """Perturb a channels-first array in model units with a numpy Generator."""
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    out = x
    # each draw happens whether or not the op fires, so streams stay aligned
    if rng.uniform() < cfg.blur_p:
        out = _blur(out, mask, rng.uniform(*cfg.blur_sigma))
    if rng.uniform() < cfg.jitter_p:
        scale = rng.uniform(*cfg.jitter_scale, size=(x.shape[0], 1, 1))
        offset = rng.uniform(*cfg.jitter_offset, size=(x.shape[0], 1, 1))
        out = out * scale + offset
    if rng.uniform() < cfg.erase_p:
        out, _ = _erase(out, cfg, rng)
    if out is x:
        return x.copy()
    return out * mask


def augment(tex, cfg, rng):
    """Return a perturbed copy of ``tex``; the mask is never changed."""
    spec = tex.normalization or NormalizationSpec()
    arr = augment_array(tex.normalized(spec), tex.mask, cfg, rng)
    if cfg.blur_p == 0 and cfg.jitter_p == 0 and cfg.erase_p == 0:
        return DisplacementTexture(tex.offsets.copy(), tex.mask.copy(), tex.normalization, dict(tex.provenance))
    return DisplacementTexture.from_normalized(arr, tex.mask, spec, provenance=tex.provenance)


def batch_augmenter(cfg, mask):
    """``fn(batch, torch_generator)`` for `denoiser.train`, one numpy stream per item."""
    mask = np.asarray(mask, dtype=bool)

    def fn(batch, gen):
        seeds = torch.randint(0, 2**31 - 1, (batch.shape[0],), generator=gen).tolist()
        out = [augment_array(b, mask, cfg, np.random.default_rng(s)) for b, s in zip(batch.double().numpy(), seeds)]
        return torch.tensor(np.stack(out), dtype=batch.dtype)

    return fn


@dataclass
class SequenceSample:
    """Ordered ``(condition, texture)`` frames with their timestamps in seconds."""

    conditions: list
    textures: list
    times: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if len(self.conditions) != len(self.textures):
            raise StructuralError("conditions and textures differ in length")
        if self.times is None:
            self.times = np.arange(len(self.textures), dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) != len(self.textures):
            raise StructuralError("one timestamp per frame is required")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("frame timestamps must increase")
        if self.textures:
            ref = self.textures[0]
            for k, tex in enumerate(self.textures[1:], 1):
                if tex.offsets.shape != ref.offsets.shape:
                    raise StructuralError(f"frame {k} has resolution {tex.offsets.shape[:2]}, expected {ref.offsets.shape[:2]}")
                if not np.array_equal(tex.mask, ref.mask):
                    raise StructuralError(f"frame {k} comes from a different garment layout")

    def __len__(self):
        return len(self.textures)

    @classmethod
    def from_frames(cls, frames, fps=30.0, name=""):
        """Build from `dataset.Frame` objects already in order."""
        return cls([f.condition for f in frames], [f.texture for f in frames],
                   np.array([f.frame for f in frames], dtype=np.float64) / fps, name)


def temporal_set(sequences, normalization=None):
    """Teacher-forced training tensors; short sequences are skipped with a warning."""
    targets, conditions, previous, mask = [], [], [], None
    for seq in sequences:
        if len(seq) < 2:
            log.warning("skipping sequence %r with %d frame(s)", seq.name, len(seq))
            continue
        spec = normalization or seq.textures[0].normalization or NormalizationSpec()
        arrays = [t.normalized(spec) for t in seq.textures]
        if mask is None:
            mask = seq.textures[0].mask
        elif not np.array_equal(mask, seq.textures[0].mask):
            raise StructuralError(f"sequence {seq.name!r} uses a different garment layout")
        for n, arr in enumerate(arrays):
            targets.append(arr)
            conditions.append(np.asarray(seq.conditions[n], dtype=np.float64))
            previous.append(arrays[n - 1] if n > 0 else np.zeros_like(arr))
    if not targets:
        raise ValidationError("no sequence has at least two frames")
    return TextureSet(
        torch.tensor(np.stack(targets), dtype=torch.float32),
        torch.tensor(np.stack(conditions), dtype=torch.float32),
        torch.tensor(np.stack(previous), dtype=torch.float32),
        mask,
    )


def train_temporal(model, sequences, sched, config, aug=None, normalization=None, checkpoint_dir=None, on_step=None):
    """Train a six-channel denoiser on ground-truth previous frames."""
    if model.in_channels != 2 * model.out_channels:
        raise StructuralError(
            f"temporal model needs {2 * model.out_channels} input channels, has {model.in_channels}"
        )
    data = temporal_set(sequences, normalization)
    aug = AugmentationConfig() if aug is None else aug
    fn = batch_augmenter(aug, data.mask)
    trained = train(model, data, sched, config, checkpoint_dir, augment=fn, on_step=on_step)
    trained.temporal = True
    return trained


def rollout(f, conditions, sched, rng, mask, normalization, mode="standard-ddpm", clamp=CLAMP, previous=None):
    """Autoregressive sampling, each frame conditioned on the previous output.

    ``previous`` optionally supplies the normalised texture preceding frame 0;
    the default is zeros.  Returns one `DisplacementTexture` per condition.
    """
    if getattr(f, "in_channels", 6) != 6:
        raise StructuralError("rollout needs a temporal (six-channel) model")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    m = torch.tensor(mask, dtype=torch.float32)
    prev = torch.zeros((1, 3, h, w)) if previous is None else torch.as_tensor(previous, dtype=torch.float32).reshape(1, 3, h, w)
    out = []
    for c in conditions:
        c = torch.as_tensor(np.asarray(c), dtype=torch.float32).reshape(1, -1)
        y = sample_normalized(f, c, (1, 3, h, w), sched, rng, mode, prev, clamp)
        y = y * m
        out.append(DisplacementTexture.from_normalized(y[0].double().numpy(), mask, normalization))
        prev = y
    return out
