"""Conditional UNet noise predictor and its training loop.

The network mirrors six encoder levels with six decoder levels joined by skip
connections; five stride-2 downsamplings sit between the encoder levels, so
the input resolution must be a multiple of 32.  Each level is a residual block
with two 3x3 convolutions.  The condition vector passes through a two-layer
MLP, is summed with a timestep embedding, and every residual block adds a
per-block linear projection of that sum to its activations after the first
convolution.  Level five (index 4) carries a spatial self-attention block when
its feature map is at least 2x2.

Normalisation is by group RMS without mean subtraction (`GroupRMSNorm`), which
keeps the overall level of the input visible to every block.  The UNet output
``F`` is turned into a noise estimate as

    f = sqrt(alpha_bar_t) F + sqrt(1 - alpha_bar_t) y_t

(the velocity parametrisation).  At high noise the estimate is then dominated
by the exact ``y_t`` term, so small network biases cannot steer sampling
early on; the training loss is still the plain noise-prediction error.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import make_schedule, training_loss
from .errors import StructuralError, TrainingDivergenceError, ValidationError

log = logging.getLogger(__name__)

PAPER_CHANNELS = (128, 128, 256, 256, 512, 512)
DESK_CHANNELS = (16, 16, 32, 32, 64, 64)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    steps: int = 2000
    channels: tuple = DESK_CHANNELS
    resolution: int = 32
    seed: int = 0
    cond_width: int = 128
    time_embedding: str = "sinusoidal"
    attention_level: int | None = 4
    mode: str = "standard-ddpm"
    log_every: int = 100
    checkpoint_every: int = 0
    mlp_hidden: tuple = (256, 256)
    grad_clip: float | None = 1.0
    lr_schedule: str = "cosine"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if len(self.channels) != 6:
            raise ValidationError("channels must list six widths")
        if self.resolution % 32:
            raise ValidationError("resolution must be a multiple of 32")
        if self.lr < 0:
            raise ValidationError("learning rate must be non-negative")
        if self.time_embedding not in ("sinusoidal", "learned"):
            raise ValidationError("time_embedding must be 'sinusoidal' or 'learned'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError("lr_schedule must be 'constant' or 'cosine'")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def _groups(ch):
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class GroupRMSNorm(nn.Module):
    """Group normalisation by root-mean-square only, with per-channel affine.

    Unlike GroupNorm the group mean is not subtracted, so a sample's overall
    level (often the only thing separating modes of smooth textures) reaches
    every block.
    """

    def __init__(self, groups, channels, eps=1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        b, c = x.shape[:2]
        g = x.reshape(b, self.groups, -1)
        rms = torch.sqrt(g.pow(2).mean(dim=2, keepdim=True) + self.eps)
        x = (g / rms).reshape(x.shape)
        shape = (1, c) + (1,) * (x.ndim - 2)
        return x * self.weight.reshape(shape) + self.bias.reshape(shape)


def sinusoidal_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.norm1 = GroupRMSNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = GroupRMSNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.norm = GroupRMSNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """UNet ``f(c, y_t, t[, cond_image])`` predicting the added noise.

    ``in_channels`` is 3 for the static model and 6 when a previous-frame
    texture is concatenated to the noisy input.  ``T``, ``beta_start`` and
    ``beta_end`` describe the noise schedule the output is parametrised for.
    """

    def __init__(self, cond_dim, channels=DESK_CHANNELS, in_channels=3, out_channels=3,
                 cond_width=128, time_embedding="sinusoidal", attention_level=4,
                 resolution=32, T=100, beta_start=1e-3, beta_end=0.2):
        super().__init__()
        channels = tuple(int(c) for c in channels)
        if len(channels) != 6:
            raise StructuralError("the UNet needs six channel widths")
        self.config = dict(
            cond_dim=cond_dim, channels=list(channels), in_channels=in_channels,
            out_channels=out_channels, cond_width=cond_width, time_embedding=time_embedding,
            attention_level=attention_level, resolution=resolution, T=T,
            beta_start=beta_start, beta_end=beta_end,
        )
        ab = make_schedule(T, beta_start, beta_end).alpha_bar
        self.register_buffer("sqrt_ab", torch.tensor(np.sqrt(ab), dtype=torch.float32), persistent=False)
        self.register_buffer("sqrt_1mab", torch.tensor(np.sqrt(1.0 - ab), dtype=torch.float32), persistent=False)
        self.cond_dim = cond_dim
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.cond_width = cond_width
        self.time_embedding = time_embedding
        n_levels = len(channels)

        self.cond_mlp = nn.Sequential(
            nn.Linear(cond_dim, cond_width), nn.SiLU(), nn.Linear(cond_width, cond_width)
        )
        if time_embedding == "learned":
            self.time_table = nn.Embedding(T + 1, cond_width)
        self.time_mlp = nn.Sequential(
            nn.Linear(cond_width, cond_width), nn.SiLU(), nn.Linear(cond_width, cond_width)
        )

        self.inp = nn.Conv2d(in_channels, channels[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsample = nn.ModuleList()
        prev = channels[0]
        for i, ch in enumerate(channels):
            self.down_blocks.append(ResBlock(prev, ch, cond_width))
            size = resolution >> i
            if i == attention_level and size >= 2:
                self.down_attn[str(i)] = SelfAttention(ch)
            if i < n_levels - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsample = nn.ModuleList()
        for i in reversed(range(n_levels)):
            ch = channels[i]
            self.up_blocks.append(ResBlock(prev + ch, ch, cond_width))
            size = resolution >> i
            if i == attention_level and size >= 2:
                self.up_attn[str(i)] = SelfAttention(ch)
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
            prev = ch

        self.out_norm = GroupRMSNorm(_groups(channels[0]), channels[0])
        self.out = nn.Conv2d(channels[0], out_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @classmethod
    def from_config(cls, cfg, cond_dim, in_channels=3, sched=None):
        sched = sched or make_schedule()
        b = sched.to_dict()
        return cls(cond_dim, cfg.channels, in_channels, 3, cfg.cond_width, cfg.time_embedding,
                   cfg.attention_level, cfg.resolution, sched.T, b["beta_start"], b["beta_end"])

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    def embed(self, c, t):
        t = torch.as_tensor(t).reshape(-1)
        if self.time_embedding == "learned":
            temb = self.time_table(t.long())
        else:
            temb = sinusoidal_embedding(t, self.cond_width).to(self.out.weight.dtype)
        if t.shape[0] == 1 and c.shape[0] > 1:
            temb = temb.expand(c.shape[0], -1)
        return self.cond_mlp(c) + self.time_mlp(temb)

    def forward(self, c, y, t, cond_image=None):
        noisy = y
        if cond_image is not None:
            y = torch.cat([y, cond_image], dim=1)
        if y.shape[1] != self.in_channels:
            raise StructuralError(f"expected {self.in_channels} input channels, got {y.shape[1]}")
        n_down = len(self.downsample)
        if y.shape[-1] % (1 << n_down) or y.shape[-2] % (1 << n_down):
            raise StructuralError(f"resolution {tuple(y.shape[-2:])} is not a multiple of {1 << n_down}")
        c = torch.as_tensor(c, dtype=y.dtype)
        if c.ndim == 1:
            c = c.expand(y.shape[0], -1)
        emb = self.embed(c, t)

        h = self.inp(y)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            if str(i) in self.down_attn:
                h = self.down_attn[str(i)](h)
            skips.append(h)
            if i < n_down:
                h = self.downsample[i](h)
        for k, block in enumerate(self.up_blocks):
            i = len(self.down_blocks) - 1 - k
            h = block(torch.cat([h, skips[i]], dim=1), emb)
            if str(i) in self.up_attn:
                h = self.up_attn[str(i)](h)
            if i > 0:
                h = self.upsample[k](F.interpolate(h, scale_factor=2.0, mode="nearest"))
        idx = torch.as_tensor(t).reshape(-1).long() - 1
        a = self.sqrt_ab[idx].to(h.dtype)[:, None, None, None]
        s = self.sqrt_1mab[idx].to(h.dtype)[:, None, None, None]
        return a * self.out(F.silu(self.out_norm(h))) + s * noisy[:, : self.out_channels]


def backward(f, loss):
    """Backpropagate ``loss`` and return ``{name: grad}`` for every parameter.

    Raises `TrainingDivergenceError` naming the first tensor with a
    non-finite gradient.
    """
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(f"loss is {loss.item()}")
    loss.backward()
    grads = {}
    for name, p in f.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.all(torch.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}", tensor=name)
        grads[name] = g
    return grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TextureSet:
    """Training tensors: normalised targets, conditions, optional extra input."""

    targets: torch.Tensor  # (N, 3, H, W)
    conditions: torch.Tensor  # (N, D)
    previous: torch.Tensor | None = None  # (N, 3, H, W)
    mask: np.ndarray | None = None

    def __len__(self):
        return self.targets.shape[0]


@dataclass
class TrainedModel:
    model: Denoiser
    config: TrainConfig
    schedule: dict
    losses: list = field(default_factory=list)
    step: int = 0
    normalization: dict | None = None
    temporal: bool = False


def train(model, data, sched, config, checkpoint_dir=None, augment=None, on_step=None):
    """Adam on the noise-prediction loss.

    With ``lr_schedule="cosine"`` the learning rate follows a half cosine from
    ``config.lr`` down to zero at ``config.steps``.

    ``augment(previous_batch, generator)``, when given, perturbs the extra
    input channels of each batch.  Losses are recorded every step; if a loss
    or gradient turns non-finite the last good parameters are restored and
    `TrainingDivergenceError` is raised.
    """
    if len(data) == 0:
        raise ValidationError("training set is empty")
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    if config.lr_schedule == "cosine":
        total = config.steps
        decay = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: 0.5 * (1 + math.cos(math.pi * min(k, total) / total)))
    else:
        decay = None
    model.train()
    losses = []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    n = len(data)
    for step in range(1, config.steps + 1):
        idx = torch.randint(0, n, (min(config.batch_size, n),), generator=gen)
        prev = None
        if data.previous is not None:
            prev = data.previous[idx]
            if augment is not None:
                prev = augment(prev, gen)
        opt.zero_grad(set_to_none=True)
        loss = training_loss(model, data.targets[idx], data.conditions[idx], gen, sched, prev)
        try:
            backward(model, loss)
        except TrainingDivergenceError:
            model.load_state_dict(last_good)
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, TrainedModel(model, config, sched.to_dict(), losses, step - 1))
            raise
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        if decay is not None:
            decay.step()
        losses.append(float(loss.item()))
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f", step, np.mean(losses[-config.log_every:]))
        if step % 50 == 0:
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if checkpoint_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_dir, TrainedModel(model, config, sched.to_dict(), losses, step))
        if on_step is not None:
            on_step(step, losses[-1])
    model.eval()
    return TrainedModel(model, config, sched.to_dict(), losses, config.steps, temporal=data.previous is not None)


def trailing_mean(losses, window=100):
    losses = np.asarray(losses, dtype=np.float64)
    if len(losses) < window:
        return losses.copy()
    kernel = np.ones(window) / window
    return np.convolve(losses, kernel, mode="valid")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory, trained):
    """``manifest.json`` plus ``tensors.bin`` (little-endian float32) and ``loss.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "tensors.bin", "wb") as fh:
        for name, tensor in trained.model.state_dict().items():
            data = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(data.shape), "offset": offset})
            offset += data.nbytes
    manifest = {
        "architecture": trained.model.config,
        "train": trained.config.to_dict(),
        "schedule": trained.schedule,
        "step": trained.step,
        "seed": trained.config.seed,
        "temporal": trained.temporal,
        "normalization": trained.normalization,
        "tensors": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    with open(directory / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, value in enumerate(trained.losses, 1):
            w.writerow([i, repr(float(value))])


def load_checkpoint(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arch = manifest["architecture"]
    model = Denoiser(**arch)
    raw = (directory / "tensors.bin").read_bytes()
    state = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.tensor(np.array(arr))
    model.load_state_dict(state)
    model.eval()
    losses = []
    loss_path = directory / "loss.csv"
    if loss_path.exists():
        with open(loss_path) as fh:
            losses = [float(r["loss"]) for r in csv.DictReader(fh)]
    return TrainedModel(
        model,
        TrainConfig.from_dict(manifest["train"]),
        manifest["schedule"],
        losses,
        manifest["step"],
        manifest.get("normalization"),
        manifest.get("temporal", False),
    )
