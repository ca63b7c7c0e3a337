"""Conditional velocity U-Net and checkpoint persistence.

The network predicts the velocity of the straight noise-to-image path at
(x_t, t). Spatial conditioning (baseline image and, optionally, the scaled
dose map) is concatenated to x_t along the channel axis; vector conditioning
(normalized days embedding and, optionally, a one-hot chemotherapy token) is
injected through cross-attention at the deepest resolution levels. Residual
blocks receive the flow-time embedding additively.

Checkpoints are a custom little-endian binary: magic ``RFCKPT1``, u32 length
+ JSON header (config and training metadata), u32 tensor count, then per
tensor name/rank/dims and raw float32 data, in sorted name order so identical
checkpoints serialize to identical bytes.
"""

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .phantom import MAX_FOLLOWUP_DAY, ChemoArm, TreatmentContext

CHECKPOINT_MAGIC = b"RFCKPT1"
TIME_FREQ_BASE = 1.0e4
OUT_CHANNELS = 3
DOSE_CLIP_MAX = 1.2  # counterfactual dose channels are clipped to [0, 1.2]

CHEMO_ORDER = (ChemoArm.NONE, ChemoArm.ADJUVANT_TMZ, ChemoArm.RERT_TMZ)


class ConfigurationError(ValueError):
    """A checkpoint or request is inconsistent with the model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and conditioning layout of the velocity network."""

    image_size: int = 32
    level_widths: tuple = (16, 32, 48)
    attention_levels: tuple = (1, 2)
    context_dim: int = 64
    attention_heads: int = 2
    time_embed_dim: int = 64
    use_dose: bool = True
    use_chemo: bool = True

    def __post_init__(self):
        if len(self.level_widths) != 3:
            raise ConfigurationError("exactly 3 resolution levels are supported")
        if any(w <= 0 for w in self.level_widths):
            raise ConfigurationError("level widths must be positive")
        if not set(self.attention_levels) <= set(range(len(self.level_widths))):
            raise ConfigurationError("attention levels must reference existing levels")
        if self.image_size % 4 != 0 or self.image_size < 8:
            raise ConfigurationError("image_size must be a multiple of 4 and >= 8")
        if self.time_embed_dim % 2 != 0:
            raise ConfigurationError("time_embed_dim must be even")
        for w in self.level_widths:
            if w % self.attention_heads != 0 and self._wants_attention():
                raise ConfigurationError("attention heads must divide level widths")
        object.__setattr__(self, "level_widths", tuple(int(w) for w in self.level_widths))
        object.__setattr__(self, "attention_levels",
                           tuple(sorted(int(v) for v in self.attention_levels)))

    def _wants_attention(self):
        return len(self.attention_levels) > 0

    @property
    def base_width(self):
        return self.level_widths[0]

    @property
    def in_channels(self):
        return OUT_CHANNELS + self.spatial_channels

    @property
    def spatial_channels(self):
        return 3 + (1 if self.use_dose else 0)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["level_widths"] = tuple(d["level_widths"])
        d["attention_levels"] = tuple(d["attention_levels"])
        return cls(**d)


def conditioning_variants(base: ModelConfig = ModelConfig()):
    """The four treatment-conditioning ablations of one architecture."""
    return [dataclasses.replace(base, use_dose=d, use_chemo=c)
            for d in (False, True) for c in (False, True)]


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: [sin(f_i t)..., cos(f_i t)...] with dim/2
    geometrically spaced frequencies f_i = TIME_FREQ_BASE ** (i / (dim/2))."""
    if dim < 2 or dim % 2 != 0:
        raise ValueError("embedding dim must be even and >= 2")
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    i = torch.arange(half, dtype=t.dtype if t.is_floating_point() else torch.float64)
    freqs = TIME_FREQ_BASE ** (i / half)
    ang = t[:, None].to(freqs.dtype) * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass
class ConditioningBundle:
    """Batched conditioning: spatial channels plus raw vector features.

    The learned projections that turn the vector features into cross-attention
    tokens live in the network (see VelocityUNet.context_tokens)."""

    spatial: torch.Tensor           # (B, 3(+1), H, W)
    days: torch.Tensor              # (B,) float, in days
    chemo_onehot: torch.Tensor | None = None   # (B, 3) iff use_chemo

    def __len__(self):
        return self.spatial.shape[0]


def chemo_onehot(chemo: ChemoArm) -> torch.Tensor:
    v = torch.zeros(len(CHEMO_ORDER))
    v[CHEMO_ORDER.index(ChemoArm(chemo))] = 1.0
    return v


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, C) float numpy -> (C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(img)).float().permute(2, 0, 1)


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) or (1, C, H, W) tensor -> (H, W, C) float32 numpy."""
    if x.ndim == 4:
        x = x[0]
    return x.detach().permute(1, 2, 0).contiguous().numpy().astype(np.float32)


def build_conditioning(config: ModelConfig, baseline: np.ndarray,
                       dose: np.ndarray, ctx: TreatmentContext) -> ConditioningBundle:
    """Assemble the conditioning bundle for a single record/context pair."""
    spatial = [image_to_tensor(baseline)]
    if config.use_dose:
        scaled = np.clip(dose * ctx.dose_scale, 0.0, DOSE_CLIP_MAX)
        spatial.append(torch.from_numpy(scaled).float()[None])
    bundle = ConditioningBundle(
        spatial=torch.cat(spatial, dim=0)[None],
        days=torch.tensor([float(ctx.days_since_baseline)]),
        chemo_onehot=chemo_onehot(ctx.chemo)[None] if config.use_chemo else None,
    )
    return bundle


def stack_conditioning(bundles) -> ConditioningBundle:
    return ConditioningBundle(
        spatial=torch.cat([b.spatial for b in bundles], dim=0),
        days=torch.cat([b.days for b in bundles], dim=0),
        chemo_onehot=None if bundles[0].chemo_onehot is None
        else torch.cat([b.chemo_onehot for b in bundles], dim=0),
    )


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_norm_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionBlock(nn.Module):
    """Multi-head cross-attention from feature-map pixels to context tokens."""

    def __init__(self, channels, ctx_dim, heads):
        super().__init__()
        if channels % heads != 0:
            raise ConfigurationError("heads must divide the channel width")
        self.heads = heads
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(ctx_dim, channels)
        self.to_v = nn.Linear(ctx_dim, channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x, tokens):
        b, c, h, w = x.shape
        dh = c // self.heads
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        s = tokens.shape[1]
        q = q.reshape(b, h * w, self.heads, dh).transpose(1, 2)
        k = k.reshape(b, s, self.heads, dh).transpose(1, 2)
        v = v.reshape(b, s, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / dh ** 0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class VelocityUNet(nn.Module):
    """Three-level conditional U-Net predicting path velocity at (x_t, t)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w0, w1, w2 = config.level_widths
        emb = 4 * w0
        self.emb_dim = emb
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, emb), nn.SiLU(), nn.Linear(emb, emb))

        self.day_token = nn.Linear(config.time_embed_dim, config.context_dim)
        if config.use_chemo:
            self.chemo_token = nn.Linear(len(CHEMO_ORDER), config.context_dim)

        def attn(level, width):
            if level in config.attention_levels:
                return CrossAttentionBlock(width, config.context_dim,
                                           config.attention_heads)
            return None

        self.stem = nn.Conv2d(config.in_channels, w0, 3, padding=1)
        self.enc0 = ResidualBlock(w0, w0, emb)
        self.enc0_attn = attn(0, w0)
        self.down0 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.enc1 = ResidualBlock(w1, w1, emb)
        self.enc1_attn = attn(1, w1)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.mid0 = ResidualBlock(w2, w2, emb)
        self.mid_attn = attn(2, w2)
        self.mid1 = ResidualBlock(w2, w2, emb)
        self.up1 = nn.Conv2d(w2, w1, 3, padding=1)
        self.dec1 = ResidualBlock(2 * w1, w1, emb)
        self.dec1_attn = attn(1, w1)
        self.up0 = nn.Conv2d(w1, w0, 3, padding=1)
        self.dec0 = ResidualBlock(2 * w0, w0, emb)
        self.dec0_attn = attn(0, w0)
        self.head_norm = nn.GroupNorm(_norm_groups(w0), w0)
        self.head = nn.Conv2d(w0, OUT_CHANNELS, 3, padding=1)

    def context_tokens(self, bundle: ConditioningBundle) -> torch.Tensor:
        """Project the raw vector conditioning into the token sequence."""
        p = next(self.parameters())
        t_day = (bundle.days / MAX_FOLLOWUP_DAY).to(p.dtype)
        emb = time_embedding(t_day, self.config.time_embed_dim).to(p.dtype)
        tokens = [self.day_token(emb)]
        if self.config.use_chemo:
            if bundle.chemo_onehot is None:
                raise ConfigurationError("model expects chemotherapy conditioning")
            tokens.append(self.chemo_token(bundle.chemo_onehot.to(p.dtype)))
        return torch.stack(tokens, dim=1)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor,
                bundle: ConditioningBundle) -> torch.Tensor:
        if x_t.ndim != 4 or x_t.shape[1] != OUT_CHANNELS:
            raise ValueError(f"x_t must be (B, {OUT_CHANNELS}, H, W), got {tuple(x_t.shape)}")
        if x_t.shape[-2:] != (self.config.image_size, self.config.image_size):
            raise ValueError(f"expected {self.config.image_size}px input, got {tuple(x_t.shape)}")
        if bundle.spatial.shape[1] != self.config.spatial_channels:
            raise ValueError(
                f"expected {self.config.spatial_channels} spatial conditioning channels, "
                f"got {bundle.spatial.shape[1]}")
        if len(bundle) == 1 and x_t.shape[0] > 1:
            bundle = ConditioningBundle(
                spatial=bundle.spatial.expand(x_t.shape[0], -1, -1, -1),
                days=bundle.days.expand(x_t.shape[0]),
                chemo_onehot=None if bundle.chemo_onehot is None
                else bundle.chemo_onehot.expand(x_t.shape[0], -1))
        elif len(bundle) != x_t.shape[0]:
            raise ValueError(
                f"conditioning batch {len(bundle)} does not match input batch {x_t.shape[0]}")
        p = next(self.parameters())
        t = torch.as_tensor(t, dtype=p.dtype)
        if t.ndim == 0:
            t = t.expand(x_t.shape[0])
        emb = self.time_mlp(time_embedding(t, self.config.time_embed_dim).to(p.dtype))
        tokens = self.context_tokens(bundle)

        x = torch.cat([x_t.to(p.dtype), bundle.spatial.to(p.dtype)], dim=1)
        h0 = self.enc0(self.stem(x), emb)
        if self.enc0_attn is not None:
            h0 = self.enc0_attn(h0, tokens)
        h1 = self.enc1(self.down0(h0), emb)
        if self.enc1_attn is not None:
            h1 = self.enc1_attn(h1, tokens)
        m = self.mid0(self.down1(h1), emb)
        if self.mid_attn is not None:
            m = self.mid_attn(m, tokens)
        m = self.mid1(m, emb)
        u = F.interpolate(m, scale_factor=2, mode="nearest")
        u = self.dec1(torch.cat([self.up1(u), h1], dim=1), emb)
        if self.dec1_attn is not None:
            u = self.dec1_attn(u, tokens)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.dec0(torch.cat([self.up0(u), h0], dim=1), emb)
        if self.dec0_attn is not None:
            u = self.dec0_attn(u, tokens)
        return self.head(F.silu(self.head_norm(u)))


def init_model(config: ModelConfig, seed: int = 0) -> VelocityUNet:
    """Deterministically initialized network (same seed, same weights)."""
    torch.manual_seed(seed)
    return VelocityUNet(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    config: ModelConfig
    tensors: dict               # name -> float32 numpy array
    metadata: dict = field(default_factory=dict)


def model_to_checkpoint(model: VelocityUNet, metadata=None) -> ModelCheckpoint:
    tensors = {name: p.detach().cpu().to(torch.float32).numpy().copy()
               for name, p in model.state_dict().items()}
    return ModelCheckpoint(config=model.config, tensors=tensors,
                           metadata=dict(metadata or {}))


def model_from_checkpoint(ckpt: ModelCheckpoint) -> VelocityUNet:
    model = VelocityUNet(ckpt.config)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model


def checkpoint_to_bytes(ckpt: ModelCheckpoint) -> bytes:
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "metadata": ckpt.metadata},
        sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = sorted(ckpt.tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(blob: bytes) -> ModelCheckpoint:
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = arr.astype(np.float32)
    return ModelCheckpoint(config=ModelConfig.from_dict(header["config"]),
                           tensors=tensors, metadata=header["metadata"])


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())
