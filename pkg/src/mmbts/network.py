"""Multi-encoder segmentation network with a feature-enhancing generator.

One encoder per acquired modality plus an independent encoder for the
generated surrogate modality. The generator decoder and the segmentation
path consume the *same* encoder objects, so encoder weights are genuinely
shared between generation and segmentation. Per level, the five modality
feature maps are fused by concurrent channel/spatial attention before the
segmentation decoder; class logits from every decoder stage are summed for
deep supervision.

Spatial shapes follow input_shape / 2^level with base_filters * 2^level
channels; levels are indexed 0 (full resolution) to levels-1 (bottleneck).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
from torch import nn

from .correlation import Cpem
from .errors import AvailabilityError, ConfigError

N_ACQUIRED = 4
N_SOURCES = 5  # acquired modalities + generated surrogate

ABLATIONS = ("baseline", "fe_g", "fe_g_cc")


@dataclass
class NetworkConfig:
    levels: int = 4
    base_filters: int = 8
    input_shape: tuple[int, int, int] = (32, 32, 32)
    classes: int = 4
    dilation_rates: tuple[int, int] = (2, 4)
    dropout_rate: float = 0.3
    deep_supervision: bool = True

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.levels < 2:
            raise ConfigError(f"need at least 2 levels, got {self.levels}")
        if self.classes != 4:
            raise ConfigError(f"classes must be 4, got {self.classes}")
        down = 2 ** (self.levels - 1)
        for s in self.input_shape:
            if s % down != 0:
                raise ConfigError(
                    f"input shape {self.input_shape} not divisible by 2^{self.levels - 1}"
                )
            if s // down < 2:
                raise ConfigError(
                    f"input shape {self.input_shape} collapses below 2 voxels at the bottleneck"
                )

    def channels(self, level: int) -> int:
        return self.base_filters * (2 ** level)

    def level_shape(self, level: int) -> tuple[int, int, int]:
        return tuple(s // (2 ** level) for s in self.input_shape)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["dilation_rates"] = tuple(d["dilation_rates"])
        return cls(**d)


class FeaturePyramid:
    """Per-level feature maps of one modality; the deepest is the bottleneck."""

    def __init__(self, levels):
        self.levels = list(levels)

    @property
    def bottleneck(self) -> torch.Tensor:
        return self.levels[-1]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def _conv_in_act(in_ch: int, out_ch: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.LeakyReLU(0.01),
    )


class ResDil(nn.Module):
    """Dilated conv pair (rates 2 then 4) with dropout in between and a
    residual connection around the whole sequence."""

    def __init__(self, channels: int, dilation_rates=(2, 4), dropout_rate: float = 0.3):
        super().__init__()
        r1, r2 = dilation_rates
        self.body = nn.Sequential(
            nn.Conv3d(channels, channels, 3, padding=r1, dilation=r1, bias=False),
            nn.InstanceNorm3d(channels, affine=True),
            nn.LeakyReLU(0.01),
            nn.Dropout(dropout_rate),
            nn.Conv3d(channels, channels, 3, padding=r2, dilation=r2, bias=False),
            nn.InstanceNorm3d(channels, affine=True),
            nn.LeakyReLU(0.01),
        )

    def forward(self, x):
        return x + self.body(x)


class Block1(nn.Module):
    """Channel-adjusting conv followed by a res_dil block (first encoder level
    and post-concatenation decoder stages)."""

    def __init__(self, in_ch: int, out_ch: int, cfg: NetworkConfig):
        super().__init__()
        self.conv = _conv_in_act(in_ch, out_ch)
        self.res_dil = ResDil(out_ch, cfg.dilation_rates, cfg.dropout_rate)

    def forward(self, x):
        return self.res_dil(self.conv(x))


class Block2(nn.Module):
    """Stride-2 downsampling conv followed by a res_dil block."""

    def __init__(self, in_ch: int, out_ch: int, cfg: NetworkConfig):
        super().__init__()
        self.conv = _conv_in_act(in_ch, out_ch, stride=2)
        self.res_dil = ResDil(out_ch, cfg.dilation_rates, cfg.dropout_rate)

    def forward(self, x):
        return self.res_dil(self.conv(x))


class Block3(nn.Module):
    """Nearest-neighbor x2 up-sampling followed by a conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = _conv_in_act(in_ch, out_ch)

    def forward(self, x):
        return self.conv(self.up(x))


class Encoder(nn.Module):
    """Single-modality encoder: block 1 at full resolution, block 2 below."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        stages = [Block1(1, cfg.channels(0), cfg)]
        for level in range(1, cfg.levels):
            stages.append(Block2(cfg.channels(level - 1), cfg.channels(level), cfg))
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(feats)


class GeneratorDecoder(nn.Module):
    """Decoder of the feature-enhancing generator.

    Concatenates up-sampled features with the four acquired-modality encoder
    maps of the same level (absent modalities contribute zeros) and adjusts
    channels with block 1; emits a single-channel volume at full resolution.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        top = cfg.levels - 1
        self.bottleneck_adjust = Block1(N_ACQUIRED * cfg.channels(top), cfg.channels(top), cfg)
        ups, merges = [], []
        for level in range(top - 1, -1, -1):
            ups.append(Block3(cfg.channels(level + 1), cfg.channels(level)))
            merges.append(Block1((N_ACQUIRED + 1) * cfg.channels(level), cfg.channels(level), cfg))
        self.ups = nn.ModuleList(ups)
        self.merges = nn.ModuleList(merges)
        self.head = nn.Conv3d(cfg.channels(0), 1, 1)

    def forward(self, masked_levels: list[list[torch.Tensor]]) -> torch.Tensor:
        # masked_levels[level][modality], absent modalities already zeroed
        top = len(masked_levels) - 1
        x = self.bottleneck_adjust(torch.cat(masked_levels[top], dim=1))
        for i, level in enumerate(range(top - 1, -1, -1)):
            x = self.ups[i](x)
            x = self.merges[i](torch.cat([x] + masked_levels[level], dim=1))
        return self.head(x)


class FusionBlock(nn.Module):
    """Concurrent channel-wise and spatial-wise attention over the
    concatenated five-modality features of one level, then a projection back
    to the level's channel count.

    Setting `gate_override` (test hook) replaces both sigmoid gates with that
    constant, which reduces the block to concatenation + projection.
    """

    def __init__(self, level_channels: int, n_inputs: int = N_SOURCES):
        super().__init__()
        cat_ch = n_inputs * level_channels
        hidden = max(1, cat_ch // 2)
        self.channel_gate = nn.Sequential(
            nn.Linear(cat_ch, hidden),
            nn.ReLU(),
            nn.Linear(hidden, cat_ch),
            nn.Sigmoid(),
        )
        self.spatial_gate = nn.Sequential(nn.Conv3d(cat_ch, 1, 1), nn.Sigmoid())
        self.project = _conv_in_act(cat_ch, level_channels)
        self.gate_override: float | None = None

    def forward(self, maps: list[torch.Tensor]) -> torch.Tensor:
        shapes = {tuple(m.shape) for m in maps}
        if len(shapes) != 1:
            raise ValueError(f"fusion inputs disagree on shape: {sorted(shapes)}")
        x = torch.cat(maps, dim=1)
        if self.gate_override is not None:
            g_ch = torch.full_like(x[:, :, :1, :1, :1], self.gate_override)
            g_sp = torch.full_like(x[:, :1], self.gate_override)
        else:
            pooled = x.mean(dim=(2, 3, 4))
            g_ch = self.channel_gate(pooled)[:, :, None, None, None]
            g_sp = self.spatial_gate(x)
        return self.project(x * g_ch + x * g_sp)


class SegDecoder(nn.Module):
    """Segmentation decoder over the fused pyramid with deep supervision.

    Mirrors the generator decoder: block 3 up-sampling, concatenation with
    the fused features of the level, block 1 adjustment. Every decoder stage
    projects class logits; with deep supervision the running logits are
    up-sampled and summed stage by stage, otherwise only the full-resolution
    head is used.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.deep_supervision = cfg.deep_supervision
        self.classes = cfg.classes
        top = cfg.levels - 1
        ups, merges, heads = [], [], []
        for level in range(top - 1, -1, -1):
            ups.append(Block3(cfg.channels(level + 1), cfg.channels(level)))
            merges.append(Block1(2 * cfg.channels(level), cfg.channels(level), cfg))
            heads.append(nn.Conv3d(cfg.channels(level), cfg.classes, 1))
        self.ups = nn.ModuleList(ups)
        self.merges = nn.ModuleList(merges)
        self.heads = nn.ModuleList(heads)
        self.up2 = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, fused: list[torch.Tensor]):
        top = len(fused) - 1
        x = fused[top]
        level_logits = []
        for i, level in enumerate(range(top - 1, -1, -1)):
            x = self.ups[i](x)
            x = self.merges[i](torch.cat([x, fused[level]], dim=1))
            level_logits.append(self.heads[i](x))
        if self.deep_supervision:
            logits = level_logits[0]
            for aux in level_logits[1:]:
                logits = self.up2(logits) + aux
        else:
            logits = level_logits[-1]
        probs = torch.softmax(logits, dim=1)
        return probs, level_logits


class SegmentationModel(nn.Module):
    """Full network: per-modality encoders, generator, fusion, segmentation.

    The model doubles as the parameter store: state_dict() is the named
    weight map, with `version` and `init_seed` describing its provenance.
    Ablations control which sub-networks exist: "baseline" has neither the
    generator decoder (the surrogate slot is a zero volume) nor the
    correlation estimators; "fe_g" adds the generator; "fe_g_cc" adds the
    per-modality correlation parameter estimators.
    """

    VERSION = "1"

    def __init__(self, cfg: NetworkConfig, ablation: str = "fe_g_cc", init_seed: int = 0):
        super().__init__()
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
        self.cfg = cfg
        self.ablation = ablation
        self.init_seed = init_seed
        self.version = self.VERSION
        self.encoders = nn.ModuleList(Encoder(cfg) for _ in range(N_ACQUIRED))
        self.m5_encoder = Encoder(cfg)
        self.generator = GeneratorDecoder(cfg) if ablation != "baseline" else None
        self.fusions = nn.ModuleList(
            FusionBlock(cfg.channels(level)) for level in range(cfg.levels)
        )
        self.seg_decoder = SegDecoder(cfg)
        if ablation == "fe_g_cc":
            bottleneck_ch = cfg.channels(cfg.levels - 1)
            self.cpems = nn.ModuleList(Cpem(bottleneck_ch) for _ in range(N_SOURCES))
        else:
            self.cpems = None

    # -- sub-network entry points -------------------------------------------------

    def encode(self, volume: torch.Tensor, modality_index: int) -> FeaturePyramid:
        """Run one modality encoder; index 4 selects the surrogate's encoder."""
        volume = self._check_volume(volume)
        if modality_index == N_SOURCES - 1:
            return self.m5_encoder(volume)
        return self.encoders[modality_index](volume)

    def generate_m5(self, pyramids: list[FeaturePyramid], availability: torch.Tensor) -> torch.Tensor:
        """Decode the surrogate modality from the available modalities' features."""
        if self.generator is None:
            raise ConfigError("baseline ablation has no generator decoder")
        if (availability.sum(dim=-1) == 0).any():
            raise AvailabilityError("no available modality to generate from")
        masked = self._masked_levels(pyramids, availability)
        return self.generator(masked)

    def fuse_attention(self, level: int, maps: list[torch.Tensor]) -> torch.Tensor:
        return self.fusions[level](maps)

    def segment(self, fused: list[torch.Tensor]):
        return self.seg_decoder(fused)

    # -- full forward -------------------------------------------------------------

    def forward_full(self, x: torch.Tensor, availability: torch.Tensor) -> dict:
        """Run the whole pipeline on pattern-masked inputs.

        x: (B, 4, D, H, W) with absent modalities zeroed; availability: (B, 4)
        floats in {0, 1}. Returns the surrogate volume, class probabilities,
        per-stage logits, and the five bottleneck feature maps feeding the
        correlation block.
        """
        if x.ndim != 5 or x.shape[1] != N_ACQUIRED:
            raise ValueError(f"expected (B, 4, D, H, W) input, got {tuple(x.shape)}")
        pyramids = [self.encoders[i](x[:, i : i + 1]) for i in range(N_ACQUIRED)]

        if self.generator is not None:
            m5 = self.generator(self._masked_levels(pyramids, availability))
        else:
            m5 = torch.zeros_like(x[:, :1])
        m5_pyramid = self.m5_encoder(m5)

        masked = self._masked_levels(pyramids, availability)
        fused = [
            self.fusions[level](masked[level] + [m5_pyramid[level]])
            for level in range(self.cfg.levels)
        ]
        probs, level_logits = self.seg_decoder(fused)

        bottlenecks = [p.bottleneck for p in pyramids] + [m5_pyramid.bottleneck]
        return {
            "m5_volume": m5,
            "class_probabilities": probs,
            "level_logits": level_logits,
            "bottleneck_features": bottlenecks,
        }

    forward = forward_full

    # -- helpers ------------------------------------------------------------------

    def _check_volume(self, volume: torch.Tensor) -> torch.Tensor:
        if volume.ndim == 3:
            volume = volume[None, None]
        elif volume.ndim == 4:
            volume = volume[None]
        if tuple(volume.shape[-3:]) != self.cfg.input_shape:
            raise ValueError(
                f"volume shape {tuple(volume.shape[-3:])} != configured {self.cfg.input_shape}"
            )
        return volume

    def _masked_levels(
        self, pyramids: list[FeaturePyramid], availability: torch.Tensor
    ) -> list[list[torch.Tensor]]:
        """Per level, the four modality maps with absent ones zeroed per sample."""
        gate = availability.reshape(availability.shape[0], N_ACQUIRED, 1, 1, 1, 1)
        out = []
        for level in range(len(pyramids[0])):
            out.append([pyramids[i][level] * gate[:, i] for i in range(N_ACQUIRED)])
        return out

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(p.shape) for name, p in self.state_dict().items()}


def build_network(cfg: NetworkConfig, seed: int, ablation: str = "fe_g_cc") -> SegmentationModel:
    """Construct a model with deterministic initialization from `seed`."""
    torch.manual_seed(seed)
    return SegmentationModel(cfg, ablation=ablation, init_seed=seed)
