"""Encoder-decoder and classifier backbones for the three stages.

Every network consumes inputs on the 72x96 grid: full-resolution images and
heatmaps are sum-pooled by 4 before the first layer, which keeps desk-scale
training affordable on a CPU while the output grid matches the full-scale
models.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..pose import GRID_H, GRID_W, J, NON_TORSO, TORSO

LOG_EPS = 1e-4


@dataclass
class NetConfig:
    width: int = 32
    depth: int = 3
    stacks: int = 1
    fine_width: int = 16
    cls_widths: tuple[int, ...] = (16, 32, 64, 64)
    cls_blocks: tuple[int, ...] = (1, 1, 1, 1)
    identity_bias: bool = True
    image_channels: int = 1

    @classmethod
    def desk(cls) -> "NetConfig":
        return cls()

    @classmethod
    def full(cls) -> "NetConfig":
        # three-block hourglass, ResNet18-sized classifier
        return cls(width=128, depth=4, stacks=3, fine_width=32, cls_widths=(64, 128, 256, 512), cls_blocks=(2, 2, 2, 2))

    def to_json(self) -> dict:
        d = asdict(self)
        d["cls_widths"] = list(self.cls_widths)
        d["cls_blocks"] = list(self.cls_blocks)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["cls_widths"] = tuple(d["cls_widths"])
        d["cls_blocks"] = tuple(d["cls_blocks"])
        return cls(**d)


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch // 4) or 1, ch)


class Residual(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.n1 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.n2 = _gn(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _gn(cout))

    def forward(self, x):
        y = F.relu(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class HourglassBlock(nn.Module):
    def __init__(self, depth: int, ch: int):
        super().__init__()
        self.up = Residual(ch, ch)
        self.low1 = Residual(ch, ch)
        self.low2 = HourglassBlock(depth - 1, ch) if depth > 1 else Residual(ch, ch)
        self.low3 = Residual(ch, ch)

    def forward(self, x):
        up = self.up(x)
        low = F.max_pool2d(x, 2, ceil_mode=True)
        low = self.low3(self.low2(self.low1(low)))
        return up + F.interpolate(low, size=x.shape[-2:], mode="nearest")


def pool_to_grid(x: torch.Tensor, image_channels: int = 1) -> torch.Tensor:
    """Pool 288x384 inputs to 72x96: mean over image channels, sum over heatmaps.

    Grid-sized inputs pass through.
    """
    if x.shape[-2:] == (GRID_H, GRID_W):
        return x
    if x.shape[-2:] != (4 * GRID_H, 4 * GRID_W):
        raise ValueError(f"inputs must be {4 * GRID_H}x{4 * GRID_W} or {GRID_H}x{GRID_W}, got {tuple(x.shape[-2:])}")
    p = F.avg_pool2d(x, 4)
    return torch.cat([p[:, :image_channels], p[:, image_channels:] * 16.0], dim=1)


class HourglassNet(nn.Module):
    """Stacked hourglass at half grid resolution with a full-grid skip path.

    Returns per-channel logits on the 72x96 grid.
    """

    def __init__(self, cin: int, cout: int, cfg: NetConfig):
        super().__init__()
        w, fw = cfg.width, cfg.fine_width
        self.fine = nn.Sequential(nn.Conv2d(cin, fw, 1, bias=False), _gn(fw), nn.ReLU())
        self.down = nn.Sequential(nn.Conv2d(cin, w, 3, 2, 1, bias=False), _gn(w), nn.ReLU())
        self.stacks = nn.ModuleList([HourglassBlock(cfg.depth, w) for _ in range(cfg.stacks)])
        self.post = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(w, w, 1, bias=False), _gn(w), nn.ReLU()) for _ in range(cfg.stacks)]
        )
        self.merge = nn.ModuleList([nn.Conv2d(w, w, 1) for _ in range(cfg.stacks - 1)])
        self.lift = nn.Conv2d(w, fw, 1)
        self.refine = nn.Sequential(nn.Conv2d(fw, fw, 3, 1, 1, bias=False), _gn(fw), nn.ReLU())
        self.head = nn.Conv2d(fw, cout, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def logits(self, x):
        fine = self.fine(x)
        y = self.down(x)
        for i, (hg, post) in enumerate(zip(self.stacks, self.post)):
            z = post(hg(y))
            y = y + self.merge[i](z) if i < len(self.merge) else z
        up = F.interpolate(self.lift(y), size=fine.shape[-2:], mode="nearest")
        return self.head(self.refine(fine + up))


def spatial_log_softmax(logits: torch.Tensor) -> torch.Tensor:
    b, c, h, w = logits.shape
    return F.log_softmax(logits.reshape(b, c, h * w), dim=2).reshape(b, c, h, w)


GEOMETRY_WIDTH = 64
GEOMETRY_SCALE = 10.0  # cells


def soft_argmax(maps):
    """Expected (col, row) cell of each normalised channel: (B, L, H, W) -> (B, L, 2)."""
    mass = maps.sum(dim=(2, 3)).clamp_min(1e-12)
    cols = torch.arange(maps.shape[-1], dtype=maps.dtype, device=maps.device)
    rows = torch.arange(maps.shape[-2], dtype=maps.dtype, device=maps.device)
    x = (maps.sum(dim=2) * cols).sum(dim=-1) / mass
    y = (maps.sum(dim=3) * rows).sum(dim=-1) / mass
    return torch.stack([x, y], dim=-1)


class ResidualClassifier(nn.Module):
    """Residual encoder; global pooling plus pooling weighted by an attention channel."""

    def __init__(self, cin: int, n_out: int, cfg: NetConfig, attention: tuple[int, ...], extra: int = 0):
        super().__init__()
        widths, blocks = cfg.cls_widths, cfg.cls_blocks
        self.attention = attention
        self.stem = nn.Sequential(nn.Conv2d(cin, widths[0], 3, 2, 1, bias=False), _gn(widths[0]), nn.ReLU())
        stages, prev = [], widths[0]
        for i, (w, n) in enumerate(zip(widths, blocks)):
            layers = [Residual(prev, w, stride=1 if i == 0 else 2)]
            layers += [Residual(w, w) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(widths[-2] + 2 * widths[-1] + extra, n_out)
        nn.init.zeros_(self.fc.weight)
        nn.init.zeros_(self.fc.bias)

    @staticmethod
    def _attn_pool(f, att):
        a = F.adaptive_avg_pool2d(att, f.shape[-2:])
        a = a / a.sum(dim=(2, 3), keepdim=True).clamp_min(1e-8)
        return (f * a).sum(dim=(2, 3))

    def forward(self, x, extra=None):
        att = x[:, list(self.attention)].sum(dim=1, keepdim=True)
        f = self.stem(x)
        feats = []
        for stage in self.stages:
            f = stage(f)
            feats.append(f)
        pooled = [self._attn_pool(feats[-2], att), self._attn_pool(feats[-1], att), feats[-1].mean(dim=(2, 3))]
        if extra is not None:
            pooled.append(extra)
        return self.fc(torch.cat(pooled, dim=1))


# ---------------------------------------------------------------- the stage models
#
# Input channel layout on the grid: [image (C), H_p (15), H_r (1), H_center (15)].


class _StageModel(nn.Module):
    kind = ""
    # set by training and checkpoint loading; inference refuses untrained models by default
    trained = False

    def _grid(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"{self.kind} model expects (B, {self.in_channels}, H, W) inputs, got {tuple(x.shape)}")
        return pool_to_grid(x, self.cfg.image_channels)


class GoalNet(_StageModel):
    kind = "goal"

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        self.in_channels = self.cfg.image_channels + J
        self.net = HourglassNet(self.in_channels, 1, self.cfg)

    def forward(self, x):
        return spatial_log_softmax(self.net.logits(self._grid(x)))


class TypeNet(_StageModel):
    kind = "type"

    def __init__(self, k: int, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        self.k = k
        self.in_channels = self.cfg.image_channels + J + 1
        self.net = ResidualClassifier(self.in_channels, k, self.cfg, attention=(self.in_channels - 1,))

    def forward(self, x):
        return F.log_softmax(self.net(self._grid(x)), dim=1)


class PoseNet(_StageModel):
    """Refines a painted cluster-centre pose into 14 per-joint distributions.

    With ``identity_bias`` the painted centre heatmaps enter the output logits
    through a learned gain, so an untrained model reproduces the centre pose.
    """

    kind = "pose"

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        c = self.cfg.image_channels
        self.in_channels = c + J + 1 + J
        self.center_channels = [c + J + 1 + int(j) for j in NON_TORSO]
        self.net = HourglassNet(self.in_channels, J - 1, self.cfg)
        self.gain = nn.Parameter(torch.tensor(1.0 if self.cfg.identity_bias else 0.0), requires_grad=self.cfg.identity_bias)

    def forward(self, x):
        x = self._grid(x)
        logits = self.net.logits(x)
        if self.cfg.identity_bias:
            logits = logits + self.gain * torch.log(x[:, self.center_channels] + LOG_EPS)
        return spatial_log_softmax(logits)


class HeatmapBaselineNet(_StageModel):
    """Direct past-pose heatmaps from the image and current pose (15 channels)."""

    kind = "heatmap"

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        self.in_channels = self.cfg.image_channels + J
        self.net = HourglassNet(self.in_channels, J, self.cfg)

    def forward(self, x):
        return spatial_log_softmax(self.net.logits(self._grid(x)))


class SemanticNet(_StageModel):
    """Binary plausibility logit for (image, pose heatmaps)."""

    kind = "semantic"

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        c = self.cfg.image_channels
        self.in_channels = c + J
        self.net = ResidualClassifier(self.in_channels, 1, self.cfg, attention=tuple(range(c, c + J)), extra=GEOMETRY_WIDTH)
        # skeleton shape branch: torso-relative joint offsets plus torso position
        self.geometry = nn.Sequential(
            nn.Linear(2 * J, GEOMETRY_WIDTH), nn.ReLU(), nn.Linear(GEOMETRY_WIDTH, GEOMETRY_WIDTH), nn.ReLU(),
        )

    def geometry_features(self, g):
        c = self.cfg.image_channels
        xy = soft_argmax(g[:, c : c + J])  # (B, J, 2) in cells
        rel = (xy[:, NON_TORSO] - xy[:, TORSO : TORSO + 1]) / GEOMETRY_SCALE
        size = xy.new_tensor([GRID_W, GRID_H])
        return torch.cat([rel.flatten(1), xy[:, TORSO] / size], dim=1)

    def forward(self, x):
        g = self._grid(x)
        return self.net(g, self.geometry(self.geometry_features(g)))[:, 0]


def build_model(kind: str, cfg: NetConfig | None = None, k: int | None = None) -> nn.Module:
    if kind == "goal":
        return GoalNet(cfg)
    if kind == "type":
        if k is None:
            raise ValueError("type model needs the vocabulary size k")
        return TypeNet(k, cfg)
    if kind == "pose":
        return PoseNet(cfg)
    if kind == "heatmap":
        return HeatmapBaselineNet(cfg)
    if kind == "semantic":
        return SemanticNet(cfg)
    raise ValueError(f"unknown model kind {kind!r}")


def make_uniform_(model: nn.Module) -> nn.Module:
    """Zero the output layer (and identity gain) so every output is uniform."""
    with torch.no_grad():
        head = model.net.head if isinstance(model.net, HourglassNet) else model.net.fc
        head.weight.zero_()
        head.bias.zero_()
        if isinstance(model, PoseNet):
            model.gain.zero_()
    return model


__all__ = [
    "NetConfig", "GoalNet", "TypeNet", "PoseNet", "HeatmapBaselineNet", "SemanticNet",
    "build_model", "make_uniform_", "pool_to_grid", "spatial_log_softmax", "TORSO",
]
