"""The two-branch network: residual encoder, center-point detection heads at a
downsized stride, and a per-RoI segmentation decoder guided by the detection
branch's object features, with optional per-patch instance normalization."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

VARIANTS = ("objBranch", "sepBranchIN", "objBranchIN")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    encoder_widths: tuple[int, int, int, int, int] = (16, 32, 64, 128, 256)
    stride: int = 4               # detection output stride
    num_classes: int = 1
    roi_grid: int = 64            # P: segmentation output resolution per RoI
    variant: str = "objBranchIN"
    pretrained_encoder: str | None = None
    head_channels: int = 32
    seg_channels: int = 32

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if len(self.encoder_widths) != 5:
            raise ValueError("encoder_widths must list five stage widths")
        if self.stride not in (4, 8, 16):
            raise ValueError(f"stride must be 4, 8 or 16, got {self.stride}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.roi_grid < 8 or self.roi_grid % 8:
            raise ValueError("roi_grid must be a multiple of 8 (four pyramid levels)")

    @property
    def use_instance_norm(self) -> bool:
        return self.variant in ("sepBranchIN", "objBranchIN")

    @property
    def use_object_features(self) -> bool:
        return self.variant in ("objBranch", "objBranchIN")


def instance_norm(x: torch.Tensor, gamma=None, beta=None, eps: float = 1e-5) -> torch.Tensor:
    """Standardize each channel of each patch by its own spatial statistics,
    then apply the learned per-channel affine."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    mean = x.mean(dim=(-2, -1), keepdim=True)
    var = x.var(dim=(-2, -1), unbiased=False, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma.view(1, -1, 1, 1)
    if beta is not None:
        out = out + beta.view(1, -1, 1, 1)
    return out.squeeze(0) if squeeze else out


class RoIInstanceNorm(nn.Module):
    """Per-patch, per-channel standardization with learned scale and shift."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return instance_norm(x, self.gamma, self.beta, self.eps)


def crop_resize(features: torch.Tensor, boxes: torch.Tensor, out_size: int,
                stride: float = 1.0, batch_index: torch.Tensor | None = None) -> torch.Tensor:
    """Bilinearly sample box regions of a feature map onto a regular grid.

    features (B, C, H, W); boxes (N, 4) in input-image coordinates (divided by
    `stride` internally); out-of-bounds samples read as zero. Returns
    (N, C, out_size, out_size).
    """
    b, c, h, w = features.shape
    n = boxes.shape[0]
    if n == 0:
        return features.new_zeros((0, c, out_size, out_size))
    boxes = boxes.to(features.dtype) / stride
    if batch_index is None:
        batch_index = torch.zeros(n, dtype=torch.long, device=features.device)

    u = (torch.arange(out_size, dtype=features.dtype, device=features.device) + 0.5) / out_size
    xs = boxes[:, 0:1] + u[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])  # (N, P)
    ys = boxes[:, 1:2] + u[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    # align_corners=False maps pixel centers to (2i + 1) / size - 1
    gx = 2.0 * xs / w - 1.0
    gy = 2.0 * ys / h - 1.0
    grid = torch.stack(
        [gx[:, None, :].expand(n, out_size, out_size),
         gy[:, :, None].expand(n, out_size, out_size)], dim=-1)
    return F.grid_sample(features[batch_index], grid, mode="bilinear",
                         padding_mode="zeros", align_corners=False)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + x)


class EncoderStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)
        self.block = ResidualBlock(out_ch)

    def forward(self, x):
        return self.block(F.relu(self.bn(self.down(x))))


class Encoder(nn.Module):
    """Five residual stages at strides 2, 4, 8, 16, 32."""

    def __init__(self, widths):
        super().__init__()
        chans = [3, *widths]
        self.stages = nn.ModuleList(
            EncoderStage(chans[i], chans[i + 1]) for i in range(5))

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class SkipCombine(nn.Module):
    """Upsample the deeper map 2x, concatenate the shallower, 3x3 conv + ReLU."""

    def __init__(self, deep_ch: int, skip_ch: int, out_ch: int, norm: str | None = "batch"):
        super().__init__()
        self.conv = nn.Conv2d(deep_ch + skip_ch, out_ch, 3, padding=1)
        if norm == "batch":
            self.norm = nn.BatchNorm2d(out_ch)
        elif norm == "instance":
            self.norm = RoIInstanceNorm(out_ch)
        else:
            self.norm = nn.Identity()

    def forward(self, deep, skip):
        up = F.interpolate(deep, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return F.relu(self.norm(self.conv(torch.cat([up, skip], dim=1))))


def _head(in_ch: int, mid_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, mid_ch, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(mid_ch, out_ch, 1),
    )


class ObjSegModel(nn.Module):
    """Detection branch plus object-guided segmentation branch."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.encoder_widths
        self.encoder = Encoder(w)

        # detection decoder: stride 32 -> 16 -> 8 -> 4 over encoder skips
        self.combine16 = SkipCombine(w[4], w[3], w[3])
        self.combine8 = SkipCombine(w[3], w[2], w[2])
        self.combine4 = SkipCombine(w[2], w[1], w[1])
        head_in = {4: w[1], 8: w[2], 16: w[3]}[config.stride]
        self.heatmap_head = _head(head_in, config.head_channels, config.num_classes)
        self.wh_head = _head(head_in, config.head_channels, 2)
        self.offset_head = _head(head_in, config.head_channels, 2)

        # segmentation decoder over RoI patches, deepest (stride 16) first
        seg_norm = "instance" if config.use_instance_norm else None
        sc = config.seg_channels
        self.seg_stem = nn.Conv2d(w[3], sc, 3, padding=1)
        self.seg_stem_norm = RoIInstanceNorm(sc) if config.use_instance_norm else nn.Identity()
        self.seg_combine8 = SkipCombine(sc, w[2], sc, norm=seg_norm)
        self.seg_combine4 = SkipCombine(sc, w[1], sc, norm=seg_norm)
        self.seg_combine2 = SkipCombine(sc, w[0], sc, norm=seg_norm)
        self.seg_out = nn.Conv2d(sc, 1, 1)
        self.seg_out_norm = RoIInstanceNorm(1) if config.use_instance_norm else nn.Identity()

        self._init_heads()
        if config.pretrained_encoder:
            state = torch.load(config.pretrained_encoder, map_location="cpu", weights_only=True)
            self.encoder.load_state_dict(state)
            log.info("loaded encoder weights from %s", config.pretrained_encoder)

    def _init_heads(self):
        # start heatmap probabilities near 0.1 to keep early focal loss stable
        nn.init.constant_(self.heatmap_head[-1].bias, -math.log((1 - 0.1) / 0.1))
        for head in (self.wh_head, self.offset_head):
            nn.init.normal_(head[-1].weight, std=0.001)
            nn.init.zeros_(head[-1].bias)

    def forward_detection(self, images: torch.Tensor) -> dict:
        """Run the encoder and detection branch on a (B, 3, H, W) batch.

        Returns sigmoid heatmaps plus raw offset and width-height maps at the
        configured stride, along with the cached encoder and object features.
        """
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input resolution {h}x{w} must be divisible by 32")
        e1, e2, e3, e4, e5 = self.encoder(images)
        d16 = self.combine16(e5, e4)
        d8 = self.combine8(d16, e3)
        d4 = self.combine4(d8, e2)
        head_feat = {4: d4, 8: d8, 16: d16}[self.config.stride]
        return {
            "heatmap": torch.sigmoid(self.heatmap_head(head_feat)),
            "offsets": self.offset_head(head_feat),
            "wh": self.wh_head(head_feat),
            "encoder_feats": [e1, e2, e3, e4, e5],
            "object_feats": [d4, d8, d16],
        }

    def forward_segmentation(self, boxes, encoder_feats, object_feats,
                             batch_index: torch.Tensor | None = None) -> torch.Tensor:
        """Predict one mask probability grid per box from cached features.

        boxes: (N, 4) array-like in input-image coordinates. Degenerate boxes
        (no area after clamping) are skipped with a warning and produce
        all-zero grids. Returns (N, 1, P, P) probabilities.
        """
        e1, e2, e3, e4, _ = encoder_feats
        p = self.config.roi_grid
        device = e1.device
        boxes = torch.as_tensor(boxes, dtype=e1.dtype, device=device).reshape(-1, 4)
        n = boxes.shape[0]
        if n == 0:
            return e1.new_zeros((0, 1, p, p))
        if batch_index is None:
            batch_index = torch.zeros(n, dtype=torch.long, device=device)

        img_h, img_w = e1.shape[-2] * 2, e1.shape[-1] * 2
        clamped = torch.stack([
            boxes[:, 0].clamp(0, img_w), boxes[:, 1].clamp(0, img_h),
            boxes[:, 2].clamp(0, img_w), boxes[:, 3].clamp(0, img_h)], dim=1)
        valid = (clamped[:, 2] > clamped[:, 0]) & (clamped[:, 3] > clamped[:, 1])
        if not bool(valid.all()):
            log.warning("skipping %d degenerate boxes in segmentation branch",
                        int((~valid).sum()))
        if not bool(valid.any()):
            return e1.new_zeros((n, 1, p, p))

        vb = clamped[valid]
        vi = batch_index[valid]
        if self.config.use_object_features:
            g4, g8, g16 = object_feats
        else:
            g4, g8, g16 = e2, e3, e4

        x = self.seg_stem(crop_resize(g16, vb, p // 8, stride=16, batch_index=vi))
        x = F.relu(self.seg_stem_norm(x))
        x = self.seg_combine8(x, crop_resize(g8, vb, p // 4, stride=8, batch_index=vi))
        x = self.seg_combine4(x, crop_resize(g4, vb, p // 2, stride=4, batch_index=vi))
        x = self.seg_combine2(x, crop_resize(e1, vb, p, stride=2, batch_index=vi))
        logits = self.seg_out_norm(self.seg_out(x))
        probs = torch.sigmoid(logits)

        if bool(valid.all()):
            return probs
        out = e1.new_zeros((n, 1, p, p))
        out[valid] = probs
        return out

    def forward(self, images):
        return self.forward_detection(images)


def save_checkpoint(model: ObjSegModel, path: str | Path) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> ObjSegModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    config = ModelConfig(**payload["config"])
    model = ObjSegModel(config)
    model.load_state_dict(payload["state_dict"])
    return model
