"""Convolutional grasp detector conditioned on a fusion feature.

The network follows the classic encoder/decoder grasp-map layout: three
strided convolutions, a residual stack, then transpose convolutions back to
the input resolution.  A per-sample fusion vector ``f`` is tiled over the
bottleneck grid, channel-concatenated, and merged with a 1x1 convolution, so
the language side can steer the detection head.  Outputs are four 1-channel
maps with architecturally bounded ranges: quality and width through a
sigmoid, cos(2*theta) and sin(2*theta) through a tanh.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import GraspMaps

# Channel order of the stacked map tensor everywhere in this package.
MAP_CHANNELS = ("quality", "cos2", "sin2", "width")

# Three stride-2 encoder stages.
ENCODER_STRIDE = 8


@dataclass(frozen=True)
class GraspHeadConfig:
    """Architecture knobs for the grasp detection head.

    ``input_size`` accepts a single int for square inputs or an (H, W) pair;
    both dimensions must divide by the total encoder stride of 8.
    """

    in_channels: int = 3
    base_channels: int = 32
    residual_blocks: int = 5
    fusion_dim: int = 64
    input_size: Union[int, Tuple[int, int]] = 224

    def __post_init__(self) -> None:
        if self.in_channels not in (3, 4):
            raise ValueError(f"in_channels must be 3 (RGB) or 4 (RGB-D), got {self.in_channels}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.residual_blocks < 1:
            raise ValueError("residual_blocks must be positive")
        if self.fusion_dim < 1:
            raise ValueError("fusion_dim must be positive")
        size = self.input_size
        if isinstance(size, int):
            size = (size, size)
        size = (int(size[0]), int(size[1]))
        if size[0] < ENCODER_STRIDE or size[1] < ENCODER_STRIDE:
            raise ValueError(f"input_size {size} smaller than the encoder stride {ENCODER_STRIDE}")
        if size[0] % ENCODER_STRIDE or size[1] % ENCODER_STRIDE:
            raise ValueError(f"input_size {size} must be divisible by the encoder stride {ENCODER_STRIDE}")
        object.__setattr__(self, "input_size", size)

    @classmethod
    def paper_preset(cls, fusion_dim: int = 64) -> "GraspHeadConfig":
        # 480x480 crops, 32 base channels, 5 residual blocks.
        return cls(in_channels=3, base_channels=32, residual_blocks=5, fusion_dim=fusion_dim, input_size=480)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return x + y


class GraspHead(nn.Module):
    """Encoder, residual stack, fusion merge, decoder, four map heads."""

    def __init__(self, config: GraspHeadConfig) -> None:
        super().__init__()
        self.config = config
        base = config.base_channels
        # k4/s2/p1 halves each spatial dim exactly on even inputs.
        self.enc1 = nn.Conv2d(config.in_channels, base, kernel_size=4, stride=2, padding=1)
        self.enc1_bn = nn.BatchNorm2d(base)
        self.enc2 = nn.Conv2d(base, base * 2, kernel_size=4, stride=2, padding=1)
        self.enc2_bn = nn.BatchNorm2d(base * 2)
        self.enc3 = nn.Conv2d(base * 2, base * 4, kernel_size=4, stride=2, padding=1)
        self.enc3_bn = nn.BatchNorm2d(base * 4)
        self.residual = nn.Sequential(*[ResidualBlock(base * 4) for _ in range(config.residual_blocks)])
        self.fusion_merge = nn.Conv2d(base * 4 + config.fusion_dim, base * 4, kernel_size=1)
        self.fusion_bn = nn.BatchNorm2d(base * 4)
        # Transpose k4/s2/p1 doubles each spatial dim exactly.
        self.dec1 = nn.ConvTranspose2d(base * 4, base * 2, kernel_size=4, stride=2, padding=1)
        self.dec1_bn = nn.BatchNorm2d(base * 2)
        self.dec2 = nn.ConvTranspose2d(base * 2, base, kernel_size=4, stride=2, padding=1)
        self.dec2_bn = nn.BatchNorm2d(base)
        self.dec3 = nn.ConvTranspose2d(base, base, kernel_size=4, stride=2, padding=1)
        self.dec3_bn = nn.BatchNorm2d(base)
        self.quality_head = nn.Conv2d(base, 1, kernel_size=3, padding=1)
        self.cos2_head = nn.Conv2d(base, 1, kernel_size=3, padding=1)
        self.sin2_head = nn.Conv2d(base, 1, kernel_size=3, padding=1)
        self.width_head = nn.Conv2d(base, 1, kernel_size=3, padding=1)

    def forward(self, images: torch.Tensor, fusion: torch.Tensor) -> torch.Tensor:
        """Return stacked grasp maps, channel order per MAP_CHANNELS.

        ``images`` is (B, C, H, W) or (C, H, W); ``fusion`` is (B, fusion_dim)
        or (fusion_dim,).  Unbatched inputs yield an unbatched (4, H, W) map.
        """
        squeeze = images.dim() == 3
        if squeeze:
            images = images.unsqueeze(0)
        if fusion.dim() == 1:
            fusion = fusion.unsqueeze(0)
        if images.dim() != 4 or fusion.dim() != 2:
            raise ValueError("images must be (B, C, H, W) and fusion (B, fusion_dim)")
        height, width = self.config.input_size
        if images.shape[1] != self.config.in_channels or images.shape[2] != height or images.shape[3] != width:
            raise ValueError(
                f"expected images ({self.config.in_channels}, {height}, {width}), got {tuple(images.shape[1:])}"
            )
        if fusion.shape[1] != self.config.fusion_dim:
            raise ValueError(f"expected fusion dim {self.config.fusion_dim}, got {fusion.shape[1]}")
        if fusion.shape[0] != images.shape[0]:
            raise ValueError(f"batch mismatch: {images.shape[0]} images vs {fusion.shape[0]} fusion vectors")

        x = F.relu(self.enc1_bn(self.enc1(images)))
        x = F.relu(self.enc2_bn(self.enc2(x)))
        x = F.relu(self.enc3_bn(self.enc3(x)))
        x = self.residual(x)
        tiled = fusion[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        x = F.relu(self.fusion_bn(self.fusion_merge(torch.cat([x, tiled], dim=1))))
        x = F.relu(self.dec1_bn(self.dec1(x)))
        x = F.relu(self.dec2_bn(self.dec2(x)))
        x = F.relu(self.dec3_bn(self.dec3(x)))
        maps = torch.cat(
            [
                torch.sigmoid(self.quality_head(x)),
                torch.tanh(self.cos2_head(x)),
                torch.tanh(self.sin2_head(x)),
                torch.sigmoid(self.width_head(x)),
            ],
            dim=1,
        )
        return maps.squeeze(0) if squeeze else maps

    @torch.no_grad()
    def predict_maps(self, image: torch.Tensor, fusion: torch.Tensor) -> GraspMaps:
        """Single-image eval-mode forward returning a numpy GraspMaps."""
        was_training = self.training
        self.eval()
        try:
            maps = self.forward(image, fusion)
        finally:
            self.train(was_training)
        if maps.dim() == 4:
            if maps.shape[0] != 1:
                raise ValueError("predict_maps expects a single image")
            maps = maps.squeeze(0)
        return tensor_to_maps(maps)


def maps_to_tensor(maps: GraspMaps, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack a GraspMaps into a (4, H, W) tensor, channel order MAP_CHANNELS."""
    stacked = np.stack([getattr(maps, name) for name in MAP_CHANNELS], axis=0)
    return torch.from_numpy(stacked).to(dtype)


def tensor_to_maps(tensor: torch.Tensor) -> GraspMaps:
    if tensor.dim() != 3 or tensor.shape[0] != 4:
        raise ValueError(f"expected a (4, H, W) map tensor, got {tuple(tensor.shape)}")
    arr = tensor.detach().cpu().numpy().astype(np.float64)
    return GraspMaps(quality=arr[0], cos2=arr[1], sin2=arr[2], width=arr[3])


def _as_map_tensor(value: Union[GraspMaps, torch.Tensor]) -> torch.Tensor:
    if isinstance(value, GraspMaps):
        return maps_to_tensor(value)
    if not isinstance(value, torch.Tensor):
        raise ValueError(f"expected GraspMaps or a map tensor, got {type(value).__name__}")
    return value


def grasp_loss(
    pred: Union[GraspMaps, torch.Tensor],
    gt: Union[GraspMaps, torch.Tensor],
    beta: float = 1.0,
) -> torch.Tensor:
    """Sum over the four maps of the mean per-pixel smooth-L1 distance.

    Accepts stacked (..., 4, H, W) tensors or GraspMaps on either side; the
    ground-truth side is detached from any graph.  Quadratic below ``beta``,
    linear above; zero iff the maps are equal.
    """
    pred_t = _as_map_tensor(pred)
    gt_t = _as_map_tensor(gt).detach().to(dtype=pred_t.dtype)
    if pred_t.shape != gt_t.shape:
        raise ValueError(f"pred maps {tuple(pred_t.shape)} != gt maps {tuple(gt_t.shape)}")
    if pred_t.dim() < 3 or pred_t.shape[-3] != 4:
        raise ValueError(f"expected (..., 4, H, W) maps, got {tuple(pred_t.shape)}")
    total = pred_t.new_zeros(())
    for channel in range(4):
        total = total + F.smooth_l1_loss(
            pred_t[..., channel, :, :], gt_t[..., channel, :, :], reduction="mean", beta=beta
        )
    return total


def prepare_image(rgb: np.ndarray, depth: Optional[np.ndarray] = None) -> torch.Tensor:
    """Convert an (H, W, 3) image (uint8 or float) to a (C, H, W) float tensor.

    RGB is scaled to [0, 1].  When a depth map is given it is min-max
    normalized per image to [0, 1] and appended as channel 4; a constant
    depth map normalizes to zeros.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) rgb array, got shape {rgb.shape}")
    if rgb.dtype == np.uint8:
        rgb_f = rgb.astype(np.float32) / 255.0
    else:
        rgb_f = rgb.astype(np.float32)
        if rgb_f.min() < 0.0 or rgb_f.max() > 1.0:
            raise ValueError("float rgb input must already lie in [0, 1]")
    channels = [rgb_f[:, :, c] for c in range(3)]
    if depth is not None:
        depth = np.asarray(depth, dtype=np.float32)
        if depth.shape != rgb.shape[:2]:
            raise ValueError(f"depth shape {depth.shape} != image shape {rgb.shape[:2]}")
        lo, hi = float(depth.min()), float(depth.max())
        if hi - lo < 1e-12:
            channels.append(np.zeros_like(depth))
        else:
            channels.append((depth - lo) / (hi - lo))
    return torch.from_numpy(np.stack(channels, axis=0))
