"""Re-id network with region-based parsing attention (RPA).

Backbone -> shallow ID head -> (train only) spatial-softmax attention gate ->
max+avg pooling -> BNNeck -> ID classifier.  A clothes head on the shared
backbone output feeds the clothes-adversarial loss.
"""

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError


class Backbone(enum.Enum):
    TINY_CNN = "tiny_cnn"
    RESNET50 = "resnet50"


@dataclass(frozen=True)
class ModelConfig:
    backbone: Backbone = Backbone.TINY_CNN
    input_size: tuple[int, int] = (384, 192)
    embed_dim: int = 64  # channels of F_ID; pooled embedding is 2 * embed_dim
    num_identities: int = 1
    num_clothes_classes: int = 1
    rpa_enabled: bool = True
    pretrained: bool = False
    last_stride: int = 2  # TINY_CNN only; 2 gives total stride 16, 1 gives 8
    gate_scale: str = "unit"  # "unit": F * A_hat; "area": F * (H'W' * A_hat)

    def __post_init__(self):
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")
        if self.num_identities < 1 or self.num_clothes_classes < 1:
            raise ValueError("num_identities and num_clothes_classes must be >= 1")
        if self.gate_scale not in ("unit", "area"):
            raise ValueError("gate_scale must be 'unit' or 'area'")
        if self.last_stride not in (1, 2):
            raise ValueError("last_stride must be 1 or 2")
        h, w = self.input_size
        if h % self.stride or w % self.stride:
            raise ValueError(f"input size {self.input_size} must be divisible by the stride {self.stride}")

    @property
    def stride(self) -> int:
        if self.backbone is Backbone.RESNET50:
            return 16
        return 8 * self.last_stride

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return h // self.stride, w // self.stride


@dataclass
class ModelOutputs:
    F: torch.Tensor
    F_ID: torch.Tensor
    S: torch.Tensor
    A_hat: torch.Tensor
    F_ID_gated: torch.Tensor
    embedding_pre_bn: torch.Tensor
    embedding_post_bn: torch.Tensor
    id_logits: torch.Tensor
    clothes_logits: torch.Tensor


def spatial_softmax(S: torch.Tensor) -> torch.Tensor:
    """Softmax over all spatial positions of ``(..., H, W)`` logits."""
    if not torch.isfinite(S).all():
        raise NumericError("attention logits contain NaN or infinity")
    flat = S.flatten(-2)
    flat = flat - flat.amax(dim=-1, keepdim=True)
    e = flat.exp()
    return (e / e.sum(dim=-1, keepdim=True)).view_as(S)


def gate(F_ID: torch.Tensor, A_hat: torch.Tensor, scale: str = "unit") -> torch.Tensor:
    """Reweight features by the attention map.

    ``scale="area"`` multiplies by the number of cells so a uniform map is
    the identity; this keeps gated features at the ungated magnitude.
    """
    if F_ID.shape[-2:] != A_hat.shape[-2:]:
        raise ValueError(f"spatial mismatch: features {tuple(F_ID.shape[-2:])} vs attention {tuple(A_hat.shape[-2:])}")
    if scale == "area":
        return F_ID * (A_hat * (A_hat.shape[-1] * A_hat.shape[-2]))
    if scale != "unit":
        raise ValueError(f"unknown gate scale {scale!r}")
    return F_ID * A_hat


def maxavg_pool(features: torch.Tensor) -> torch.Tensor:
    if features.shape[-1] * features.shape[-2] == 0:
        raise ValueError("empty spatial grid")
    flat = features.flatten(-2)
    return torch.cat([flat.amax(dim=-1), flat.mean(dim=-1)], dim=-1)


def pool_embed(features: torch.Tensor, bnneck: nn.BatchNorm1d) -> tuple[torch.Tensor, torch.Tensor]:
    pre = maxavg_pool(features)
    return pre, bnneck(pre)


def _conv_bn(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinyCNN(nn.Module):
    """Four conv stages for CPU-scale runs; strides 2-2-2-``last_stride``."""

    def __init__(self, widths=(16, 32, 48, 64), last_stride: int = 2):
        super().__init__()
        layers, cin = [], 3
        strides = (2, 2, 2, last_stride)
        for w, st in zip(widths, strides):
            layers += [_conv_bn(cin, w, st), _conv_bn(w, w, 1)]
            cin = w
        self.body = nn.Sequential(*layers)
        self.out_channels = cin

    def forward(self, x):
        return self.body(x)


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 trunk with last stride 1 (stride 16 overall)."""

    def __init__(self, pretrained: bool = False):
        super().__init__()
        import torchvision

        weights = torchvision.models.ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
        net = torchvision.models.resnet50(weights=weights)
        net.layer4[0].conv2.stride = (1, 1)
        net.layer4[0].downsample[0].stride = (1, 1)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)
        self.out_channels = 2048

    def forward(self, x):
        return self.body(x)


class ClothesHead(nn.Module):
    def __init__(self, in_channels: int, dim: int, num_classes: int):
        super().__init__()
        self.proj = nn.Sequential(nn.Conv2d(in_channels, dim, 1), nn.ReLU())
        self.classifier = nn.Linear(2 * dim, num_classes)

    def forward(self, features):
        return self.classifier(maxavg_pool(self.proj(features)))


class MSPNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone is Backbone.TINY_CNN:
            self.backbone = TinyCNN(last_stride=config.last_stride)
        else:
            self.backbone = ResNet50Backbone(config.pretrained)
        c, d = self.backbone.out_channels, config.embed_dim
        self.id_head = nn.Sequential(nn.Conv2d(c, d, 1), nn.ReLU())
        self.attention = nn.Conv2d(d, 1, 1, bias=True)
        self.bnneck = nn.BatchNorm1d(2 * d)
        self.bnneck.bias.requires_grad_(False)
        self.id_classifier = nn.Linear(2 * d, config.num_identities, bias=False)
        self.clothes_head = ClothesHead(c, d, config.num_clothes_classes)
        nn.init.normal_(self.id_classifier.weight, std=0.001)

    def forward(self, images: torch.Tensor, mode: Optional[str] = None) -> ModelOutputs:
        if mode is None:
            mode = "train" if self.training else "eval"
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if tuple(images.shape[-2:]) != self.config.input_size or images.shape[-3] != 3:
            raise ValueError(
                f"expected images (N, 3, {self.config.input_size[0]}, {self.config.input_size[1]}), "
                f"got {tuple(images.shape)}")
        feat = self.backbone(images)
        f_id = self.id_head(feat)
        s = self.attention(f_id)
        a_hat = spatial_softmax(s)
        if mode == "train" and self.config.rpa_enabled:
            gated = gate(f_id, a_hat, self.config.gate_scale)
            pooled_from = gated
        else:
            gated = f_id
            pooled_from = f_id
        pre, post = pool_embed(pooled_from, self.bnneck)
        return ModelOutputs(
            F=feat, F_ID=f_id, S=s, A_hat=a_hat, F_ID_gated=gated,
            embedding_pre_bn=pre, embedding_post_bn=post,
            id_logits=self.id_classifier(post),
            clothes_logits=self.clothes_head(feat),
        )


IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 (N, H, W, 3) -> float32 normalized (N, H, W, 3); zero is the mean color."""
    x = images.astype(np.float32) / 255.0
    return ((x - IMAGENET_MEAN) / IMAGENET_STD).astype(np.float32)


def to_tensor(images_hwc: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images_hwc.transpose(0, 3, 1, 2))).to(dtype)
