"""Backbone registry: which network, which layer, which output shape.

Feature maps are tapped after the activation of each backbone's last
convolutional stage: the three conv sub-layers of VGG-16's fifth block
(FM1..FM3, all 14 x 14 x 512 at the standard 224 input), AlexNet's fifth
conv (13 x 13 x 256), and ResNet-50's final residual stage
(7 x 7 x 2048). A run hard-fails if a tap ever produces a different
shape, which guards against hooking the wrong layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torchvision import models

# index of the post-activation module in vgg16.features for block-5 convs
_VGG_FM_INDEX = {1: 25, 2: 27, 3: 29}
_ALEXNET_RELU5_INDEX = 11

EXPECTED_SHAPES = {
    "vgg16": (14, 14, 512),
    "alexnet": (13, 13, 256),
    "resnet50": (7, 7, 2048),
}


@dataclass(frozen=True)
class ExtractorSpec:
    """A backbone choice plus the expected H x W x C output shape."""

    model: str
    fm: int | None = None  # vgg16 sub-layer, 1..3

    def __post_init__(self) -> None:
        if self.model not in EXPECTED_SHAPES:
            raise ValueError(f"unknown model {self.model!r}; choose from {sorted(EXPECTED_SHAPES)}")
        if self.model == "vgg16":
            if self.fm not in (1, 2, 3):
                raise ValueError("vgg16 needs --fm 1, 2, or 3")
        elif self.fm is not None:
            raise ValueError(f"--fm only applies to vgg16, not {self.model}")

    @property
    def expected_shape(self) -> tuple[int, int, int]:
        return EXPECTED_SHAPES[self.model]

    @property
    def tag(self) -> str:
        return f"{self.model}-fm{self.fm}" if self.model == "vgg16" else self.model


def build_backbone(spec: ExtractorSpec, weights: str = "pretrained", seed: int = 0) -> nn.Module:
    """Network truncated at the tapped layer, in eval mode.

    ``weights="pretrained"`` loads the torchvision ImageNet weights (needs
    their download or a primed cache); ``weights="random"`` keeps the
    seeded random initialization, which is enough for format, shape, and
    determinism checks on machines without the weight files.
    """
    if weights not in ("pretrained", "random"):
        raise ValueError(f"weights must be 'pretrained' or 'random', got {weights!r}")
    torch.manual_seed(seed)
    use_default = weights == "pretrained"

    try:
        if spec.model == "vgg16":
            net = models.vgg16(weights=models.VGG16_Weights.DEFAULT if use_default else None)
            backbone = net.features[: _VGG_FM_INDEX[spec.fm] + 1]
        elif spec.model == "alexnet":
            net = models.alexnet(weights=models.AlexNet_Weights.DEFAULT if use_default else None)
            backbone = net.features[: _ALEXNET_RELU5_INDEX + 1]
        else:
            net = models.resnet50(weights=models.ResNet50_Weights.DEFAULT if use_default else None)
            backbone = nn.Sequential(
                net.conv1, net.bn1, net.relu, net.maxpool,
                net.layer1, net.layer2, net.layer3, net.layer4,
            )
    except Exception as exc:
        if use_default:
            raise RuntimeError(
                f"pretrained weights for {spec.model} are not obtainable here "
                f"({exc}); pass --weights random for structural runs"
            ) from exc
        raise
    backbone.eval()
    return backbone
