"""Export semantic prior maps and perceptual-extractor weights.

Semantic mode runs DeepLabV3 with a MobileNetV3-Large backbone (the
pretrained head is the 21-class COCO-with-VOC-labels checkpoint) and writes
one softmax-normalized 21xHxW map per input image. Perceptual mode
serializes the four VGG-19 stage-opening conv layers under the record names
the enhancement package's feature extractor expects.

Pretrained weights require either network access or a local torchvision
cache; `untrained=True` builds the same architectures with random weights,
which keeps every file contract intact (useful for offline testing, useless
for actual guidance quality).
"""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision.models import VGG19_Weights, vgg19
from torchvision.models.segmentation import (
    DeepLabV3_MobileNet_V3_Large_Weights,
    deeplabv3_mobilenet_v3_large,
)

from . import isat

SEMANTIC_CLASSES = 21
SEMANTIC_RECORD = "semantic_prior"
# normalization of the pretrained checkpoints
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# stage-opening convolutions of VGG-19's feature stack
VGG_STAGE_LAYERS = (0, 5, 10, 19)


class ModelLoadError(RuntimeError):
    """Pretrained weights unavailable; carries remediation text."""


def _segmentation_model(untrained: bool):
    if untrained:
        warnings.warn("building an UNTRAINED segmentation model: maps are format-valid noise")
        model = deeplabv3_mobilenet_v3_large(
            weights=None, weights_backbone=None, num_classes=SEMANTIC_CLASSES
        )
    else:
        try:
            model = deeplabv3_mobilenet_v3_large(
                weights=DeepLabV3_MobileNet_V3_Large_Weights.COCO_WITH_VOC_LABELS_V1
            )
        except Exception as exc:
            raise ModelLoadError(
                "could not load pretrained DeepLabV3-MobileNetV3 weights "
                f"({exc}); either allow network access / populate the local "
                "torchvision cache, or pass --untrained for a random-weight "
                "model (format-valid output, no real semantics)"
            ) from exc
    model.eval()
    return model


def _load_image(path: Path) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def export_semantic(images: list[str], out_dir: str, untrained: bool = False, echo=print) -> list[str]:
    """One `<stem>.isat` per input image; returns the written paths."""
    model = _segmentation_model(untrained)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    written = []
    for image_path in images:
        path = Path(image_path)
        rgb = _load_image(path)
        batch = ((rgb - mean) / std).unsqueeze(0)
        with torch.no_grad():
            logits = model(batch)["out"]
        if logits.shape[-2:] != rgb.shape[-2:]:
            logits = torch.nn.functional.interpolate(
                logits, size=rgb.shape[-2:], mode="bilinear", align_corners=False
            )
        probs = torch.softmax(logits[0], dim=0).numpy().astype(np.float32)
        target = out / (path.stem + ".isat")
        isat.write(str(target), {SEMANTIC_RECORD: probs})
        echo(f"{path.name} -> {target} ({probs.shape[0]}x{probs.shape[1]}x{probs.shape[2]})")
        written.append(str(target))
    return written


def export_extractor_weights(out_path: str, untrained: bool = False, echo=print) -> str:
    """VGG-19 stage-opening convs as stage{i}.kernel / stage{i}.bias."""
    if untrained:
        warnings.warn("exporting UNTRAINED extractor weights")
        model = vgg19(weights=None)
    else:
        try:
            model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ModelLoadError(
                f"could not load pretrained VGG-19 weights ({exc}); allow "
                "network access / populate the torchvision cache, or pass "
                "--untrained"
            ) from exc
    records: dict[str, np.ndarray] = {}
    for i, layer_idx in enumerate(VGG_STAGE_LAYERS):
        conv = model.features[layer_idx]
        records[f"stage{i}.kernel"] = conv.weight.detach().numpy().astype(np.float32)
        records[f"stage{i}.bias"] = conv.bias.detach().numpy().astype(np.float32)
    isat.write(out_path, records)
    echo(f"wrote {out_path} ({', '.join(records)})")
    return out_path
