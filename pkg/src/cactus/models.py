"""Image encoder presets and the shared-representation two-headed model."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from PIL import Image
from torch import nn

from .data import ItemRecord


class ModelError(ValueError):
    pass


class DeskSmallEncoder(nn.Module):
    """Three stride-2 conv blocks (16/32/64) with batch norm and global
    average pooling; without the normalization the stack collapses the
    between-item variance and trains orders of magnitude slower."""

    out_dim = 64

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(16), nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(32), nn.ReLU(),
            nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(64), nn.ReLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


ENCODERS: dict[str, Callable[[], nn.Module]] = {"desk-small": DeskSmallEncoder}


def register_encoder(name: str, factory: Callable[[], nn.Module]) -> None:
    """Plugin hook for full-scale backbones (must expose .out_dim)."""
    ENCODERS[name] = factory


def build_encoder(preset: str) -> nn.Module:
    name = preset.removeprefix("plugin:")
    if name not in ENCODERS:
        raise ModelError(f"unknown encoder preset {preset!r}; "
                         f"registered: {sorted(ENCODERS)}")
    return ENCODERS[name]()


class MTLModel(nn.Module):
    """Shared image features feeding a class head and a latent-vector head."""

    def __init__(self, num_classes: int, latent_dim: int,
                 encoder_preset: str = "desk-small"):
        super().__init__()
        self.encoder_preset = encoder_preset
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.encoder = build_encoder(encoder_preset)
        self.class_head = nn.Linear(self.encoder.out_dim, num_classes)
        self.recon_head = nn.Linear(self.encoder.out_dim, latent_dim)
        # start the reconstruction at q_hat = 0: exp(L1+L2) explodes if the
        # head opens at the default init scale
        nn.init.zeros_(self.recon_head.weight)
        nn.init.zeros_(self.recon_head.bias)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.encoder(images)
        return self.class_head(feat), self.recon_head(feat)


def predict(model: MTLModel, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and reconstructed latent vector for one image.

    A pure function of (parameters, image); no collaborative input is
    consumed at inference time.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ModelError(f"expected a (3, H, W) image, got shape {arr.shape}")
    model.eval()
    with torch.no_grad():
        logits, q_hat = model(torch.from_numpy(arr)[None])
        probs = torch.sigmoid(logits)
    return probs[0].numpy(), q_hat[0].numpy()


def load_image(record: ItemRecord) -> np.ndarray:
    """Decode the record's PNG into a float32 (3, H, W) array in [0, 1]."""
    try:
        with Image.open(record.image_ref) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise ModelError(f"cannot decode image for item {record.item_id!r}: {exc}") from exc
    return np.transpose(rgb, (2, 0, 1))


def model_state(model: MTLModel) -> dict:
    """Numpy snapshot of the model, suitable for bit-stable checkpoints."""
    return {
        "kind": "mtl",
        "encoder_preset": model.encoder_preset,
        "num_classes": model.num_classes,
        "latent_dim": model.latent_dim,
        "params": {k: v.detach().numpy().copy() for k, v in model.state_dict().items()},
    }


def model_from_state(state: dict) -> MTLModel:
    model = MTLModel(state["num_classes"], state["latent_dim"],
                     state["encoder_preset"])
    tensors = {k: torch.from_numpy(np.asarray(v)) for k, v in state["params"].items()}
    model.load_state_dict(tensors)
    return model
