"""Reference classifier and weight serialization.

The reference backbone is a small 3-block CNN with global average pooling and
a linear 2-logit head. Any module exposing the same capability surface
(``features``, ``head_forward``, ``spatial_activations``, ``forward``) can be
swapped in behind the training and evaluation code.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import SchemaError

WEIGHTS_MAGIC = b"DBLW1\n"


class SmallCNN(nn.Module):
    """3 conv blocks -> GAP -> linear head. Representation dimension d=64."""

    def __init__(self, feature_dim: int = 64, in_channels: int = 3):
        super().__init__()
        self.feature_dim = feature_dim
        self.blocks = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, feature_dim, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.head = nn.Linear(feature_dim, 2)

    def spatial_activations(self, x: torch.Tensor) -> torch.Tensor:
        """Last conv block activations, (B, d, h, w). ScoreCAM target layer."""
        return self.blocks(x)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.spatial_activations(x).mean(dim=(2, 3))

    def head_forward(self, z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if mask is not None:
            z = z * mask
        return self.head(z)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_forward(self.features(x))


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_weights(model: nn.Module, path: str | Path, meta: dict | None = None) -> Path:
    """Deterministic binary container: magic, JSON header line, raw float bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    tensors = []
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = {"format": "debiaslab-weights-v1", "meta": meta or {}, "tensors": tensors}
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)
    return path


def load_weights(model: nn.Module, path: str | Path) -> dict:
    """Load weights saved by :func:`save_weights`; returns the header metadata."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise SchemaError(f"{path} is not a debiaslab weights file")
        header = json.loads(fh.readline().decode())
        state = {}
        for spec in header["tensors"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            arr = np.frombuffer(
                fh.read(count * np.dtype(spec["dtype"]).itemsize), dtype=spec["dtype"]
            ).reshape(spec["shape"])
            state[spec["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return header["meta"]
