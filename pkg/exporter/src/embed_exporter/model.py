"""Truncated ResNet-18: the network up to (and including) global average
pooling, with the final linear layer removed, run in evaluation mode."""

from __future__ import annotations

import torch
from torch import nn
from torchvision.models import resnet18

FEATURE_DIM = 512


def build_truncated_resnet18(
    weights_path: str | None = None, seed: int = 0
) -> nn.Module:
    """ResNet-18 with the classification head replaced by identity.

    `weights_path` points to a torch state dict (full ResNet-18 keys; the
    ``fc.*`` entries are ignored). Without it, the network is initialized
    from a fixed seed so exports stay deterministic; such embeddings are
    random-projection features, useful for plumbing and tests but not for
    real analysis.
    """
    torch.manual_seed(seed)
    model = resnet18(weights=None)
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        missing, unexpected = model.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("fc.")]
        if missing or unexpected:
            raise ValueError(
                f"bad weights file: missing {missing[:3]}, unexpected {unexpected[:3]}"
            )
    model.fc = nn.Identity()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@torch.no_grad()
def embed_batch(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """(n, 3, h, w) float batch -> (n, 512) penultimate activations."""
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected (n, 3, h, w) input, got {tuple(batch.shape)}")
    return model(batch)
