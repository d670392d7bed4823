"""Shielding and clothes images from parsing maps.

Mask convention: 1 marks a clothes-irrelevant pixel, 0 a clothes pixel.
All functions accept numpy arrays or torch tensors.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from .data import LABEL
from .errors import ContractError

logger = logging.getLogger(__name__)

FILL = 255

DEFAULT_CLOTHES_LABELS = frozenset(
    LABEL[n] for n in ("upper_clothes", "dress", "coat", "pants", "skirt"))


def build_clothes_mask(parsing, clothes_labels=DEFAULT_CLOTHES_LABELS):
    labels = sorted(int(c) for c in clothes_labels)
    if hasattr(parsing, "numpy"):  # torch tensor
        import torch
        hit = torch.isin(parsing, torch.tensor(labels, dtype=parsing.dtype, device=parsing.device))
        return (~hit).to(torch.uint8)
    return (~np.isin(parsing, labels)).astype(np.uint8)


def _broadcast(image, mask):
    """Mask H x W against an H x W x C image, or N x 1 x H x W against N x C x H x W."""
    if mask.shape == image.shape:
        return mask
    if mask.ndim == image.ndim - 1 and tuple(mask.shape) == tuple(image.shape[:-1]):
        return mask[..., None]
    if (mask.ndim == image.ndim and mask.shape[1] == 1 and mask.shape[0] == image.shape[0]
            and tuple(mask.shape[2:]) == tuple(image.shape[2:])):
        return mask
    raise ContractError(f"mask shape {tuple(mask.shape)} does not match image shape {tuple(image.shape)}")


def make_shielding_image(image, mask):
    """Erase clothes pixels: ``mask * image + (1 - mask) * 255``."""
    m = _broadcast(image, mask)
    return m * image + (1 - m) * FILL


def make_clothes_image(image, mask):
    """Keep only clothes pixels: ``(1 - mask) * image + mask * 255``."""
    m = _broadcast(image, mask)
    return (1 - m) * image + m * FILL


def _labels_tag(clothes_labels) -> str:
    return ",".join(str(c) for c in sorted(int(c) for c in clothes_labels))


def mask_cache_path(parsing_path, suffix: str = ".mask.png") -> Path:
    p = Path(parsing_path)
    return p.with_name(p.name.split(".")[0] + suffix)


def cached_mask(parsing_path, clothes_labels=DEFAULT_CLOTHES_LABELS, suffix: str = ".mask.png",
                parsing: np.ndarray | None = None) -> np.ndarray:
    """Load or compute the mask for a parsing map stored on disk.

    The mask is written as a 1-bit PNG beside the parsing map. The clothes
    label set is stored in a PNG text chunk and a cached file built from a
    different label set is recomputed.
    """
    path = mask_cache_path(parsing_path, suffix)
    tag = _labels_tag(clothes_labels)
    if path.exists():
        with Image.open(path) as im:
            if im.text.get("clothes_labels") == tag:
                mask = np.asarray(im.convert("L"), dtype=np.uint8) // 255
                if parsing is None or mask.shape == parsing.shape:
                    return mask
    if parsing is None:
        with Image.open(parsing_path) as pm:
            parsing = np.asarray(pm)
    mask = build_clothes_mask(parsing, clothes_labels)
    info = PngImagePlugin.PngInfo()
    info.add_text("clothes_labels", tag)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    Image.fromarray(mask * 255).convert("1").save(tmp, format="PNG", pnginfo=info)
    os.replace(tmp, path)
    return mask
