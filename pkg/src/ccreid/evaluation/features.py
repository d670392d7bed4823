"""Feature extraction with the raw-stream encoder and an on-disk feature cache."""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from ..data import Sample, load_sample
from ..models import EncoderHandle, encode_image


def path_key(path: str) -> str:
    return hashlib.sha1(str(path).encode()).hexdigest()


def sample_meta(samples: list[Sample]) -> dict:
    return {
        "pid": np.array([s.identity for s in samples], dtype=np.int64),
        "camid": np.array([s.camera_id for s in samples], dtype=np.int64),
        "clothes": np.array([s.clothes_id for s in samples], dtype=np.int64),
        "path": np.array([s.image_path for s in samples], dtype=object),
    }


def load_images(samples, image_size, workers: int = 0) -> torch.Tensor:
    """N x 3 x H x W float tensor in [0, 255]."""
    def one(s):
        return load_sample(s, image_size)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            arrays = list(pool.map(one, samples))
    else:
        arrays = [one(s) for s in samples]
    if not arrays:
        return torch.zeros(0, 3, *image_size)
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float()


@torch.no_grad()
def extract_features(encoder: EncoderHandle, samples: list[Sample], image_size=(256, 128),
                     batch_size: int = 64, workers: int = 0, cache_path=None):
    """One feature row per sample, in input order, plus metadata arrays.

    The encoder runs in eval mode and its previous train/eval mode is
    restored. When ``cache_path`` names an existing archive holding every
    sample, features are read from it instead; otherwise they are computed
    and written there.
    """
    keys = [path_key(s.image_path) for s in samples]
    meta = sample_meta(samples)
    if cache_path is not None and Path(cache_path).exists():
        cached = torch.load(cache_path, weights_only=True)
        if all(k in cached for k in keys):
            feats = torch.stack([cached[k] for k in keys]) if keys else torch.zeros(0, encoder.feature_dim)
            return feats, meta

    was_training = encoder.module.training
    encoder.module.eval()
    rows = []
    try:
        for start in range(0, len(samples), batch_size):
            images = load_images(samples[start:start + batch_size], image_size, workers)
            rows.append(encode_image(encoder, images))
    finally:
        encoder.module.train(was_training)
    feats = torch.cat(rows) if rows else torch.zeros(0, encoder.feature_dim)
    if cache_path is not None:
        torch.save({k: f.clone() for k, f in zip(keys, feats)}, cache_path)
    return feats, meta
