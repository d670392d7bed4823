"""Dataset manifests, sample loading and PK batch sampling."""
from __future__ import annotations

import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ManifestError

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")

# 20-category human parsing vocabulary (LIP / SCHP ordering).
PARSING_LABELS = (
    "background", "hat", "hair", "glove", "sunglasses", "upper_clothes",
    "dress", "coat", "socks", "pants", "jumpsuits", "scarf", "skirt", "face",
    "left_arm", "right_arm", "left_leg", "right_leg", "left_shoe", "right_shoe",
)
NUM_PARSING_LABELS = len(PARSING_LABELS)
LABEL = {name: i for i, name in enumerate(PARSING_LABELS)}


@dataclass(frozen=True)
class Sample:
    image_path: str
    identity: int
    clothes_id: int
    camera_id: int
    parsing_path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list[Sample]
    K: int
    K_c: int
    name: str = ""
    identity_map: dict[int, int] = field(default_factory=dict)
    clothes_map: dict[int, int] = field(default_factory=dict)

    def split(self, name: str) -> list[Sample]:
        return [r for r in self.records if r.split == name]

    @property
    def train(self) -> list[Sample]:
        return self.split("train")


def _parse_line(line: str, lineno: int, base: Path) -> Sample:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 6:
        raise ManifestError(f"line {lineno}: expected 6 tab-separated fields, got {len(parts)}")
    image_path, ident, clothes, cam, parsing_path, split = parts
    try:
        ident, clothes, cam = int(ident), int(clothes), int(cam)
    except ValueError:
        raise ManifestError(f"line {lineno}: identity/clothes_id/camera_id must be integers") from None
    if min(ident, clothes, cam) < 0:
        raise ManifestError(f"line {lineno}: labels must be non-negative")
    if split not in SPLITS:
        raise ManifestError(f"line {lineno}: unknown split {split!r}")

    def resolve(p):
        return p if os.path.isabs(p) else str(base / p)

    return Sample(resolve(image_path), ident, clothes, cam, resolve(parsing_path), split)


def _dense(values) -> dict[int, int]:
    return {v: i for i, v in enumerate(sorted(set(values)))}


def reindex(records: list[Sample]) -> tuple[list[Sample], dict[int, int], dict[int, int]]:
    """Map labels to a dense range.

    Identities seen in training come first, so classifier rows are exactly
    [0, K) and identities that only occur at test time sit above K. Clothes
    labels are simply made dense: clothes never worn in training still get
    a class (and a prompt), they just never receive a positive.
    """
    train = [r for r in records if r.split == "train"]
    rest = [r for r in records if r.split != "train"]
    id_map = _dense(r.identity for r in train)
    for v in sorted({r.identity for r in rest} - id_map.keys()):
        id_map[v] = len(id_map)
    c_map = _dense(r.clothes_id for r in records)
    out = [replace(r, identity=id_map[r.identity], clothes_id=c_map[r.clothes_id]) for r in records]
    return out, id_map, c_map


def validate(manifest: DatasetManifest, check_files: bool = True) -> None:
    owner: dict[int, int] = {}
    for r in manifest.records:
        prev = owner.setdefault(r.clothes_id, r.identity)
        if prev != r.identity:
            raise ManifestError(
                f"clothes_id {r.clothes_id} shared by identities {prev} and {r.identity}")
    seen = {r.identity for r in manifest.train}
    missing_ids = set(range(manifest.K)) - seen
    if missing_ids:
        raise ManifestError(f"identities without train records: {sorted(missing_ids)}")
    if check_files:
        missing = [p for r in manifest.records for p in (r.image_path, r.parsing_path)
                   if not os.path.exists(p)]
        if missing:
            raise ManifestError("missing referenced files:\n  " + "\n  ".join(missing))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read a tab-separated manifest.

    Relative paths resolve against the manifest's directory. Gapped labels are
    re-indexed densely; if that happens the mapping is written next to the
    manifest as ``<name>.labelmap.json``.
    """
    path = Path(path)
    base = path.parent
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            records.append(_parse_line(line, lineno, base))
    if not records:
        raise ManifestError(f"{path}: no records")
    if not any(r.split == "train" for r in records):
        raise ManifestError(f"{path}: no train records")

    records, id_map, c_map = reindex(records)
    K = len({r.identity for r in records if r.split == "train"})
    K_c = len(c_map)
    manifest = DatasetManifest(records, K, K_c, name=path.stem, identity_map=id_map, clothes_map=c_map)

    if any(k != v for k, v in id_map.items()) or any(k != v for k, v in c_map.items()):
        map_path = path.with_suffix(".labelmap.json")
        with open(map_path, "w") as fh:
            json.dump({"identity": {str(k): v for k, v in id_map.items()},
                       "clothes": {str(k): v for k, v in c_map.items()}}, fh, indent=1)
        logger.info("re-indexed labels of %s densely, mapping written to %s", path, map_path)

    validate(manifest, check_files=check_files)
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w") as fh:
        for r in manifest.records:
            ip, pp = (os.path.relpath(p, base) if os.path.isabs(p) else p
                      for p in (r.image_path, r.parsing_path))
            fh.write(f"{ip}\t{r.identity}\t{r.clothes_id}\t{r.camera_id}\t{pp}\t{r.split}\n")


def resize_labels(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a label map, sampling at pixel centres."""
    H, W = size
    h, w = labels.shape
    rows = np.minimum(((np.arange(H) + 0.5) * h / H).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(W) + 0.5) * w / W).astype(np.int64), w - 1)
    return labels[rows[:, None], cols[None, :]]


def load_sample(sample: Sample, target_size: tuple[int, int] = (256, 128)):
    """Return ``(image, parsing)``: an H x W x 3 uint8 array in [0, 255] resized
    bilinearly, and an H x W uint8 label map resized by nearest neighbour."""
    H, W = target_size
    current = sample.image_path
    try:
        with Image.open(current) as im:
            im = im.convert("RGB")
            if im.size != (W, H):
                im = im.resize((W, H), Image.BILINEAR)
            image = np.asarray(im, dtype=np.uint8)
        current = sample.parsing_path
        with Image.open(current) as pm:
            parsing = np.asarray(pm)
    except OSError as e:
        raise OSError(f"failed to decode {current}: {e}") from e
    if parsing.ndim != 2:
        raise OSError(f"{sample.parsing_path}: parsing map must be single-channel")
    if parsing.max(initial=0) >= NUM_PARSING_LABELS:
        raise OSError(f"{sample.parsing_path}: label outside the {NUM_PARSING_LABELS}-class vocabulary")
    if parsing.shape != (H, W):
        parsing = resize_labels(parsing, (H, W))
    return image, parsing.astype(np.uint8)


def make_pk_batches(manifest_or_records, P: int, K_p: int, seed: int):
    """Yield batches of P distinct identities with K_p samples each.

    An epoch follows the usual identity sampler: each identity's images are
    shuffled and cut into chunks of K_p (short chunks are topped up by
    sampling with replacement), then chunks of P randomly chosen identities
    form a batch until fewer than P identities have chunks left.
    """
    records = (manifest_or_records.train if isinstance(manifest_or_records, DatasetManifest)
               else list(manifest_or_records))
    by_id = defaultdict(list)
    for r in records:
        by_id[r.identity].append(r)
    ids = sorted(by_id)
    if P < 1 or K_p < 1:
        raise ConfigurationError("P and K_p must be positive")
    if P > len(ids):
        raise ConfigurationError(f"P={P} exceeds the {len(ids)} identities available")
    rng = np.random.default_rng(seed)

    chunks = {}
    for pid in ids:
        pool = by_id[pid]
        idx = list(rng.permutation(len(pool)))
        if len(idx) < K_p:
            idx += list(rng.choice(len(pool), size=K_p - len(idx), replace=True))
        n_full = len(idx) // K_p
        groups = [idx[i * K_p:(i + 1) * K_p] for i in range(n_full)]
        chunks[pid] = [[pool[k] for k in g] for g in groups]

    avail = [pid for pid in ids if chunks[pid]]
    while len(avail) >= P:
        picked = rng.choice(len(avail), size=P, replace=False)
        batch = []
        for j in sorted(picked):
            batch.extend(chunks[avail[j]].pop())
        yield batch
        avail = [pid for pid in avail if chunks[pid]]
