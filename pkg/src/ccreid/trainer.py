"""Two-stage training.

Stage 1 learns the identity and clothes prompt banks against frozen image
and text encoders. Stage 2 fine-tunes the raw and shielding encoders, their
BNNeck heads and the clothes projection with the prompts frozen. Each stage-2
iteration first updates the projection from the clothes-prompt alignment
alone, then updates everything else from the remaining terms.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import TrainingConfig
from .data import DatasetManifest, load_sample, make_pk_batches, resize_labels
from .errors import CheckpointError, ConfigurationError
from .masking import build_clothes_mask, cached_mask, make_clothes_image, make_shielding_image
from .models import (ReIDModel, build_clip_model, build_toy_model, checksum, encode_image,
                     encode_prompts, project_clothes)

logger = logging.getLogger(__name__)

_SIGN_NOTE_LOGGED = False


def build_model(cfg: TrainingConfig, K: int, K_c: int, warm_start: bool = True) -> ReIDModel:
    """Fresh model for ``cfg``. ``warm_start=False`` skips the toy warm start,
    for callers that overwrite the weights from a checkpoint anyway."""
    if cfg.backbone == "clip":
        return build_clip_model(K, K_c, n_tokens=cfg.n_tokens, name_or_path=cfg.clip_name, seed=cfg.seed)
    model = build_toy_model(cfg.feature_dim, K, K_c, n_tokens=cfg.n_tokens, token_dim=cfg.token_dim,
                            seed=cfg.seed, width=cfg.encoder_width)
    if warm_start and cfg.warm_start_steps:
        from .toybench import warm_start_encoder
        losses = warm_start_encoder(model.raw_encoder, cfg.image_size, cfg.warm_start_steps, cfg.seed)
        # both streams start from the same generic weights
        model.shield_encoder.load_state_dict(model.raw_encoder.state_dict())
        logger.info("toy warm start: %d steps, thumbnail loss %.4f -> %.4f",
                    cfg.warm_start_steps, losses[0], losses[-1])
    return model


def cosine_lr(base_lr: float, epoch: int, total: int) -> float:
    """Cosine decay from ``base_lr`` at epoch 0 towards 0 at ``total``."""
    if total <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * epoch / total))


def epoch_seed(seed: int, stage: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, stage, epoch]).generate_state(1)[0])


# ---------------------------------------------------------------- data


class TrainData:
    """Train split held in memory: uint8 images, clothes masks, labels."""

    def __init__(self, manifest: DatasetManifest, image_size, clothes_labels, workers: int = 0):
        self.records = manifest.train
        if not self.records:
            raise ConfigurationError("manifest has no train records")
        self.index = {r.image_path: i for i, r in enumerate(self.records)}

        def one(r):
            image, parsing = load_sample(r, image_size)
            try:
                # nearest-neighbour resizing commutes with the per-pixel mask rule
                mask = resize_labels(cached_mask(r.parsing_path, clothes_labels), image_size)
            except OSError:  # read-only dataset directory
                mask = build_clothes_mask(parsing, clothes_labels)
            return image, mask

        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(workers) as pool:
                loaded = list(pool.map(one, self.records))
        else:
            loaded = [one(r) for r in self.records]
        self.images = torch.from_numpy(np.stack([x for x, _ in loaded])).permute(0, 3, 1, 2).contiguous()
        self.masks = torch.from_numpy(np.stack([m for _, m in loaded]))[:, None].contiguous()
        self.pids = torch.tensor([r.identity for r in self.records])
        self.cids = torch.tensor([r.clothes_id for r in self.records])

    def __len__(self):
        return len(self.records)

    def rows(self, batch) -> torch.Tensor:
        return torch.tensor([self.index[s.image_path] for s in batch])


def augment(images, masks, cfg: TrainingConfig, g: torch.Generator):
    """Joint flip / pad-and-crop of images and masks (float images in [0, 255])."""
    n, _, H, W = images.shape
    images = images.clone()
    masks = masks.clone()
    if cfg.hflip:
        flip = torch.rand(n, generator=g) < 0.5
        images[flip] = images[flip].flip(-1)
        masks[flip] = masks[flip].flip(-1)
    if cfg.pad_crop and cfg.pad > 0:
        pad = max(1, round(cfg.pad * H / 256))
        big = torch.nn.functional.pad(images, (pad, pad, pad, pad), value=0.0)
        # padded border carries no clothes
        bigm = torch.nn.functional.pad(masks, (pad, pad, pad, pad), value=1)
        offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=g)
        for i in range(n):
            y, x = int(offs[i, 0]), int(offs[i, 1])
            images[i] = big[i, :, y:y + H, x:x + W]
            masks[i] = bigm[i, :, y:y + H, x:x + W]
    return images, masks


def random_erasing(images, prob: float, g: torch.Generator, sl=0.02, sh=0.4, r1=0.3):
    n, _, H, W = images.shape
    images = images.clone()
    for i in range(n):
        if torch.rand(1, generator=g).item() >= prob:
            continue
        for _ in range(100):
            area = H * W * (sl + (sh - sl) * torch.rand(1, generator=g).item())
            ratio = math.exp(math.log(r1) + (math.log(1 / r1) - math.log(r1)) * torch.rand(1, generator=g).item())
            h = int(round(math.sqrt(area * ratio)))
            w = int(round(math.sqrt(area / ratio)))
            if 0 < h < H and 0 < w < W:
                y = int(torch.randint(0, H - h + 1, (1,), generator=g))
                x = int(torch.randint(0, W - w + 1, (1,), generator=g))
                images[i, :, y:y + h, x:x + w] = torch.rand(3, h, w, generator=g) * 255
                break
    return images


def make_streams(data: TrainData, rows, cfg: TrainingConfig, g: torch.Generator | None):
    """Raw, shielding and clothes images for a batch (augmented if ``g``)."""
    images = data.images[rows].float()
    masks = data.masks[rows].float()
    if g is not None:
        images, masks = augment(images, masks, cfg, g)
    shield = make_shielding_image(images, masks)
    clothes = make_clothes_image(images, masks)
    raw = images
    if g is not None and cfg.random_erasing:
        raw = random_erasing(images, cfg.erasing_prob, g)
    return raw, shield, clothes


# ---------------------------------------------------------------- checkpoints


@dataclass
class CheckpointRef:
    path: str
    stage: int
    epoch: int
    hash: str

    @classmethod
    def from_path(cls, path) -> "CheckpointRef":
        side = Path(str(path) + ".json")
        if not Path(path).exists() or not side.exists():
            raise CheckpointError(f"checkpoint {path} or its metadata sidecar is missing")
        meta = json.loads(side.read_text())
        return cls(str(path), meta["stage"], meta["epoch"], meta["hash"])


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(path, model: ReIDModel, cfg: TrainingConfig, stage: int, epoch: int,
                    optim_state: dict | None = None) -> CheckpointRef:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"C": model.C, "M": model.n_tokens, "K": model.K, "K_c": model.K_c, "stage": stage,
            "epoch": epoch, "seed": cfg.seed, "backbone": cfg.backbone, "config": cfg.to_dict()}
    archive = {"tensors": {k: v.detach().clone() for k, v in model.named_tensors().items()},
               "optim": optim_state or {}, "meta": meta}
    tmp = path.with_name(path.name + ".tmp")
    torch.save(archive, tmp)
    os.replace(tmp, path)
    digest = file_hash(path)
    Path(str(path) + ".json").write_text(json.dumps({"stage": stage, "epoch": epoch, "hash": digest}))
    return CheckpointRef(str(path), stage, epoch, digest)


def load_checkpoint(ref: CheckpointRef | str) -> dict:
    if not isinstance(ref, CheckpointRef):
        ref = CheckpointRef.from_path(ref)
    if not Path(ref.path).exists():
        raise CheckpointError(f"checkpoint not found: {ref.path}")
    if file_hash(ref.path) != ref.hash:
        raise CheckpointError(f"checkpoint {ref.path} is corrupted (hash mismatch)")
    return torch.load(ref.path, weights_only=False)


def resume(ref: CheckpointRef | str, cfg: TrainingConfig | None = None):
    """Rebuild the model from a checkpoint.

    Returns ``(model, optim_state, meta)``; ``optim_state`` holds optimizer
    state dicts keyed by name and the next epoch to run.
    """
    archive = load_checkpoint(ref)
    meta = archive["meta"]
    saved = TrainingConfig.from_dict(meta["config"])
    if cfg is None:
        cfg = saved
    for key, mine in (("C", cfg.feature_dim if cfg.backbone == "toy" else None), ("M", cfg.n_tokens)):
        if mine is not None and meta[key] != mine:
            raise ConfigurationError(f"checkpoint has {key}={meta[key]}, config has {mine}")
    if cfg.backbone != meta["backbone"]:
        raise ConfigurationError(f"checkpoint backbone {meta['backbone']!r} != {cfg.backbone!r}")
    if meta["seed"] != cfg.seed:
        logger.warning("resuming a seed-%s checkpoint with seed %s", meta["seed"], cfg.seed)
    model = build_model(cfg, meta["K"], meta["K_c"], warm_start=False)
    model.load_named_tensors(archive["tensors"])
    return model, archive["optim"], meta


# ---------------------------------------------------------------- logging


class MetricsLog:
    """Append-only ``step,loss_name,value`` lines."""

    def __init__(self, path=None):
        self.path = path
        self.lines: list[str] = []
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            if not Path(path).exists():
                Path(path).write_text("step,loss_name,value\n")

    def write(self, step: int, name: str, value: float) -> None:
        line = f"{step},{name},{float(value)!r}"
        self.lines.append(line)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def _truncate_log(path, keep_below_step: int) -> None:
    """Drop lines at or after ``keep_below_step`` (left by an interrupted run)."""
    if path is None or not Path(path).exists():
        return
    lines = Path(path).read_text().splitlines()
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < keep_below_step]
    Path(path).write_text("\n".join(kept) + "\n")


def _periodic(cfg: TrainingConfig, run_dir, epoch: int, end: int) -> bool:
    """Whether to write an intermediate checkpoint after ``epoch`` (the
    final one is always written by the caller)."""
    every = cfg.checkpoint_every
    return bool(run_dir is not None and every and (epoch + 1) % every == 0 and epoch + 1 < end)


def _adam(params, cfg: TrainingConfig, stage_cfg):
    return torch.optim.Adam(params, lr=stage_cfg.lr, betas=cfg.adam_betas, weight_decay=stage_cfg.weight_decay)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _encoders(model: ReIDModel):
    return [model.raw_encoder, model.shield_encoder, model.text_encoder]


# ---------------------------------------------------------------- stage 1


def freeze_for_stage1(model: ReIDModel) -> None:
    model.requires_grad_(False)
    model.prompt_bank.identity.requires_grad_(True)
    model.prompt_bank.clothes.requires_grad_(True)


@torch.no_grad()
def stage1_features(model: ReIDModel, data: TrainData, cfg: TrainingConfig, batch_size: int = 128):
    """Frozen-encoder features of every train shielding and clothes image."""
    model.raw_encoder.eval()
    fs, fc = [], []
    for start in range(0, len(data), batch_size):
        rows = torch.arange(start, min(start + batch_size, len(data)))
        _, shield, clothes = make_streams(data, rows, cfg, None)
        fs.append(encode_image(model.raw_handle, shield))
        fc.append(encode_image(model.raw_handle, clothes))
    return torch.cat(fs), torch.cat(fc)


def stage1_terms(model: ReIDModel, f_s, f_c, pids, cids, sim: L.SimilarityConfig) -> dict:
    bank, text = model.prompt_bank, model.text_encoder
    t_id = encode_prompts(bank, text, "identity", pids)
    t_c = encode_prompts(bank, text, "clothes", cids)
    return {
        "i2t": L.prompt_contrastive_loss(f_s, t_id, pids, "i2t", sim),
        "t2i": L.prompt_contrastive_loss(f_s, t_id, pids, "t2i", sim),
        "i2t_c": L.prompt_contrastive_loss(f_c, t_c, cids, "i2t", sim),
        "t2i_c": L.prompt_contrastive_loss(f_c, t_c, cids, "t2i", sim),
    }


def run_stage1(cfg: TrainingConfig, manifest: DatasetManifest, model: ReIDModel, run_dir=None,
               data: TrainData | None = None, resume_from=None, stop_after: int | None = None,
               log: MetricsLog | None = None) -> CheckpointRef | None:
    """Optimise the prompt banks with image and text encoders frozen.

    ``stop_after`` ends the run after that many epochs (a checkpoint is still
    written), which is how interrupted runs are simulated.
    """
    if any(p.requires_grad for m in _encoders(model) for p in m.parameters()):
        raise ConfigurationError("stage 1 requires frozen image and text encoders")
    sim = L.SimilarityConfig(cfg.temperature)
    data = data or TrainData(manifest, cfg.image_size, cfg.clothes_label_set, cfg.workers)
    run_dir = Path(run_dir) if run_dir else None
    log = log or MetricsLog(run_dir / "metrics_stage1.csv" if run_dir else None)
    params = [model.prompt_bank.identity, model.prompt_bank.clothes]
    opt = _adam(params, cfg, cfg.stage1)
    start = 0
    if resume_from is not None:
        opt.load_state_dict(resume_from["stage1"])
        start = resume_from["next_epoch"]
    before = [checksum(m) for m in _encoders(model)]

    f_s, f_c = stage1_features(model, data, cfg)
    total = cfg.stage1.epochs
    end = total if stop_after is None else min(total, stop_after)
    steps_per_epoch = len(list(make_pk_batches(data.records, cfg.P, cfg.K_p, 0)))
    _truncate_log(log.path, start * steps_per_epoch)
    for epoch in range(start, end):
        _set_lr(opt, cosine_lr(cfg.stage1.lr, epoch, total))
        for it, batch in enumerate(make_pk_batches(data.records, cfg.P, cfg.K_p, epoch_seed(cfg.seed, 1, epoch))):
            rows = data.rows(batch)
            terms = stage1_terms(model, f_s[rows], f_c[rows], data.pids[rows], data.cids[rows], sim)
            report = L.stage1_total(terms)
            opt.zero_grad(set_to_none=True)
            report.value.backward()
            opt.step()
            step = epoch * steps_per_epoch + it
            for name, v in terms.items():
                log.write(step, name, v.item())
            log.write(step, "stage1", report.item())
        if _periodic(cfg, run_dir, epoch, end):
            save_checkpoint(run_dir / "checkpoints" / f"stage1_epoch{epoch + 1}.pt", model, cfg, 1, epoch + 1,
                            {"stage1": opt.state_dict(), "next_epoch": epoch + 1})

    after = [checksum(m) for m in _encoders(model)]
    if after != before:
        raise RuntimeError("encoder parameters changed during stage 1")
    if run_dir is None:
        return None
    tag = "stage1" if end == total else f"stage1_epoch{end}"
    return save_checkpoint(run_dir / "checkpoints" / f"{tag}.pt", model, cfg, 1, end,
                           {"stage1": opt.state_dict(), "next_epoch": end})


# ---------------------------------------------------------------- stage 2


def prepare_stage2(model: ReIDModel, cfg: TrainingConfig) -> None:
    model.requires_grad_(False)
    model.raw_encoder.requires_grad_(True)
    model.head_id.requires_grad_(True)
    model.head_id.bn.bias.requires_grad_(False)
    if cfg.use_i2i:
        model.shield_encoder.requires_grad_(True)
        model.head_id_s.requires_grad_(True)
        model.head_id_s.bn.bias.requires_grad_(False)
    if cfg.use_cfm:
        model.proj_c.requires_grad_(True)


def _trainable(module):
    return [p for p in module.parameters() if p.requires_grad]


@torch.no_grad()
def text_features(model: ReIDModel):
    bank, text = model.prompt_bank, model.text_encoder
    return encode_prompts(bank, text, "identity"), encode_prompts(bank, text, "clothes")


def clothes_alignment_term(model, f, cids, t_clothes, cfg, sim, g=None):
    """Projection-only term: the pedestrian features are detached."""
    neg = cfg.i2tce_negatives or None
    return L.i2tce_loss(project_clothes(f.detach(), model.proj_c), t_clothes, cids, sim, neg, g)


def stage2_terms(model: ReIDModel, raw, shield, pids, cids, t_id, t_clothes, cfg: TrainingConfig,
                 sim: L.SimilarityConfig, g=None) -> tuple[dict, torch.Tensor]:
    """Encoder-side stage-2 terms (everything except the projection term).

    Returns the terms and the raw-stream features. The clothes features used
    by the disentanglement term come from the current projection, detached.
    """
    neg = cfg.i2tce_negatives or None
    f = encode_image(model.raw_handle, raw)
    terms = {"id": L.ce_loss(model.head_id(f), pids) + L.triplet_loss(f, pids, cfg.margin)}
    if cfg.use_i2t:
        terms["i2tce"] = L.i2tce_loss(f, t_id, pids, sim, neg, g)
    if cfg.use_i2i:
        f_s = encode_image(model.shield_handle, shield)
        terms["id_s"] = L.ce_loss(model.head_id_s(f_s), pids) + L.triplet_loss(f_s, pids, cfg.margin)
        terms["i2tce_s"] = L.i2tce_loss(f_s, t_id, pids, sim, neg, g)
        terms["con"] = L.centroid_consistency_loss(f, f_s, pids)
    if cfg.use_cfm:
        with torch.no_grad():
            f_c = project_clothes(f.detach(), model.proj_c)
        terms["dis"] = L.disentangle_loss(f, f_c)
    return terms, f


def run_stage2(cfg: TrainingConfig, manifest: DatasetManifest, model: ReIDModel, stage1_ckpt,
               run_dir=None, data: TrainData | None = None, resume_from=None,
               stop_after: int | None = None, log: MetricsLog | None = None,
               load_stage1: bool = True) -> CheckpointRef | None:
    """Fine-tune encoders, heads and projection with the prompt banks frozen."""
    global _SIGN_NOTE_LOGGED
    if stage1_ckpt is None:
        raise ConfigurationError("stage 2 needs a stage-1 checkpoint")
    if load_stage1 and resume_from is None:
        archive = load_checkpoint(stage1_ckpt)
        if archive["meta"]["stage"] != 1:
            raise ConfigurationError(f"{stage1_ckpt.path} is not a stage-1 checkpoint")
        model.load_named_tensors(archive["tensors"])
    if cfg.use_cfm and not _SIGN_NOTE_LOGGED:
        logger.info("disentanglement term minimises +cosine(pedestrian, clothes)")
        _SIGN_NOTE_LOGGED = True

    sim = L.SimilarityConfig(cfg.temperature)
    data = data or TrainData(manifest, cfg.image_size, cfg.clothes_label_set, cfg.workers)
    run_dir = Path(run_dir) if run_dir else None
    log = log or MetricsLog(run_dir / "metrics_stage2.csv" if run_dir else None)
    prepare_stage2(model, cfg)
    model.train()
    model.text_encoder.eval()

    main_params = (_trainable(model.raw_encoder) + _trainable(model.head_id)
                   + _trainable(model.shield_encoder) + _trainable(model.head_id_s))
    opt = _adam(main_params, cfg, cfg.stage2)
    opt_proj = _adam([model.proj_c.weight], cfg, cfg.stage2)
    start = 0
    if resume_from is not None:
        opt.load_state_dict(resume_from["stage2"])
        opt_proj.load_state_dict(resume_from["stage2_proj"])
        start = resume_from["next_epoch"]

    frozen_before = (checksum(model.prompt_bank), checksum(model.text_encoder))
    t_id, t_clothes = text_features(model)
    total = cfg.stage2.epochs
    end = total if stop_after is None else min(total, stop_after)
    steps_per_epoch = len(list(make_pk_batches(data.records, cfg.P, cfg.K_p, 0)))
    _truncate_log(log.path, start * steps_per_epoch)
    for epoch in range(start, end):
        lr = cosine_lr(cfg.stage2.lr, epoch, total)
        _set_lr(opt, lr)
        _set_lr(opt_proj, lr)
        es = epoch_seed(cfg.seed, 2, epoch)
        g = torch.Generator().manual_seed(es)
        for it, batch in enumerate(make_pk_batches(data.records, cfg.P, cfg.K_p, es)):
            step = epoch * steps_per_epoch + it
            rows = data.rows(batch)
            pids, cids = data.pids[rows], data.cids[rows]
            raw, shield, _ = make_streams(data, rows, cfg, g)
            terms, f = stage2_terms(model, raw, shield, pids, cids, t_id, t_clothes, cfg, sim, g)
            proj_term = None
            if cfg.use_cfm:
                # examine: projection-only update; encoders see no gradient from it
                proj_term = clothes_alignment_term(model, f, cids, t_clothes, cfg, sim, g)
                opt_proj.zero_grad(set_to_none=True)
                proj_term.backward()
                opt_proj.step()
                # disentangle against the updated projection
                with torch.no_grad():
                    f_c = project_clothes(f.detach(), model.proj_c)
                terms["dis"] = L.disentangle_loss(f, f_c)
            report = L.stage2_total(terms, cfg.lambda1, cfg.lambda2)
            opt.zero_grad(set_to_none=True)
            report.value.backward()
            opt.step()
            for name, v in terms.items():
                log.write(step, name, v.item())
            if proj_term is not None:
                log.write(step, "i2tce_c", proj_term.item())
            total_value = report.item() + (proj_term.item() if proj_term is not None else 0.0)
            log.write(step, "stage2", total_value)
        if _periodic(cfg, run_dir, epoch, end):
            save_checkpoint(run_dir / "checkpoints" / f"stage2_epoch{epoch + 1}.pt", model, cfg, 2, epoch + 1,
                            {"stage2": opt.state_dict(), "stage2_proj": opt_proj.state_dict(),
                             "next_epoch": epoch + 1})

    frozen_after = (checksum(model.prompt_bank), checksum(model.text_encoder))
    if frozen_after != frozen_before:
        raise RuntimeError("prompt bank or text encoder changed during stage 2")
    model.eval()
    if run_dir is None:
        return None
    tag = "stage2" if end == total else f"stage2_epoch{end}"
    return save_checkpoint(run_dir / "checkpoints" / f"{tag}.pt", model, cfg, 2, end,
                           {"stage2": opt.state_dict(), "stage2_proj": opt_proj.state_dict(),
                            "next_epoch": end})


# ---------------------------------------------------------------- diagnostics


@torch.no_grad()
def prompt_diagnostics(model: ReIDModel, data: TrainData, cfg: TrainingConfig) -> dict:
    """How well the learned identity prompts describe shielding images.

    ``accuracy``: nearest identity prompt (cosine) to each shielding-image
    feature. ``sim_shield`` / ``sim_clothes``: mean cosine between each
    image's identity prompt and its shielding / clothes image feature.
    """
    f_s, f_c = stage1_features(model, data, cfg)
    t_id, _ = text_features(model)
    cos_s = L.similarity(f_s, t_id, L.SimilarityConfig(1.0))
    cos_c = L.similarity(f_c, t_id, L.SimilarityConfig(1.0))
    idx = torch.arange(len(data))
    return {
        "accuracy": float((cos_s.argmax(1) == data.pids).float().mean()),
        "chance": 1.0 / model.K,
        "sim_shield": float(cos_s[idx, data.pids].mean()),
        "sim_clothes": float(cos_c[idx, data.pids].mean()),
    }
