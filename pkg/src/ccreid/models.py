"""Image/text encoders, prompt bank, clothes projection and BNNeck heads."""
from __future__ import annotations

import copy
import hashlib
import zlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

IDENTITY_TEMPLATE = "A photo of a [X] person"
CLOTHES_TEMPLATE = "A photo of [X] clothes"

# CLIP pixel statistics, applied to [0, 255] input inside the encoders.
PIXEL_MEAN = (0.48145466 * 255, 0.4578275 * 255, 0.40821073 * 255)
PIXEL_STD = (0.26862954 * 255, 0.26130258 * 255, 0.27577711 * 255)


class PixelNorm(nn.Module):
    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        return (x - self.mean) / self.std


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ToyImageEncoder(nn.Module):
    """Small CNN mapping N x 3 x H x W images in [0, 255] to N x C features.

    A coarse 4 x 2 pooled grid is kept before the final linear layer so the
    network can weight body regions differently.
    """

    def __init__(self, feature_dim: int, width: int = 32):
        super().__init__()
        self.norm = PixelNorm()
        self.body = nn.Sequential(
            _conv_block(3, width // 2),
            nn.MaxPool2d(2),
            _conv_block(width // 2, width),
            nn.MaxPool2d(2),
            _conv_block(width, width),
            nn.AdaptiveAvgPool2d((4, 2)),
        )
        self.fc = nn.Linear(width * 8, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, x):
        return self.fc(self.body(self.norm(x)).flatten(1))


@dataclass
class EncoderHandle:
    module: nn.Module
    stream: str
    feature_dim: int

    def __post_init__(self):
        if self.stream not in ("raw", "shielding"):
            raise ContractError(f"unknown stream {self.stream!r}")

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.module.parameters())

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.module.requires_grad_(value)

    @property
    def parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.module.named_parameters())


def encode_image(handle: EncoderHandle, images: torch.Tensor) -> torch.Tensor:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ContractError(f"expected N x 3 x H x W images, got {tuple(images.shape)}")
    feats = handle.module(images.float())
    if feats.shape[-1] != handle.feature_dim:
        raise ContractError(f"encoder returned dim {feats.shape[-1]}, expected {handle.feature_dim}")
    return feats


def _word_seed(word: str, seed: int) -> int:
    return zlib.crc32(f"{seed}:{word}".encode())


def split_template(template: str) -> tuple[list[str], list[str]]:
    if template.count("[X]") != 1:
        raise ContractError("template must contain exactly one [X] placeholder")
    pre, post = template.split("[X]")
    return pre.split(), post.split()


class TextStub(nn.Module):
    """Frozen stand-in for a text encoder.

    Template words get fixed random embeddings; a sequence of token embeddings
    is mean-pooled and passed through a frozen random affine map to C dims.
    """

    def __init__(self, token_dim: int, feature_dim: int, seed: int = 0):
        super().__init__()
        self.token_dim = token_dim
        self.feature_dim = feature_dim
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        self.proj = nn.Linear(token_dim, feature_dim)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(feature_dim, token_dim, generator=g) / token_dim ** 0.5)
            self.proj.bias.copy_(0.1 * torch.randn(feature_dim, generator=g))
        self.requires_grad_(False)

    def embed_words(self, words: list[str]) -> torch.Tensor:
        rows = [torch.randn(self.token_dim, generator=torch.Generator().manual_seed(_word_seed(w.lower(), self.seed)))
                * 0.02 for w in words]
        if not rows:
            return torch.zeros(0, self.token_dim)
        return torch.stack(rows)

    def forward(self, token_embeds: torch.Tensor) -> torch.Tensor:
        return self.proj(token_embeds.mean(dim=1))


class PromptBank(nn.Module):
    """Learnable [X] tokens, one row per identity and per clothes class.

    The template words are frozen buffers obtained from the text encoder's
    word embeddings; only ``identity`` and ``clothes`` are parameters.
    """

    def __init__(self, K: int, K_c: int, n_tokens: int, token_dim: int, text_encoder,
                 identity_template: str = IDENTITY_TEMPLATE, clothes_template: str = CLOTHES_TEMPLATE,
                 seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.identity = nn.Parameter(0.02 * torch.randn(K, n_tokens, token_dim, generator=g))
        self.clothes = nn.Parameter(0.02 * torch.randn(K_c, n_tokens, token_dim, generator=g))
        self.identity_template = identity_template
        self.clothes_template = clothes_template
        for kind, template in (("identity", identity_template), ("clothes", clothes_template)):
            pre, post = split_template(template)
            self.register_buffer(f"{kind}_prefix", text_encoder.embed_words(pre).detach().clone())
            self.register_buffer(f"{kind}_suffix", text_encoder.embed_words(post).detach().clone())

    @property
    def n_tokens(self) -> int:
        return self.identity.shape[1]

    def num_classes(self, kind: str) -> int:
        return self._tokens(kind).shape[0]

    def _tokens(self, kind: str) -> torch.Tensor:
        if kind == "identity":
            return self.identity
        if kind == "clothes":
            return self.clothes
        raise ContractError(f"unknown prompt kind {kind!r}")

    def sequences(self, kind: str, labels: torch.Tensor) -> torch.Tensor:
        tokens = self._tokens(kind)
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        if labels.numel() and (labels.min() < 0 or labels.max() >= tokens.shape[0]):
            raise ContractError(f"{kind} label out of range [0, {tokens.shape[0]})")
        x = tokens[labels]
        n = x.shape[0]
        pre = getattr(self, f"{kind}_prefix").unsqueeze(0).expand(n, -1, -1)
        post = getattr(self, f"{kind}_suffix").unsqueeze(0).expand(n, -1, -1)
        return torch.cat([pre, x, post], dim=1)


def encode_prompts(bank: PromptBank, text_encoder: nn.Module, kind: str, labels=None) -> torch.Tensor:
    """Text features for ``labels`` (all classes when None), one row each."""
    if labels is None:
        labels = torch.arange(bank.num_classes(kind))
    return text_encoder(bank.sequences(kind, labels))


def encode_prompt(bank: PromptBank, text_encoder: nn.Module, kind: str, label: int) -> torch.Tensor:
    return encode_prompts(bank, text_encoder, kind, [int(label)])[0]


class ProjectionMatrix(nn.Module):
    """Learnable C x C map from pedestrian features to clothes features."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.eye(feature_dim))

    def forward(self, features):
        return project_clothes(features, self)


def project_clothes(features: torch.Tensor, proj) -> torch.Tensor:
    weight = proj.weight if isinstance(proj, nn.Module) else proj
    if weight.ndim != 2 or weight.shape[0] != weight.shape[1]:
        raise ContractError("projection matrix must be square")
    if features.shape[-1] != weight.shape[0]:
        raise ContractError(f"feature dim {features.shape[-1]} != projection dim {weight.shape[0]}")
    return features @ weight


class BNNeckHead(nn.Module):
    """BatchNorm followed by a bias-free linear classifier.

    Triplet losses use the features fed into this head; cross-entropy uses its
    logits.
    """

    def __init__(self, feature_dim: int, num_classes: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(feature_dim)
        self.bn.bias.requires_grad_(False)
        self.classifier = nn.Linear(feature_dim, num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    def forward(self, features):
        return self.classifier(self.bn(features))


def build_toy_encoders(C: int, seed: int, token_dim: int = 64, width: int = 32):
    """Raw and shielding CNN encoders plus a frozen text stub.

    The shielding encoder is a copy of the raw one, as two streams initialised
    from one pretrained checkpoint would be; afterwards they share nothing.
    """
    if C < 4:
        raise ContractError("feature dim must be at least 4")
    torch.manual_seed(seed)
    raw = ToyImageEncoder(C, width)
    shield = copy.deepcopy(raw)
    text = TextStub(token_dim, C, seed=seed)
    return EncoderHandle(raw, "raw", C), EncoderHandle(shield, "shielding", C), text


class ReIDModel(nn.Module):
    """Everything trained across both stages, under checkpoint-stable names."""

    def __init__(self, raw: EncoderHandle, shield: EncoderHandle, text_encoder: nn.Module,
                 K: int, K_c: int, n_tokens: int = 4, seed: int = 0):
        super().__init__()
        C = raw.feature_dim
        self.C, self.K, self.K_c = C, K, K_c
        self.raw_handle, self.shield_handle = raw, shield
        self.raw_encoder = raw.module
        self.shield_encoder = shield.module
        self.text_encoder = text_encoder
        self.text_encoder.requires_grad_(False)
        self.prompt_bank = PromptBank(K, K_c, n_tokens, text_encoder.token_dim, text_encoder, seed=seed)
        self.proj_c = ProjectionMatrix(C)
        self.head_id = BNNeckHead(C, K)
        self.head_id_s = BNNeckHead(C, K)

    @property
    def n_tokens(self) -> int:
        return self.prompt_bank.n_tokens

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """Flat ``group/name`` archive view of every parameter and buffer."""
        out = {}
        for name, t in self.state_dict().items():
            group, _, rest = name.partition(".")
            if group == "prompt_bank" and rest in ("identity", "clothes"):
                out[f"prompt_bank/{rest}"] = t
            elif group == "proj_c":
                out["proj_c"] = t
            else:
                out[f"{group}/{rest}"] = t
        return out

    def load_named_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        state = {}
        for key, t in tensors.items():
            if key == "proj_c":
                state["proj_c.weight"] = t
            else:
                group, _, rest = key.partition("/")
                state[f"{group}.{rest}"] = t
        self.load_state_dict(state)


def build_toy_model(C: int, K: int, K_c: int, n_tokens: int = 4, token_dim: int = 64,
                    seed: int = 0, width: int = 32) -> ReIDModel:
    raw, shield, text = build_toy_encoders(C, seed, token_dim=token_dim, width=width)
    return ReIDModel(raw, shield, text, K, K_c, n_tokens=n_tokens, seed=seed)


def checksum(module_or_tensors) -> str:
    """SHA-256 over parameter and buffer bytes in name order."""
    if isinstance(module_or_tensors, nn.Module):
        items = module_or_tensors.state_dict().items()
    elif isinstance(module_or_tensors, dict):
        items = module_or_tensors.items()
    else:
        items = [("", module_or_tensors)]
    h = hashlib.sha256()
    for name, t in sorted(items, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_clip_model(K: int, K_c: int, n_tokens: int = 4, name_or_path: str = "openai/clip-vit-base-patch16",
                     seed: int = 0, config=None) -> ReIDModel:
    """ReIDModel around a CLIP checkpoint (requires ``transformers``).

    ``config`` builds a randomly initialised CLIP from a ``CLIPConfig``
    instead of loading weights.
    """
    from .clip_adapter import ClipImageEncoder, ClipTextEncoder, load_clip

    clip, tokenizer = load_clip(name_or_path, config)
    C = clip.config.projection_dim
    raw = ClipImageEncoder(clip)
    shield = copy.deepcopy(raw)
    text = ClipTextEncoder(clip, tokenizer)
    return ReIDModel(EncoderHandle(raw, "raw", C), EncoderHandle(shield, "shielding", C), text,
                     K, K_c, n_tokens=n_tokens, seed=seed)


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1)
