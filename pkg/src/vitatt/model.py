"""Image + metadata fusion transformer.

Image path: non-overlapping patches -> linear projection -> prepend class
token -> add positional embeddings -> pre-norm encoder blocks -> final norm.
Metadata path: one linear map per metadata slot -> layer norm.
Fusion: image tokens and metadata tokens are stacked along the token axis,
one multi-head self-attention with a residual connection mixes them, and the
fused class token feeds a linear -> batch norm -> swish -> linear head.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

CHECKPOINT_MAGIC = "VITATT-CKPT-1"


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 16
    num_encoder_layers: int = 2
    num_heads: int = 2
    mlp_hidden: int = 32
    num_metadata_slots: int = 4
    metadata_width: int = 2
    num_classes: int = 3
    head_hidden: int = 16
    image_only: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def num_tokens(self) -> int:
        extra = 0 if self.image_only else self.num_metadata_slots
        return self.num_patches + 1 + extra

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


ENCODER = "encoder"
OTHER = "other"


def _shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str, str]]:
    """name -> (shape, init kind, parameter group)."""
    d, P = cfg.embed_dim, cfg.num_patches
    s: dict[str, tuple[tuple[int, ...], str, str]] = {
        "patch_embed.weight": ((cfg.patch_dim, d), "normal", ENCODER),
        "patch_embed.bias": ((d,), "zeros", ENCODER),
        "cls_token": ((d,), "normal", ENCODER),
        "pos_embed": ((P + 1, d), "normal", ENCODER),
    }

    def attn(prefix, group):
        for m in "qkvo":
            s[f"{prefix}.w{m}"] = ((d, d), "normal", group)
            s[f"{prefix}.b{m}"] = ((d,), "zeros", group)

    for i in range(cfg.num_encoder_layers):
        p = f"blocks.{i}"
        s[f"{p}.norm1.gain"] = ((d,), "ones", ENCODER)
        s[f"{p}.norm1.bias"] = ((d,), "zeros", ENCODER)
        attn(f"{p}.attn", ENCODER)
        s[f"{p}.norm2.gain"] = ((d,), "ones", ENCODER)
        s[f"{p}.norm2.bias"] = ((d,), "zeros", ENCODER)
        s[f"{p}.mlp.fc1.weight"] = ((d, cfg.mlp_hidden), "normal", ENCODER)
        s[f"{p}.mlp.fc1.bias"] = ((cfg.mlp_hidden,), "zeros", ENCODER)
        s[f"{p}.mlp.fc2.weight"] = ((cfg.mlp_hidden, d), "normal", ENCODER)
        s[f"{p}.mlp.fc2.bias"] = ((d,), "zeros", ENCODER)
    s["enc_norm.gain"] = ((d,), "ones", ENCODER)
    s["enc_norm.bias"] = ((d,), "zeros", ENCODER)
    if not cfg.image_only:
        M, w = cfg.num_metadata_slots, cfg.metadata_width
        s["meta_embed.weight"] = ((M, w, d), "normal", OTHER)
        s["meta_embed.bias"] = ((M, d), "zeros", OTHER)
        s["meta_norm.gain"] = ((d,), "ones", OTHER)
        s["meta_norm.bias"] = ((d,), "zeros", OTHER)
        attn("fusion", OTHER)
    s["head.fc1.weight"] = ((d, cfg.head_hidden), "normal", OTHER)
    s["head.fc1.bias"] = ((cfg.head_hidden,), "zeros", OTHER)
    s["head.bn.gain"] = ((cfg.head_hidden,), "ones", OTHER)
    s["head.bn.bias"] = ((cfg.head_hidden,), "zeros", OTHER)
    s["head.fc2.weight"] = ((cfg.head_hidden, cfg.num_classes), "normal", OTHER)
    s["head.fc2.bias"] = ((cfg.num_classes,), "zeros", OTHER)
    return s


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until every entry lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class VitAttParams:
    """Named learnable tensors plus the head's batch-norm running statistics."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], bn: BatchNormState):
        self.config = config
        self.tensors = tensors
        self.bn = bn
        spec = _shapes(config)
        self.groups = {name: spec[name][2] for name in tensors}

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator | int = 0) -> VitAttParams:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        tensors = {}
        for name, (shape, kind, _) in _shapes(config).items():
            if kind == "normal":
                data = trunc_normal(rng, shape)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors, BatchNormState(config.head_hidden))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> VitAttParams:
        tensors = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()}
        return VitAttParams(self.config, tensors, self.bn.copy())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.tensors.items()}
        out["head.bn.running_mean"] = self.bn.running_mean
        out["head.bn.running_var"] = self.bn.running_var
        return out


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, params: VitAttParams, extra: dict | None = None) -> None:
    """Write config + named flat weight arrays as one JSON document."""
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "config": asdict(params.config),
        "weights": {
            k: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
            for k, a in params.arrays().items()
        },
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[VitAttParams, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    cfg = ModelConfig.from_dict(doc["config"])
    arrays = {
        k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["weights"].items()
    }
    bn = BatchNormState(cfg.head_hidden)
    bn.running_mean = arrays.pop("head.bn.running_mean")
    bn.running_var = arrays.pop("head.bn.running_var")
    expected = _shapes(cfg)
    if set(arrays) != set(expected):
        raise ValueError(f"{path}: weight names do not match config")
    tensors = {}
    for name in expected:
        if arrays[name].shape != expected[name][0]:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, expected {expected[name][0]}")
        tensors[name] = Tensor(arrays[name], requires_grad=True, name=name)
    return VitAttParams(cfg, tensors, bn), doc.get("extra", {})


# ---------------------------------------------------------------- components

@dataclass
class AttentionRecord:
    kind: str  # "encoder" or "fusion"
    attn: Tensor  # (batch, heads, T, T)

    @property
    def grad(self) -> np.ndarray | None:
        return self.attn.grad


@dataclass
class ForwardTrace:
    attentions: list[AttentionRecord] = field(default_factory=list)
    pre_fusion_cls: np.ndarray | None = None
    post_fusion_cls: np.ndarray | None = None
    logits: Tensor | None = None


def patchify(images, patch_size: int) -> Tensor:
    """(ch, H, W) or (b, ch, H, W) -> (P, ch*p*p) or (b, P, ch*p*p).

    Patches are ordered row-major over the patch grid; each row is the patch
    flattened in (channel, row, column) order.
    """
    x = T.as_tensor(images)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    b, ch, H, W = x.shape
    p = patch_size
    if H % p or W % p:
        raise ValueError(f"patchify: image {H}x{W} not divisible by patch {p}")
    gh, gw = H // p, W // p
    x = x.reshape(b, ch, gh, p, gw, p)
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = x.reshape(b, gh * gw, ch * p * p)
    return x.reshape(gh * gw, ch * p * p) if single else x


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify` for a single image."""
    P = patches.shape[0]
    g = math.isqrt(P)
    p = patch_size
    x = np.asarray(patches).reshape(g, g, channels, p, p)
    return x.transpose(2, 0, 3, 1, 4).reshape(channels, g * p, g * p)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return x @ weight + bias


def multi_head_attention(x: Tensor, params: VitAttParams, prefix: str, num_heads: int,
                         record: list | None = None, kind: str = "encoder") -> Tensor:
    """softmax(Q K^T / sqrt(d_h)) V per head, heads concatenated then projected."""
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    b, t, d = x.shape
    dh = d // num_heads

    def heads(m):
        y = linear(x, params[f"{prefix}.w{m}"], params[f"{prefix}.b{m}"])
        return T.transpose(y.reshape(b, t, num_heads, dh), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    a = T.softmax_rows(scores)
    if record is not None:
        record.append(AttentionRecord(kind, a))
    out = T.transpose(a @ v, (0, 2, 1, 3)).reshape(b, t, d)
    return linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def encoder_layer(x: Tensor, params: VitAttParams, index: int, num_heads: int,
                  record: list | None = None) -> Tensor:
    p = f"blocks.{index}"
    h = T.layer_norm(x, params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"])
    x = x + multi_head_attention(h, params, f"{p}.attn", num_heads, record, "encoder")
    h = T.layer_norm(x, params[f"{p}.norm2.gain"], params[f"{p}.norm2.bias"])
    h = T.gelu(linear(h, params[f"{p}.mlp.fc1.weight"], params[f"{p}.mlp.fc1.bias"]))
    return x + linear(h, params[f"{p}.mlp.fc2.weight"], params[f"{p}.mlp.fc2.bias"])


def embed_metadata(encoded, params: VitAttParams) -> Tensor:
    """(b, M, w) slot encodings -> (b, M, d) tokens, one linear map per slot."""
    x = T.as_tensor(encoded)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    b, M, w = x.shape
    weight = params["meta_embed.weight"]
    if weight.shape[:2] != (M, w):
        raise ValueError(
            f"embed_metadata: got {M} slots of width {w}, model expects {weight.shape[0]}x{weight.shape[1]}"
        )
    d = weight.shape[2]
    y = (x.reshape(b, M, 1, w) @ weight).reshape(b, M, d) + params["meta_embed.bias"]
    y = T.layer_norm(y, params["meta_norm.gain"], params["meta_norm.bias"])
    return y.reshape(M, d) if single else y


def fuse(image_tokens: Tensor, metadata_tokens: Tensor, params: VitAttParams, num_heads: int,
         record: list | None = None) -> Tensor:
    """Z = [image tokens; metadata tokens] along the token axis, returns Z + MHA(Z)."""
    z = T.concat([image_tokens, metadata_tokens], axis=-2)
    return z + multi_head_attention(z, params, "fusion", num_heads, record, "fusion")


def classify_head(embedding, params: VitAttParams, training: bool = False) -> Tensor:
    x = T.as_tensor(embedding)
    if x.ndim == 1:
        x = x.reshape(1, x.shape[0])
    h = linear(x, params["head.fc1.weight"], params["head.fc1.bias"])
    h = T.batch_norm(h, params["head.bn.gain"], params["head.bn.bias"], params.bn, training)
    h = T.swish(h)
    return linear(h, params["head.fc2.weight"], params["head.fc2.bias"])


def encode_images(images, params: VitAttParams, record: list | None = None) -> Tensor:
    cfg = params.config
    x = patchify(images, cfg.patch_size)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    b = x.shape[0]
    x = linear(x, params["patch_embed.weight"], params["patch_embed.bias"])
    cls = params["cls_token"].reshape(1, 1, cfg.embed_dim) * np.ones((b, 1, 1))
    x = T.concat([cls, x], axis=1) + params["pos_embed"]
    for i in range(cfg.num_encoder_layers):
        x = encoder_layer(x, params, i, cfg.num_heads, record)
    return T.layer_norm(x, params["enc_norm.gain"], params["enc_norm.bias"])


def forward(params: VitAttParams, images, metadata=None, training: bool = False,
            record: bool = False) -> tuple[Tensor, ForwardTrace]:
    """Logits (b, C) for a batch of images (b, ch, H, W) and encodings (b, M, w)."""
    cfg = params.config
    trace = ForwardTrace()
    rec = trace.attentions if record else None
    tokens = encode_images(images, params, rec)
    trace.pre_fusion_cls = tokens.data[:, 0, :].copy()
    if cfg.image_only:
        fused = tokens
    else:
        if metadata is None:
            raise ValueError("forward: metadata required unless image_only")
        meta = embed_metadata(metadata, params)
        fused = fuse(tokens, meta, params, cfg.num_heads, rec)
    cls = fused[:, 0, :]
    trace.post_fusion_cls = cls.data.copy()
    logits = classify_head(cls, params, training)
    trace.logits = logits
    return logits, trace
