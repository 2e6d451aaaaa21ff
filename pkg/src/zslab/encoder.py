"""Toy patch-transformer encoder with shallow prompt injection.

The backbone (patch projection, positional embeddings, class token,
transformer blocks, projection head) is frozen at random initialization and
stands in for a pretrained image encoder. Trainable state is exactly the
prompt vectors plus every LayerNorm gain/bias. dual_branch mode keeps a
sketch and a photo set of those; shared mode keeps one common set.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, FormatError
from .tensor import Tensor, Param, attention_block, concat, l2_normalize, layer_norm

MAGIC = b"ZSLAB1"
SKETCH = "sketch"
PHOTO = "photo"
PROMPT_INIT_STD = 0.02


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 1
    feature_dim: int = 32
    prompt_count: int = 3
    mode: str = "dual_branch"  # dual_branch | shared

    def validate(self) -> "EncoderConfig":
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size != 0:
            raise ConfigError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.prompt_count < 1:
            raise ConfigError("prompt_count must be >= 1")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.mode not in ("dual_branch", "shared"):
            raise ConfigError(f"unknown encoder mode {self.mode!r}")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def branches(self) -> tuple[str, ...]:
        return (SKETCH, PHOTO) if self.mode == "dual_branch" else ("common",)


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """Split an [H, W] image into [m, patch_size^2] rows, left-to-right, top-to-bottom."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ConfigError(f"expected a square [H, H] image, got {arr.shape}")
    h = arr.shape[0]
    if h % patch_size != 0:
        raise ConfigError(f"patch_size {patch_size} does not divide image size {h}")
    n = h // patch_size
    patches = (
        arr.reshape(n, patch_size, n, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(n * n, patch_size * patch_size)
    )
    return Tensor(patches)


def unpatchify(patches: Tensor, image_size: int) -> Tensor:
    """Inverse of patchify: reassemble [m, p^2] rows into the [H, W] image."""
    arr = patches.data if isinstance(patches, Tensor) else np.asarray(patches, dtype=np.float64)
    m, psq = arr.shape
    p = int(round(psq**0.5))
    n = image_size // p
    if p * p != psq or n * n != m or n * p != image_size:
        raise ConfigError(f"patch array {arr.shape} inconsistent with image size {image_size}")
    img = arr.reshape(n, n, p, p).transpose(0, 2, 1, 3).reshape(image_size, image_size)
    return Tensor(img)


class Encoder:
    """Frozen backbone + per-branch prompts and LayerNorm affines."""

    def __init__(self, config: EncoderConfig, params: dict[str, Param], seed: int):
        self.config = config
        self.params = params
        self.seed = seed

    # -- parameter bookkeeping -------------------------------------------

    def frozen_parameters(self) -> list[Param]:
        return [p for p in self.params.values() if not p.trainable]

    def trainable_parameters(self) -> list[Param]:
        """Prompts first, then LN gains/biases in layer order (per branch)."""
        out = [self.params[f"prompt.{b}"] for b in self.config.branches]
        for b in self.config.branches:
            for i in range(self.config.depth):
                for ln in ("ln1", "ln2"):
                    out.append(self.params[f"ln.{b}.blocks.{i}.{ln}.gain"])
                    out.append(self.params[f"ln.{b}.blocks.{i}.{ln}.bias"])
            out.append(self.params[f"ln.{b}.final.gain"])
            out.append(self.params[f"ln.{b}.final.bias"])
        return out

    def frozen_state_hash(self) -> str:
        """SHA-256 over all frozen weight bytes, in sorted name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            p = self.params[name]
            if not p.trainable:
                h.update(name.encode())
                h.update(p.data.astype("<f8").tobytes())
        return h.hexdigest()

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self.config), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def _branch_key(self, branch: str) -> str:
        if self.config.mode == "shared":
            return "common"
        if branch not in (SKETCH, PHOTO):
            raise ConfigError(f"unknown branch {branch!r}")
        return branch

    # -- forward -----------------------------------------------------------

    def encode(self, images, branch: str) -> Tensor:
        """Map [H, W] or [B, H, W] images to unit-norm [d] / [B, d] features.

        Token layout fed to block 1: [patch embeddings + positions, class
        token, prompt tokens]; prompts enter only here (shallow prompting).
        The feature is the projected class-token output.
        """
        cfg = self.config
        b = self._branch_key(branch)
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        single = arr.ndim == 2
        if single:
            arr = arr[None, :, :]
        if arr.shape[1] != cfg.image_size or arr.shape[2] != cfg.image_size:
            raise ConfigError(f"expected {cfg.image_size}x{cfg.image_size} images, got {arr.shape[1:]}")
        bsz = arr.shape[0]
        m, p = cfg.num_patches, cfg.patch_size
        n = cfg.grid
        patches = Tensor(
            arr.reshape(bsz, n, p, n, p).transpose(0, 1, 3, 2, 4).reshape(bsz, m, p * p)
        )

        tok = patches @ self.params["patch_proj.w"] + self.params["patch_proj.b"]
        tok = tok + self.params["pos_embed"]
        cls = self.params["cls_token"].reshape(1, 1, cfg.embed_dim).broadcast_to((bsz, 1, cfg.embed_dim))
        prompts = (
            self.params[f"prompt.{b}"]
            .reshape(1, cfg.prompt_count, cfg.embed_dim)
            .broadcast_to((bsz, cfg.prompt_count, cfg.embed_dim))
        )
        x = concat([tok, cls, prompts], axis=1)

        for i in range(cfg.depth):
            weights = {
                k: self.params[f"blocks.{i}.{k}"]
                for k in ("qw", "qb", "kw", "kb", "vw", "vb", "ow", "ob",
                          "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")
            }
            weights["ln1_gain"] = self.params[f"ln.{b}.blocks.{i}.ln1.gain"]
            weights["ln1_bias"] = self.params[f"ln.{b}.blocks.{i}.ln1.bias"]
            weights["ln2_gain"] = self.params[f"ln.{b}.blocks.{i}.ln2.gain"]
            weights["ln2_bias"] = self.params[f"ln.{b}.blocks.{i}.ln2.bias"]
            x = attention_block(x, weights, heads=cfg.heads)

        x = layer_norm(x, self.params[f"ln.{b}.final.gain"], self.params[f"ln.{b}.final.bias"])
        cls_out = x[:, m, :]  # class token sits after the m patch tokens
        feat = l2_normalize(cls_out @ self.params["proj"], axis=-1)
        return feat[0] if single else feat


def build_encoder(config: EncoderConfig, seed: int) -> Encoder:
    """Deterministically initialize an encoder from a seed.

    Frozen weights and prompts come from one seeded stream; prompts use a
    zero-mean normal with stddev 0.02, LN affines start at identity.
    """
    cfg = config.validate()
    rng = np.random.default_rng(seed)
    d, m, k = cfg.embed_dim, cfg.num_patches, cfg.prompt_count
    hidden = 4 * d
    params: dict[str, Param] = {}

    def frozen(name, shape, std):
        params[name] = Param(rng.normal(0.0, std, shape), trainable=False, name=name)

    def frozen_zeros(name, shape):
        params[name] = Param(np.zeros(shape), trainable=False, name=name)

    frozen("patch_proj.w", (cfg.patch_size**2, d), (cfg.patch_size**2) ** -0.5)
    frozen_zeros("patch_proj.b", (d,))
    frozen("pos_embed", (m, d), PROMPT_INIT_STD)
    frozen("cls_token", (d,), PROMPT_INIT_STD)
    for i in range(cfg.depth):
        for w in ("qw", "kw", "vw", "ow"):
            frozen(f"blocks.{i}.{w}", (d, d), d**-0.5)
        for bias in ("qb", "kb", "vb", "ob"):
            frozen_zeros(f"blocks.{i}.{bias}", (d,))
        frozen(f"blocks.{i}.mlp_w1", (d, hidden), d**-0.5)
        frozen_zeros(f"blocks.{i}.mlp_b1", (hidden,))
        frozen(f"blocks.{i}.mlp_w2", (hidden, d), hidden**-0.5)
        frozen_zeros(f"blocks.{i}.mlp_b2", (d,))
    frozen("proj", (d, cfg.feature_dim), d**-0.5)

    for b in cfg.branches:
        name = f"prompt.{b}"
        params[name] = Param(rng.normal(0.0, PROMPT_INIT_STD, (k, d)), trainable=True, name=name)
        for i in range(cfg.depth):
            for ln in ("ln1", "ln2"):
                gname = f"ln.{b}.blocks.{i}.{ln}.gain"
                bname = f"ln.{b}.blocks.{i}.{ln}.bias"
                params[gname] = Param(np.ones(d), trainable=True, name=gname)
                params[bname] = Param(np.zeros(d), trainable=True, name=bname)
        params[f"ln.{b}.final.gain"] = Param(np.ones(d), trainable=True, name=f"ln.{b}.final.gain")
        params[f"ln.{b}.final.bias"] = Param(np.zeros(d), trainable=True, name=f"ln.{b}.final.bias")

    return Encoder(cfg, params, seed)


# -- checkpoint container ------------------------------------------------------

# Layout: MAGIC, u32 json length, canonical JSON {config, seed, meta},
# u32 blob count, then per blob: u32 name length, name, u32 ndim, u32 dims...,
# float64 little-endian payload. Round-trips bit-exactly.


def write_blob_file(path: str, header: dict, blobs: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    hjson = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hjson)))
    buf.write(hjson)
    buf.write(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_blob_file(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()

    def need(offset, count):
        if offset + count > len(raw):
            raise FormatError("truncated blob file", offset=offset)
        return raw[offset : offset + count]

    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic {raw[:len(MAGIC)]!r}, expected {MAGIC!r}", offset=0)
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<I", need(pos, 4))
    pos += 4
    try:
        header = json.loads(need(pos, hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt header JSON: {e}", offset=pos)
    pos += hlen
    (count,) = struct.unpack("<I", need(pos, 4))
    pos += 4
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", need(pos, 4))
        pos += 4
        name = need(pos, nlen).decode()
        pos += nlen
        (ndim,) = struct.unpack("<I", need(pos, 4))
        pos += 4
        shape = struct.unpack(f"<{ndim}I", need(pos, 4 * ndim))
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        arr = np.frombuffer(need(pos, nbytes), dtype="<f8").reshape(shape).copy()
        pos += nbytes
        blobs[name] = arr
    return header, blobs


def save_checkpoint(encoder: Encoder, path: str, meta: dict | None = None,
                    extra_blobs: dict[str, np.ndarray] | None = None) -> None:
    header = {"kind": "encoder", "config": asdict(encoder.config), "seed": encoder.seed,
              "meta": meta or {}}
    blobs = {name: p.data for name, p in encoder.params.items()}
    if extra_blobs:
        blobs = {**blobs, **extra_blobs}
    write_blob_file(path, header, blobs)


def load_checkpoint(path: str) -> tuple[Encoder, dict, dict[str, np.ndarray]]:
    """Rebuild an encoder from a checkpoint; returns (encoder, meta, extra blobs)."""
    header, blobs = read_blob_file(path)
    if header.get("kind") != "encoder":
        raise FormatError(f"not an encoder checkpoint: kind={header.get('kind')!r}")
    cfg = EncoderConfig(**header["config"])
    enc = build_encoder(cfg, int(header["seed"]))
    extra = {}
    for name, arr in blobs.items():
        if name in enc.params:
            if enc.params[name].shape != arr.shape:
                raise FormatError(f"blob {name} shape {arr.shape} != expected {enc.params[name].shape}")
            enc.params[name].data = arr
        else:
            extra[name] = arr
    missing = set(enc.params) - set(blobs)
    if missing:
        raise FormatError(f"checkpoint missing parameters: {sorted(missing)[:3]}...")
    return enc, header.get("meta", {}), extra
