"""Visible-token transformer encoder and cross-attention decoder.

The encoder is a standard pre-norm ViT applied only to the gathered visible
rows, so its attention cost scales with the encode-set size, never with the
full token count.  The decoder forms one query per reconstruction target
(shared learnable mask token plus that position's embedding) and attends
only to the encoded latents: no self-attention among masked queries.
A prediction head maps decoder output back to patch pixel space.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.special

from . import tensor as T
from .errors import ContractError, DimensionError, ParseError
from .imaging import PatchGrid
from .rng import generator
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SMAE"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class ModelConfig:
    """Architecture knobs for the toy-scale masked-image model."""

    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    embed_dim: int = 64
    encoder_depth: int = 2
    decoder_depth: int = 12
    heads: int = 4
    mlp_ratio: float = 4.0
    norm_pix_targets: bool = True
    decoder_dim: int | None = None  # None: decoder width equals embed_dim

    def __post_init__(self):
        if self.decoder_dim is None:
            self.decoder_dim = self.embed_dim
        if self.embed_dim % self.heads != 0:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.heads != 0:
            raise ContractError(f"decoder_dim {self.decoder_dim} not divisible by heads {self.heads}")
        if self.decoder_depth < 1:
            raise ContractError(f"decoder_depth must be >= 1, got {self.decoder_depth}")
        if self.encoder_depth < 1:
            raise ContractError(f"encoder_depth must be >= 1, got {self.encoder_depth}")
        if self.image_size % self.patch_size != 0:
            raise ContractError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def tokens(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_values(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos table over token index; deterministic function of (n, d)."""
    half = d // 2
    pos = np.arange(n, dtype=np.float64)[:, None]
    omega = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / max(half, 1)))
    out = np.zeros((n, d))
    out[:, :half] = np.sin(pos * omega)
    out[:, half : 2 * half] = np.cos(pos * omega)
    return out


def trunc_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) truncated to +/- 2 std via inverse-CDF sampling."""
    lo, hi = scipy.special.ndtr(-2.0), scipy.special.ndtr(2.0)
    u = rng.uniform(lo, hi, size=shape)
    return scipy.special.ndtri(u) * std


class MimModel:
    """Parameter container plus forward ops over the autodiff tape.

    Every method accepts per-sample arrays (T, ...) or batched (B, T, ...).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params(seed)

    # -- parameters ------------------------------------------------------

    def _add(self, name: str, value: np.ndarray, trainable: bool = True) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=trainable)

    def _init_block(self, prefix: str, dim: int, rng: np.random.Generator) -> None:
        hidden = int(dim * self.cfg.mlp_ratio)
        for ln in ("ln1", "ln2"):
            self._add(f"{prefix}.{ln}.gamma", np.ones(dim))
            self._add(f"{prefix}.{ln}.beta", np.zeros(dim))
        for proj in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.attn.{proj}", trunc_normal((dim, dim), 0.02, rng))
            self._add(f"{prefix}.attn.{proj[1]}b", np.zeros(dim))
        self._add(f"{prefix}.mlp.w1", trunc_normal((dim, hidden), 0.02, rng))
        self._add(f"{prefix}.mlp.b1", np.zeros(hidden))
        self._add(f"{prefix}.mlp.w2", trunc_normal((hidden, dim), 0.02, rng))
        self._add(f"{prefix}.mlp.b2", np.zeros(dim))

    def _init_params(self, seed: int) -> None:
        cfg = self.cfg
        rng = generator(seed, "model-init")
        q = cfg.patch_values
        d, dd = cfg.embed_dim, cfg.decoder_dim
        self._add("patch_embed.weight", trunc_normal((q, d), 0.02, rng))
        self._add("patch_embed.bias", np.zeros(d))
        self._add("pos_embed", sinusoidal_positions(cfg.tokens, d), trainable=False)
        for i in range(cfg.encoder_depth):
            self._init_block(f"encoder.{i}", d, rng)
        self._add("encoder.norm.gamma", np.ones(d))
        self._add("encoder.norm.beta", np.zeros(d))
        self._add("decoder.mask_token", trunc_normal((dd,), 0.02, rng))
        self._add("decoder.pos_embed", sinusoidal_positions(cfg.tokens, dd), trainable=False)
        if dd != d:
            self._add("decoder.embed.weight", trunc_normal((d, dd), 0.02, rng))
            self._add("decoder.embed.bias", np.zeros(dd))
        for i in range(cfg.decoder_depth):
            self._init_block(f"decoder.{i}", dd, rng)
        self._add("decoder.norm.gamma", np.ones(dd))
        self._add("decoder.norm.beta", np.zeros(dd))
        self._add("head.weight", trunc_normal((dd, q), 0.02, rng))
        self._add("head.bias", np.zeros(q))

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward pieces ----------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.weight"] + self.params[f"{name}.bias"]

    def _heads_split(self, x: Tensor, dim: int) -> Tensor:
        b, t = x.shape[0], x.shape[1]
        h = self.cfg.heads
        return T.transpose(T.reshape(x, (b, t, h, dim // h)), (0, 2, 1, 3))

    def _heads_join(self, x: Tensor, dim: int) -> Tensor:
        b, t = x.shape[0], x.shape[2]
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, dim))

    def _attention(self, prefix: str, queries: Tensor, keys_values: Tensor, dim: int) -> Tensor:
        p = self.params
        q = self._heads_split(queries @ p[f"{prefix}.wq"] + p[f"{prefix}.qb"], dim)
        k = self._heads_split(keys_values @ p[f"{prefix}.wk"] + p[f"{prefix}.kb"], dim)
        v = self._heads_split(keys_values @ p[f"{prefix}.wv"] + p[f"{prefix}.vb"], dim)
        scale = 1.0 / np.sqrt(dim // self.cfg.heads)
        attn = T.softmax((q @ T.transpose(k, (0, 1, 3, 2))) * scale)
        ctx = self._heads_join(attn @ v, dim)
        return ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.ob"]

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        return T.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"])

    @staticmethod
    def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
        if len(x.shape) == 2:
            return T.reshape(x, (1,) + tuple(x.shape)), False
        return x, True

    # -- public forward ops -------------------------------------------------

    def embed_all(self, patches) -> Tensor:
        """Project all patches and add positional terms.

        ``patches``: (N, p*p*C) or (B, N, p*p*C) array / Tensor / PatchGrid.
        The returned rows feed both the distance criterion and the encoder.
        """
        if isinstance(patches, PatchGrid):
            patches = patches.patches
        x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches, dtype=self.dtype))
        if x.shape[-1] != self.cfg.patch_values:
            raise DimensionError(
                f"embed_all: patch length {x.shape[-1]} does not match model {self.cfg.patch_values}"
            )
        if x.shape[-2] != self.cfg.tokens:
            raise DimensionError(
                f"embed_all: {x.shape[-2]} patches do not match model token count {self.cfg.tokens}"
            )
        return self._linear(x, "patch_embed") + self.params["pos_embed"]

    def encode(self, visible: Tensor) -> Tensor:
        """Pre-norm transformer blocks over the visible rows only."""
        if visible.shape[-2] < 1:
            raise ContractError("encode: need at least one visible token")
        x, batched = self._as_batched(visible)
        d = self.cfg.embed_dim
        for i in range(self.cfg.encoder_depth):
            prefix = f"encoder.{i}"
            normed = self._ln(f"{prefix}.ln1", x)
            x = x + self._attention(f"{prefix}.attn", normed, normed, d)
            x = x + self._mlp(f"{prefix}.mlp", self._ln(f"{prefix}.ln2", x))
        x = self._ln("encoder.norm", x)
        return x if batched else T.reshape(x, tuple(x.shape[1:]))

    def decode(self, latents: Tensor, token_r: np.ndarray) -> Tensor:
        """Cross-attention decoder over reconstruction-target queries.

        ``token_r``: (R,) or (B, R) positions being reconstructed.  Output is
        (..., R, p*p*C) pixel predictions.
        """
        token_r = np.asarray(token_r)
        if token_r.size == 0:
            raise ContractError("decode: token_r must be non-empty")
        kv, batched = self._as_batched(latents)
        idx = token_r if token_r.ndim == 2 else token_r[None, :]
        if idx.shape[0] == 1 and kv.shape[0] > 1:
            idx = np.broadcast_to(idx, (kv.shape[0], idx.shape[1]))
        dd = self.cfg.decoder_dim
        if dd != self.cfg.embed_dim:
            kv = self._linear(kv, "decoder.embed")
        queries = T.take_rows(self.params["decoder.pos_embed"], idx) + self.params["decoder.mask_token"]
        x = queries
        for i in range(self.cfg.decoder_depth):
            prefix = f"decoder.{i}"
            x = x + self._attention(f"{prefix}.attn", self._ln(f"{prefix}.ln1", x), kv, dd)
            x = x + self._mlp(f"{prefix}.mlp", self._ln(f"{prefix}.ln2", x))
        x = self._ln("decoder.norm", x)
        out = self._linear(x, "head")
        return out if batched or token_r.ndim == 2 else T.reshape(out, tuple(out.shape[1:]))

    def reconstruction_loss(self, pred: Tensor, patches, token_r: np.ndarray, norm_pix: bool | None = None) -> Tensor:
        """MSE over reconstruction targets and pixel dims only.

        With ``norm_pix`` the targets are standardized per patch (mean 0,
        var 1, eps 1e-6) before the squared error.
        """
        if isinstance(patches, PatchGrid):
            patches = patches.patches
        patches = np.asarray(patches, dtype=self.dtype)
        token_r = np.asarray(token_r)
        if norm_pix is None:
            norm_pix = self.cfg.norm_pix_targets
        if patches.ndim == 2:
            target = patches[token_r if token_r.ndim == 1 else token_r[0]]
        else:
            idx = token_r if token_r.ndim == 2 else np.broadcast_to(token_r[None, :], (patches.shape[0], token_r.size))
            target = np.take_along_axis(patches, idx[:, :, None], axis=1)
        if tuple(target.shape) != tuple(pred.shape):
            raise DimensionError(f"reconstruction_loss: prediction {pred.shape} vs target {target.shape}")
        if norm_pix:
            mu = target.mean(axis=-1, keepdims=True)
            var = target.var(axis=-1, keepdims=True)
            target = (target - mu) / np.sqrt(var + 1e-6)
        diff = pred - Tensor(target.astype(self.dtype))
        return T.tmean(diff * diff)

    def forward_loss(self, patches, encode_idx: np.ndarray, token_r: np.ndarray) -> Tensor:
        """Full step: embed -> gather visible -> encode -> decode -> loss."""
        emb = self.embed_all(patches)
        batched = len(emb.shape) == 3
        enc_idx = np.asarray(encode_idx)
        if batched and enc_idx.ndim == 1:
            enc_idx = np.broadcast_to(enc_idx[None, :], (emb.shape[0], enc_idx.size))
        visible = T.take_rows(emb, enc_idx)
        latents = self.encode(visible)
        pred = self.decode(latents, token_r)
        return self.reconstruction_loss(pred, patches, token_r)

    # -- checkpoints ----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays())

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            if name not in arrays:
                raise ContractError(f"checkpoint missing array {name!r}")
            arr = arrays[name]
            if tuple(arr.shape) != tuple(tensor.data.shape):
                raise ContractError(
                    f"checkpoint array {name!r} has shape {arr.shape}, expected {tensor.data.shape}"
                )
            tensor.data = arr.astype(self.dtype)
        extra = set(arrays) - set(self.params)
        if extra:
            raise ContractError(f"checkpoint has unknown arrays: {sorted(extra)}")

    @classmethod
    def load(cls, path, cfg: ModelConfig, dtype=np.float32) -> "MimModel":
        model = cls(cfg, seed=0, dtype=dtype)
        arrays, _ = load_checkpoint(path)
        model.load_state(arrays)
        return model


# -- analytic FLOP model -------------------------------------------------


@dataclass
class FlopBreakdown:
    """Multiply-add counts (x2) per pipeline stage for one image."""

    embed: float
    encoder_linear: float
    encoder_attention: float
    decoder_linear: float
    decoder_attention: float
    head: float

    @property
    def total(self) -> float:
        return (
            self.embed
            + self.encoder_linear
            + self.encoder_attention
            + self.decoder_linear
            + self.decoder_attention
            + self.head
        )


def flop_breakdown(cfg: ModelConfig, tokens_encoded: int, tokens_reconstructed: int) -> FlopBreakdown:
    """Analytic per-image forward FLOPs from the token counts.

    ``encoder_attention`` counts only the quadratic QK^T and attn*V terms, so
    its ratio between two encode-set sizes is exactly the squared token
    ratio; projections and MLPs are under the *_linear buckets.
    """
    n, q = cfg.tokens, cfg.patch_values
    d, dd, k, r = cfg.embed_dim, cfg.decoder_dim, tokens_encoded, tokens_reconstructed
    hidden_e, hidden_d = int(d * cfg.mlp_ratio), int(dd * cfg.mlp_ratio)
    embed = 2.0 * n * q * d
    enc_lin = cfg.encoder_depth * (2.0 * 4 * k * d * d + 2.0 * 2 * k * d * hidden_e)
    enc_attn = cfg.encoder_depth * 4.0 * k * k * d
    dec_lin = cfg.decoder_depth * (
        2.0 * 2 * r * dd * dd + 2.0 * 2 * k * d * dd + 2.0 * 2 * r * dd * hidden_d
    )
    dec_attn = cfg.decoder_depth * 4.0 * r * k * dd
    head = 2.0 * r * dd * q
    return FlopBreakdown(embed, enc_lin, enc_attn, dec_lin, dec_attn, head)


# -- checkpoint wire format -----------------------------------------------


def save_checkpoint(path, arrays: dict[str, np.ndarray], version: int = CHECKPOINT_VERSION) -> None:
    """Write arrays in the binary checkpoint format (canonical name order)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", version, len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _CODE_OF_DTYPE.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise ContractError(f"checkpoint: unsupported dtype {arr.dtype} for array {name!r}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int]:
    """Read a checkpoint; returns (arrays, version)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"bad checkpoint magic {data[:4]!r}", 0)
    if len(data) < 12:
        raise ParseError("truncated checkpoint header", len(data))
    version, count = struct.unpack_from("<II", data, 4)
    pos = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(data):
            raise ParseError("truncated array header", len(data))
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if code not in _DTYPE_CODES:
            raise ParseError(f"unknown dtype code {code}", pos - 2)
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        if pos + nbytes > len(data):
            raise ParseError("truncated array payload", len(data))
        arrays[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return arrays, version
