"""Decoder-only transformer LM with intermediate-layer tap points.

Pre-RMSNorm blocks, rotary positional encoding on q/k, SiLU-gated FFN,
no biases anywhere. Tap points expose the residual-stream output of
designated layers so verbalizers can read intermediate states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ConfigError, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 128
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 64
    tie_lm_head: bool = False
    ffn_mult: int = 4
    rope_base: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model <= 0 or self.vocab_size <= 0 or self.max_seq_len <= 0:
            raise ConfigError("d_model, vocab_size and max_seq_len must be positive")
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"n_heads ({self.n_heads}) must divide d_model ({self.d_model})")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass(frozen=True)
class LayerTapSet:
    """Strictly increasing layer indices exposed for verbalization.

    The final backbone layer is excluded; it is handled by last-layer ops.
    """

    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ConfigError(f"tap indices must be strictly increasing: {self.indices}")

    def validate(self, n_layers: int):
        if not self.indices:
            raise ConfigError("tap set is empty")
        if self.indices[0] < 0 or self.indices[-1] >= n_layers - 1:
            raise ConfigError(
                f"tap indices {self.indices} must lie in [0, {n_layers - 1}) (final layer excluded)"
            )

    def __len__(self):
        return len(self.indices)


@dataclass
class ForwardOutput:
    final_logits: Tensor
    tapped_hidden: list[Tensor] = field(default_factory=list)
    final_hidden: Tensor | None = None


def rope_tables(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    half = cfg.head_dim // 2
    freq = 1.0 / (cfg.rope_base ** (np.arange(half) / half))
    ang = np.arange(cfg.max_seq_len)[:, None] * np.concatenate([freq, freq])[None, :]
    return np.cos(ang).astype(cfg.np_dtype), np.sin(ang).astype(cfg.np_dtype)


class TransformerLM:
    """Causal LM over a params dict; safe for concurrent frozen reads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even for rotary encoding")
        self.config = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
        dt = cfg.np_dtype

        def param(name, shape, std=INIT_STD):
            self.params[name] = Tensor(
                rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True
            )

        d, h = cfg.d_model, cfg.ffn_mult * cfg.d_model
        out_std = INIT_STD / np.sqrt(max(1, 2 * cfg.n_layers))
        param("embed", (cfg.vocab_size, d))
        for i in range(cfg.n_layers):
            p = f"layers.{i}"
            self.params[f"{p}.attn_norm"] = Tensor(np.ones(d, dt), requires_grad=True)
            param(f"{p}.attn.wq", (d, d))
            param(f"{p}.attn.wk", (d, d))
            param(f"{p}.attn.wv", (d, d))
            param(f"{p}.attn.wo", (d, d), std=out_std)
            self.params[f"{p}.ffn_norm"] = Tensor(np.ones(d, dt), requires_grad=True)
            param(f"{p}.ffn.gate", (d, h))
            param(f"{p}.ffn.up", (d, h))
            param(f"{p}.ffn.down", (h, d), std=out_std)
        if cfg.n_layers > 0:
            self.params["final_norm"] = Tensor(np.ones(d, dt), requires_grad=True)
        if not cfg.tie_lm_head:
            param("head", (d, cfg.vocab_size))
        self._cos, self._sin = rope_tables(cfg)

    # ------------------------------------------------------------------

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def head_tensor(self) -> Tensor:
        """The language-head weight (the embedding table when tied)."""
        return self.params["embed"] if self.config.tie_lm_head else self.params["head"]

    def apply_head(self, x: Tensor) -> Tensor:
        """Project hidden states (..., d) to vocabulary logits (..., V)."""
        if self.config.tie_lm_head:
            return nc.matmul(x, nc.transpose(self.params["embed"], (1, 0)))
        return nc.matmul(x, self.params["head"])

    def _attention(self, x: Tensor, layer: int, t: int) -> Tensor:
        cfg = self.config
        b = x.shape[0]
        nh, dh = cfg.n_heads, cfg.head_dim
        p = self.params

        def heads(m):
            proj = nc.matmul(x, p[f"layers.{layer}.attn.{m}"])
            return nc.transpose(nc.reshape(proj, (b, t, nh, dh)), (0, 2, 1, 3))

        q = nc.rope(heads("wq"), self._cos[:t], self._sin[:t])
        k = nc.rope(heads("wk"), self._cos[:t], self._sin[:t])
        v = heads("wv")
        scores = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        weights = nc.softmax(nc.causal_mask(scores))
        mixed = nc.transpose(nc.matmul(weights, v), (0, 2, 1, 3))
        return nc.matmul(nc.reshape(mixed, (b, t, cfg.d_model)), p[f"layers.{layer}.attn.wo"])

    def _ffn(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        gate = nc.silu(nc.matmul(x, p[f"layers.{layer}.ffn.gate"]))
        up = nc.matmul(x, p[f"layers.{layer}.ffn.up"])
        return nc.matmul(nc.mul(gate, up), p[f"layers.{layer}.ffn.down"])

    def forward(self, tokens: np.ndarray, taps: LayerTapSet | None = None) -> ForwardOutput:
        """Run the causal LM; tokens is an int array of shape (B, T).

        tapped_hidden[k] is the residual-stream output of layer taps[k].
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ConfigError(f"tokens must be (B, T), got shape {tokens.shape}")
        t = tokens.shape[1]
        if t > cfg.max_seq_len:
            raise ConfigError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ConfigError(f"token id out of range [0, {cfg.vocab_size})")
        if taps is not None:
            taps.validate(cfg.n_layers)

        tap_at = set(taps.indices) if taps is not None else set()
        tapped: dict[int, Tensor] = {}
        h = nc.embedding(self.params["embed"], tokens)
        for i in range(cfg.n_layers):
            x = nc.rms_norm(h, self.params[f"layers.{i}.attn_norm"])
            h = nc.add(h, self._attention(x, i, t))
            x = nc.rms_norm(h, self.params[f"layers.{i}.ffn_norm"])
            h = nc.add(h, self._ffn(x, i))
            if i in tap_at:
                tapped[i] = h
        final = nc.rms_norm(h, self.params["final_norm"]) if cfg.n_layers > 0 else h
        logits = self.apply_head(final)
        ordered = [tapped[i] for i in taps.indices] if taps is not None else []
        return ForwardOutput(final_logits=logits, tapped_hidden=ordered, final_hidden=final)

    def __call__(self, tokens, taps=None):
        return self.forward(tokens, taps)


def count_parameters(obj) -> int:
    """Exact trainable-parameter count of a model, verbalizer, or params dict."""
    params = obj if isinstance(obj, dict) else obj.params
    return int(sum(t.data.size for t in params.values()))


def parameter_hash(params: dict[str, Tensor]) -> str:
    """SHA-256 over names and raw little-endian bytes, for freeze contracts."""
    import hashlib

    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        arr = params[name].data
        digest.update(str(arr.shape).encode())
        digest.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return digest.hexdigest()
