"""Verbalizers: per-tap projections from hidden states to vocabulary logits.

A verbalizer composes a trainable transform with the backbone's language
head. The head is the same Tensor object as the backbone's (never cloned),
so it stays bit-identical to the backbone at all times; only the transform
weights belong to the verbalizer.

Architecture variants mirror the ablation axis: the default keeps a constant
hidden width end to end (no expansion/reduction), `ffn` uses the conventional
4x expand-gate-reduce shape, `mlp` is one linear map, `decoder` is a full
transformer block, and `_x2` stacks two copies of a variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .model import INIT_STD, ModelConfig, LayerTapSet, TransformerLM, rope_tables
from .numcore import ConfigError, ShapeError, Tensor

ARCH_VARIANTS = (
    "verb_ffn",
    "verb_ffn_x2",
    "ffn",
    "ffn_x2",
    "mlp",
    "mlp_x2",
    "decoder",
    "decoder_x2",
)


@dataclass(frozen=True)
class VerbalizerArch:
    variant: str = "verb_ffn"

    def __post_init__(self):
        if self.variant not in ARCH_VARIANTS:
            raise ConfigError(f"unknown verbalizer variant {self.variant!r}; valid: {ARCH_VARIANTS}")

    @property
    def copies(self) -> int:
        return 2 if self.variant.endswith("_x2") else 1

    @property
    def base(self) -> str:
        return self.variant[:-3] if self.variant.endswith("_x2") else self.variant


class Verbalizer:
    """One tap's transform plus a read-only reference to the backbone head."""

    def __init__(self, arch: VerbalizerArch, backbone: TransformerLM, seed: int, n_heads: int | None = None):
        cfg = backbone.config
        self.arch = arch
        self.d = cfg.d_model
        self._backbone = backbone
        self.params: dict[str, Tensor] = {}
        if arch.base == "decoder":
            nh = cfg.n_heads if n_heads is None else n_heads
            if nh <= 0 or cfg.d_model % nh != 0 or (cfg.d_model // nh) % 2 != 0:
                raise ConfigError(
                    f"decoder verbalizer: {nh} heads are incompatible with the head config (d={cfg.d_model})"
                )
            self._n_heads = nh
            self._cos, self._sin = rope_tables(cfg)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x76657262]))
        dt = cfg.np_dtype
        d, h = self.d, cfg.ffn_mult * self.d

        def param(name, shape, std=INIT_STD):
            self.params[name] = Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

        for c in range(arch.copies):
            p = f"{c}"
            if arch.base == "mlp":
                param(f"{p}.w", (d, d))
            elif arch.base == "verb_ffn":
                param(f"{p}.gate", (d, d))
                param(f"{p}.up", (d, d))
                param(f"{p}.down", (d, d))
            elif arch.base == "ffn":
                param(f"{p}.gate", (d, h))
                param(f"{p}.up", (d, h))
                param(f"{p}.down", (h, d))
            else:  # decoder
                self.params[f"{p}.attn_norm"] = Tensor(np.ones(d, dt), requires_grad=True)
                param(f"{p}.wq", (d, d))
                param(f"{p}.wk", (d, d))
                param(f"{p}.wv", (d, d))
                param(f"{p}.wo", (d, d))
                self.params[f"{p}.ffn_norm"] = Tensor(np.ones(d, dt), requires_grad=True)
                param(f"{p}.gate", (d, h))
                param(f"{p}.up", (d, h))
                param(f"{p}.down", (h, d))

    @property
    def language_head(self) -> Tensor:
        return self._backbone.head_tensor()

    def set_trainable(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def _block(self, x: Tensor, c: int) -> Tensor:
        p = self.params
        base = self.arch.base
        if base == "mlp":
            return nc.matmul(x, p[f"{c}.w"])
        if base in ("verb_ffn", "ffn"):
            gate = nc.silu(nc.matmul(x, p[f"{c}.gate"]))
            up = nc.matmul(x, p[f"{c}.up"])
            return nc.matmul(nc.mul(gate, up), p[f"{c}.down"])
        # decoder: one full pre-norm transformer block with residuals
        b, t, d = x.shape
        nh = self._n_heads
        dh = d // nh
        y = nc.rms_norm(x, p[f"{c}.attn_norm"])

        def heads(m):
            return nc.transpose(nc.reshape(nc.matmul(y, p[f"{c}.{m}"]), (b, t, nh, dh)), (0, 2, 1, 3))

        q = nc.rope(heads("wq"), self._cos[:t], self._sin[:t])
        k = nc.rope(heads("wk"), self._cos[:t], self._sin[:t])
        scores = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        weights = nc.softmax(nc.causal_mask(scores))
        mixed = nc.transpose(nc.matmul(weights, heads("wv")), (0, 2, 1, 3))
        x = nc.add(x, nc.matmul(nc.reshape(mixed, (b, t, d)), p[f"{c}.wo"]))
        y = nc.rms_norm(x, p[f"{c}.ffn_norm"])
        gate = nc.silu(nc.matmul(y, p[f"{c}.gate"]))
        up = nc.matmul(y, p[f"{c}.up"])
        return nc.add(x, nc.matmul(nc.mul(gate, up), p[f"{c}.down"]))

    def transform(self, hidden: Tensor) -> Tensor:
        """Arch features before the language head (the L2-mode view)."""
        if hidden.shape[-1] != self.d:
            raise ShapeError(f"verbalizer width {self.d} does not match hidden {hidden.shape}")
        x = hidden
        for c in range(self.arch.copies):
            x = self._block(x, c)
        return x

    def verbalize(self, hidden: Tensor) -> Tensor:
        """Project hidden states (..., T, d) to vocabulary logits (..., T, V)."""
        return self._backbone.apply_head(self.transform(hidden))

    def __call__(self, hidden: Tensor) -> Tensor:
        return self.verbalize(hidden)


def build_verbalizers(
    backbone: TransformerLM, taps: LayerTapSet, arch: VerbalizerArch, seed: int
) -> list[Verbalizer]:
    """One independently initialized verbalizer per tap, in tap order."""
    taps.validate(backbone.config.n_layers)
    return [Verbalizer(arch, backbone, seed=seed * 10007 + k) for k in range(len(taps))]


def verbalize(v: Verbalizer, hidden: Tensor) -> Tensor:
    return v.verbalize(hidden)
