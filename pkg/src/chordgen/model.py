"""Autoregressive chord transformer with relative-position self-attention.

Architecture (fixed; dimensions configurable):

* tied token embedding / output head, no output bias
* pre-layer-norm blocks with affine norms and a final layer norm
* attention and feed-forward projections carry biases
* one relative-position table per layer, shape (2*max_len - 1, d_head),
  shared across heads; the causal half is used at attention time via
  the memory-efficient skew, so scores are (q.k^T + S_rel)/sqrt(d_head)

For the reference configuration (d_model 512, 8 heads, d_ff 2048,
8 layers, max_len 256, vocab 351) the parameter count is exactly
25,661,440; ``count_parameters`` prints the per-tensor breakdown.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutStream, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .tokenizer import PAD, VOCAB_SIZE

NEG_INF = -1e30


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    heads: int = 8
    d_ff: int = 2048
    layers: int = 8
    max_len: int = 256
    dropout: float = 0.1
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self) -> None:
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The documented, ordered parameter set for a configuration."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embedding.weight": (cfg.vocab_size, d),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.gamma"] = (d,)
        shapes[f"{p}.ln1.beta"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.w{proj}"] = (d, d)
            shapes[f"{p}.attn.b{proj}"] = (d,)
        shapes[f"{p}.attn.rel"] = (2 * cfg.max_len - 1, cfg.d_head)
        shapes[f"{p}.ln2.gamma"] = (d,)
        shapes[f"{p}.ln2.beta"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["final_ln.gamma"] = (d,)
    shapes["final_ln.beta"] = (d,)
    return shapes


def count_parameters(cfg: ModelConfig,
                     verbose: bool = False) -> tuple[int, dict[str, int]]:
    """Total parameter count plus the per-tensor breakdown."""
    breakdown = {name: int(np.prod(shape))
                 for name, shape in parameter_shapes(cfg).items()}
    total = sum(breakdown.values())
    if verbose:
        for name, n in breakdown.items():
            print(f"{name:32s} {n:>12,}")
        print(f"{'total':32s} {total:>12,}")
    return total, breakdown


def init_parameters(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Scaled-normal projections (std d_model^-1/2), 0.02-std embeddings,
    unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    proj_std = cfg.d_model ** -0.5
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith((".gamma",)):
            data = np.ones(shape)
        elif name.endswith((".beta", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            data = np.zeros(shape)
        elif name == "embedding.weight" or name.endswith(".rel"):
            data = rng.normal(0.0, 0.02, shape)
        else:
            data = rng.normal(0.0, proj_std, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def relative_attention(q: Tensor, k: Tensor, v: Tensor, rel_causal: Tensor,
                       mask_add: np.ndarray, *, dropout_p: float = 0.0,
                       stream: DropoutStream | None = None,
                       training: bool = False) -> Tensor:
    """Scaled dot-product attention with skewed relative-position scores.

    ``q,k,v``: (B, H, L, d_head). ``rel_causal``: (L, d_head) embeddings
    for offsets -(L-1)..0, last row = offset 0. ``mask_add`` is an
    additive constant (broadcastable to (B, H, L, L)) that is NEG_INF on
    causally or padding-forbidden pairs and 0 elsewhere.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ad.ShapeMismatch(f"q/k/v disagree: {q.shape} {k.shape} {v.shape}")
    L, d_head = q.shape[-2], q.shape[-1]
    if rel_causal.shape != (L, d_head):
        raise ad.ShapeMismatch(
            f"relative table {rel_causal.shape} != ({L}, {d_head})")
    content = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    rel_raw = ad.matmul(q, ad.transpose(rel_causal, (1, 0)))
    s_rel = ad.skew_rel_scores(rel_raw)
    scores = ad.scale(ad.add(content, s_rel), d_head ** -0.5)
    scores = ad.add(scores, Tensor(mask_add))
    weights = ad.softmax_rows(scores)
    weights = ad.dropout(weights, dropout_p, stream, training)
    return ad.matmul(weights, v)


class Model:
    """Forward pass over a parameter dict; one instance per training run.

    Parameters are shared, immutable-by-convention state during
    inference; dropout streams are private to the instance.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 dropout_seed: int = 0):
        self.config = config
        self.params = params
        self._streams: dict[str, DropoutStream] = {}
        self._dropout_seed = dropout_seed

    def _stream(self, site_name: str, site_id: int) -> DropoutStream:
        if site_name not in self._streams:
            self._streams[site_name] = DropoutStream(self._dropout_seed, site_id)
        return self._streams[site_name]

    def _mask(self, ids: np.ndarray) -> np.ndarray:
        B, L = ids.shape
        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        key_pad = ids == PAD
        forbidden = causal[None, None, :, :] | key_pad[:, None, None, :]
        return np.where(forbidden, NEG_INF, 0.0)

    def forward(self, ids: np.ndarray, training: bool = False) -> Tensor:
        """Logits (B, L, vocab); position t sees only tokens <= t."""
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, L = ids.shape
        cfg = self.config
        if L > cfg.max_len:
            raise SequenceTooLong(f"sequence length {L} > max_len {cfg.max_len}")
        p = self.params
        drop = cfg.dropout
        mask_add = self._mask(ids)

        x = ad.scale(ad.embedding(p["embedding.weight"], ids), cfg.d_model ** 0.5)
        x = ad.dropout(x, drop, self._stream("emb", 0), training)

        for i in range(cfg.layers):
            prefix = f"layers.{i}"
            a = ad.layer_norm(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"])

            def heads(t: Tensor) -> Tensor:
                t = ad.reshape(t, (B, L, cfg.heads, cfg.d_head))
                return ad.transpose(t, (0, 2, 1, 3))

            q = heads(ad.add(ad.matmul(a, p[f"{prefix}.attn.wq"]), p[f"{prefix}.attn.bq"]))
            k = heads(ad.add(ad.matmul(a, p[f"{prefix}.attn.wk"]), p[f"{prefix}.attn.bk"]))
            v = heads(ad.add(ad.matmul(a, p[f"{prefix}.attn.wv"]), p[f"{prefix}.attn.bv"]))
            rel = p[f"{prefix}.attn.rel"]
            rel_causal = ad.slice_axis(rel, 0, cfg.max_len - L, cfg.max_len)
            ctx = relative_attention(
                q, k, v, rel_causal, mask_add, dropout_p=drop,
                stream=self._stream(f"l{i}.attn_w", 1 + 3 * i), training=training)
            ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, cfg.d_model))
            attn_out = ad.add(ad.matmul(ctx, p[f"{prefix}.attn.wo"]),
                              p[f"{prefix}.attn.bo"])
            attn_out = ad.dropout(attn_out, drop,
                                  self._stream(f"l{i}.attn_out", 2 + 3 * i), training)
            x = ad.add(x, attn_out)

            f = ad.layer_norm(x, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"])
            h = ad.relu(ad.add(ad.matmul(f, p[f"{prefix}.ffn.w1"]),
                               p[f"{prefix}.ffn.b1"]))
            ffn_out = ad.add(ad.matmul(h, p[f"{prefix}.ffn.w2"]),
                             p[f"{prefix}.ffn.b2"])
            ffn_out = ad.dropout(ffn_out, drop,
                                 self._stream(f"l{i}.ffn_out", 3 + 3 * i), training)
            x = ad.add(x, ffn_out)

        x = ad.layer_norm(x, p["final_ln.gamma"], p["final_ln.beta"])
        return ad.matmul(x, ad.transpose(p["embedding.weight"], (1, 0)))


@dataclass
class ModelCheckpoint:
    """Architecture config + named parameter tensors + training provenance."""

    config: ModelConfig
    params: dict[str, Tensor]
    provenance: dict = field(default_factory=dict)
    vocab_version: str = ""

    def __post_init__(self) -> None:
        expected = parameter_shapes(self.config)
        got = {name: tuple(t.data.shape) for name, t in self.params.items()}
        if got != expected:
            missing = set(expected) - set(got)
            extra = set(got) - set(expected)
            raise ValueError(
                f"parameter set mismatch (missing={sorted(missing)}, "
                f"extra={sorted(extra)}, shape diffs="
                f"{[k for k in expected if k in got and got[k] != expected[k]]})")

    @classmethod
    def fresh(cls, config: ModelConfig, seed: int, vocab_version: str = "",
              provenance: dict | None = None) -> "ModelCheckpoint":
        return cls(config, init_parameters(config, seed),
                   provenance or {"phase": "init", "seeds": {"init": seed}},
                   vocab_version)

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def clone(self) -> "ModelCheckpoint":
        params = {k: Tensor(t.data.copy(), requires_grad=True)
                  for k, t in self.params.items()}
        return ModelCheckpoint(self.config, params, dict(self.provenance),
                               self.vocab_version)

    def model(self, dropout_seed: int = 0) -> Model:
        return Model(self.config, self.params, dropout_seed)

    def save(self, path: str | Path) -> None:
        meta = {
            "model": asdict(self.config),
            "provenance": self.provenance,
            "vocab_version": self.vocab_version,
            "total_parameters": self.total_parameters(),
        }
        save_checkpoint(path, meta, {k: t.data for k, t in self.params.items()})

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        meta, arrays = load_checkpoint(path)
        config = ModelConfig(**meta["model"])
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(config, params, meta.get("provenance", {}),
                   meta.get("vocab_version", ""))

    def config_json(self) -> str:
        return json.dumps(asdict(self.config), sort_keys=True)
