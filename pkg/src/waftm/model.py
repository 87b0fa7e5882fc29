"""The WAFTM network.

Per-modality memory-augmented encoders feed a decoder that folds the
modalities together with learned sigmoid gates: for each decoder layer and
each modality k, a cross-attention output Phi_k is weighted elementwise by
alpha_k = sigmoid(W [Y || Phi_k] + b) and the gated streams are summed.

All forward functions operate on single (unbatched) sequences; training
code loops over a batch and accumulates. Parameters live in a flat
name -> Tensor dict so the optimizer and checkpoint code can stay generic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelError(ValueError):
    """Raised for structural misuse of the model (bad widths, counts, lengths)."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    d_head: int
    d_ff: int
    n_enc_layers: int
    n_dec_layers: int
    n_mem_slots: int
    n_modalities: int
    modality_input_dims: tuple[int, ...]
    vocab_size: int
    max_seq_len: int
    dropout_rate: float = 0.1
    encoder_positional: bool = True

    def __post_init__(self):
        object.__setattr__(
            self, "modality_input_dims", tuple(int(d) for d in self.modality_input_dims)
        )
        if self.d_model != self.n_heads * self.d_head:
            raise ModelError(
                f"d_model {self.d_model} != n_heads {self.n_heads} * d_head {self.d_head}"
            )
        for name in (
            "d_model", "n_heads", "d_head", "d_ff", "n_enc_layers",
            "n_dec_layers", "n_modalities", "vocab_size", "max_seq_len",
        ):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_mem_slots < 0:
            raise ModelError(f"n_mem_slots must be >= 0, got {self.n_mem_slots}")
        if len(self.modality_input_dims) != self.n_modalities:
            raise ModelError(
                f"{len(self.modality_input_dims)} input dims for "
                f"{self.n_modalities} modalities"
            )
        if any(d < 1 for d in self.modality_input_dims):
            raise ModelError("modality input dims must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @classmethod
    def toy(cls, vocab_size: int, modality_input_dims: tuple[int, ...],
            max_seq_len: int = 24, **overrides) -> "ModelConfig":
        cfg = cls(
            d_model=64, n_heads=4, d_head=16, d_ff=128,
            n_enc_layers=1, n_dec_layers=2, n_mem_slots=8,
            n_modalities=len(modality_input_dims),
            modality_input_dims=tuple(modality_input_dims),
            vocab_size=vocab_size, max_seq_len=max_seq_len,
        )
        return replace(cfg, **overrides) if overrides else cfg

    @classmethod
    def full_scale(cls, vocab_size: int, modality_input_dims: tuple[int, ...],
                   max_seq_len: int = 64) -> "ModelConfig":
        return cls(
            d_model=512, n_heads=8, d_head=64, d_ff=2048,
            n_enc_layers=3, n_dec_layers=4, n_mem_slots=40,
            n_modalities=len(modality_input_dims),
            modality_input_dims=tuple(modality_input_dims),
            vocab_size=vocab_size, max_seq_len=max_seq_len,
        )


def sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos positional encodings, shape [max_len, d_model]."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    half = (d_model + 1) // 2
    freq = np.exp(-math.log(10000.0) * (2.0 * np.arange(half) / d_model))
    table = np.zeros((max_len, 2 * half))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table[:, :d_model]


@dataclass
class WaftmModel:
    config: ModelConfig
    params: dict[str, Tensor]
    pos_table: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.pos_table is None:
            self.pos_table = sinusoid_table(self.config.max_seq_len, self.config.d_model)

    def param(self, name: str) -> Tensor:
        return self.params[name]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(config: ModelConfig, rng: np.random.Generator) -> WaftmModel:
    D, V = config.d_model, config.vocab_size
    p: dict[str, np.ndarray] = {}

    def mat(name, fan_in, fan_out):
        p[name] = _glorot(rng, fan_in, fan_out)

    def vec(name, n):
        p[name] = np.zeros(n)

    def ln(prefix):
        p[f"{prefix}.gamma"] = np.ones(D)
        p[f"{prefix}.beta"] = np.zeros(D)

    def attn(prefix, with_memory=False):
        for w in ("w_q", "w_k", "w_v", "w_o"):
            mat(f"{prefix}.{w}", D, D)
        if with_memory and config.n_mem_slots > 0:
            p[f"{prefix}.mem_k"] = rng.normal(0.0, 0.02, size=(config.n_mem_slots, D))
            p[f"{prefix}.mem_v"] = rng.normal(0.0, 0.02, size=(config.n_mem_slots, D))

    def ffn(prefix):
        mat(f"{prefix}.w1", D, config.d_ff)
        vec(f"{prefix}.b1", config.d_ff)
        mat(f"{prefix}.w2", config.d_ff, D)
        vec(f"{prefix}.b2", D)

    for k, d_in in enumerate(config.modality_input_dims):
        mat(f"embed{k}.w", d_in, D)
        vec(f"embed{k}.b", D)
        for i in range(config.n_enc_layers):
            attn(f"enc{k}.{i}.attn", with_memory=True)
            ln(f"enc{k}.{i}.ln1")
            ffn(f"enc{k}.{i}.ffn")
            ln(f"enc{k}.{i}.ln2")

    p["token_embedding"] = rng.normal(0.0, 0.02, size=(V, D))
    for i in range(config.n_dec_layers):
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln1")
        for k in range(config.n_modalities):
            attn(f"dec.{i}.cross{k}")
            mat(f"dec.{i}.gate{k}.w", 2 * D, D)
            vec(f"dec.{i}.gate{k}.b", D)
        ln(f"dec.{i}.ln2")
        ffn(f"dec.{i}.ffn")
        ln(f"dec.{i}.ln3")
    mat("output_proj.w", D, V)
    vec("output_proj.b", V)

    params = {name: Tensor(arr, requires_grad=True) for name, arr in p.items()}
    return WaftmModel(config=config, params=params)


def num_params(model: WaftmModel) -> int:
    return sum(t.data.size for t in model.params.values())


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng is supplied."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def _additive_mask(n_q: int, n_k: int, causal: bool,
                   key_valid: np.ndarray | None, n_mem: int) -> np.ndarray | None:
    """Additive attention mask [n_q, n_k]: 0 where allowed, -inf where banned.

    `key_valid` flags the non-memory key rows; memory rows (the trailing
    n_mem columns) are always attendable.
    """
    if not causal and key_valid is None:
        return None
    mask = np.zeros((n_q, n_k))
    if causal:
        mask[np.triu_indices(n_q, k=1)] = -np.inf
    if key_valid is not None:
        valid = np.asarray(key_valid, dtype=bool)
        if valid.shape != (n_k - n_mem,):
            raise ModelError(
                f"key_valid has shape {valid.shape}, expected {(n_k - n_mem,)}"
            )
        mask[:, : n_k - n_mem][:, ~valid] = -np.inf
    return mask


def _attention(q_in: Tensor, kv_in: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
               w_o: Tensor, n_heads: int, mem_k: Tensor | None = None,
               mem_v: Tensor | None = None, causal: bool = False,
               key_valid: np.ndarray | None = None, return_weights: bool = False):
    """Multi-head scaled dot-product attention with optional memory slots.

    Memory rows are concatenated to the projected keys/values (they are not
    themselves projected), so K and V carry n_k + n_mem rows.
    """
    n_q = q_in.shape[0]
    q = q_in @ w_q
    k = kv_in @ w_k
    v = kv_in @ w_v
    n_mem = 0
    if mem_k is not None:
        n_mem = mem_k.shape[0]
        k = T.concat([k, mem_k], axis=0)
        v = T.concat([v, mem_v], axis=0)
    n_k = k.shape[0]
    d_model = q.shape[1]
    d_head = d_model // n_heads

    qh = T.transpose(T.reshape(q, (n_q, n_heads, d_head)), (1, 0, 2))
    kh = T.transpose(T.reshape(k, (n_k, n_heads, d_head)), (1, 0, 2))
    vh = T.transpose(T.reshape(v, (n_k, n_heads, d_head)), (1, 0, 2))

    scores = (qh @ T.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(d_head))
    if causal and n_mem:
        raise ModelError("causal attention with memory slots is not defined")
    mask = _additive_mask(n_q, n_k, causal, key_valid, n_mem)
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = T.softmax(scores, axis=-1)
    ctx = weights @ vh
    merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (n_q, d_model))
    out = merged @ w_o
    return (out, weights) if return_weights else out


def _ffn(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = T.relu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _sublayer_norm(x: Tensor, sub_out: Tensor, p: dict[str, Tensor], prefix: str,
                   rate: float, rng: np.random.Generator | None) -> Tensor:
    return T.layer_norm(x + dropout(sub_out, rate, rng),
                        p[f"{prefix}.gamma"], p[f"{prefix}.beta"])


def embed_features(model: WaftmModel, x, modality_idx: int) -> Tensor:
    cfg = model.config
    if not 0 <= modality_idx < cfg.n_modalities:
        raise ModelError(f"modality index {modality_idx} out of range")
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    expect = cfg.modality_input_dims[modality_idx]
    if xt.ndim != 2 or xt.shape[1] != expect:
        raise ModelError(
            f"modality {modality_idx} features have shape {xt.shape}, "
            f"expected [m, {expect}]"
        )
    out = xt @ model.param(f"embed{modality_idx}.w") + model.param(f"embed{modality_idx}.b")
    if cfg.encoder_positional:
        m = out.shape[0]
        table = model.pos_table
        if m > table.shape[0]:
            table = sinusoid_table(m, cfg.d_model)
        out = out + Tensor(table[:m])
    return out


def memory_attention(model: WaftmModel, x_prime: Tensor, modality_idx: int,
                     layer: int, key_valid: np.ndarray | None = None,
                     return_weights: bool = False):
    p = model.params
    pre = f"enc{modality_idx}.{layer}.attn"
    mem_k = p.get(f"{pre}.mem_k")
    mem_v = p.get(f"{pre}.mem_v")
    return _attention(x_prime, x_prime, p[f"{pre}.w_q"], p[f"{pre}.w_k"],
                      p[f"{pre}.w_v"], p[f"{pre}.w_o"], model.config.n_heads,
                      mem_k=mem_k, mem_v=mem_v, key_valid=key_valid,
                      return_weights=return_weights)


def encoder_forward(model: WaftmModel, x, modality_idx: int,
                    key_valid: np.ndarray | None = None, train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    cfg = model.config
    if np.asarray(x.data if isinstance(x, Tensor) else x).shape[0] == 0:
        raise ModelError("empty feature sequence (m = 0)")
    rate = cfg.dropout_rate if train else 0.0
    h = embed_features(model, x, modality_idx)
    for i in range(cfg.n_enc_layers):
        pre = f"enc{modality_idx}.{i}"
        attn_out = memory_attention(model, h, modality_idx, i, key_valid=key_valid)
        h = _sublayer_norm(h, attn_out, model.params, f"{pre}.ln1", rate, rng)
        h = _sublayer_norm(h, _ffn(h, model.params, f"{pre}.ffn"),
                           model.params, f"{pre}.ln2", rate, rng)
    return h


def cross_attention(model: WaftmModel, y: Tensor, enc_out: Tensor, layer: int,
                    modality_idx: int, key_valid: np.ndarray | None = None) -> Tensor:
    p = model.params
    pre = f"dec.{layer}.cross{modality_idx}"
    return _attention(y, enc_out, p[f"{pre}.w_q"], p[f"{pre}.w_k"],
                      p[f"{pre}.w_v"], p[f"{pre}.w_o"], model.config.n_heads,
                      key_valid=key_valid)


def fusion_gate(model: WaftmModel, y: Tensor, phi: Tensor, layer: int,
                modality_idx: int) -> Tensor:
    p = model.params
    pre = f"dec.{layer}.gate{modality_idx}"
    return T.sigmoid(T.concat([y, phi], axis=1) @ p[f"{pre}.w"] + p[f"{pre}.b"])


def fuse(phi_list: list[Tensor], alpha_list: list[Tensor]) -> Tensor:
    if len(phi_list) != len(alpha_list) or not phi_list:
        raise ModelError(
            f"fuse needs matching non-empty lists, got {len(phi_list)} outputs "
            f"and {len(alpha_list)} gates"
        )
    total = alpha_list[0] * phi_list[0]
    for alpha, phi in zip(alpha_list[1:], phi_list[1:]):
        total = total + alpha * phi
    return total


def decoder_forward(model: WaftmModel, token_ids, enc_outs: list[Tensor],
                    enc_key_valid: list[np.ndarray] | None = None,
                    train: bool = False,
                    rng: np.random.Generator | None = None) -> Tensor:
    cfg = model.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise ModelError(f"token ids must be a non-empty 1-D sequence, got shape {ids.shape}")
    if ids.size > cfg.max_seq_len:
        raise ModelError(f"sequence length {ids.size} exceeds max_seq_len {cfg.max_seq_len}")
    if len(enc_outs) != cfg.n_modalities:
        raise ModelError(
            f"got {len(enc_outs)} encoder outputs for {cfg.n_modalities} modalities"
        )
    if enc_key_valid is None:
        enc_key_valid = [None] * cfg.n_modalities
    rate = cfg.dropout_rate if train else 0.0
    p = model.params

    l = ids.size
    y = T.embedding(p["token_embedding"], ids) * math.sqrt(cfg.d_model)
    y = y + Tensor(model.pos_table[:l])
    for i in range(cfg.n_dec_layers):
        pre = f"dec.{i}"
        self_out = _attention(y, y, p[f"{pre}.self.w_q"], p[f"{pre}.self.w_k"],
                              p[f"{pre}.self.w_v"], p[f"{pre}.self.w_o"],
                              cfg.n_heads, causal=True)
        y = _sublayer_norm(y, self_out, p, f"{pre}.ln1", rate, rng)
        phis = [cross_attention(model, y, enc_outs[k], i, k, key_valid=enc_key_valid[k])
                for k in range(cfg.n_modalities)]
        alphas = [fusion_gate(model, y, phis[k], i, k) for k in range(cfg.n_modalities)]
        y = _sublayer_norm(y, fuse(phis, alphas), p, f"{pre}.ln2", rate, rng)
        y = _sublayer_norm(y, _ffn(y, p, f"{pre}.ffn"), p, f"{pre}.ln3", rate, rng)
    return y @ p["output_proj.w"] + p["output_proj.b"]


def model_forward(model: WaftmModel, features: list, token_ids,
                  feature_valid: list[np.ndarray] | None = None,
                  train: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    cfg = model.config
    if len(features) != cfg.n_modalities:
        raise ModelError(
            f"got {len(features)} feature matrices for {cfg.n_modalities} modalities"
        )
    if feature_valid is None:
        feature_valid = [None] * cfg.n_modalities
    enc_outs = [
        encoder_forward(model, features[k], k, key_valid=feature_valid[k],
                        train=train, rng=rng)
        for k in range(cfg.n_modalities)
    ]
    return decoder_forward(model, token_ids, enc_outs, enc_key_valid=feature_valid,
                           train=train, rng=rng)
