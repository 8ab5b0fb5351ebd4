"""Reference decoder-only transformer with a KV cache and greedy decoding.

Blocks are post-norm, exactly as the residual equations read::

    M   = LayerNorm(H + MHA(H))
    H'  = LayerNorm(M + FFN(M))

There is no positional encoding. Row-vector convention throughout:
projections are ``h @ W`` with ``W`` of shape ``(d_in, d_out)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .errors import CacheError, CapacityError, ConfigError, InputError, VocabularyError
from .tensor import DTYPE, as_tensor, gelu, layernorm, matmul, softmax

if TYPE_CHECKING:
    from .anchor import InfoSource
    from .injection import InjectionPlan, ResolvedPlan
    from .instrumentation import AttentionTrace


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int = 256
    ln_eps: float = 1e-5
    bos_id: int = 0
    activation: str = "gelu_tanh"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.max_seq < 2:
            raise ConfigError("max_seq must be at least 2 (BOS plus one token)")
        if not self.ln_eps > 0:
            raise ConfigError("ln_eps must be positive")
        if not 0 <= self.bos_id < self.vocab_size:
            raise ConfigError(f"bos_id {self.bos_id} outside vocabulary of {self.vocab_size}")
        if self.activation != "gelu_tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "ln_eps": self.ln_eps,
            "bos_id": self.bos_id,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# The model every golden file and acceptance check is pinned to (with seed 42).
CANONICAL_CONFIG = ModelConfig(n_layers=4, d_model=32, n_heads=4, d_ff=64, vocab_size=64)
CANONICAL_SEED = 42


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    # Fused projections. Output columns are independent under the sequential
    # matmul, so h @ wqkv is bitwise the concatenation of the three products.
    wqkv: np.ndarray = field(init=False, repr=False, compare=False)
    wkv: np.ndarray = field(init=False, repr=False, compare=False)

    TENSOR_NAMES = (
        "wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
        "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
    )

    def __post_init__(self):
        for name in self.TENSOR_NAMES:
            arr = as_tensor(getattr(self, name), name)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        wqkv = np.concatenate([self.wq, self.wk, self.wv], axis=1)
        wkv = np.concatenate([self.wk, self.wv], axis=1)
        wqkv.setflags(write=False)
        wkv.setflags(write=False)
        object.__setattr__(self, "wqkv", wqkv)
        object.__setattr__(self, "wkv", wkv)

    @staticmethod
    def expected_shapes(cfg: ModelConfig) -> dict:
        d, f = cfg.d_model, cfg.d_ff
        return {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
            "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,),
        }


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    unembedding: np.ndarray
    layers: tuple

    def __post_init__(self):
        cfg = self.config
        emb = as_tensor(self.embedding, "embedding")
        unemb = as_tensor(self.unembedding, "unembedding")
        if emb.shape != (cfg.vocab_size, cfg.d_model):
            raise ConfigError(f"embedding shape {emb.shape} != {(cfg.vocab_size, cfg.d_model)}")
        if unemb.shape != (cfg.d_model, cfg.vocab_size):
            raise ConfigError(f"unembedding shape {unemb.shape} != {(cfg.d_model, cfg.vocab_size)}")
        emb.setflags(write=False)
        unemb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        object.__setattr__(self, "unembedding", unemb)
        layers = tuple(self.layers)
        if len(layers) != cfg.n_layers:
            raise ConfigError(f"expected {cfg.n_layers} layers, got {len(layers)}")
        expected = LayerWeights.expected_shapes(cfg)
        for i, lw in enumerate(layers):
            for name, shape in expected.items():
                got = getattr(lw, name).shape
                if got != shape:
                    raise ConfigError(f"layer {i} {name} has shape {got}, expected {shape}")
        object.__setattr__(self, "layers", layers)

    def named_tensors(self) -> dict:
        out = {"embedding": self.embedding, "unembedding": self.unembedding}
        for i, lw in enumerate(self.layers):
            for name in LayerWeights.TENSOR_NAMES:
                out[f"layers.{i}.{name}"] = getattr(lw, name)
        return out


class KVCache:
    """Per-layer, per-head key/value rows, preallocated to ``max_seq``.

    ``keys[l]`` has shape ``(n_heads, max_seq, d_head)``; only the first
    ``length`` positions are meaningful. Position 0 always holds BOS and is
    never evicted or moved.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.n_layers, config.n_heads, config.max_seq, config.d_head)
        self._keys = np.zeros(shape, dtype=DTYPE)
        self._values = np.zeros(shape, dtype=DTYPE)
        self._lengths = [0] * config.n_layers

    @property
    def length(self) -> int:
        first = self._lengths[0]
        if any(n != first for n in self._lengths):
            raise CacheError(f"cache layers disagree on length: {self._lengths}")
        return first

    def layer_length(self, layer: int) -> int:
        return self._lengths[layer]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> int:
        """Append ``(n_heads, n, d_head)`` rows; returns the start position."""
        start = self._lengths[layer]
        n = k.shape[1]
        if start + n > self.config.max_seq:
            raise CapacityError(
                f"cache full: {start} + {n} positions exceeds max_seq={self.config.max_seq}"
            )
        self._keys[layer, :, start:start + n] = k
        self._values[layer, :, start:start + n] = v
        self._lengths[layer] = start + n
        return start

    def keys(self, layer: int) -> np.ndarray:
        return self._keys[layer, :, : self._lengths[layer]]

    def values(self, layer: int) -> np.ndarray:
        return self._values[layer, :, : self._lengths[layer]]

    def set_bos_value(self, layer: int, per_head: np.ndarray) -> None:
        if self._lengths[layer] < 1:
            raise CacheError(f"layer {layer} has no BOS entry to overwrite")
        self._values[layer, :, 0] = per_head

    def bos_value(self, layer: int) -> np.ndarray:
        """BOS value row of ``layer``, heads concatenated into a d-vector."""
        if self._lengths[layer] < 1:
            raise CacheError(f"layer {layer} has no BOS entry")
        return self._values[layer, :, 0].reshape(-1).copy()

    def copy(self) -> "KVCache":
        new = KVCache.__new__(KVCache)
        new.config = self.config
        new._keys = self._keys.copy()
        new._values = self._values.copy()
        new._lengths = list(self._lengths)
        return new


def embed(tokens: Sequence[int], weights: ModelWeights, *, require_bos: bool = True) -> np.ndarray:
    cfg = weights.config
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.size == 0:
        raise InputError("tokens must be a non-empty 1-D sequence of ids")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {ids.dtype}")
    bad = ids[(ids < 0) | (ids >= cfg.vocab_size)]
    if bad.size:
        raise VocabularyError(f"token id {int(bad[0])} outside vocabulary of {cfg.vocab_size}")
    if require_bos and ids[0] != cfg.bos_id:
        raise InputError(f"sequence must start with BOS id {cfg.bos_id}, got {int(ids[0])}")
    return weights.embedding[ids]


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """``(n, d)`` -> ``(n_heads, n, d_head)``, contiguous column chunks per head."""
    n, d = x.shape
    return np.ascontiguousarray(x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2))


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(n, h * dh))


def attention_probs(q: np.ndarray, k: np.ndarray, q_start: int) -> np.ndarray:
    """Causal attention weights for queries at positions ``q_start..``.

    ``q``: ``(H, nq, dh)``, ``k``: ``(H, nk, dh)``. Query ``i`` sits at
    position ``q_start + i`` and may see keys ``0..q_start + i``.
    """
    dh = q.shape[-1]
    nq, nk = q.shape[1], k.shape[1]
    scores = matmul(q, k.transpose(0, 2, 1)) * DTYPE(1.0 / math.sqrt(dh))
    qpos = np.arange(q_start, q_start + nq)[:, None]
    mask = np.arange(nk)[None, :] <= qpos
    return softmax(scores, mask)


def attend(
    h: np.ndarray,
    lw: LayerWeights,
    cache: KVCache,
    layer: int,
    recorder: Optional["AttentionTrace"] = None,
    step: int = 0,
    return_q: bool = False,
):
    """Causal multi-head attention up to (not including) the output projection.

    Appends the new K/V rows to ``cache`` and returns the concatenated head
    outputs, shape ``(n, d)`` (plus the ``(H, n, dh)`` queries if asked).
    """
    cfg = cache.config
    n, d = h.shape
    qkv = matmul(h, lw.wqkv)
    q = split_heads(qkv[:, :d], cfg.n_heads)
    k = split_heads(qkv[:, d:2 * d], cfg.n_heads)
    v = split_heads(qkv[:, 2 * d:], cfg.n_heads)
    start = cache.append(layer, k, v)
    probs = attention_probs(q, cache.keys(layer), start)
    if recorder is not None:
        recorder.record_block(step, layer, start, probs, q if recorder.capture_queries else None)
    o = merge_heads(matmul(probs, cache.values(layer)))
    return (o, q) if return_q else o


def output_projection(o: np.ndarray, lw: LayerWeights) -> np.ndarray:
    return matmul(o, lw.wo)


def causal_self_attention(h, lw, cache, layer, recorder=None, step=0) -> np.ndarray:
    return output_projection(attend(h, lw, cache, layer, recorder, step), lw)


def ffn(m: np.ndarray, lw: LayerWeights) -> np.ndarray:
    return matmul(gelu(matmul(m, lw.w1) + lw.b1), lw.w2) + lw.b2


def finish_block(h: np.ndarray, attn_out: np.ndarray, lw: LayerWeights, eps: float) -> np.ndarray:
    """Residual + norm around the attention output, then the FFN sub-layer."""
    m = layernorm(h + attn_out, lw.ln1_gain, lw.ln1_bias, eps)
    return layernorm(m + ffn(m, lw), lw.ln2_gain, lw.ln2_bias, eps)


def decoder_block(h, layer, weights: ModelWeights, cache: KVCache, recorder=None, step=0):
    if not 0 <= layer < weights.config.n_layers:
        raise IndexError(f"layer {layer} out of range")
    lw = weights.layers[layer]
    attn = causal_self_attention(h, lw, cache, layer, recorder, step)
    return finish_block(h, attn, lw, weights.config.ln_eps)


def logits_for(hidden: np.ndarray, weights: ModelWeights) -> np.ndarray:
    """Logits for a single hidden row."""
    return matmul(hidden.reshape(1, -1), weights.unembedding)[0]


def greedy(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest id on ties.
    return int(np.argmax(logits))


@dataclass
class PrefillResult:
    cache: KVCache
    hidden: np.ndarray  # last row of the final layer output
    trace: Optional["AttentionTrace"] = None
    layer_inputs: Optional[list] = None  # layer_inputs[l] is the input to layer l
    final_hidden: Optional[np.ndarray] = None


def prefill(
    tokens: Sequence[int],
    weights: ModelWeights,
    plan: "InjectionPlan | ResolvedPlan | None" = None,
    info: "InfoSource | None" = None,
    recorder: Optional["AttentionTrace"] = None,
    capture: bool = False,
) -> PrefillResult:
    """Run the prompt through every block and populate a fresh cache.

    With ``plan=None`` the injection module is never imported. Any plan,
    including ``mode="none"``, is routed through the injection dispatcher.
    """
    cfg = weights.config
    h = embed(tokens, weights)
    cache = KVCache(cfg)
    if h.shape[0] > cfg.max_seq:
        raise CapacityError(f"prompt of {h.shape[0]} tokens exceeds max_seq={cfg.max_seq}")
    layer_inputs = [] if capture else None
    if plan is None:
        for layer in range(cfg.n_layers):
            if capture:
                layer_inputs.append(h)
            h = decoder_block(h, layer, weights, cache, recorder, 0)
    else:
        from .injection import apply_plan_at_layer, prepare_info, validate_plan

        resolved = validate_plan(plan, cfg)
        info = prepare_info(resolved, info, cfg)
        for layer in range(cfg.n_layers):
            if capture:
                layer_inputs.append(h)
            h = apply_plan_at_layer(h, layer, resolved, info, cache, weights, recorder, 0)
    if recorder is not None:
        recorder.set_bos_values([cache.bos_value(l) for l in range(cfg.n_layers)])
    return PrefillResult(
        cache=cache,
        hidden=h[-1].copy(),
        trace=recorder,
        layer_inputs=layer_inputs,
        final_hidden=h if capture else None,
    )


@dataclass
class DecodeResult:
    token: int
    hidden: np.ndarray
    logits: np.ndarray


def decode_step(
    cache: KVCache,
    last_hidden: np.ndarray,
    weights: ModelWeights,
    recorder: Optional["AttentionTrace"] = None,
    step: int = 1,
) -> DecodeResult:
    """Pick the greedy next token from ``last_hidden`` and run it through the model.

    The cache grows by one position. Returns the token, the logits it was
    chosen from and the new last hidden state.
    """
    cfg = weights.config
    if cache.length == 0:
        raise CacheError("decode_step needs a prefilled cache")
    if cache.length >= cfg.max_seq:
        raise CapacityError(f"cache is at max_seq={cfg.max_seq}")
    logits = logits_for(last_hidden, weights)
    token = greedy(logits)
    h = embed([token], weights, require_bos=False)
    for layer in range(cfg.n_layers):
        h = decoder_block(h, layer, weights, cache, recorder, step)
    return DecodeResult(token=token, hidden=h[-1].copy(), logits=logits)


@dataclass
class GenerationOutput:
    tokens: list
    logits: Optional[list] = None
    trace: Optional["AttentionTrace"] = None
    cache: Optional[KVCache] = None
    prompt_len: int = 0


def generate(
    prompt: Sequence[int],
    weights: ModelWeights,
    plan=None,
    info=None,
    max_new_tokens: int = 16,
    *,
    return_logits: bool = False,
    trace: Optional["AttentionTrace"] = None,
) -> GenerationOutput:
    """Prefill once, then ``max_new_tokens`` greedy decode steps.

    Generated token ``g`` (1-based) is processed at decode step ``g``, so a
    trace holds prefill as step 0 and one query row per layer/head per step.
    """
    if max_new_tokens < 0:
        raise InputError("max_new_tokens must be non-negative")
    pre = prefill(prompt, weights, plan, info, recorder=trace)
    cache, hidden = pre.cache, pre.hidden
    tokens, all_logits = [], []
    for step in range(1, max_new_tokens + 1):
        res = decode_step(cache, hidden, weights, trace, step)
        tokens.append(res.token)
        if return_logits:
            all_logits.append(res.logits)
        hidden = res.hidden
    return GenerationOutput(
        tokens=tokens,
        logits=all_logits if return_logits else None,
        trace=trace,
        cache=cache,
        prompt_len=len(prompt),
    )
