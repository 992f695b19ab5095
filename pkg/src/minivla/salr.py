"""State-grounded re-representation of the encoder's KV cache.

A state transformer with the same depth as the encoder refines the
projected proprioception tokens. At every layer its pooled query heads
multiplicatively gate the encoder's key/value heads (an outer product
over head pairs), a learnable per-layer mask re-weights the expanded
head space, and a learned linear head mix compresses back down to the
action expert's head count. Masks start at ones and the compression at
uniform averaging, so the whole block is a plain head-average at
initialization.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .encoder import ParamStore
from .rng import Stream

__all__ = ["init_salr_params", "project_state", "state_layer_forward",
           "outer_product_fuse", "apply_masks", "compress_heads", "salr_forward"]


def init_salr_params(store: ParamStore, cfg: TrainConfig, stream: Stream) -> None:
    ds = cfg.d_state
    fused = cfg.fused_heads

    def trunc(label, shape):
        return stream.child(label).truncated_normal(shape, std=0.02)

    if cfg.state_tokens == 3:
        store.add("salr.proj.pos.w", trunc("pp", (2, ds)))
        store.add("salr.proj.pos.b", np.zeros(ds))
        store.add("salr.proj.ori.w", trunc("po", (1, ds)))
        store.add("salr.proj.ori.b", np.zeros(ds))
        store.add("salr.proj.grip.w", trunc("pg", (1, ds)))
        store.add("salr.proj.grip.b", np.zeros(ds))
    elif cfg.state_tokens == 1:
        store.add("salr.proj.all.w", trunc("pa", (4, ds)))
        store.add("salr.proj.all.b", np.zeros(ds))
    else:
        raise ValueError(f"state_tokens must be 1 or 3, got {cfg.state_tokens}")
    for i in range(cfg.encoder_layers):
        pre = f"salr.layer{i}"
        ls = stream.child(f"layer{i}")
        store.add(f"{pre}.ln1.g", np.ones(ds))
        store.add(f"{pre}.ln1.b", np.zeros(ds))
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{pre}.{name}", trunc(f"l{i}{name}", (ds, ds)))
            store.add(f"{pre}.b{name[1]}", np.zeros(ds))
        store.add(f"{pre}.ln2.g", np.ones(ds))
        store.add(f"{pre}.ln2.b", np.zeros(ds))
        store.add(f"{pre}.ffn.w1", trunc(f"l{i}f1", (ds, 4 * ds)))
        store.add(f"{pre}.ffn.b1", np.zeros(4 * ds))
        store.add(f"{pre}.ffn.w2", trunc(f"l{i}f2", (4 * ds, ds)))
        store.add(f"{pre}.ffn.b2", np.zeros(ds))
        store.add(f"{pre}.query.w", trunc(f"l{i}qr", (ds, cfg.state_heads * cfg.head_width)))
        store.add(f"{pre}.query.b", np.zeros(cfg.state_heads * cfg.head_width))
        # Masks are a no-op at init; compression starts as head averaging.
        store.add(f"{pre}.mask_k", np.ones((fused, cfg.head_width)))
        store.add(f"{pre}.mask_v", np.ones((fused, cfg.head_width)))
        store.add(f"{pre}.compress_k", np.full((cfg.expert_kv_heads, fused), 1.0 / fused))
        store.add(f"{pre}.compress_v", np.full((cfg.expert_kv_heads, fused), 1.0 / fused))


def project_state(state_norm: np.ndarray, store: ParamStore, cfg: TrainConfig) -> T.Tensor:
    """Project the normalized state into tokens (B, k_s, d_state).

    With three tokens each comes from its own slice of the state
    (position, orientation, gripper); with one, from the full vector."""
    b = state_norm.shape[0]
    if cfg.state_tokens == 1:
        t = T.add_bias(T.matmul(T.tensor(state_norm), store["salr.proj.all.w"]),
                       store["salr.proj.all.b"])
        return T.reshape(t, (b, 1, cfg.d_state))
    toks = []
    for name, sl in (("pos", slice(0, 2)), ("ori", slice(2, 3)), ("grip", slice(3, 4))):
        t = T.add_bias(T.matmul(T.tensor(state_norm[:, sl]), store[f"salr.proj.{name}.w"]),
                       store[f"salr.proj.{name}.b"])
        toks.append(T.reshape(t, (b, 1, cfg.d_state)))
    return T.concat(toks, axis=1)


def state_layer_forward(x: T.Tensor, layer: int, store: ParamStore, cfg: TrainConfig):
    """One pre-norm state-transformer block; returns (next tokens, query heads)."""
    b, ks, ds = x.shape
    pre = f"salr.layer{layer}"
    valid = np.ones((b, ks), dtype=bool)
    h1 = T.layer_norm(x, store[f"{pre}.ln1.g"], store[f"{pre}.ln1.b"])
    nh = cfg.state_heads
    hw = ds // nh
    q = T.reshape(T.add_bias(T.matmul(h1, store[f"{pre}.wq"]), store[f"{pre}.bq"]), (b, ks, nh, hw))
    k = T.reshape(T.add_bias(T.matmul(h1, store[f"{pre}.wk"]), store[f"{pre}.bk"]), (b, ks, nh, hw))
    v = T.reshape(T.add_bias(T.matmul(h1, store[f"{pre}.wv"]), store[f"{pre}.bv"]), (b, ks, nh, hw))
    att = T.reshape(T.attention(q, k, v, valid), (b, ks, ds))
    x = T.add(x, T.add_bias(T.matmul(att, store[f"{pre}.wo"]), store[f"{pre}.bo"]))
    h2 = T.layer_norm(x, store[f"{pre}.ln2.g"], store[f"{pre}.ln2.b"])
    f = T.add_bias(T.matmul(h2, store[f"{pre}.ffn.w1"]), store[f"{pre}.ffn.b1"])
    f = T.add_bias(T.matmul(T.gelu(f), store[f"{pre}.ffn.w2"]), store[f"{pre}.ffn.b2"])
    x = T.add(x, f)
    pooled = T.mean_axis(x, 1)
    qr = T.add_bias(T.matmul(pooled, store[f"{pre}.query.w"]), store[f"{pre}.query.b"])
    return x, T.reshape(qr, (b, cfg.state_heads, cfg.head_width))


def outer_product_fuse(qr: T.Tensor, k: T.Tensor, v: T.Tensor):
    """Expand the head space to every (state head, KV head) pair."""
    return T.outer_fuse(qr, k), T.outer_fuse(qr, v)


def apply_masks(k_star: T.Tensor, v_star: T.Tensor, mask_k: T.Tensor, mask_v: T.Tensor):
    return T.mul_heads(k_star, mask_k), T.mul_heads(v_star, mask_v)


def compress_heads(k_prime: T.Tensor, v_prime: T.Tensor, w_k: T.Tensor, w_v: T.Tensor):
    return T.head_mix(k_prime, w_k), T.head_mix(v_prime, w_v)


def salr_forward(state_norm: np.ndarray, cache: list, store: ParamStore,
                 cfg: TrainConfig) -> list:
    """Produce the per-layer compressed condition from state plus KV cache."""
    if len(cache) != cfg.encoder_layers:
        raise ValueError(f"cache depth {len(cache)} != state transformer depth "
                         f"{cfg.encoder_layers}")
    x = project_state(state_norm, store, cfg)
    out = []
    for i, (k_i, v_i) in enumerate(cache):
        x, qr = state_layer_forward(x, i, store, cfg)
        k_star, v_star = outer_product_fuse(qr, k_i, v_i)
        k_prime, v_prime = apply_masks(
            k_star, v_star, store[f"salr.layer{i}.mask_k"], store[f"salr.layer{i}.mask_v"])
        out.append(compress_heads(
            k_prime, v_prime,
            store[f"salr.layer{i}.compress_k"], store[f"salr.layer{i}.compress_v"]))
    return out
