"""Vision-language backbone over grid patches, history frames, and tokens.

The current high-resolution views, the downsampled history frames, and
the instruction tokens become one flat token sequence (current first,
history oldest-to-newest, language last). An L-layer pre-norm
transformer runs bidirectional attention over the whole sequence; the
per-layer key/value projections are captured right after they are
computed so the fusion stage can consume them layer by layer. Invalid
tokens (padded history slots, padded instruction symbols) are masked
out of every attention step, here and downstream.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import world
from .config import TrainConfig
from .optim import Parameter
from .rng import Stream

__all__ = ["ParamStore", "ObservationBatch", "TokenSequence",
           "init_encoder_params", "tokenize_observation", "attention_layer",
           "encode"]

N_PRIMARY = world.GRID * world.GRID
N_WRIST = world.WRIST_GRID * world.WRIST_GRID
N_HIST_FRAME = N_WRIST  # history frames are downsampled to wrist resolution
SEG_CURRENT, SEG_HISTORY, SEG_LANGUAGE, SEG_STATE = 0, 1, 2, 3


class ParamStore:
    """Ordered name -> Parameter registry for one model instance."""

    def __init__(self):
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, name: str, values: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Parameter(name, np.asarray(values, dtype=np.float64))
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> T.Tensor:
        return self.params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def subset(self, prefix: str) -> list:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def values(self) -> list:
        return list(self.params.values())


@dataclass
class ObservationBatch:
    """Batched model inputs. history holds n downsampled primary frames per
    sample, oldest first; validity flags mark real (non-padded) entries."""
    current_primary: np.ndarray   # (B, 12, 12, C)
    current_wrist: np.ndarray     # (B, 6, 6, C)
    history: np.ndarray           # (B, n, 6, 6, C)
    history_valid: np.ndarray     # (B, n) bool
    instruction: np.ndarray       # (B, Tl) int token ids
    instruction_valid: np.ndarray  # (B, Tl) bool

    @property
    def batch_size(self) -> int:
        return self.current_primary.shape[0]


@dataclass
class TokenSequence:
    embeddings: T.Tensor          # (B, T, d_model)
    valid: np.ndarray             # (B, T) bool
    segment_ids: np.ndarray       # (T,) SEG_* codes
    history_pos: np.ndarray       # (T,) frame index for history tokens, -1 elsewhere


def _trunc(stream: Stream, label: str, shape, std: float = 0.02) -> np.ndarray:
    return stream.child(label).truncated_normal(shape, std=std)


def init_encoder_params(store: ParamStore, cfg: TrainConfig, stream: Stream,
                        state_tokens: bool = False) -> None:
    d = cfg.d_model
    c = world.CHANNELS
    # Patch projections are bias-free so an all-zero bundle embeds to the
    # positional tables alone.
    store.add("encoder.patch_primary.w", _trunc(stream, "pp", (c, d)))
    store.add("encoder.patch_wrist.w", _trunc(stream, "pw", (c, d)))
    store.add("encoder.patch_history.w", _trunc(stream, "ph", (c, d)))
    store.add("encoder.pos_primary", _trunc(stream, "pos_p", (N_PRIMARY, d)))
    store.add("encoder.pos_wrist", _trunc(stream, "pos_w", (N_WRIST, d)))
    store.add("encoder.pos_history_space", _trunc(stream, "pos_hs", (N_HIST_FRAME, d)))
    store.add("encoder.pos_history_time", _trunc(stream, "pos_ht", (cfg.n_history, d)))
    store.add("encoder.tok_embed", _trunc(stream, "tok", (world.VOCAB_SIZE, d)))
    store.add("encoder.pos_language", _trunc(stream, "pos_l", (world.MAX_INSTRUCTION, d)))
    if state_tokens:
        ds = stream.child("statecat")
        store.add("statecat.pos.w", _trunc(ds, "sp", (2, d)))
        store.add("statecat.pos.b", np.zeros(d))
        store.add("statecat.ori.w", _trunc(ds, "so", (1, d)))
        store.add("statecat.ori.b", np.zeros(d))
        store.add("statecat.grip.w", _trunc(ds, "sg", (1, d)))
        store.add("statecat.grip.b", np.zeros(d))
        store.add("statecat.pos_tokens", _trunc(ds, "pos_s", (3, d)))
    kv = cfg.kv_heads * cfg.head_width
    for i in range(cfg.encoder_layers):
        pre = f"encoder.layer{i}"
        ls = stream.child(f"layer{i}")
        store.add(f"{pre}.ln1.g", np.ones(d))
        store.add(f"{pre}.ln1.b", np.zeros(d))
        store.add(f"{pre}.wq", _trunc(ls, "wq", (d, d)))
        store.add(f"{pre}.bq", np.zeros(d))
        store.add(f"{pre}.wk", _trunc(ls, "wk", (d, kv)))
        store.add(f"{pre}.bk", np.zeros(kv))
        store.add(f"{pre}.wv", _trunc(ls, "wv", (d, kv)))
        store.add(f"{pre}.bv", np.zeros(kv))
        store.add(f"{pre}.wo", _trunc(ls, "wo", (d, d)))
        store.add(f"{pre}.bo", np.zeros(d))
        store.add(f"{pre}.ln2.g", np.ones(d))
        store.add(f"{pre}.ln2.b", np.zeros(d))
        store.add(f"{pre}.ffn.w1", _trunc(ls, "f1", (d, 4 * d)))
        store.add(f"{pre}.ffn.b1", np.zeros(4 * d))
        store.add(f"{pre}.ffn.w2", _trunc(ls, "f2", (4 * d, d)))
        store.add(f"{pre}.ffn.b2", np.zeros(d))


def tokenize_observation(batch: ObservationBatch, store: ParamStore,
                         cfg: TrainConfig, state_norm: np.ndarray | None = None
                         ) -> TokenSequence:
    """Embed a batch into one token sequence.

    Order: current primary patches, current wrist patches, history frames
    oldest to newest, instruction tokens, then (concat-baseline only) the
    projected state tokens. Raises on instruction ids outside the
    vocabulary.
    """
    b = batch.batch_size
    d = cfg.d_model
    n = batch.history.shape[1]
    if n != cfg.n_history:
        raise ValueError(f"history length {n} != configured {cfg.n_history}")
    if batch.instruction.size and batch.instruction.max() >= world.VOCAB_SIZE:
        raise ValueError(f"instruction token id {batch.instruction.max()} "
                         f">= vocabulary size {world.VOCAB_SIZE}")
    tl = batch.instruction.shape[1]

    prim = T.matmul(T.tensor(batch.current_primary.reshape(b, N_PRIMARY, -1)),
                    store["encoder.patch_primary.w"])
    prim = T.add(prim, T.tile_leading(store["encoder.pos_primary"], (b,)))
    wrist = T.matmul(T.tensor(batch.current_wrist.reshape(b, N_WRIST, -1)),
                     store["encoder.patch_wrist.w"])
    wrist = T.add(wrist, T.tile_leading(store["encoder.pos_wrist"], (b,)))

    hist = T.matmul(T.tensor(batch.history.reshape(b, n * N_HIST_FRAME, -1)),
                    store["encoder.patch_history.w"])
    space = T.tile_leading(store["encoder.pos_history_space"], (n,))
    space = T.reshape(space, (n * N_HIST_FRAME, d))
    time_idx = np.repeat(np.arange(n), N_HIST_FRAME)
    times = T.take_rows(store["encoder.pos_history_time"], time_idx)
    hist = T.add(hist, T.tile_leading(T.add(space, times), (b,)))

    lang = T.take_rows(store["encoder.tok_embed"], batch.instruction)
    lang_pos = T.narrow(store["encoder.pos_language"], 0, 0, tl)
    lang = T.add(lang, T.tile_leading(lang_pos, (b,)))

    parts = [prim, wrist, hist, lang]
    seg = np.concatenate([
        np.full(N_PRIMARY + N_WRIST, SEG_CURRENT),
        np.full(n * N_HIST_FRAME, SEG_HISTORY),
        np.full(tl, SEG_LANGUAGE),
    ])
    hist_pos = np.concatenate([
        np.full(N_PRIMARY + N_WRIST, -1), time_idx, np.full(tl, -1)])
    valid = np.concatenate([
        np.ones((b, N_PRIMARY + N_WRIST), dtype=bool),
        np.repeat(batch.history_valid, N_HIST_FRAME, axis=1),
        batch.instruction_valid.astype(bool),
    ], axis=1)

    if state_norm is not None:
        toks = []
        for name, sl in (("pos", slice(0, 2)), ("ori", slice(2, 3)), ("grip", slice(3, 4))):
            t = T.add_bias(T.matmul(T.tensor(state_norm[:, sl]),
                                    store[f"statecat.{name}.w"]),
                           store[f"statecat.{name}.b"])
            toks.append(T.reshape(t, (b, 1, d)))
        state = T.add(T.concat(toks, axis=1),
                      T.tile_leading(store["statecat.pos_tokens"], (b,)))
        parts.append(state)
        seg = np.concatenate([seg, np.full(3, SEG_STATE)])
        hist_pos = np.concatenate([hist_pos, np.full(3, -1)])
        valid = np.concatenate([valid, np.ones((b, 3), dtype=bool)], axis=1)

    return TokenSequence(embeddings=T.concat(parts, axis=1), valid=valid,
                         segment_ids=seg, history_pos=hist_pos)


def attention_layer(x: T.Tensor, wq, bq, wk, bk, wv, bv, wo, bo,
                    n_q: int, n_v: int, valid: np.ndarray):
    """Multi-head attention with grouped KV heads.

    Returns (output, K, V) where K/V are the projected per-token key and
    value heads, exactly as cached for the fusion stage. Invalid tokens
    are masked both as keys and as queries (their rows are dead weight in
    every consumer).
    """
    b, t, d = x.shape
    h = d // n_q
    q = T.reshape(T.add_bias(T.matmul(x, wq), bq), (b, t, n_q, h))
    k = T.reshape(T.add_bias(T.matmul(x, wk), bk), (b, t, n_v, h))
    v = T.reshape(T.add_bias(T.matmul(x, wv), bv), (b, t, n_v, h))
    att = T.attention(q, k, v, valid, query_valid=valid)
    y = T.add_bias(T.matmul(T.reshape(att, (b, t, d)), wo), bo)
    return y, k, v


def encode(tokens: TokenSequence, store: ParamStore, cfg: TrainConfig):
    """Run the transformer; returns (final hidden states, per-layer KV cache)."""
    x = tokens.embeddings
    cache = []
    for i in range(cfg.encoder_layers):
        pre = f"encoder.layer{i}"
        h1 = T.layer_norm(x, store[f"{pre}.ln1.g"], store[f"{pre}.ln1.b"])
        y, k, v = attention_layer(
            h1, store[f"{pre}.wq"], store[f"{pre}.bq"],
            store[f"{pre}.wk"], store[f"{pre}.bk"],
            store[f"{pre}.wv"], store[f"{pre}.bv"],
            store[f"{pre}.wo"], store[f"{pre}.bo"],
            cfg.query_heads, cfg.kv_heads, tokens.valid)
        cache.append((k, v))
        x = T.add(x, y)
        h2 = T.layer_norm(x, store[f"{pre}.ln2.g"], store[f"{pre}.ln2.b"])
        f = T.add_bias(T.matmul(h2, store[f"{pre}.ffn.w1"]), store[f"{pre}.ffn.b1"])
        f = T.add_bias(T.matmul(T.gelu(f), store[f"{pre}.ffn.w2"]), store[f"{pre}.ffn.b2"])
        x = T.add(x, f)
    return x, cache
