"""Flow-matching action head: a transformer decoder over the action chunk.

Training regresses the velocity of a linear noise-to-data path (or the
noise itself in the alternative parameterization); sampling integrates
the learned field with fixed-step Euler from pure noise and clamps the
result to the normalized action box. Conditioning enters purely through
cross-attention against the fused per-layer keys/values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .encoder import ParamStore
from .rng import Stream

__all__ = ["FlowState", "init_expert_params", "sinusoidal_embed",
           "flow_path_sample", "expert_forward", "cfm_loss", "sample_actions"]

ACTION_DIM = 4


@dataclass
class FlowState:
    x_z: np.ndarray      # noisy chunk at flow time z
    z: np.ndarray        # (B,) flow times in [0, 1]
    epsilon: np.ndarray  # the sampled noise
    target: np.ndarray   # regression target per target_mode


def init_expert_params(store: ParamStore, cfg: TrainConfig, stream: Stream) -> None:
    de = cfg.d_expert

    def trunc(label, shape):
        return stream.child(label).truncated_normal(shape, std=0.02)

    store.add("expert.in.w", trunc("in", (ACTION_DIM, de)))
    store.add("expert.in.b", np.zeros(de))
    store.add("expert.time.w", trunc("time", (de, de)))
    store.add("expert.time.b", np.zeros(de))
    for i in range(cfg.expert_layers):
        pre = f"expert.layer{i}"
        ls = stream.child(f"layer{i}")
        store.add(f"{pre}.ln1.g", np.ones(de))
        store.add(f"{pre}.ln1.b", np.zeros(de))
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{pre}.self.{name}", ls.child(name).truncated_normal((de, de), std=0.02))
            store.add(f"{pre}.self.b{name[1]}", np.zeros(de))
        store.add(f"{pre}.lnx.g", np.ones(de))
        store.add(f"{pre}.lnx.b", np.zeros(de))
        store.add(f"{pre}.cross.wq", ls.child("xq").truncated_normal((de, de), std=0.02))
        store.add(f"{pre}.cross.bq", np.zeros(de))
        store.add(f"{pre}.cross.wo", ls.child("xo").truncated_normal((de, de), std=0.02))
        store.add(f"{pre}.cross.bo", np.zeros(de))
        store.add(f"{pre}.ln2.g", np.ones(de))
        store.add(f"{pre}.ln2.b", np.zeros(de))
        store.add(f"{pre}.ffn.w1", ls.child("f1").truncated_normal((de, 4 * de), std=0.02))
        store.add(f"{pre}.ffn.b1", np.zeros(4 * de))
        store.add(f"{pre}.ffn.w2", ls.child("f2").truncated_normal((4 * de, de), std=0.02))
        store.add(f"{pre}.ffn.b2", np.zeros(de))
    store.add("expert.out.w", trunc("out", (de, ACTION_DIM)))
    store.add("expert.out.b", np.zeros(ACTION_DIM))


def sinusoidal_embed(z, dim: int) -> np.ndarray:
    """Sinusoidal features of flow time, z scaled by 1000 to spread frequencies.

    Component 2k is sin(z*1000 / 10000^(2k/dim)), component 2k+1 the cosine
    of the same argument. ``z`` may be a scalar or a batch vector.
    """
    if dim % 2:
        raise ValueError(f"sinusoidal_embed needs an even dim, got {dim}")
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    k = np.arange(dim // 2)
    arg = z[:, None] * 1000.0 / (10000.0 ** (2.0 * k / dim))[None, :]
    out = np.empty((z.shape[0], dim))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out


def flow_path_sample(x1: np.ndarray, z, epsilon: np.ndarray,
                     target_mode: str = "velocity") -> FlowState:
    """Linear interpolation x_z = (1-z) * eps + z * x1 with its target."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    zz = z.reshape((-1,) + (1,) * (x1.ndim - 1))
    x_z = (1.0 - zz) * epsilon + zz * x1
    if target_mode == "velocity":
        target = x1 - epsilon
    elif target_mode == "noise":
        target = epsilon.copy()
    else:
        raise ValueError(f"unknown target_mode {target_mode!r}")
    return FlowState(x_z=x_z, z=z, epsilon=epsilon, target=target)


def _condition_for_layer(cond: list, layer: int, cfg: TrainConfig):
    if cfg.condition_mode == "per_layer":
        if len(cond) != cfg.expert_layers:
            raise ValueError(
                f"per_layer conditioning needs {cfg.expert_layers} condition "
                f"layers, got {len(cond)}")
        return cond[layer]
    return cond[-1]


def expert_forward(x_z: np.ndarray, z, cond: list, key_valid: np.ndarray,
                   store: ParamStore, cfg: TrainConfig) -> T.Tensor:
    """Predict the regression target for a noisy chunk at flow time z.

    Tokens are the embedded chunk rows with a prepended timestep token;
    each block runs self-attention over the chunk, cross-attention into
    the paired condition layer, then the feed-forward. The timestep token
    is dropped before the output projection.
    """
    b, s, _ = x_z.shape
    de = cfg.d_expert
    x = T.add_bias(T.matmul(T.tensor(x_z), store["expert.in.w"]), store["expert.in.b"])
    t_emb = T.add_bias(T.matmul(T.tensor(sinusoidal_embed(z, de)), store["expert.time.w"]),
                       store["expert.time.b"])
    x = T.concat([T.reshape(t_emb, (b, 1, de)), x], axis=1)
    tokens = s + 1
    self_valid = np.ones((b, tokens), dtype=bool)
    nh = cfg.expert_kv_heads
    hw = cfg.head_width
    for i in range(cfg.expert_layers):
        pre = f"expert.layer{i}"
        h1 = T.layer_norm(x, store[f"{pre}.ln1.g"], store[f"{pre}.ln1.b"])
        q = T.reshape(T.add_bias(T.matmul(h1, store[f"{pre}.self.wq"]), store[f"{pre}.self.bq"]),
                      (b, tokens, nh, hw))
        k = T.reshape(T.add_bias(T.matmul(h1, store[f"{pre}.self.wk"]), store[f"{pre}.self.bk"]),
                      (b, tokens, nh, hw))
        v = T.reshape(T.add_bias(T.matmul(h1, store[f"{pre}.self.wv"]), store[f"{pre}.self.bv"]),
                      (b, tokens, nh, hw))
        att = T.reshape(T.attention(q, k, v, self_valid), (b, tokens, de))
        x = T.add(x, T.add_bias(T.matmul(att, store[f"{pre}.self.wo"]), store[f"{pre}.self.bo"]))

        k_a, v_a = _condition_for_layer(cond, i, cfg)
        hx = T.layer_norm(x, store[f"{pre}.lnx.g"], store[f"{pre}.lnx.b"])
        qx = T.reshape(T.add_bias(T.matmul(hx, store[f"{pre}.cross.wq"]), store[f"{pre}.cross.bq"]),
                       (b, tokens, nh, hw))
        ctx = T.reshape(T.attention(qx, k_a, v_a, key_valid), (b, tokens, de))
        x = T.add(x, T.add_bias(T.matmul(ctx, store[f"{pre}.cross.wo"]), store[f"{pre}.cross.bo"]))

        h2 = T.layer_norm(x, store[f"{pre}.ln2.g"], store[f"{pre}.ln2.b"])
        f = T.add_bias(T.matmul(h2, store[f"{pre}.ffn.w1"]), store[f"{pre}.ffn.b1"])
        f = T.add_bias(T.matmul(T.gelu(f), store[f"{pre}.ffn.w2"]), store[f"{pre}.ffn.b2"])
        x = T.add(x, f)
    x = T.narrow(x, 1, 1, s)
    return T.add_bias(T.matmul(x, store["expert.out.w"]), store["expert.out.b"])


def cfm_loss(x1: np.ndarray, loss_mask: np.ndarray, cond: list,
             key_valid: np.ndarray, store: ParamStore, cfg: TrainConfig,
             stream: Stream | None = None, flow: FlowState | None = None) -> T.Tensor:
    """Masked flow-matching regression loss (batch mean of per-sample MSE).

    Flow time and noise are drawn from ``stream`` unless a pre-built
    ``flow`` is supplied.
    """
    b, s, da = x1.shape
    if b == 0:
        raise ValueError("cfm_loss: empty batch")
    if flow is None:
        if stream is None:
            raise ValueError("cfm_loss: need a stream or a pre-built flow")
        z = stream.child("z").uniform((b,))
        eps = stream.child("eps").normal((b, s, da))
        flow = flow_path_sample(x1, z, eps, cfg.target_mode)
    pred = expert_forward(flow.x_z, flow.z, cond, key_valid, store, cfg)
    err = T.sub(pred, T.tensor(flow.target))
    # Per-sample mean over real (unmasked) entries, then batch mean.
    counts = loss_mask.sum(axis=1, keepdims=True) * da
    weights = np.repeat(loss_mask[:, :, None], da, axis=2) / counts[:, :, None]
    err = T.mul_const(err, np.sqrt(weights))
    return T.scale(T.sum_all(T.mul(err, err)), 1.0 / b)


def noise_prediction_to_velocity(x: np.ndarray, pred: np.ndarray, z: float,
                                 z_floor: float) -> np.ndarray:
    """Convert a noise prediction into the path velocity at time z.

    Inverts x = (1-z)*eps + z*x1 for x1, then returns x1 - eps. The
    inversion degenerates at z = 0, so the denominator is floored."""
    z_eff = max(z, z_floor)
    x1_hat = (x - (1.0 - z_eff) * pred) / z_eff
    return x1_hat - pred


def sample_actions(cond: list, key_valid: np.ndarray, store: ParamStore,
                   cfg: TrainConfig, stream: Stream, n_steps: int = 10) -> np.ndarray:
    """Integrate the learned field from noise with fixed-step Euler.

    Returns a (B, chunk, 4) normalized action array clamped to [-1, 1].
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    b = key_valid.shape[0]
    s = cfg.chunk_len
    x = stream.child("eps0").normal((b, s, ACTION_DIM))
    with T.no_grad():
        for step in range(n_steps):
            z = step / n_steps
            pred = expert_forward(x, np.full(b, z), cond, key_valid, store, cfg).array
            if cfg.target_mode == "velocity":
                v = pred
            else:
                v = noise_prediction_to_velocity(x, pred, z, 1.0 / (2.0 * n_steps))
            x = x + v / n_steps
    return np.clip(x, -1.0, 1.0)
