"""Policy assembly: encoder + fusion + action head behind one object.

The fusion stage is either the state-grounded re-representation (the
default) or the concat baseline used by the ablation grid, where the
projected state joins the encoder input as extra tokens and a small
head-count MLP adapts the final-layer cache for the expert.
"""

from __future__ import annotations

import numpy as np

from . import expert as E
from . import salr as S
from . import tensor as T
from .config import TrainConfig
from .encoder import (ObservationBatch, ParamStore, encode,
                      init_encoder_params, tokenize_observation)
from .rng import Stream

__all__ = ["Policy"]

_HEAD_MLP_HIDDEN = 4


class Policy:
    """A trainable policy instance: parameters plus forward passes."""

    def __init__(self, cfg: TrainConfig, store: ParamStore):
        self.cfg = cfg.validate()
        self.store = store

    @classmethod
    def init(cls, cfg: TrainConfig) -> "Policy":
        cfg = cfg.validate()
        store = ParamStore()
        stream = Stream(cfg.seed).child("init")
        init_encoder_params(store, cfg, stream.child("encoder"),
                            state_tokens=not cfg.use_salr)
        if cfg.use_salr:
            S.init_salr_params(store, cfg, stream.child("salr"))
        else:
            hs = stream.child("headmlp")
            store.add("statecat.headmlp.w1",
                      hs.child("w1").truncated_normal((cfg.kv_heads, _HEAD_MLP_HIDDEN), std=0.02))
            store.add("statecat.headmlp.b1", np.zeros(_HEAD_MLP_HIDDEN))
            store.add("statecat.headmlp.w2",
                      hs.child("w2").truncated_normal((_HEAD_MLP_HIDDEN, cfg.expert_kv_heads), std=0.02))
            store.add("statecat.headmlp.b2", np.zeros(cfg.expert_kv_heads))
        E.init_expert_params(store, cfg, stream.child("expert"))
        policy = cls(cfg, store)
        if cfg.freeze_encoder:
            for p in store.subset("encoder."):
                p.tensor.requires_grad = False
        return policy

    # ------------------------------------------------------------------
    def parameters(self) -> list:
        return self.store.values()

    def trainable_parameters(self) -> list:
        if self.cfg.freeze_encoder:
            return [p for p in self.store.values() if not p.name.startswith("encoder.")]
        return self.store.values()

    def parameter_count(self) -> int:
        return sum(p.tensor.array.size for p in self.store.values())

    # ------------------------------------------------------------------
    def _state_input(self, state_norm: np.ndarray) -> np.ndarray:
        if self.cfg.zero_state:
            return np.zeros_like(state_norm)
        return state_norm

    def _headmlp(self, x: T.Tensor) -> T.Tensor:
        h = T.swapaxes(x, 2, 3)
        h = T.add_bias(T.matmul(h, self.store["statecat.headmlp.w1"]),
                       self.store["statecat.headmlp.b1"])
        h = T.add_bias(T.matmul(T.gelu(h), self.store["statecat.headmlp.w2"]),
                       self.store["statecat.headmlp.b2"])
        return T.swapaxes(h, 2, 3)

    def condition(self, obs: ObservationBatch, state_norm: np.ndarray):
        """Encode observations into the expert's conditioning.

        Returns (condition layers, key validity mask)."""
        state_norm = self._state_input(state_norm)
        if self.cfg.use_salr:
            tokens = tokenize_observation(obs, self.store, self.cfg)
            _, cache = encode(tokens, self.store, self.cfg)
            cond = S.salr_forward(state_norm, cache, self.store, self.cfg)
        else:
            tokens = tokenize_observation(obs, self.store, self.cfg, state_norm=state_norm)
            _, cache = encode(tokens, self.store, self.cfg)
            k_last, v_last = cache[-1]
            cond = [(self._headmlp(k_last), self._headmlp(v_last))]
        return cond, tokens.valid

    def loss(self, obs: ObservationBatch, state_norm: np.ndarray,
             chunk: np.ndarray, loss_mask: np.ndarray, stream: Stream = None,
             flow=None) -> T.Tensor:
        cond, key_valid = self.condition(obs, state_norm)
        return E.cfm_loss(chunk, loss_mask, cond, key_valid, self.store,
                          self.cfg, stream=stream, flow=flow)

    def sample(self, obs: ObservationBatch, state_norm: np.ndarray,
               stream: Stream, n_steps: int = 10) -> np.ndarray:
        with T.no_grad():
            cond, key_valid = self.condition(obs, state_norm)
        return E.sample_actions(cond, key_valid, self.store, self.cfg,
                                stream, n_steps=n_steps)
