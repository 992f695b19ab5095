"""Supervised training loop: examples, schedule, steps, checkpoints.

Episodes are sliced at every other timestep into (observation bundle,
state, action chunk) examples; an epoch is a seeded permutation of those
slices. All stochastic draws are keyed by (seed, purpose, step), so an
interrupted run resumed from a checkpoint reproduces the uninterrupted
loss sequence exactly.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import world
from .config import TrainConfig
from .dataset import EpisodeRecord, read_episodes
from .encoder import ObservationBatch, ParamStore
from .model import Policy
from .optim import adam_step
from .rng import Stream

__all__ = ["LoadedDataset", "TrainingDivergedError", "CheckpointFormatError",
           "make_training_example", "lr_schedule", "train_step", "train",
           "save_checkpoint", "load_checkpoint"]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LOLATOY1"
TIMESTEP_STRIDE = 2  # decorrelate neighbouring slices


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


class CheckpointFormatError(RuntimeError):
    pass


def make_training_example(ep: EpisodeRecord, t: int, cfg: TrainConfig):
    """Slice one episode timestep into model inputs.

    Returns (bundle dict, normalized state, normalized chunk, loss mask).
    History slots before the episode start are zero-filled and flagged
    invalid; chunk entries past the episode end are zero-filled and masked.
    """
    if not 0 <= t < ep.length:
        raise IndexError(f"timestep {t} out of range for episode of length {ep.length}")
    n = cfg.n_history
    hist = np.zeros((n, world.WRIST_GRID, world.WRIST_GRID, world.CHANNELS))
    hist_valid = np.zeros(n, dtype=bool)
    for slot in range(n):
        src = t - n + slot
        if src >= 0:
            hist[slot] = world.downsample_frame(ep.frames[src][0])
            hist_valid[slot] = True
    s = cfg.chunk_len
    chunk = np.zeros((s, 4))
    mask = np.zeros(s)
    for j in range(s):
        if t + j < ep.length:
            chunk[j] = ep.actions[t + j].normalized()
            mask[j] = 1.0
    instr = np.zeros(world.MAX_INSTRUCTION, dtype=np.int64)
    instr_valid = np.zeros(world.MAX_INSTRUCTION, dtype=bool)
    toks = ep.task.instruction_tokens
    instr[:len(toks)] = toks
    instr_valid[:len(toks)] = True
    bundle = {
        "current_primary": ep.frames[t][0],
        "current_wrist": ep.frames[t][1],
        "history": hist,
        "history_valid": hist_valid,
        "instruction": instr,
        "instruction_valid": instr_valid,
    }
    state = world.normalize_state(ep.states[t])
    return bundle, state, chunk, mask


class LoadedDataset:
    """Episodes parsed into flat arrays, ready for batch assembly.

    Frames are cached as float32 (their values are dyadic fractions, so
    this is lossless) and widened per batch. One loaded dataset can serve
    configs with different history lengths or chunk sizes.
    """

    def __init__(self, episodes: list):
        self.episodes = []
        for ep in episodes:
            frames_p = np.stack([f[0] for f in ep.frames]).astype(np.float32)
            frames_w = np.stack([f[1] for f in ep.frames]).astype(np.float32)
            down = np.stack([world.downsample_frame(f[0]) for f in ep.frames]).astype(np.float32)
            states = np.stack([world.normalize_state(s) for s in ep.states])
            actions = np.stack([a.normalized() for a in ep.actions]) if ep.actions else np.zeros((0, 4))
            instr = np.zeros(world.MAX_INSTRUCTION, dtype=np.int64)
            instr_valid = np.zeros(world.MAX_INSTRUCTION, dtype=bool)
            toks = ep.task.instruction_tokens
            instr[:len(toks)] = toks
            instr_valid[:len(toks)] = True
            self.episodes.append({
                "primary": frames_p, "wrist": frames_w, "down": down,
                "states": states, "actions": actions,
                "instruction": instr, "instruction_valid": instr_valid,
                "length": len(ep.actions),
            })
        self.index = [(i, t) for i, ep in enumerate(self.episodes)
                      for t in range(0, ep["length"], TIMESTEP_STRIDE)]

    @classmethod
    def from_path(cls, path) -> "LoadedDataset":
        log.info("loading dataset %s", path)
        t0 = time.perf_counter()
        ds = cls(read_episodes(path))
        log.info("loaded %d episodes (%d examples) in %.1fs",
                 len(ds.episodes), len(ds.index), time.perf_counter() - t0)
        return ds

    def batch(self, pairs, cfg: TrainConfig) -> dict:
        n = cfg.n_history
        s = cfg.chunk_len
        b = len(pairs)
        g = world.WRIST_GRID
        out = {
            "current_primary": np.empty((b, world.GRID, world.GRID, world.CHANNELS)),
            "current_wrist": np.empty((b, g, g, world.CHANNELS)),
            "history": np.zeros((b, n, g, g, world.CHANNELS)),
            "history_valid": np.zeros((b, n), dtype=bool),
            "instruction": np.empty((b, world.MAX_INSTRUCTION), dtype=np.int64),
            "instruction_valid": np.empty((b, world.MAX_INSTRUCTION), dtype=bool),
            "state": np.empty((b, 4)),
            "chunk": np.zeros((b, s, 4)),
            "mask": np.zeros((b, s)),
        }
        for row, (i, t) in enumerate(pairs):
            ep = self.episodes[i]
            out["current_primary"][row] = ep["primary"][t]
            out["current_wrist"][row] = ep["wrist"][t]
            lo = max(0, t - n)
            if t > 0:
                out["history"][row, n - (t - lo):] = ep["down"][lo:t]
                out["history_valid"][row, n - (t - lo):] = True
            out["instruction"][row] = ep["instruction"]
            out["instruction_valid"][row] = ep["instruction_valid"]
            out["state"][row] = ep["states"][t]
            take = min(s, ep["length"] - t)
            out["chunk"][row, :take] = ep["actions"][t:t + take]
            out["mask"][row, :take] = 1.0
        return out

    def step_pairs(self, step: int, cfg: TrainConfig) -> list:
        """Deterministic batch composition for a global step index."""
        per_epoch = max(1, len(self.index) // cfg.batch_size)
        epoch = step // per_epoch
        slot = step % per_epoch
        perm = Stream(cfg.seed).child("shuffle", epoch).permutation(len(self.index))
        lo = slot * cfg.batch_size
        return [self.index[j] for j in perm[lo:lo + cfg.batch_size]]


def batch_to_obs(batch: dict) -> ObservationBatch:
    return ObservationBatch(
        current_primary=batch["current_primary"],
        current_wrist=batch["current_wrist"],
        history=batch["history"],
        history_valid=batch["history_valid"],
        instruction=batch["instruction"],
        instruction_valid=batch["instruction_valid"],
    )


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_peak, then cosine decay to lr_floor."""
    if step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_floor + 0.5 * (cfg.lr_peak - cfg.lr_floor) * (1.0 + math.cos(math.pi * progress))


def train_step(policy: Policy, batch: dict, cfg: TrainConfig, step: int) -> float:
    """One optimizer step; returns the pre-update loss."""
    stream = Stream(cfg.seed).child("train", step)
    loss = policy.loss(batch_to_obs(batch), batch["state"], batch["chunk"],
                       batch["mask"], stream)
    value = loss.item()
    if not math.isfinite(value):
        bad = [p.name for p in policy.parameters()
               if not np.all(np.isfinite(p.tensor.array))]
        raise TrainingDivergedError(step, f"parameters with non-finite values: {bad or 'none'}")
    loss.backward()
    trainable = policy.trainable_parameters()
    # The last encoder layer past its KV projections feeds only the unused
    # final hidden state; its loss gradient is exactly zero.
    for p in trainable:
        if p.tensor.grad is None:
            p.tensor.grad = np.zeros(p.tensor.array.size)
    adam_step(trainable, lr=lr_schedule(step, cfg),
              beta1=cfg.beta1, beta2=cfg.beta2,
              weight_decay=cfg.weight_decay, t=step + 1)
    return value


# ---------------------------------------------------------------------------
# checkpoints: magic, length-prefixed JSON manifest, little-endian f64 payload

def _payload_entries(policy: Policy):
    for p in policy.store.values():
        yield p.name, p.tensor.array.reshape(-1)
        yield p.name + "#m", p.adam_m
        yield p.name + "#v", p.adam_v


def save_checkpoint(policy: Policy, step: int, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    chunks = []
    for name, flat in _payload_entries(policy):
        table.append({"name": name, "offset": offset,
                      "shape": list(policy.store.params[name.split("#")[0]].tensor.shape)})
        chunks.append(flat)
        offset += flat.size
    manifest = {
        "config": json.loads(policy.cfg.to_json()),
        "step": step,
        "rng": {"seed": policy.cfg.seed, "step": step},
        "params": table,
        "payload_len": offset,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        payload = np.concatenate(chunks) if chunks else np.zeros(0)
        fh.write(payload.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Read a checkpoint; returns (policy, step). Validates format strictly."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    n = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + n:
        raise CheckpointFormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest: {exc}") from exc
    payload = np.frombuffer(raw[16 + n:], dtype="<f8")
    if payload.size != manifest["payload_len"]:
        raise CheckpointFormatError(
            f"{path}: payload has {payload.size} values, manifest says "
            f"{manifest['payload_len']}")
    cfg = TrainConfig.from_dict(manifest["config"])
    policy = Policy.init(cfg)
    entries = {e["name"]: e for e in manifest["params"]}
    for name, flat in _payload_entries(policy):
        entry = entries.pop(name, None)
        if entry is None:
            raise CheckpointFormatError(f"{path}: missing payload entry {name!r}")
        vals = payload[entry["offset"]:entry["offset"] + flat.size]
        if vals.size != flat.size:
            raise CheckpointFormatError(f"{path}: short payload for {name!r}")
        flat[...] = vals
    if entries:
        raise CheckpointFormatError(f"{path}: unknown payload entries {sorted(entries)}")
    return policy, manifest["step"]


def train(cfg: TrainConfig, out_dir, dataset: LoadedDataset | None = None,
          resume: str | None = None, checkpoint_every: int = 500,
          log_every: int = 50) -> Path:
    """Full training run; returns the path of the final checkpoint.

    Writes loss.csv (step, loss, lr) and periodic checkpoints under
    ``out_dir``. KeyboardInterrupt checkpoints before re-raising.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = LoadedDataset.from_path(cfg.dataset)
    if resume:
        policy, start = load_checkpoint(resume)
        if policy.cfg != cfg:
            raise ValueError("resume config does not match requested config")
        start += 1
        log.info("resumed from %s at step %d", resume, start)
    else:
        policy = Policy.init(cfg)
        start = 0
    loss_path = out_dir / "loss.csv"
    mode = "a" if resume and loss_path.exists() else "w"
    final = out_dir / "checkpoint_final.ckpt"
    t0 = time.perf_counter()
    with open(loss_path, mode, encoding="utf-8") as loss_fh:
        if mode == "w":
            loss_fh.write("step,loss,lr\n")
        try:
            for step in range(start, cfg.total_steps):
                batch = dataset.batch(dataset.step_pairs(step, cfg), cfg)
                value = train_step(policy, batch, cfg, step)
                loss_fh.write(f"{step},{value!r},{lr_schedule(step, cfg)!r}\n")
                if step % log_every == 0:
                    rate = (step - start + 1) / (time.perf_counter() - t0)
                    log.info("step %d/%d loss %.4f (%.2f steps/s)",
                             step, cfg.total_steps, value, rate)
                if checkpoint_every and (step + 1) % checkpoint_every == 0:
                    save_checkpoint(policy, step, out_dir / f"checkpoint_{step + 1:06d}.ckpt")
        except KeyboardInterrupt:
            save_checkpoint(policy, step, out_dir / "checkpoint_interrupted.ckpt")
            log.warning("interrupted at step %d; checkpoint saved", step)
            raise
    save_checkpoint(policy, cfg.total_steps - 1, final)
    return final
