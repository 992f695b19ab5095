"""Closed-loop evaluation and the ablation grid.

Rollouts execute predicted chunks open-loop, then re-observe and replan
with a rolling buffer of downsampled past frames. ``evaluate_policy``
runs many rollouts in lockstep so model calls batch across environments;
``rollout`` is the single-trace variant used for inspection and replay
tests. Task seeds here are odd integers, disjoint from the even dataset
seeds by construction.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import world
from .config import TrainConfig
from .dataset import EpisodeRecord, eval_task_seed
from .encoder import ObservationBatch
from .model import Policy
from .rng import Stream
from .training import LoadedDataset, train

__all__ = ["VARIANTS", "apply_variant", "variant_delta", "rollout",
           "evaluate_policy", "run_ablation_grid", "EvalReport", "FamilyStats"]

log = logging.getLogger(__name__)

# Config deltas per ablation variant; everything else stays at the base config.
VARIANTS = {
    "full": {},
    "no_mf": {"n_history": 1},
    "no_salr": {"use_salr": False, "condition_mode": "final_only"},
    "no_state": {"zero_state": True},
    "frozen_vl": {"freeze_encoder": True},
}


def variant_delta(name: str) -> dict:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r} (choose from {sorted(VARIANTS)})")
    return dict(VARIANTS[name])


def apply_variant(cfg: TrainConfig, name: str) -> TrainConfig:
    return cfg.replaced(**variant_delta(name))


@dataclass
class FamilyStats:
    n_rollouts: int
    successes: int
    mean_length: float
    mean_subgoals: float

    @property
    def success_rate(self) -> float:
        return self.successes / self.n_rollouts


@dataclass
class EvalReport:
    variant: str
    seed: int
    config_hash: str
    families: dict            # family -> FamilyStats
    n_denoise_steps: int

    @property
    def average_success(self) -> float:
        rates = [s.success_rate for s in self.families.values()]
        return sum(rates) / len(rates)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "n_denoise_steps": self.n_denoise_steps,
            "families": {f: dataclasses.asdict(s) for f, s in self.families.items()},
            "average_success": self.average_success,
        }

    @staticmethod
    def from_dict(data: dict) -> "EvalReport":
        return EvalReport(
            variant=data["variant"], seed=data["seed"],
            config_hash=data["config_hash"],
            n_denoise_steps=data["n_denoise_steps"],
            families={f: FamilyStats(**s) for f, s in data["families"].items()},
        )


class _LiveEnv:
    """One environment plus the frame history the policy conditions on."""

    def __init__(self, index: int, task, start_world, n_history: int):
        self.index = index
        self.env = world.Environment(task, start_world)
        self.n = n_history
        self.past = []            # downsampled primary frames, oldest first
        self.frames = []
        self.states = []
        self.actions = []
        instr = np.zeros(world.MAX_INSTRUCTION, dtype=np.int64)
        valid = np.zeros(world.MAX_INSTRUCTION, dtype=bool)
        toks = task.instruction_tokens
        instr[:len(toks)] = toks
        valid[:len(toks)] = True
        self.instr = instr
        self.instr_valid = valid

    def observe(self) -> dict:
        primary, wrist = world.render_views(self.env.world)
        self.frames.append((primary, wrist))
        self.states.append(self.env.world.robot)
        n = self.n
        hist = np.zeros((n, world.WRIST_GRID, world.WRIST_GRID, world.CHANNELS))
        hist_valid = np.zeros(n, dtype=bool)
        take = min(n, len(self.past))
        if take:
            hist[n - take:] = self.past[len(self.past) - take:]
            hist_valid[n - take:] = True
        return {
            "current_primary": primary, "current_wrist": wrist,
            "history": hist, "history_valid": hist_valid,
            "instruction": self.instr, "instruction_valid": self.instr_valid,
            "state": world.normalize_state(self.env.world.robot),
        }

    def execute(self, chunk_norm: np.ndarray) -> bool:
        """Run one predicted chunk open-loop; returns True when done."""
        for row in chunk_norm:
            self.past.append(world.downsample_frame(self.frames[-1][0]))
            action = world.Action.from_normalized(row)
            self.actions.append(action)
            done = self.env.step(action)
            if done:
                return True
            primary, wrist = world.render_views(self.env.world)
            self.frames.append((primary, wrist))
            self.states.append(self.env.world.robot)
        # drop the duplicate record for the state observed at the next replan
        self.frames.pop()
        self.states.pop()
        return False

    def trace(self) -> EpisodeRecord:
        # final state render
        primary, wrist = world.render_views(self.env.world)
        self.frames.append((primary, wrist))
        self.states.append(self.env.world.robot)
        return EpisodeRecord(task=self.env.task, frames=self.frames,
                             states=self.states, actions=self.actions,
                             success=self.env.success())


def _stack_obs(obs_list) -> tuple:
    batch = ObservationBatch(
        current_primary=np.stack([o["current_primary"] for o in obs_list]),
        current_wrist=np.stack([o["current_wrist"] for o in obs_list]),
        history=np.stack([o["history"] for o in obs_list]),
        history_valid=np.stack([o["history_valid"] for o in obs_list]),
        instruction=np.stack([o["instruction"] for o in obs_list]),
        instruction_valid=np.stack([o["instruction_valid"] for o in obs_list]),
    )
    state = np.stack([o["state"] for o in obs_list])
    return batch, state


class ModelChunkPolicy:
    """Chunk provider backed by a trained policy."""

    def __init__(self, policy: Policy, n_denoise_steps: int = 10):
        self.policy = policy
        self.n_denoise_steps = n_denoise_steps
        self.n_history = policy.cfg.n_history

    def __call__(self, active: list, stream: Stream) -> np.ndarray:
        obs, state = _stack_obs([env.observe() for env in active])
        return self.policy.sample(obs, state, stream,
                                  n_steps=self.n_denoise_steps)


class ExpertChunkPolicy:
    """Oracle chunk provider that reads the world state directly."""

    def __init__(self, chunk_len: int = 4, n_history: int = 1):
        self.chunk_len = chunk_len
        self.n_history = n_history

    def __call__(self, active: list, stream: Stream) -> np.ndarray:
        out = np.zeros((len(active), self.chunk_len, 4))
        for row, env in enumerate(active):
            env.observe()
            w = env.env.world
            for j in range(self.chunk_len):
                action = world.expert_action(w, env.env.task)
                out[row, j] = action.normalized()
                w, done = world.env_step(w, action, env.env.task)
                if done:
                    break
        return out


def _run_lockstep(chunk_policy, live: list, stream: Stream) -> None:
    replan = 0
    active = list(live)
    while active:
        chunks = chunk_policy(active, stream.child("replan", replan))
        still = []
        for env, chunk in zip(active, chunks):
            if not env.execute(chunk):
                still.append(env)
        active = still
        replan += 1


def rollout(policy: Policy, task, start_world, seed: int,
            n_denoise_steps: int = 10) -> tuple:
    """Single closed-loop episode; returns (success, trace)."""
    live = _LiveEnv(0, task, start_world, policy.cfg.n_history)
    _run_lockstep(ModelChunkPolicy(policy, n_denoise_steps), [live],
                  Stream(seed).child("rollout"))
    trace = live.trace()
    return trace.success, trace


def evaluate_policy(policy, families, n_per_family: int, seed: int,
                    n_denoise_steps: int = 10, variant: str = "",
                    batch_size: int = 50) -> EvalReport:
    """Success rates over ``n_per_family`` seeded rollouts per family.

    Rollouts are evaluated in lockstep batches; results only depend on
    (policy, families, n_per_family, seed, n_denoise_steps). ``policy``
    is a trained :class:`Policy` or any chunk-policy callable.
    """
    if n_per_family < 1:
        raise ValueError("n_per_family must be >= 1")
    if isinstance(policy, Policy):
        chunk_policy = ModelChunkPolicy(policy, n_denoise_steps)
        config_hash = policy.cfg.hash()
    else:
        chunk_policy = policy
        config_hash = "oracle"
    stats = {}
    for family in families:
        done_envs = []
        for lo in range(0, n_per_family, batch_size):
            hi = min(lo + batch_size, n_per_family)
            live = []
            for i in range(lo, hi):
                stream = Stream(eval_task_seed(seed, i)).child(family)
                task = world.sample_task(stream.child("task"), family)
                start = world.sample_world(stream.child("world"), task)
                live.append(_LiveEnv(i, task, start, chunk_policy.n_history))
            _run_lockstep(chunk_policy, live, Stream(seed).child("eval", family, lo))
            done_envs.extend(live)
        n = len(done_envs)
        stats[family] = FamilyStats(
            n_rollouts=n,
            successes=sum(1 for e in done_envs if e.env.success()),
            mean_length=float(np.mean([e.env.world.step_count for e in done_envs])),
            mean_subgoals=float(np.mean([e.env.world.progress for e in done_envs])),
        )
        log.info("eval %s/%s: %.1f%% over %d rollouts", variant or "policy",
                 family, 100.0 * stats[family].success_rate, n)
    return EvalReport(variant=variant, seed=seed, config_hash=config_hash,
                      families=stats, n_denoise_steps=n_denoise_steps)


def run_ablation_grid(base_cfg: TrainConfig, dataset_path, variants, seed: int,
                      out_dir, n_per_family: int = 100,
                      families=world.FAMILIES) -> list:
    """Train and evaluate each variant from the same init seed.

    Writes per-variant run directories plus metric files under out_dir;
    returns the evaluation reports in variant order.
    """
    from .report import emit_report

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = LoadedDataset.from_path(dataset_path)
    reports = []
    for name in variants:
        cfg = apply_variant(base_cfg, name).replaced(
            seed=seed, dataset=str(dataset_path))
        run_dir = out_dir / name
        final = run_dir / "checkpoint_final.ckpt"
        if final.exists():
            from .training import load_checkpoint
            policy, _ = load_checkpoint(final)
            if policy.cfg != cfg:
                raise ValueError(f"{final} was trained with a different config")
            log.info("reusing existing checkpoint for %s", name)
        else:
            log.info("training variant %s", name)
            train(cfg, run_dir, dataset=dataset)
            from .training import load_checkpoint
            policy, _ = load_checkpoint(final)
        report = evaluate_policy(policy, families, n_per_family, seed, variant=name)
        reports.append(report)
    emit_report(reports, out_dir)
    return reports
