"""Demonstration episodes and their JSON-lines serialization.

One episode per line, UTF-8 with LF endings. Floats are written with
Python's shortest round-trip repr, so write -> read -> write is
byte-identical and no precision is lost. Task seeds used here are even
integers; evaluation uses odd ones, so the two never overlap.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import world
from .rng import Stream
from .world import Action, Environment, EpisodeDoneError, RobotState, TaskSpec

__all__ = [
    "EpisodeRecord", "run_expert_episode", "generate_dataset",
    "write_episodes", "read_episodes", "replay_episode",
    "dataset_task_seed", "eval_task_seed",
]

log = logging.getLogger(__name__)


def dataset_task_seed(seed: int, index: int) -> int:
    """Even task seeds are reserved for dataset generation."""
    return 2 * (seed + index)


def eval_task_seed(seed: int, index: int) -> int:
    """Odd task seeds are reserved for evaluation rollouts."""
    return 2 * (seed + index) + 1


@dataclass
class EpisodeRecord:
    task: TaskSpec
    frames: list            # per-timestep (primary, wrist) float arrays
    states: list            # per-timestep RobotState, length = len(actions)+1
    actions: list           # per-timestep Action (physical deltas)
    success: bool

    @property
    def length(self) -> int:
        return len(self.actions)


def run_expert_episode(env: Environment, record_frames: bool = True) -> EpisodeRecord:
    """Roll the scripted expert to completion, recording the trajectory."""
    frames, states, actions = [], [], []
    while True:
        states.append(env.world.robot)
        if record_frames:
            frames.append(world.render_views(env.world))
        if env.done:
            break
        action = world.expert_action(env.world, env.task)
        actions.append(action)
        try:
            env.step(action)
        except EpisodeDoneError:  # pragma: no cover - guarded by env.done above
            break
        if env.world.step_count >= world.MAX_STEPS and not env.done:
            states.append(env.world.robot)
            if record_frames:
                frames.append(world.render_views(env.world))
            break
    return EpisodeRecord(task=env.task, frames=frames, states=states,
                         actions=actions, success=env.success())


def replay_episode(record: EpisodeRecord, initial: world.WorldState,
                   task: TaskSpec) -> list:
    """Re-apply recorded actions from the initial world; returns the states."""
    w = initial
    out = [w.robot]
    for action in record.actions:
        w, _ = world.env_step(w, action, task)
        out.append(w.robot)
    return out


def _episode_to_json(record: EpisodeRecord) -> str:
    payload = {
        "task": list(record.task.instruction_tokens),
        "frames": [
            {"primary": p.tolist(), "wrist": wv.tolist()}
            for p, wv in record.frames
        ],
        "states": [[s.x, s.y, s.theta, s.gripper] for s in record.states],
        "actions": [[a.dx, a.dy, a.dtheta, a.dg] for a in record.actions],
        "success": record.success,
    }
    return json.dumps(payload, separators=(",", ":"))


def _episode_from_json(line: str) -> EpisodeRecord:
    payload = json.loads(line)
    family, args = world.decode_instruction(payload["task"])
    task = TaskSpec(family, args, tuple(payload["task"]))
    frames = [
        (np.asarray(f["primary"], dtype=np.float64), np.asarray(f["wrist"], dtype=np.float64))
        for f in payload["frames"]
    ]
    states = [RobotState(*s) for s in payload["states"]]
    actions = [Action(*a) for a in payload["actions"]]
    return EpisodeRecord(task=task, frames=frames, states=states,
                         actions=actions, success=bool(payload["success"]))


def write_episodes(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(_episode_to_json(record))
            fh.write("\n")


def read_episodes(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(_episode_from_json(line))
    return out


def generate_dataset(n_episodes: int, seed: int, out_path) -> dict:
    """Write ``n_episodes`` successful expert demonstrations as JSON lines.

    Failed expert rollouts (which should not happen) are discarded with a
    warning and replaced. Returns a summary with per-family counts and
    mean episode length.
    """
    if n_episodes <= 0:
        raise ValueError(f"n_episodes must be positive, got {n_episodes}")
    records = []
    counts = {fam: 0 for fam in world.FAMILIES}
    total_len = 0
    index = 0
    while len(records) < n_episodes:
        stream = Stream(dataset_task_seed(seed, index))
        index += 1
        env = Environment.sample(stream)
        record = run_expert_episode(env)
        if not record.success:
            log.warning("discarding failed expert rollout (family=%s, index=%d)",
                        env.task.family, index - 1)
            continue
        records.append(record)
        counts[record.task.family] += 1
        total_len += record.length
    write_episodes(records, out_path)
    summary = {
        "episodes": n_episodes,
        "seed": seed,
        "family_counts": counts,
        "mean_length": total_len / n_episodes,
        "path": str(out_path),
    }
    log.info("dataset written: %s", summary)
    return summary
