"""Synthetic 2-D long-horizon manipulation world.

A point robot with an orientation and a gripper moves over the unit
square among blocks, zones, and buttons. Episodes are driven by one of
three task families:

* ``pick_place_seq`` -- carry instructed blocks to instructed zones, in
  instruction order.
* ``repeat_press`` -- press a button exactly N times, then retreat.
  Button appearance never changes with presses, so the count is only
  recoverable from memory of past frames.
* ``order_visit`` -- visit zones in an instructed a, b, a sequence. The
  revisit makes the current frame ambiguous about progress.

Rendering produces a full-workspace occupancy grid plus a wrist-centered
crop; task progress is deliberately absent from both. A scripted expert
solves every task with a proportional controller plus per-family
finite-state scripts, landing exactly on targets so that press/return
cycles alias in state space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import Stream

__all__ = [
    "RobotState", "Action", "WorldObject", "WorldState", "TaskSpec",
    "Environment", "EpisodeDoneError", "FAMILIES", "GRID", "WRIST_GRID",
    "CHANNELS", "MAX_STEPS", "STEP_XY", "STEP_THETA", "STEP_G",
    "ACTION_SCALES", "compose_state", "env_step", "render_views",
    "downsample_frame", "expert_action", "check_success", "task_complete",
    "encode_instruction", "decode_instruction", "sample_task", "sample_world",
    "normalize_state",
]

GRID = 12                  # primary view resolution over the unit workspace
WRIST_GRID = 6             # wrist view resolution over a WRIST_WINDOW square
WRIST_WINDOW = 0.5
CHANNELS = 8               # 3 block colors, zone, button, gripper, openness, held
MAX_STEPS = 200

STEP_XY = 0.08             # per-step physical limits
STEP_THETA = math.pi / 8
STEP_G = 0.5
ACTION_SCALES = np.array([STEP_XY, STEP_XY, STEP_THETA, STEP_G])

GRASP_RADIUS = 0.05
PRESS_RADIUS = 0.05
REARM_DIST = 0.1           # retreat needed between presses
COMMIT_DIST = 0.2          # retreat that finishes a press task
ZONE_RADIUS = 0.07
GRIP_CLOSED = 0.5          # gripper counts as closed at or below this

FAMILIES = ("pick_place_seq", "repeat_press", "order_visit")

# Instruction vocabulary (32 symbols): 0 pad, 1-3 family tags,
# 4-6 press counts, 10-12 blocks, 13-15 zones.
VOCAB_SIZE = 32
MAX_INSTRUCTION = 8
_TOK_FAMILY = {"pick_place_seq": 1, "repeat_press": 2, "order_visit": 3}
_TOK_COUNT = 4    # + (N - 1)
_TOK_BLOCK = 10   # + block id
_TOK_ZONE = 13    # + zone id


class EpisodeDoneError(RuntimeError):
    """Raised when stepping an environment whose episode has finished."""


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float
    gripper: float

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Action:
    """Physical per-step delta. Components are bounded by the step limits;
    the normalized form (components in [-1, 1]) is what models see."""
    dx: float
    dy: float
    dtheta: float
    dg: float

    def normalized(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta, self.dg]) / ACTION_SCALES

    @staticmethod
    def from_normalized(vec) -> "Action":
        phys = np.asarray(vec, dtype=np.float64) * ACTION_SCALES
        return Action(*phys)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta, self.dg])


@dataclass(frozen=True)
class WorldObject:
    object_id: int
    kind: str                # block | zone | button
    position: tuple          # (x, y)
    color_id: int


@dataclass(frozen=True)
class WorldState:
    robot: RobotState
    objects: tuple
    held_object: int | None
    progress: int            # completed task units; never decreases
    step_count: int
    # Hidden bookkeeping (never rendered):
    press_count: int = 0
    armed: bool = True       # button re-armed after retreating REARM_DIST
    visit_log: tuple = ()
    placed: tuple = ()       # first-satisfaction order of instructed pairs
    violated: bool = False   # order broken; task can no longer complete

    def object_by_id(self, object_id: int) -> WorldObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(f"no object {object_id}")


@dataclass(frozen=True)
class TaskSpec:
    family: str
    args: tuple
    instruction_tokens: tuple

    @staticmethod
    def make(family: str, args: tuple) -> "TaskSpec":
        return TaskSpec(family, tuple(args), encode_instruction(family, tuple(args)))


def encode_instruction(family: str, args: tuple) -> tuple:
    """Deterministically encode (family, args) as instruction tokens."""
    toks = [_TOK_FAMILY[family]]
    if family == "pick_place_seq":
        for block, zone in args:
            toks += [_TOK_BLOCK + block, _TOK_ZONE + zone]
    elif family == "repeat_press":
        (n,) = args
        toks.append(_TOK_COUNT + n - 1)
    elif family == "order_visit":
        toks += [_TOK_ZONE + z for z in args]
    else:
        raise ValueError(f"unknown family {family!r}")
    if len(toks) > MAX_INSTRUCTION:
        raise ValueError("instruction too long")
    return tuple(toks)


def decode_instruction(tokens) -> tuple:
    """Exact inverse of :func:`encode_instruction`."""
    toks = [t for t in tokens if t != 0]
    fam = {v: k for k, v in _TOK_FAMILY.items()}.get(toks[0])
    if fam is None:
        raise ValueError(f"bad family token {toks[0]}")
    rest = toks[1:]
    if fam == "pick_place_seq":
        if len(rest) % 2:
            raise ValueError("dangling pick/place token")
        args = tuple((b - _TOK_BLOCK, z - _TOK_ZONE) for b, z in zip(rest[::2], rest[1::2]))
    elif fam == "repeat_press":
        args = (rest[0] - _TOK_COUNT + 1,)
    else:
        args = tuple(z - _TOK_ZONE for z in rest)
    return fam, args


# ---------------------------------------------------------------------------
# kinematics

def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2.0 * math.pi)
    if w < 0:
        w += 2.0 * math.pi
    w -= math.pi
    if w == -math.pi:
        w = math.pi
    return w


def compose_state(s: RobotState, a: Action) -> RobotState:
    """Additive state composition with workspace clipping and angle wrap."""
    return RobotState(
        x=min(max(s.x + a.dx, 0.0), 1.0),
        y=min(max(s.y + a.dy, 0.0), 1.0),
        theta=wrap_angle(s.theta + a.dtheta),
        gripper=min(max(s.gripper + a.dg, 0.0), 1.0),
    )


def _dist(p, q) -> float:
    return math.hypot(p[0] - q[0], p[1] - q[1])


def _nearest(objects, kind: str, pos) -> WorldObject | None:
    best, best_d = None, math.inf
    for obj in objects:
        if obj.kind != kind:
            continue
        d = _dist(obj.position, pos)
        if d < best_d:
            best, best_d = obj, d
    return best


def task_complete(w: WorldState, task: TaskSpec) -> bool:
    if w.violated:
        return False
    if task.family == "repeat_press":
        if w.press_count != task.args[0]:
            return False
        button = _nearest(w.objects, "button", w.robot.position())
        return _dist(button.position, w.robot.position()) >= COMMIT_DIST
    if task.family == "order_visit":
        return w.visit_log == task.args
    return w.placed == tuple(range(len(task.args)))


def env_step(w: WorldState, a: Action, task: TaskSpec) -> tuple:
    """Advance the world one step; returns (new_world, done).

    Kinematics go through :func:`compose_state`; grasping, button
    presses, and hidden progress follow the task family rules.
    """
    prev_g = w.robot.gripper
    robot = compose_state(w.robot, a)
    closing = prev_g > GRIP_CLOSED >= robot.gripper
    opening = prev_g <= GRIP_CLOSED < robot.gripper
    pos = robot.position()

    objects = list(w.objects)
    held = w.held_object
    press_count = w.press_count
    armed = w.armed
    visit_log = w.visit_log
    placed = w.placed
    violated = w.violated

    # Held block rides with the gripper.
    if held is not None:
        for i, obj in enumerate(objects):
            if obj.object_id == held:
                objects[i] = replace(obj, position=(robot.x, robot.y))

    if closing and held is None:
        block = _nearest(objects, "block", pos)
        if block is not None and _dist(block.position, pos) <= GRASP_RADIUS:
            held = block.object_id
            for i, obj in enumerate(objects):
                if obj.object_id == held:
                    objects[i] = replace(obj, position=(robot.x, robot.y))

    released = None
    if opening and held is not None:
        released = held
        held = None

    # Button handling: re-arm on retreat, count on armed close.
    button = _nearest(objects, "button", pos)
    if button is not None:
        if not armed and _dist(button.position, pos) >= REARM_DIST:
            armed = True
        if closing and armed and _dist(button.position, pos) <= PRESS_RADIUS:
            press_count += 1
            armed = False

    # Zone visits (order_visit only). Zones are spaced, so at most one is hit.
    if task.family == "order_visit":
        for obj in objects:
            if obj.kind != "zone":
                continue
            if _dist(obj.position, pos) <= ZONE_RADIUS:
                zid = obj.color_id
                if not visit_log or visit_log[-1] != zid:
                    visit_log = visit_log + (zid,)
                    if visit_log != task.args[: len(visit_log)]:
                        violated = True
                break

    # Instructed placement completion (first satisfaction, in order).
    if task.family == "pick_place_seq" and released is not None:
        for idx, (block_id, zone_id) in enumerate(task.args):
            if idx in placed:
                continue
            block = next(o for o in objects if o.kind == "block" and o.color_id == block_id)
            zone = next(o for o in objects if o.kind == "zone" and o.color_id == zone_id)
            if block.object_id == released and _dist(block.position, zone.position) <= ZONE_RADIUS:
                if idx != len(placed):
                    violated = True
                placed = placed + (idx,)
                break

    if task.family == "repeat_press":
        progress = min(press_count, task.args[0])
    elif task.family == "order_visit":
        progress = len(visit_log) if not violated else w.progress
    else:
        progress = len(placed) if not violated else w.progress
    progress = max(progress, w.progress)

    new = WorldState(
        robot=robot, objects=tuple(objects), held_object=held,
        progress=progress, step_count=w.step_count + 1,
        press_count=press_count, armed=armed, visit_log=visit_log,
        placed=placed, violated=violated,
    )
    done = task_complete(new, task) or new.step_count >= MAX_STEPS
    return new, done


def check_success(w: WorldState, task: TaskSpec) -> bool:
    """Judge a final world state against the task."""
    if task.family == "repeat_press":
        return w.press_count == task.args[0]
    if task.family == "order_visit":
        return w.visit_log == task.args
    if w.placed != tuple(range(len(task.args))):
        return False
    for block_id, zone_id in task.args:
        block = next(o for o in w.objects if o.kind == "block" and o.color_id == block_id)
        zone = next(o for o in w.objects if o.kind == "zone" and o.color_id == zone_id)
        if _dist(block.position, zone.position) > ZONE_RADIUS:
            return False
    return True


# ---------------------------------------------------------------------------
# rendering

_CH_BLOCK = 0   # channels 0-2 by color
_CH_ZONE = 3
_CH_BUTTON = 4
_CH_GRIPPER = 5
_CH_OPEN = 6    # gripper openness broadcast over in-workspace cells
_CH_HELD = 7


def _cell(p: float, origin: float) -> int:
    # Cell size is 1/GRID for both views; the wrist view just covers fewer cells.
    return int(math.floor((p - origin) * GRID))


def _render(w: WorldState, origin, res: int, robot_cell=None) -> np.ndarray:
    grid = np.zeros((res, res, CHANNELS))
    # in-workspace mask per cell (cell centers inside the unit square)
    cx = origin[0] + (np.arange(res) + 0.5) / GRID
    cy = origin[1] + (np.arange(res) + 0.5) / GRID
    mask = np.outer((cx >= 0.0) & (cx <= 1.0), (cy >= 0.0) & (cy <= 1.0))
    grid[:, :, _CH_OPEN] = np.where(mask, w.robot.gripper, 0.0)
    grid[:, :, _CH_HELD] = np.where(mask, 1.0 if w.held_object is not None else 0.0, 0.0)
    for obj in w.objects:
        ix = _cell(obj.position[0], origin[0])
        iy = _cell(obj.position[1], origin[1])
        if not (0 <= ix < res and 0 <= iy < res) or not mask[ix, iy]:
            continue
        if obj.kind == "block":
            grid[ix, iy, _CH_BLOCK + obj.color_id] = 1.0
        elif obj.kind == "zone":
            grid[ix, iy, _CH_ZONE] = 1.0
        else:
            grid[ix, iy, _CH_BUTTON] = 1.0
    if robot_cell is None:
        ix = min(_cell(w.robot.x, origin[0]), res - 1)
        iy = min(_cell(w.robot.y, origin[1]), res - 1)
    else:
        ix, iy = robot_cell
    if 0 <= ix < res and 0 <= iy < res and mask[ix, iy]:
        grid[ix, iy, _CH_GRIPPER] = 1.0
    return grid


def render_views(w: WorldState) -> tuple:
    """Render (primary 12x12xC, wrist 6x6xC) occupancy grids.

    The wrist view crops a WRIST_WINDOW square centered on the robot at
    the same cell size as the primary view; cells outside the workspace
    stay zero. Hidden progress never affects either view.
    """
    primary = _render(w, (0.0, 0.0), GRID)
    wrist_origin = (w.robot.x - WRIST_WINDOW / 2, w.robot.y - WRIST_WINDOW / 2)
    # The robot sits at the window center by construction; pin its cell there
    # rather than recomputing it through float subtraction.
    center = WRIST_GRID // 2
    wrist = _render(w, wrist_origin, WRIST_GRID, robot_cell=(center, center))
    return primary, wrist


def downsample_frame(frame: np.ndarray) -> np.ndarray:
    """2x2 average pooling per channel; side length must be even."""
    r = frame.shape[0]
    if r % 2:
        raise ValueError(f"downsample_frame: odd resolution {r}")
    return frame.reshape(r // 2, 2, r // 2, 2, frame.shape[2]).mean(axis=(1, 3))


# ---------------------------------------------------------------------------
# scripted expert

def _move_toward(pos, target, gain: float = 0.8) -> tuple:
    """Per-axis proportional step, saturated; exact step once within reach."""
    ex, ey = target[0] - pos[0], target[1] - pos[1]
    if abs(ex) <= STEP_XY and abs(ey) <= STEP_XY:
        return ex, ey
    return (min(max(gain * ex, -STEP_XY), STEP_XY),
            min(max(gain * ey, -STEP_XY), STEP_XY))


def _turn_toward_zero(theta: float, gain: float = 0.8) -> float:
    err = wrap_angle(-theta)
    if abs(err) <= STEP_THETA:
        return err
    return min(max(gain * err, -STEP_THETA), STEP_THETA)


_AT_TARGET = 1e-9


def expert_action(w: WorldState, task: TaskSpec) -> Action:
    """Deterministic scripted demonstrator; one call per step."""
    robot = w.robot
    pos = (robot.x, robot.y)
    dth = _turn_toward_zero(robot.theta)

    if task.family == "repeat_press":
        n = task.args[0]
        button = _nearest(w.objects, "button", pos)
        bpos = button.position
        away = (math.copysign(STEP_XY, 0.5 - bpos[0]), math.copysign(STEP_XY, 0.5 - bpos[1]))
        open_g = min(STEP_G, 1.0 - robot.gripper) if robot.gripper < 1.0 else 0.0
        if w.press_count >= n:
            # Commit: retreat past the completion distance with the gripper open.
            return Action(away[0], away[1], dth, open_g)
        if robot.gripper <= GRIP_CLOSED:
            # Just pressed: release and bounce out far enough to re-arm.
            return Action(away[0], away[1], dth, STEP_G)
        if not w.armed:
            return Action(away[0], away[1], dth, 0.0)
        if _dist(pos, bpos) <= _AT_TARGET:
            return Action(0.0, 0.0, 0.0, -STEP_G)
        dx, dy = _move_toward(pos, bpos)
        return Action(dx, dy, dth, 0.0)

    if task.family == "order_visit":
        idx = len(w.visit_log)
        target_zone = task.args[min(idx, len(task.args) - 1)]
        zone = next(o for o in w.objects if o.kind == "zone" and o.color_id == target_zone)
        dx, dy = _move_toward(pos, zone.position)
        return Action(dx, dy, dth, 0.0)

    # pick_place_seq
    idx = len(w.placed)
    block_id, zone_id = task.args[min(idx, len(task.args) - 1)]
    block = next(o for o in w.objects if o.kind == "block" and o.color_id == block_id)
    zone = next(o for o in w.objects if o.kind == "zone" and o.color_id == zone_id)
    if w.held_object == block.object_id:
        if _dist(pos, zone.position) <= _AT_TARGET:
            return Action(0.0, 0.0, 0.0, STEP_G)
        dx, dy = _move_toward(pos, zone.position)
        return Action(dx, dy, dth, 0.0)
    if _dist(pos, block.position) <= _AT_TARGET:
        return Action(0.0, 0.0, 0.0, -STEP_G)
    dx, dy = _move_toward(pos, block.position)
    return Action(dx, dy, dth, 0.0)


# ---------------------------------------------------------------------------
# task and world sampling

def sample_task(stream: Stream, family: str | None = None) -> TaskSpec:
    gen = stream.generator()
    if family is None:
        family = FAMILIES[gen.integers(0, len(FAMILIES))]
    elif family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if family == "pick_place_seq":
        blocks = gen.permutation(3)[:2]
        zones = gen.permutation(3)[:2]
        args = tuple((int(b), int(z)) for b, z in zip(blocks, zones))
    elif family == "repeat_press":
        args = (int(gen.integers(1, 4)),)
    else:
        a, b = gen.permutation(3)[:2]
        args = (int(a), int(b), int(a))
    return TaskSpec.make(family, args)


def _cell_center(i: int) -> float:
    return (i + 0.5) / GRID


def _sample_positions(gen, count: int, min_sep: float) -> list:
    """Distinct cell-center positions with a minimum pairwise separation,
    away from the walls."""
    out = []
    while len(out) < count:
        i = int(gen.integers(1, GRID - 1))
        j = int(gen.integers(1, GRID - 1))
        p = (_cell_center(i), _cell_center(j))
        if all(_dist(p, q) >= min_sep for q in out):
            out.append(p)
    return out


def _segment_clear(p, a, b, clearance: float) -> bool:
    """True if point p is at least `clearance` from segment a-b."""
    ax, ay = a
    bx, by = b
    px, py = p
    vx, vy = bx - ax, by - ay
    denom = vx * vx + vy * vy
    t = 0.0 if denom == 0 else max(0.0, min(1.0, ((px - ax) * vx + (py - ay) * vy) / denom))
    cx, cy = ax + t * vx, ay + t * vy
    return math.hypot(px - cx, py - cy) >= clearance


def _expert_solves(task: TaskSpec, w: WorldState) -> bool:
    """Closed-loop check that the scripted expert finishes within the cap."""
    for _ in range(MAX_STEPS):
        w, done = env_step(w, expert_action(w, task), task)
        if done:
            return check_success(w, task)
    return False


def sample_world(stream: Stream, task: TaskSpec) -> WorldState:
    """Sample a layout plus spawn that the expert provably solves.

    Rejection keeps the environment solvable by construction; the main
    hazard is an order_visit spawn whose travel path clips a wrong zone.
    """
    gen = stream.generator()
    while True:
        objects: list[WorldObject] = []
        if task.family == "pick_place_seq":
            pts = _sample_positions(gen, 6, min_sep=0.2)
            for c in range(3):
                objects.append(WorldObject(c, "block", pts[c], c))
            for c in range(3):
                objects.append(WorldObject(3 + c, "zone", pts[3 + c], c))
        elif task.family == "repeat_press":
            (p,) = _sample_positions(gen, 1, min_sep=0.0)
            objects.append(WorldObject(0, "button", p, 0))
        else:
            # Zones spread out, none sitting on the line between another pair.
            while True:
                pts = _sample_positions(gen, 3, min_sep=0.3)
                ok = all(
                    _segment_clear(pts[k], pts[i], pts[j], clearance=0.12)
                    for i in range(3) for j in range(3) for k in range(3)
                    if len({i, j, k}) == 3
                )
                if ok:
                    break
            for c in range(3):
                objects.append(WorldObject(c, "zone", pts[c], c))
        robot = RobotState(
            x=float(gen.uniform(0.1, 0.9)),
            y=float(gen.uniform(0.1, 0.9)),
            theta=wrap_angle(float(gen.uniform(-math.pi, math.pi))),
            gripper=1.0,
        )
        world = WorldState(robot=robot, objects=tuple(objects), held_object=None,
                           progress=0, step_count=0)
        if _expert_solves(task, world):
            return world


def normalize_state(s: RobotState) -> np.ndarray:
    """Map a robot state to [-1, 1] per dimension using workspace bounds."""
    return np.array([
        2.0 * s.x - 1.0,
        2.0 * s.y - 1.0,
        s.theta / math.pi,
        2.0 * s.gripper - 1.0,
    ])


class Environment:
    """Mutable wrapper pairing a task with a world; guards double-stepping."""

    def __init__(self, task: TaskSpec, world: WorldState):
        self.task = task
        self.world = world
        self.done = task_complete(world, task)

    @staticmethod
    def sample(stream: Stream, family: str | None = None) -> "Environment":
        task = sample_task(stream.child("task"), family)
        world = sample_world(stream.child("world"), task)
        return Environment(task, world)

    def step(self, action: Action) -> bool:
        if self.done:
            raise EpisodeDoneError("episode already finished")
        self.world, self.done = env_step(self.world, action, self.task)
        return self.done

    def success(self) -> bool:
        return check_success(self.world, self.task)
