"""Synthetic planar manipulation world.

A mobile base with a single extendable arm must drive to an object, align
its tip, and close its fingers to pick the object up. Kinematics are pure
integrations (no contact dynamics); the grasp test is geometric. The world
only ever reads an embodiment's active action dimensions, so junk in padded
slots cannot leak into the state.

Also hosts the scripted experts used for dataset generation, the trajectory
file format, and the evaluation loop with its mobility/interaction failure
split.
"""
from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, replace

import numpy as np

from .embodiment import (
    EmbodimentRegistry,
    EmbodimentSpec,
    UnifiedActionLayout,
    padding_mask,
)
from .util import canonical_hash

N_TASKS = 5
OBS_DIM = 1 + N_TASKS + 2          # task one-hot, relative object position, radius
PROPRIO_DIM = 13                   # pose(4), extension, wrist(2), fingers(6)
DATASET_FORMAT_VERSION = 1
EXPERT_VERSION = 1


class WorldError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldParams:
    dt: float = 0.05
    v_max: float = 2.0             # base translation, units/s
    w_max: float = 2.0             # yaw rate, rad/s
    ext_rate: float = 2.0          # arm extension fraction/s
    wrist_rate: float = 2.0
    finger_rate: float = 3.0
    arm_offset: float = 0.3        # tip distance from base at zero extension
    pitch_reach_loss: float = 0.3  # fractional reach lost at full pitch
    wrist_lateral: float = 0.15    # lateral tip shift at full roll
    finger_len: float = 0.5
    grip_margin: float = 0.05
    gripper_close_threshold: float = 0.8
    hold_steps_needed: int = 10
    episode_cap: int = 200
    world_scale: float = 5.0       # normalization for positions
    max_radius: float = 0.3        # normalization for object radii

    def ext_max(self, spec: EmbodimentSpec) -> float:
        return spec.reach_radius - self.arm_offset

    def reach_threshold(self, spec: EmbodimentSpec) -> float:
        return spec.reach_radius + 0.1


@dataclass(frozen=True)
class TaskSpec:
    """Pick-up variant: object radius plus a spawn annulus sector."""

    id: int
    radius: float
    spawn_dist: tuple[float, float] = (2.0, 3.5)
    spawn_angle: tuple[float, float] = (0.0, 2 * np.pi)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "radius": self.radius,
            "spawn_dist": list(self.spawn_dist),
            "spawn_angle": list(self.spawn_angle),
        }


def default_tasks() -> list[TaskSpec]:
    radii = [0.12, 0.16, 0.20, 0.24, 0.28]
    tasks = []
    for i, r in enumerate(radii):
        center = 2 * np.pi * i / N_TASKS
        tasks.append(
            TaskSpec(
                id=i,
                radius=r,
                spawn_dist=(2.0, 3.5),
                spawn_angle=(center - 0.6, center + 0.6),
            )
        )
    return tasks


@dataclass
class WorldState:
    base_xy: np.ndarray            # (2,)
    yaw: float
    ext: float                     # arm extension fraction in [0, 1]
    pitch: float                   # wrist, normalized [-1, 1]
    roll: float
    fingers: np.ndarray            # per active finger, closure in [0, 1]
    obj_xy: np.ndarray             # (2,)
    obj_radius: float
    grasped: bool = False
    held_steps: int = 0

    def copy(self) -> "WorldState":
        return replace(self, base_xy=self.base_xy.copy(),
                       fingers=self.fingers.copy(), obj_xy=self.obj_xy.copy())


def n_fingers(spec: EmbodimentSpec) -> int:
    return int(spec.active_dims[2] + spec.active_dims[3])


def init_state(
    spec: EmbodimentSpec, task: TaskSpec, rng: np.random.Generator
) -> WorldState:
    yaw = float(rng.uniform(-np.pi, np.pi))
    dist = float(rng.uniform(*task.spawn_dist))
    ang = float(rng.uniform(*task.spawn_angle))
    return WorldState(
        base_xy=np.zeros(2),
        yaw=yaw,
        ext=0.0,
        pitch=0.0,
        roll=0.0,
        fingers=np.zeros(n_fingers(spec)),
        obj_xy=dist * np.array([np.cos(ang), np.sin(ang)]),
        obj_radius=task.radius,
    )


def tip_position(state: WorldState, spec: EmbodimentSpec, wp: WorldParams) -> np.ndarray:
    u = np.array([np.cos(state.yaw), np.sin(state.yaw)])
    perp = np.array([-np.sin(state.yaw), np.cos(state.yaw)])
    reach = wp.arm_offset + state.ext * wp.ext_max(spec) * (
        1.0 - wp.pitch_reach_loss * state.pitch**2
    )
    return state.base_xy + reach * u + wp.wrist_lateral * state.roll * perp


def fingertip_positions(
    state: WorldState, spec: EmbodimentSpec, wp: WorldParams
) -> np.ndarray:
    """(n, 2) fingertip coordinates; a single-closure gripper gets two jaws."""
    tip = tip_position(state, spec, wp)
    n = n_fingers(spec)
    if n == 1:
        half = 0.5 * wp.finger_len * (1.0 - state.fingers[0])
        perp = np.array([-np.sin(state.yaw), np.cos(state.yaw)])
        return np.stack([tip + half * perp, tip - half * perp])
    angles = state.yaw + 2 * np.pi * np.arange(n) / n
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return tip + wp.finger_len * (1.0 - state.fingers)[:, None] * dirs


def fingertip_features(
    state: WorldState, spec: EmbodimentSpec, wp: WorldParams
) -> np.ndarray:
    """Positions of the two most distant fingertips, flattened to 4 reals."""
    tips = fingertip_positions(state, spec, wp)
    if len(tips) == 2:
        pair = (0, 1)
    else:
        best, pair = -1.0, (0, 1)
        for i in range(len(tips)):
            for j in range(i + 1, len(tips)):
                d = float(np.sum((tips[i] - tips[j]) ** 2))
                if d > best:
                    best, pair = d, (i, j)
    return np.concatenate([tips[pair[0]], tips[pair[1]]])


def _finger_action_slices(spec: EmbodimentSpec, layout: UnifiedActionLayout):
    """Unified-action indices feeding each active finger, proximal first."""
    idx = []
    for w in (2, 3):
        start, _ = layout.windows[w]
        idx.extend(range(start, start + spec.active_dims[w]))
    return np.array(idx, dtype=int)


def _grasp_condition(state: WorldState, spec: EmbodimentSpec, wp: WorldParams) -> bool:
    tip = tip_position(state, spec, wp)
    near = np.linalg.norm(tip - state.obj_xy) <= state.obj_radius + wp.grip_margin
    if not near:
        return False
    if n_fingers(spec) == 1:
        return bool(state.fingers[0] >= wp.gripper_close_threshold)
    tips = fingertip_positions(state, spec, wp)
    dists = np.linalg.norm(tips - state.obj_xy, axis=1)
    return int(np.sum(dists <= state.obj_radius + wp.grip_margin)) >= 2


def step(
    state: WorldState,
    unified_action: np.ndarray,
    spec: EmbodimentSpec,
    layout: UnifiedActionLayout,
    wp: WorldParams = WorldParams(),
) -> WorldState:
    """Deterministic kinematic update; padded action dims are never read."""
    a = np.asarray(unified_action, dtype=np.float64)
    if a.shape != (layout.total_dim,):
        raise WorldError(f"action shape {a.shape} != ({layout.total_dim},)")
    if not np.all(np.isfinite(a[padding_mask(spec, layout)])):
        raise WorldError("action contains non-finite entries in active dims")
    a = np.where(padding_mask(spec, layout), a, 0.0)
    a = np.clip(a, -1.0, 1.0)

    new = state.copy()
    # translation commands are body-frame: a[0] forward, a[1] lateral
    c, s = np.cos(state.yaw), np.sin(state.yaw)
    world_vel = np.array([c * a[0] - s * a[1], s * a[0] + c * a[1]])
    new.base_xy = state.base_xy + world_vel * wp.v_max * wp.dt
    new.yaw = float((state.yaw + a[2] * wp.w_max * wp.dt + np.pi) % (2 * np.pi) - np.pi)
    new.ext = float(np.clip(state.ext + a[3] * wp.ext_rate * wp.dt, 0.0, 1.0))
    new.pitch = float(np.clip(state.pitch + a[4] * wp.wrist_rate * wp.dt, -1.0, 1.0))
    new.roll = float(np.clip(state.roll + a[5] * wp.wrist_rate * wp.dt, -1.0, 1.0))
    fidx = _finger_action_slices(spec, layout)
    new.fingers = np.clip(state.fingers + a[fidx] * wp.finger_rate * wp.dt, 0.0, 1.0)

    if state.grasped:
        # Object rides the tip while the grip condition keeps holding.
        new.obj_xy = tip_position(new, spec, wp).copy()
        if _grasp_condition(new, spec, wp):
            new.grasped = True
            new.held_steps = state.held_steps + 1
        else:
            new.grasped = False
            new.held_steps = 0
            new.obj_xy = state.obj_xy.copy()
    else:
        new.grasped = _grasp_condition(new, spec, wp)
        new.held_steps = 1 if new.grasped else 0
        if new.grasped:
            new.obj_xy = tip_position(new, spec, wp).copy()
    return new


# ---------------------------------------------------------------------------
# Observation encodings
# ---------------------------------------------------------------------------

def observe(state: WorldState, task: TaskSpec, wp: WorldParams = WorldParams()) -> np.ndarray:
    """Task/object context vector (stands in for an upstream encoder).

    The object offset is expressed in the base frame, matching the
    body-frame velocity commands.
    """
    onehot = np.zeros(N_TASKS)
    onehot[task.id] = 1.0
    rel = _to_body(state.obj_xy - state.base_xy, state.yaw) / wp.world_scale
    return np.concatenate([onehot, rel, [state.obj_radius / wp.max_radius]])


def proprioception(
    state: WorldState, spec: EmbodimentSpec, layout: UnifiedActionLayout,
    wp: WorldParams = WorldParams(),
) -> np.ndarray:
    """Normalized joint/base state; inactive finger slots read 0."""
    fingers = np.zeros(6)
    cursor = 0
    for w in (2, 3):
        start, _ = layout.windows[w]
        cnt = spec.active_dims[w]
        base_slot = layout.windows[2][0]
        fingers[start - base_slot : start - base_slot + cnt] = (
            2.0 * state.fingers[cursor : cursor + cnt] - 1.0
        )
        cursor += cnt
    return np.concatenate([
        state.base_xy / wp.world_scale,
        [np.cos(state.yaw), np.sin(state.yaw)],
        [2.0 * state.ext - 1.0, state.pitch, state.roll],
        fingers,
    ])


# ---------------------------------------------------------------------------
# Scripted expert
# ---------------------------------------------------------------------------

def _wrap_angle(a: float) -> float:
    return (a + np.pi) % (2 * np.pi) - np.pi


def _to_body(vec: np.ndarray, yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([c * vec[0] + s * vec[1], -s * vec[0] + c * vec[1]])


def scripted_expert(
    state: WorldState,
    spec: EmbodimentSpec,
    task: TaskSpec,
    layout: UnifiedActionLayout,
    wp: WorldParams = WorldParams(),
) -> np.ndarray:
    """Phase policy: approach, align tip, staged finger closure, hold.

    Dexterous hands close their two distal-most fingers first; the gripper
    has a single closure channel. Emits unified actions with exact zeros in
    padded dimensions.
    """
    a = np.zeros(layout.total_dim)
    to_obj = state.obj_xy - state.base_xy
    dist = float(np.linalg.norm(to_obj))
    yaw_err = _wrap_angle(float(np.arctan2(to_obj[1], to_obj[0])) - state.yaw)
    tip = tip_position(state, spec, wp)
    tip_err = state.obj_xy - tip
    tip_dist = float(np.linalg.norm(tip_err))
    fidx = _finger_action_slices(spec, layout)
    nf = len(fidx)

    if state.grasped:
        a[fidx] = 0.05  # keep closed; everything else stays still
        return a

    a[2] = np.clip(4.0 * yaw_err, -1.0, 1.0)
    a[4] = np.clip(-3.0 * state.pitch, -1.0, 1.0)
    a[5] = np.clip(-3.0 * state.roll, -1.0, 1.0)

    standoff = wp.arm_offset + 0.6 * wp.ext_max(spec)
    if dist > standoff + 0.35 or abs(yaw_err) > 0.35:
        # Drive phase: close distance, keep fingers open and arm retracted.
        vel = to_obj / max(dist, 1e-9) * np.clip(2.0 * (dist - standoff), -1.0, 1.0)
        a[:2] = np.clip(_to_body(vel, state.yaw), -1.0, 1.0)
        a[3] = np.clip(-4.0 * state.ext, -1.0, 1.0)
        a[fidx] = -1.0
        return a

    # Alignment phase: steer the tip onto the object center.
    a[:2] = np.clip(_to_body(3.0 * tip_err, state.yaw), -1.0, 1.0)
    ext_target = np.clip((dist - wp.arm_offset) / wp.ext_max(spec), 0.0, 1.0)
    a[3] = np.clip(5.0 * (ext_target - state.ext), -1.0, 1.0)

    if tip_dist <= 0.6 * (state.obj_radius + wp.grip_margin):
        if nf == 1:
            a[fidx] = 1.0
        else:
            distal_two = fidx[-2:]
            rest = fidx[:-2]
            closure = state.fingers
            a[distal_two] = 1.0
            if np.all(closure[-2:] >= 0.7):
                a[rest] = 1.0
            else:
                a[rest] = -0.2  # keep the rest open until the pinch is set
    else:
        a[fidx] = -1.0
    return a


# ---------------------------------------------------------------------------
# Episodes, trajectories, datasets
# ---------------------------------------------------------------------------

def reconstruct_state(
    obs: np.ndarray,
    proprio: np.ndarray,
    spec: EmbodimentSpec,
    wp: WorldParams = WorldParams(),
) -> WorldState:
    """Invert the observation/proprioception encodings back into a state.

    The grasp flag is not observable and is re-derived geometrically;
    held_steps resets to 0 (the scripted expert never reads it).
    """
    base = np.asarray(proprio[:2]) * wp.world_scale
    yaw = float(np.arctan2(proprio[3], proprio[2]))
    fingers6 = (np.asarray(proprio[7:13]) + 1.0) / 2.0
    active = []
    for slot, w in ((0, 2), (3, 3)):
        active.extend(fingers6[slot : slot + spec.active_dims[w]])
    rel_body = np.asarray(obs[N_TASKS : N_TASKS + 2]) * wp.world_scale
    c, s = np.cos(yaw), np.sin(yaw)
    rel_world = np.array([c * rel_body[0] - s * rel_body[1],
                          s * rel_body[0] + c * rel_body[1]])
    state = WorldState(
        base_xy=base,
        yaw=yaw,
        ext=float((proprio[4] + 1.0) / 2.0),
        pitch=float(proprio[5]),
        roll=float(proprio[6]),
        fingers=np.asarray(active),
        obj_xy=base + rel_world,
        obj_radius=float(obs[N_TASKS + 2]) * wp.max_radius,
    )
    state.grasped = _grasp_condition(state, spec, wp)
    return state


def expert_chunk_policy(
    spec: EmbodimentSpec,
    task: TaskSpec,
    layout: UnifiedActionLayout,
    horizon: int,
    wp: WorldParams = WorldParams(),
):
    """Chunk-interface wrapper around the scripted expert.

    Rebuilds the state from the encodings, then rolls the expert through the
    simulator for `horizon` steps to emit an open-loop chunk. Serves as the
    evaluation harness's upper-bound oracle policy.
    """

    def policy(obs, proprio, rng):
        del rng
        state = reconstruct_state(obs, proprio, spec, wp)
        chunk = np.zeros((horizon, layout.total_dim))
        for t in range(horizon):
            chunk[t] = scripted_expert(state, spec, task, layout, wp)
            state = step(state, chunk[t], spec, layout, wp)
        return chunk

    return policy


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    failure_class: str  # "none" | "mobility" | "interaction"
    steps: int
    min_effector_object_distance: float


@dataclass
class Trajectory:
    embodiment_id: int
    task_key: int
    observations: np.ndarray  # (T, OBS_DIM)
    proprios: np.ndarray      # (T, PROPRIO_DIM)
    actions: np.ndarray       # (T, D)
    seed: int
    expert_version: int = EXPERT_VERSION

    def __len__(self) -> int:
        return len(self.actions)

    def to_record(self) -> dict:
        return {
            "embodiment_id": self.embodiment_id,
            "task_key": self.task_key,
            "observations": self.observations.tolist(),
            "proprios": self.proprios.tolist(),
            "actions": self.actions.tolist(),
            "seed": self.seed,
            "expert_version": self.expert_version,
        }

    @classmethod
    def from_record(cls, d: dict) -> "Trajectory":
        return cls(
            embodiment_id=int(d["embodiment_id"]),
            task_key=int(d["task_key"]),
            observations=np.asarray(d["observations"], dtype=np.float64),
            proprios=np.asarray(d["proprios"], dtype=np.float64),
            actions=np.asarray(d["actions"], dtype=np.float64),
            seed=int(d["seed"]),
            expert_version=int(d.get("expert_version", EXPERT_VERSION)),
        )


def _classify(success: bool, min_dist: float, spec: EmbodimentSpec,
              wp: WorldParams) -> str:
    if success:
        return "none"
    return "mobility" if min_dist > wp.reach_threshold(spec) else "interaction"


def rollout_expert(
    spec: EmbodimentSpec,
    task: TaskSpec,
    layout: UnifiedActionLayout,
    rng: np.random.Generator,
    wp: WorldParams = WorldParams(),
    record: bool = False,
):
    """Run the scripted expert for one episode.

    Returns (EpisodeResult, Trajectory | None); the trajectory is recorded
    only on request and includes every step up to termination.
    """
    state = init_state(spec, task, rng)
    obs_rows, prop_rows, act_rows = [], [], []
    min_dist = float(np.linalg.norm(tip_position(state, spec, wp) - state.obj_xy))
    steps = 0
    success = False
    for t in range(wp.episode_cap):
        action = scripted_expert(state, spec, task, layout, wp)
        if record:
            obs_rows.append(observe(state, task, wp))
            prop_rows.append(proprioception(state, spec, layout, wp))
            act_rows.append(action)
        state = step(state, action, spec, layout, wp)
        steps = t + 1
        min_dist = min(min_dist, float(np.linalg.norm(
            tip_position(state, spec, wp) - state.obj_xy)))
        if state.held_steps >= wp.hold_steps_needed:
            success = True
            break
    result = EpisodeResult(
        success=success,
        failure_class=_classify(success, min_dist, spec, wp),
        steps=steps,
        min_effector_object_distance=min_dist,
    )
    traj = None
    if record:
        traj = Trajectory(
            embodiment_id=spec.id,
            task_key=task.id,
            observations=np.asarray(obs_rows),
            proprios=np.asarray(prop_rows),
            actions=np.asarray(act_rows),
            seed=0,
        )
    return result, traj


def generate_dataset(
    tasks: list[TaskSpec],
    registry: EmbodimentRegistry,
    trajs_per_pair: int,
    seed: int,
    wp: WorldParams = WorldParams(),
    max_attempts: int = 50,
) -> list[Trajectory]:
    """Successful expert episodes only; failures are re-rolled on fresh seeds."""
    layout = registry.layout
    out = []
    for task in tasks:
        for spec in registry.specs():
            kept = 0
            attempt = 0
            while kept < trajs_per_pair:
                if attempt >= trajs_per_pair + max_attempts:
                    raise WorldError(
                        f"expert failed to produce {trajs_per_pair} successes for "
                        f"task {task.id} / embodiment {spec.name} "
                        f"within {max_attempts} extra attempts"
                    )
                ep_seed = [int(seed), int(task.id), int(spec.id), attempt]
                attempt += 1
                result, traj = rollout_expert(
                    spec, task, layout, np.random.default_rng(ep_seed), wp,
                    record=True,
                )
                if not result.success:
                    continue
                traj.seed = attempt - 1
                out.append(traj)
                kept += 1
    return out


def dataset_header(registry: EmbodimentRegistry, tasks: list[TaskSpec],
                   seed: int) -> dict:
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "layout_hash": canonical_hash(registry.layout.to_dict()),
        "layout": registry.layout.to_dict(),
        "embodiments": [s.to_dict() for s in registry.specs()],
        "tasks": [t.to_dict() for t in tasks],
        "seed": seed,
        "expert_version": EXPERT_VERSION,
    }


def save_dataset(path, header: dict, trajectories: list[Trajectory]) -> None:
    """Header line then one JSON record per trajectory, gzip with fixed mtime."""
    with open(path, "wb") as raw:
        # fixed mtime and empty name keep regenerated files byte-identical
        with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for traj in trajectories:
                fh.write(json.dumps(traj.to_record(), sort_keys=True).encode() + b"\n")


def load_dataset(path):
    with gzip.open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise WorldError(
                f"unsupported dataset format {header.get('format_version')!r}"
            )
        trajectories = [Trajectory.from_record(json.loads(line))
                        for line in fh if line.strip()]
    return header, trajectories


def replay_to_success(
    traj: Trajectory,
    registry: EmbodimentRegistry,
    tasks: list[TaskSpec],
    dataset_seed: int,
    wp: WorldParams = WorldParams(),
) -> bool:
    """Re-execute a stored trajectory's actions; True if the hold completes."""
    spec = registry.get(traj.embodiment_id)
    task = tasks[traj.task_key]
    rng = np.random.default_rng(
        [int(dataset_seed), int(task.id), int(spec.id), int(traj.seed)]
    )
    state = init_state(spec, task, rng)
    for action in traj.actions:
        state = step(state, action, spec, registry.layout, wp)
        if state.held_steps >= wp.hold_steps_needed:
            return True
    return False


def evaluate(
    policy,
    spec: EmbodimentSpec,
    task: TaskSpec,
    episodes: int,
    seed: int,
    layout: UnifiedActionLayout,
    horizon: int,
    wp: WorldParams = WorldParams(),
    replan_every: int | None = None,
    collect_features: bool = False,
):
    """Closed-loop evaluation of a chunk policy.

    `policy(obs, proprio, rng) -> (H, D) chunk`; the chunk is executed for
    `replan_every` steps (default H // 2) before the policy is queried again.
    Success is a grasp held for the required number of steps. Returns a dict
    with the success rate, the failure histogram, per-episode results, and
    (optionally) fingertip features of each final state.
    """
    if replan_every is None:
        replan_every = max(horizon // 2, 1)
    results = []
    features = []
    for e in range(episodes):
        rng = np.random.default_rng([int(seed), int(e)])
        state = init_state(spec, task, rng)
        min_dist = float(np.linalg.norm(tip_position(state, spec, wp) - state.obj_xy))
        chunk = None
        success = False
        steps = 0
        for t in range(wp.episode_cap):
            if t % replan_every == 0:
                chunk = np.asarray(
                    policy(observe(state, task, wp),
                           proprioception(state, spec, layout, wp), rng)
                )
                if chunk.shape != (horizon, layout.total_dim):
                    raise WorldError(
                        f"policy chunk shape {chunk.shape} != "
                        f"({horizon}, {layout.total_dim})"
                    )
            state = step(state, chunk[t % replan_every], spec, layout, wp)
            steps = t + 1
            min_dist = min(min_dist, float(np.linalg.norm(
                tip_position(state, spec, wp) - state.obj_xy)))
            if state.held_steps >= wp.hold_steps_needed:
                success = True
                break
        results.append(EpisodeResult(
            success=success,
            failure_class=_classify(success, min_dist, spec, wp),
            steps=steps,
            min_effector_object_distance=min_dist,
        ))
        if collect_features:
            features.append(fingertip_features(state, spec, wp))
    n_success = sum(r.success for r in results)
    histogram = {
        "mobility": sum(r.failure_class == "mobility" for r in results),
        "interaction": sum(r.failure_class == "interaction" for r in results),
    }
    out = {
        "episodes": episodes,
        "successes": n_success,
        "success_rate": n_success / episodes if episodes else 0.0,
        "failures": histogram,
        "results": results,
    }
    if collect_features:
        out["features"] = np.asarray(features)
    return out
