###
# Licensed under the Apache License, Version 2.0 (the "License");
# You may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
###
"""Deterministic 2D tabletop pick-and-place world with a scripted expert.

Coordinates are normalized image coordinates: x grows to the right and y grows
downwards, so "up" on the rendered frame is a negative dy.
"""

import base64
import dataclasses
import json
import logging
import typing as t

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "v1"

FAMILIES = ("single_object", "distractor", "two_step_sort")
SHAPES = ("circle", "square", "triangle")
PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "purple": (0.6, 0.2, 0.8),
    "orange": (1.0, 0.55, 0.0),
}
COLORS = tuple(PALETTE)

IMAGE_SIZE = 24
PATCH_SIZE = 6
OBJECT_EXTENT = 0.05
BIN_RADIUS = 0.08
GRASP_RADIUS = 0.05
MAX_DELTA = 0.1
MIN_SEPARATION = 0.15
MAX_PLACEMENT_ATTEMPTS = 100
EPISODE_CAP = 120
EXPERT_STEP_BOUND = 60
# the expert closes/opens once it is this close to its target
EXPERT_TOLERANCE = 0.01


class SeedError(RuntimeError):
    pass


class ExpertError(RuntimeError):
    pass


Point = t.Tuple[float, float]


@dataclasses.dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    position: Point

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclasses.dataclass(frozen=True)
class Bin:
    color: str
    position: Point
    radius: float = BIN_RADIUS

    @property
    def name(self) -> str:
        return f"{self.color} bin"


@dataclasses.dataclass(frozen=True)
class Gripper:
    position: Point
    closed: bool = False
    held_object: t.Optional[int] = None


@dataclasses.dataclass(frozen=True)
class WorldState:
    objects: t.Tuple[SceneObject, ...]
    bins: t.Tuple[Bin, ...]
    gripper: Gripper
    step_count: int = 0
    # (object index, bin index) placements required for success, in order
    goals: t.Tuple[t.Tuple[int, int], ...] = ()
    done: bool = False


@dataclasses.dataclass(frozen=True)
class Action:
    dx: float = 0.0
    dy: float = 0.0
    gripper_cmd: float = 0.0

    def clamped(self) -> "Action":
        return Action(
            float(np.clip(self.dx, -MAX_DELTA, MAX_DELTA)),
            float(np.clip(self.dy, -MAX_DELTA, MAX_DELTA)),
            float(np.clip(self.gripper_cmd, -1.0, 1.0)),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.gripper_cmd], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Action":
        dx, dy, cmd = (float(v) for v in values)
        return cls(dx, dy, cmd)


@dataclasses.dataclass(frozen=True)
class Observation:
    rgb: np.ndarray

    def __eq__(self, other):
        return isinstance(other, Observation) and np.array_equal(self.rgb, other.rgb)


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    instruction: str
    target_object: int
    target_bin: int
    goals: t.Tuple[t.Tuple[int, int], ...] = ()


@dataclasses.dataclass
class Trajectory:
    episode_id: int
    family: str
    seed: int
    task: TaskSpec
    initial_state: WorldState
    observations: np.ndarray  # [T, 24, 24, 3] float32
    ee_positions: np.ndarray  # [T, 2], before the frame's action
    # gripper state commanded at the frame, i.e. after its action
    gripper_closed: np.ndarray  # [T] bool
    held: np.ndarray  # [T] int, -1 when empty
    actions: np.ndarray  # [T, 3], action applied at the frame

    def __len__(self):
        return len(self.actions)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

_pixel_centers = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
_grid_x, _grid_y = np.meshgrid(_pixel_centers, _pixel_centers)


def _shape_mask(shape: str, position: Point) -> np.ndarray:
    dx = _grid_x - position[0]
    dy = _grid_y - position[1]
    if shape == "circle":
        return dx * dx + dy * dy <= OBJECT_EXTENT ** 2
    if shape == "square":
        return (np.abs(dx) <= OBJECT_EXTENT) & (np.abs(dy) <= OBJECT_EXTENT)
    if shape == "triangle":
        # apex at the top (negative y), base at the bottom
        half_width = (dy + OBJECT_EXTENT) / 2.0
        return (np.abs(dy) <= OBJECT_EXTENT) & (np.abs(dx) <= half_width)
    raise ValueError(f"Unknown shape: {shape}")


def render(state: WorldState) -> Observation:
    rgb = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 0.2, dtype=np.float32)
    for b in state.bins:
        dist = np.hypot(_grid_x - b.position[0], _grid_y - b.position[1])
        ring = (dist <= b.radius) & (dist >= b.radius - 0.025)
        rgb[ring] = PALETTE[b.color]
    for obj in state.objects:
        rgb[_shape_mask(obj.shape, obj.position)] = PALETTE[obj.color]
    gx, gy = state.gripper.position
    col = min(int(gx * IMAGE_SIZE), IMAGE_SIZE - 1)
    row = min(int(gy * IMAGE_SIZE), IMAGE_SIZE - 1)
    if state.gripper.closed:
        rgb[max(row - 1, 0): row + 2, max(col - 1, 0): col + 2] = 1.0
    else:
        rgb[row, max(col - 1, 0): col + 2] = 1.0
        rgb[max(row - 1, 0): row + 2, col] = 1.0
    return Observation(rgb)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


def _distance(a: Point, b: Point) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _instruction(objects, bins, goals) -> str:
    parts = [f"put the {objects[o].name} into the {bins[b].name}" for o, b in goals]
    return " then ".join(parts)


def _sample_positions(rng: np.random.Generator, count: int, seed: int) -> t.List[Point]:
    placed: t.List[Point] = []
    for _ in range(count):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            candidate = tuple(float(v) for v in rng.uniform(0.1, 0.9, size=2))
            if all(_distance(candidate, p) >= MIN_SEPARATION for p in placed):
                placed.append(candidate)
                break
        else:
            raise SeedError(f"placement failed after {MAX_PLACEMENT_ATTEMPTS} attempts for seed {seed}")
    return placed


def reset(task_family: str, seed: int) -> t.Tuple[WorldState, TaskSpec, Observation]:
    if task_family not in FAMILIES:
        raise ValueError(f"Unknown task family: {task_family}")
    rng = np.random.default_rng(seed)

    if task_family == "single_object":
        n_objects, n_bins = 1, 1
    elif task_family == "distractor":
        n_objects, n_bins = int(rng.integers(2, 4)), 2
    else:
        n_objects, n_bins = 2, 2

    # distinct (color, shape) pairs keep every object uniquely nameable
    combos = [(c, s) for c in COLORS for s in SHAPES]
    picks = rng.choice(len(combos), size=n_objects, replace=False)
    bin_colors = rng.choice(len(COLORS), size=n_bins, replace=False)

    positions = _sample_positions(rng, n_objects + n_bins, seed)
    objects = tuple(
        SceneObject(shape=combos[p][1], color=combos[p][0], position=positions[i]) for i, p in enumerate(picks)
    )
    bins = tuple(Bin(color=COLORS[c], position=positions[n_objects + i]) for i, c in enumerate(bin_colors))

    if task_family == "two_step_sort":
        order = rng.permutation(2)
        goals = ((0, int(order[0])), (1, int(order[1])))
    else:
        goals = ((0, int(rng.integers(n_bins))),)

    gripper = Gripper(position=tuple(float(v) for v in rng.uniform(0.1, 0.9, size=2)))
    state = WorldState(objects=objects, bins=bins, gripper=gripper, goals=goals)
    task = TaskSpec(
        instruction=_instruction(objects, bins, goals),
        target_object=goals[0][0],
        target_bin=goals[0][1],
        goals=goals,
    )
    return state, task, render(state)


def is_success(state: WorldState) -> bool:
    for obj_index, bin_index in state.goals:
        if state.gripper.held_object == obj_index:
            return False
        b = state.bins[bin_index]
        if _distance(state.objects[obj_index].position, b.position) > b.radius:
            return False
    return bool(state.goals)


def step(state: WorldState, action: Action) -> t.Tuple[WorldState, Observation, bool]:
    if state.done:
        raise RuntimeError(f"step called on a terminal state (step {state.step_count})")
    action = action.clamped()
    gripper = state.gripper
    objects = list(state.objects)

    position = (
        float(np.clip(gripper.position[0] + action.dx, 0.0, 1.0)),
        float(np.clip(gripper.position[1] + action.dy, 0.0, 1.0)),
    )
    closed, held = gripper.closed, gripper.held_object

    if action.gripper_cmd > 0 and not closed:
        closed = True
        candidates = [
            (_distance(obj.position, position), i)
            for i, obj in enumerate(objects)
            if _distance(obj.position, position) <= GRASP_RADIUS
        ]
        if candidates:
            held = min(candidates)[1]
    elif action.gripper_cmd < 0 and closed:
        closed, held = False, None

    if held is not None:
        objects[held] = dataclasses.replace(objects[held], position=position)

    moved = dataclasses.replace(
        state,
        objects=tuple(objects),
        gripper=Gripper(position=position, closed=closed, held_object=held),
        step_count=state.step_count + 1,
    )
    success = is_success(moved)
    moved = dataclasses.replace(moved, done=success or moved.step_count >= EPISODE_CAP)
    return moved, render(moved), success


def _current_goal(state: WorldState) -> t.Tuple[int, int]:
    for obj_index, bin_index in state.goals:
        b = state.bins[bin_index]
        held = state.gripper.held_object == obj_index
        if held or _distance(state.objects[obj_index].position, b.position) > b.radius:
            return obj_index, bin_index
    raise ExpertError("all goals already satisfied")


def _toward(src: Point, dst: Point) -> t.Tuple[float, float]:
    return (
        float(np.clip(dst[0] - src[0], -MAX_DELTA, MAX_DELTA)),
        float(np.clip(dst[1] - src[1], -MAX_DELTA, MAX_DELTA)),
    )


def scripted_expert(state: WorldState, task: TaskSpec) -> Action:
    """Saturated proportional controller: reach, close, carry, open."""
    goals = task.goals or ((task.target_object, task.target_bin),)
    for obj_index, bin_index in goals:
        if not (0 <= obj_index < len(state.objects) and 0 <= bin_index < len(state.bins)):
            raise ExpertError(f"task references missing object {obj_index} or bin {bin_index}")
    if state.done:
        raise ExpertError(f"state is terminal at step {state.step_count}")

    obj_index, bin_index = _current_goal(state)
    gripper = state.gripper

    if gripper.held_object is not None and gripper.held_object != obj_index:
        return Action(gripper_cmd=-1.0)
    if gripper.held_object == obj_index:
        target = state.bins[bin_index].position
        if _distance(gripper.position, target) <= EXPERT_TOLERANCE:
            return Action(gripper_cmd=-1.0)
        return Action(*_toward(gripper.position, target))
    if gripper.closed:
        # closed on nothing
        return Action(gripper_cmd=-1.0)
    target = state.objects[obj_index].position
    if _distance(gripper.position, target) <= EXPERT_TOLERANCE:
        return Action(gripper_cmd=1.0)
    return Action(*_toward(gripper.position, target))


# ---------------------------------------------------------------------------
# demonstrations
# ---------------------------------------------------------------------------


def episode_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def rollout_expert(task_family: str, seed: int, episode_id: int = 0) -> Trajectory:
    state, task, obs = reset(task_family, seed)
    initial = state
    frames, ee, closed, held, actions = [], [], [], [], []
    success = False
    while not success:
        if state.done:
            raise ExpertError(f"expert failed to solve {task_family} seed {seed} within {EPISODE_CAP} steps")
        action = scripted_expert(state, task).clamped()
        frames.append(obs.rgb)
        ee.append(state.gripper.position)
        actions.append(action.as_array())
        state, obs, success = step(state, action)
        closed.append(state.gripper.closed)
        held.append(-1 if state.gripper.held_object is None else state.gripper.held_object)
    return Trajectory(
        episode_id=episode_id,
        family=task_family,
        seed=seed,
        task=task,
        initial_state=initial,
        observations=np.stack(frames).astype(np.float32),
        ee_positions=np.array(ee, dtype=np.float64),
        gripper_closed=np.array(closed, dtype=bool),
        held=np.array(held, dtype=np.int64),
        actions=np.stack(actions),
    )


def generate_demos(n: int, family: str, seed: int, start_id: int = 0) -> t.List[t.Tuple[Trajectory, TaskSpec]]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    demos = []
    for i in range(n):
        traj = rollout_expert(family, episode_seed(seed, i), episode_id=start_id + i)
        demos.append((traj, traj.task))
    lengths = [len(traj) for traj, _ in demos]
    logger.info("generated %d %s demos, mean length %.1f", n, family, float(np.mean(lengths)))
    return demos


def replay(traj: Trajectory) -> t.Tuple[t.List[WorldState], t.List[Observation]]:
    """States and observations before each recorded action, plus the final pair."""
    state = traj.initial_state
    states, observations = [state], [render(state)]
    for action in traj.actions:
        state, obs, _ = step(state, Action.from_array(action))
        states.append(state)
        observations.append(obs)
    return states, observations


def ground_truth_bbox(state: WorldState, object_index: int) -> t.Tuple[float, float, float, float]:
    if not 0 <= object_index < len(state.objects):
        raise IndexError(f"object index {object_index} outside scene of {len(state.objects)} objects")
    x, y = state.objects[object_index].position
    box = np.clip([x - OBJECT_EXTENT, y - OBJECT_EXTENT, x + OBJECT_EXTENT, y + OBJECT_EXTENT], 0.0, 1.0)
    return tuple(float(v) for v in box)


def format_bbox(box) -> str:
    return "[" + " ".join(f"{float(v):.4f}" for v in box) + "]"


# ---------------------------------------------------------------------------
# trajectory files
# ---------------------------------------------------------------------------


def encode_array(array: np.ndarray) -> t.Dict:
    data = np.ascontiguousarray(array, dtype="<f4")
    return {"shape": list(data.shape), "dtype": "<f4", "data": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_array(blob: t.Dict) -> np.ndarray:
    if blob.get("dtype") != "<f4":
        raise ValueError(f"unsupported frame dtype {blob.get('dtype')}")
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(blob["shape"]).astype(np.float32)


def _state_to_dict(state: WorldState) -> t.Dict:
    return dataclasses.asdict(state)


def _state_from_dict(d: t.Dict) -> WorldState:
    return WorldState(
        objects=tuple(SceneObject(o["shape"], o["color"], tuple(o["position"])) for o in d["objects"]),
        bins=tuple(Bin(b["color"], tuple(b["position"]), b["radius"]) for b in d["bins"]),
        gripper=Gripper(tuple(d["gripper"]["position"]), d["gripper"]["closed"], d["gripper"]["held_object"]),
        step_count=d["step_count"],
        goals=tuple(tuple(g) for g in d["goals"]),
        done=d["done"],
    )


def trajectory_to_json(traj: Trajectory) -> str:
    record = {
        "schema": SCHEMA_VERSION,
        "episode_id": traj.episode_id,
        "family": traj.family,
        "seed": traj.seed,
        "task": dataclasses.asdict(traj.task),
        "initial_state": _state_to_dict(traj.initial_state),
        "frames": encode_array(traj.observations),
        "ee_positions": traj.ee_positions.tolist(),
        "gripper_closed": traj.gripper_closed.tolist(),
        "held": traj.held.tolist(),
        "actions": traj.actions.tolist(),
    }
    return json.dumps(record, sort_keys=True)


def trajectory_from_json(line: str) -> Trajectory:
    d = json.loads(line)
    if d.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported trajectory schema {d.get('schema')}")
    task = d["task"]
    return Trajectory(
        episode_id=d["episode_id"],
        family=d["family"],
        seed=d["seed"],
        task=TaskSpec(task["instruction"], task["target_object"], task["target_bin"], tuple(tuple(g) for g in task["goals"])),
        initial_state=_state_from_dict(d["initial_state"]),
        observations=decode_array(d["frames"]),
        ee_positions=np.array(d["ee_positions"], dtype=np.float64),
        gripper_closed=np.array(d["gripper_closed"], dtype=bool),
        held=np.array(d["held"], dtype=np.int64),
        actions=np.array(d["actions"], dtype=np.float64).reshape(-1, 3),
    )


def write_trajectories(path: str, trajectories: t.Iterable[Trajectory]) -> int:
    count = 0
    with open(path, "w") as f:
        for traj in trajectories:
            f.write(trajectory_to_json(traj) + "\n")
            count += 1
    return count


def read_trajectories(path: str) -> t.List[Trajectory]:
    with open(path, "r") as f:
        return [trajectory_from_json(line) for line in f if line.strip()]
