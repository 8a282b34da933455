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
"""Anchor-first annotation of expert trajectories into structured CoT records.

Stages come from the gripper signal, boxes from noisy re-detections of the
simulator ground truth that are filtered and interpolated, and the text is
generated from templates once those anchors are fixed.
"""

import dataclasses
import json
import logging
import math
import re
import typing as t
import warnings

import numpy as np

from latentcrab import worldsim

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "v1"

STAGE_KINDS = ("pre_grasp", "grasp", "move", "release")
COMPASS = ("right", "up-right", "up", "up-left", "left", "down-left", "down", "down-right")
HOLD = "hold position"
CLOSING = "the robot is closing the gripper"
OPENING = "the robot is opening the gripper"

DEAD_ZONE = 0.005
DISPLACEMENT_THRESHOLD = 0.05
OUTLIER_THRESHOLD = 0.15
# largest change of any box coordinate between adjacent frames after smoothing
MAX_BOX_STEP = 0.2
NEIGHBORHOOD = 2
REASONING_WINDOW = 3
N_IMG_NEXT = 16
DEFAULT_HORIZON = 8

_SUBTASK_TEMPLATES = {
    "pre_grasp": "reach toward the {object}",
    "grasp": "grasp the {object}",
    "move": "carry the {object} toward the {bin}",
    "release": "place the {object} into the {bin}",
}

_COT_PATTERN = re.compile(
    r"^(?P<instruction>.+?) @ Subtask: (?P<subtask>[^.]+)\. "
    r"BBox: (?P<bbox>\[\d\.\d{4}(?: \d\.\d{4}){3}\])\. "
    r"Reasoning: (?P<reasoning>[^.]+)\."
    r"(?P<placeholders>(?: <img_next>)*)$"
)


class SchemaError(ValueError):
    def __init__(self, message: str, line: t.Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclasses.dataclass(frozen=True)
class Stage:
    kind: str
    start: int
    end: int
    # index of the pick-place cycle the stage belongs to
    cycle: int = 0

    @property
    def keyframes(self) -> t.Tuple[int, int]:
        return self.start, self.end

    def __len__(self):
        return self.end - self.start + 1


@dataclasses.dataclass(frozen=True)
class CoTRecord:
    instruction: str
    subtask: str
    bbox_text: str
    reasoning: str
    frame: int = 0
    future_frame: int = 0
    action_chunk: t.Optional[np.ndarray] = dataclasses.field(default=None, compare=False)

    def serialize(self) -> str:
        text = f"{self.instruction} @ Subtask: {self.subtask}. BBox: {self.bbox_text}. Reasoning: {self.reasoning}."
        return text + " <img_next>" * N_IMG_NEXT


@dataclasses.dataclass(eq=False)
class AnnotatedSample:
    episode_id: int
    cot: CoTRecord
    action_mask: np.ndarray  # [H] bool, False on padding
    stage: str
    goal_direction: str

    @property
    def instruction(self) -> str:
        return self.cot.instruction

    @property
    def frame(self) -> int:
        return self.cot.frame

    @property
    def future_frame(self) -> int:
        return self.cot.future_frame

    @property
    def action_chunk(self) -> np.ndarray:
        return self.cot.action_chunk

    @property
    def horizon(self) -> int:
        return len(self.action_mask)


@dataclasses.dataclass
class BBoxTrack:
    boxes: np.ndarray  # [T, 4] (x_min, y_min, x_max, y_max); NaN rows are absent
    confidence: np.ndarray  # [T]

    def __post_init__(self):
        self.boxes = np.array(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.confidence = np.array(self.confidence, dtype=np.float64).reshape(-1)
        if len(self.confidence) != len(self.boxes):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.confidence)} confidences")
        if np.any((self.confidence < 0.0) | (self.confidence > 1.0)):
            raise ValueError("confidence must lie in [0, 1]")

    @classmethod
    def from_boxes(cls, boxes: t.Sequence[t.Optional[t.Sequence[float]]], confidence=None) -> "BBoxTrack":
        rows = [[np.nan] * 4 if b is None else list(b) for b in boxes]
        if confidence is None:
            confidence = [0.0 if b is None else 1.0 for b in boxes]
        return cls(np.array(rows, dtype=np.float64), confidence)

    def __len__(self):
        return len(self.boxes)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.boxes).any(axis=1)

    def centers(self) -> np.ndarray:
        return np.stack([(self.boxes[:, 0] + self.boxes[:, 2]) / 2, (self.boxes[:, 1] + self.boxes[:, 3]) / 2], axis=1)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def toggle_indices(closed) -> np.ndarray:
    closed = np.asarray(closed, dtype=bool)
    return np.flatnonzero(closed[1:] != closed[:-1]) + 1


def _first_departure(positions: np.ndarray, start: int, end: int) -> t.Optional[int]:
    origin = positions[start]
    for frame in range(start + 1, end + 1):
        if np.linalg.norm(positions[frame] - origin) > DISPLACEMENT_THRESHOLD:
            return frame
    return None


def segment_gripper_signal(closed, positions=None) -> t.Tuple[t.List[Stage], t.List[str]]:
    """Split a gripper signal into stages, returning the stages and any warnings.

    Open spans are pre_grasp (at the start) or release; closed spans are grasp.
    With positions, a closed span switches to move once the gripper (and so
    the held object) leaves the grasp point, and an open span after a release
    switches to pre_grasp once the gripper leaves the release point.
    """
    closed = np.asarray(closed, dtype=bool)
    if closed.ndim != 1 or len(closed) < 2:
        raise ValueError(f"gripper signal needs at least 2 frames, got shape {closed.shape}")
    if positions is not None:
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (len(closed), 2):
            raise ValueError(f"positions shape {positions.shape} does not match {len(closed)} frames")

    toggles = toggle_indices(closed)
    edges = [0, *toggles.tolist(), len(closed)]
    stages: t.List[Stage] = []
    cycle = 0

    def push(kind: str, start: int, end: int):
        nonlocal cycle
        if stages and stages[-1].kind == "release" and kind in ("pre_grasp", "grasp"):
            cycle += 1
        stages.append(Stage(kind, start, end, cycle))

    for start, stop in zip(edges[:-1], edges[1:]):
        end = stop - 1
        if closed[start]:
            first, second = "grasp", "move"
        elif start == 0:
            push("pre_grasp", start, end)
            continue
        else:
            first, second = "release", "pre_grasp"
        split = None if positions is None else _first_departure(positions, start, end)
        if split is None:
            push(first, start, end)
        else:
            push(first, start, split - 1)
            push(second, split, end)

    notes = []
    if len(toggles) % 2:
        notes.append(f"odd number of gripper toggles ({len(toggles)}); trailing stage labeled {stages[-1].kind}")
    return stages, notes


def segment_by_gripper(traj: worldsim.Trajectory) -> t.List[Stage]:
    stages, notes = segment_gripper_signal(traj.gripper_closed, traj.ee_positions)
    for note in notes:
        warnings.warn(f"episode {traj.episode_id}: {note}", UserWarning)
    return stages


def stage_boundaries(stages: t.Sequence[Stage]) -> t.List[int]:
    return [s.start for s in stages[1:]]


# ---------------------------------------------------------------------------
# text generation
# ---------------------------------------------------------------------------


def compass_label(vector) -> t.Optional[str]:
    """8-way direction of a displacement in image coordinates, None inside the dead zone."""
    dx, dy = (float(v) for v in vector)
    if math.hypot(dx, dy) <= DEAD_ZONE:
        return None
    # y grows downwards on the frame
    angle = math.degrees(math.atan2(-dy, dx))
    return COMPASS[math.floor(angle / 45.0 + 0.5) % 8]


def _as_window(positions) -> np.ndarray:
    window = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(window) == 0:
        raise ValueError("motion window is empty")
    return window


def motion_descriptor(positions, goal=None, gripper_transition: t.Optional[str] = None) -> str:
    """Reasoning text for a short window of end-effector positions.

    The text describes the local motion only; ``global_direction`` gives the
    goal-relative label from the same window and goal.
    """
    window = _as_window(positions)
    if goal is not None and np.shape(goal) != (2,):
        raise ValueError(f"goal must be a 2D point, got shape {np.shape(goal)}")
    if gripper_transition == "close":
        return CLOSING
    if gripper_transition == "open":
        return OPENING
    if gripper_transition is not None:
        raise ValueError(f"Unknown gripper transition: {gripper_transition}")
    if len(window) < 2:
        return HOLD
    label = compass_label(window[-1] - window[-2])
    return HOLD if label is None else f"move {label}"


def global_direction(positions, goal) -> str:
    window = _as_window(positions)
    label = compass_label(np.asarray(goal, dtype=np.float64) - window[-1])
    return HOLD if label is None else f"move {label}"


def _bin_from_instruction(instruction: str, object_name: str) -> t.Optional[str]:
    match = re.search(rf"put the {re.escape(object_name)} into the (?P<bin>\w+ bin)", instruction)
    return match.group("bin") if match else None


def subtask_text(stage: Stage, task: worldsim.TaskSpec, object_name: str, bin_name: t.Optional[str] = None) -> str:
    if not object_name:
        raise ValueError("object name must be nonempty")
    template = _SUBTASK_TEMPLATES.get(stage.kind)
    if template is None:
        raise ValueError(f"Unknown stage kind: {stage.kind}")
    if "{bin}" in template:
        bin_name = bin_name or _bin_from_instruction(task.instruction, object_name)
        if not bin_name:
            raise ValueError(f"no bin for {object_name} in '{task.instruction}'")
    return template.format(object=object_name, bin=bin_name)


def _gripper_transition(closed: np.ndarray, frame: int, initially_closed: bool = False) -> t.Optional[str]:
    # latest toggle inside [frame - 2, frame]
    for j in range(frame, max(frame - REASONING_WINDOW, -1), -1):
        previous = closed[j - 1] if j > 0 else initially_closed
        if closed[j] != previous:
            return "close" if closed[j] else "open"
    return None


# ---------------------------------------------------------------------------
# box tracks
# ---------------------------------------------------------------------------


def filter_outliers(track: BBoxTrack) -> BBoxTrack:
    present = track.present
    if present.sum() < 3:
        warnings.warn(f"only {int(present.sum())} boxes present; outlier filter skipped", UserWarning)
        return BBoxTrack(track.boxes, track.confidence)

    centers = track.centers()
    keep = present.copy()
    for i in np.flatnonzero(present):
        lo, hi = max(0, i - NEIGHBORHOOD), min(len(track), i + NEIGHBORHOOD + 1)
        median = np.nanmedian(centers[lo:hi], axis=0)
        if np.linalg.norm(centers[i] - median) > OUTLIER_THRESHOLD:
            keep[i] = False

    boxes, confidence = track.boxes.copy(), track.confidence.copy()
    boxes[~keep] = np.nan
    confidence[~keep] = 0.0
    return BBoxTrack(boxes, confidence)


def interpolate_gaps(track: BBoxTrack) -> BBoxTrack:
    present = track.present
    if not present.any():
        raise ValueError("cannot interpolate a track with no boxes")
    frames = np.arange(len(track))
    known = np.flatnonzero(present)
    # np.interp holds the end values, which clamp-extends leading and trailing gaps
    boxes = np.stack([np.interp(frames, known, track.boxes[known, c]) for c in range(4)], axis=1)
    confidence = np.where(present, track.confidence, 0.0)
    return BBoxTrack(boxes, confidence)


def limit_box_steps(track: BBoxTrack, max_step: float = MAX_BOX_STEP) -> BBoxTrack:
    """Fill gaps, dropping observed boxes until no adjacent step exceeds ``max_step``.

    Of the two observed boxes around a steep stretch, the lower-confidence one
    goes; on a tie, the one farther from the track's median center.
    """
    boxes, confidence = track.boxes.copy(), track.confidence.copy()
    while True:
        filled = interpolate_gaps(BBoxTrack(boxes, confidence))
        if len(filled) < 2:
            return filled
        steep = np.flatnonzero(np.abs(np.diff(filled.boxes, axis=0)).max(axis=1) > max_step)
        if not len(steep):
            return filled
        observed = np.flatnonzero(~np.isnan(boxes).any(axis=1))
        left = observed[observed <= steep[0]].max()
        right = observed[observed > steep[0]].min()
        if confidence[left] != confidence[right]:
            drop = left if confidence[left] < confidence[right] else right
        else:
            centers = BBoxTrack(boxes, confidence).centers()
            median = np.nanmedian(centers, axis=0)
            far = [np.linalg.norm(centers[i] - median) for i in (left, right)]
            drop = right if far[1] >= far[0] else left
        boxes[drop] = np.nan
        confidence[drop] = 0.0


def smooth_track(track: BBoxTrack) -> BBoxTrack:
    return limit_box_steps(filter_outliers(track))


def perturb_track(
    true_boxes,
    rng: np.random.Generator,
    fraction: float = 0.1,
    magnitude: float = 0.3,
    anchor: t.Optional[int] = None,
) -> BBoxTrack:
    """Noisy re-detection of a ground-truth track.

    A ``fraction`` of frames is shifted by ``magnitude`` in a random direction
    and given confidence ``1 - magnitude``; the anchor frame is never shifted.
    """
    boxes = np.array(true_boxes, dtype=np.float64).reshape(-1, 4)
    length = len(boxes)
    candidates = np.array([f for f in range(length) if f != anchor], dtype=np.int64)
    count = min(int(round(fraction * length)), len(candidates))
    frames = rng.choice(candidates, size=count, replace=False) if count else np.array([], dtype=np.int64)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=count)
    boxes[frames, 0::2] += (magnitude * np.cos(angles))[:, None]
    boxes[frames, 1::2] += (magnitude * np.sin(angles))[:, None]
    confidence = np.ones(length)
    confidence[frames] = 1.0 - magnitude
    return BBoxTrack(boxes, confidence)


def ensemble_track(candidates: t.Sequence[BBoxTrack]) -> BBoxTrack:
    """Keep the highest-confidence candidate after outlier filtering, then fill its gaps."""
    if not candidates:
        raise ValueError("ensemble needs at least one candidate track")
    filtered = [filter_outliers(c) for c in candidates]
    scores = [f.confidence[f.present].sum() / len(f) for f in filtered]
    best = int(np.argmax(scores))
    logger.debug("ensemble picked candidate %d of %d (score %.3f)", best, len(candidates), scores[best])
    return limit_box_steps(filtered[best])


def detect_track(
    true_boxes,
    rng: np.random.Generator,
    n_anchors: int = 5,
    fraction: float = 0.1,
    magnitude: float = 0.3,
) -> BBoxTrack:
    length = len(true_boxes)
    anchors = np.unique(np.linspace(0, length - 1, n_anchors).round().astype(int))
    candidates = [perturb_track(true_boxes, rng, fraction, magnitude, anchor=int(a)) for a in anchors]
    return ensemble_track(candidates)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def annotate_trajectory(
    traj: worldsim.Trajectory,
    task: t.Optional[worldsim.TaskSpec] = None,
    horizon: int = DEFAULT_HORIZON,
    noise_fraction: float = 0.1,
    noise_magnitude: float = 0.3,
    n_anchors: int = 5,
    seed: int = 0,
) -> t.List[AnnotatedSample]:
    task = traj.task if task is None else task
    length = len(traj)
    if length < 2:
        raise ValueError(f"episode {traj.episode_id} has {length} frames; need at least 2")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")

    states, _ = worldsim.replay(traj)
    if not worldsim.is_success(states[-1]):
        raise ValueError(f"episode {traj.episode_id} does not end in success")

    stages = segment_by_gripper(traj)
    goals = task.goals or ((task.target_object, task.target_bin),)
    rng = np.random.default_rng([seed, traj.episode_id])

    stage_of = np.empty(length, dtype=np.int64)
    for i, stage in enumerate(stages):
        stage_of[stage.start: stage.end + 1] = i

    # one track per pick-place cycle, following that cycle's object
    boxes = np.full((length, 4), np.nan)
    for cycle in sorted({s.cycle for s in stages}):
        frames = np.array([f for s in stages if s.cycle == cycle for f in range(s.start, s.end + 1)])
        obj_index = goals[min(cycle, len(goals) - 1)][0]
        truth = np.array([worldsim.ground_truth_bbox(states[f], obj_index) for f in frames])
        track = detect_track(truth, rng, n_anchors, noise_fraction, noise_magnitude)
        boxes[frames] = np.clip(track.boxes, 0.0, 1.0)

    padded = np.zeros((length + horizon, 3))
    padded[:length] = traj.actions
    initially_closed = traj.initial_state.gripper.closed

    samples = []
    for frame in range(length):
        stage = stages[stage_of[frame]]
        obj_index, bin_index = goals[min(stage.cycle, len(goals) - 1)]
        state = states[frame]
        obj, target_bin = state.objects[obj_index], state.bins[bin_index]

        window = traj.ee_positions[max(0, frame - REASONING_WINDOW + 1): frame + 1]
        transition = _gripper_transition(traj.gripper_closed, frame, initially_closed)
        goal = obj.position if stage.kind in ("pre_grasp", "grasp") else target_bin.position

        record = CoTRecord(
            instruction=task.instruction,
            subtask=subtask_text(stage, task, obj.name, target_bin.name),
            bbox_text=worldsim.format_bbox(boxes[frame]),
            reasoning=motion_descriptor(window, goal, transition),
            frame=frame,
            future_frame=min(frame + horizon, length - 1),
            action_chunk=padded[frame: frame + horizon].copy(),
        )
        mask = np.arange(frame, frame + horizon) < length
        samples.append(AnnotatedSample(traj.episode_id, record, mask, stage.kind, global_direction(window, goal)))
    return samples


def annotate_dataset(trajectories: t.Iterable[worldsim.Trajectory], **kwargs) -> t.List[AnnotatedSample]:
    samples: t.List[AnnotatedSample] = []
    episodes = 0
    for traj in trajectories:
        samples.extend(annotate_trajectory(traj, **kwargs))
        episodes += 1
    logger.info("annotated %d samples from %d episodes", len(samples), episodes)
    return samples


# ---------------------------------------------------------------------------
# CoT grammar and dataset files
# ---------------------------------------------------------------------------


def serialize_cot(record: CoTRecord) -> str:
    return record.serialize()


def parse_cot(text: str, frame: int = 0, future_frame: int = 0, action_chunk=None) -> CoTRecord:
    match = _COT_PATTERN.match(text)
    if match is None:
        raise SchemaError(f"text does not match the CoT grammar: {text[:80]!r}")
    placeholders = match.group("placeholders").split()
    if len(placeholders) != N_IMG_NEXT:
        raise SchemaError(f"expected {N_IMG_NEXT} <img_next> placeholders, got {len(placeholders)}")
    return CoTRecord(
        instruction=match.group("instruction"),
        subtask=match.group("subtask"),
        bbox_text=match.group("bbox"),
        reasoning=match.group("reasoning"),
        frame=frame,
        future_frame=future_frame,
        action_chunk=action_chunk,
    )


_REQUIRED_FIELDS = ("instruction", "cot", "frame", "future_frame", "action_chunk", "action_mask", "episode_id")


def sample_to_json(sample: AnnotatedSample) -> str:
    record = {
        "schema": SCHEMA_VERSION,
        "episode_id": sample.episode_id,
        "instruction": sample.instruction,
        "cot": {"subtask": sample.cot.subtask, "bbox": sample.cot.bbox_text, "reasoning": sample.cot.reasoning},
        "frame": sample.frame,
        "future_frame": sample.future_frame,
        "action_chunk": np.asarray(sample.action_chunk).tolist(),
        "action_mask": np.asarray(sample.action_mask).tolist(),
        "stage": sample.stage,
        "goal_direction": sample.goal_direction,
    }
    return json.dumps(record, sort_keys=True)


def sample_from_json(line: str, line_number: t.Optional[int] = None) -> AnnotatedSample:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON ({e.msg})", line_number) from e
    if d.get("schema") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema {d.get('schema')!r}", line_number)
    for key in _REQUIRED_FIELDS:
        if key not in d:
            raise SchemaError(f"missing field {key}", line_number)
    cot = d["cot"]
    for key in ("subtask", "bbox", "reasoning"):
        if key not in cot:
            raise SchemaError(f"missing field cot.{key}", line_number)
    chunk = np.array(d["action_chunk"], dtype=np.float64).reshape(-1, 3)
    mask = np.array(d["action_mask"], dtype=bool)
    if len(mask) != len(chunk):
        raise SchemaError(f"action_mask has {len(mask)} entries for {len(chunk)} actions", line_number)
    record = CoTRecord(d["instruction"], cot["subtask"], cot["bbox"], cot["reasoning"], d["frame"], d["future_frame"], chunk)
    return AnnotatedSample(d["episode_id"], record, mask, d.get("stage", ""), d.get("goal_direction", HOLD))


def write_samples(path: str, samples: t.Iterable[AnnotatedSample]) -> int:
    count = 0
    with open(path, "w") as f:
        for sample in samples:
            f.write(sample_to_json(sample) + "\n")
            count += 1
    return count


def load_trajectories(path: str) -> t.List[worldsim.Trajectory]:
    """``worldsim.read_trajectories`` with decoding failures reported as SchemaError by line."""
    trajectories = []
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                trajectories.append(worldsim.trajectory_from_json(line))
            except (KeyError, TypeError, ValueError) as e:
                raise SchemaError(f"bad trajectory record ({e})", number) from e
    return trajectories


def read_samples(path: str) -> t.List[AnnotatedSample]:
    samples = []
    with open(path, "r") as f:
        for number, line in enumerate(f, start=1):
            if line.strip():
                samples.append(sample_from_json(line, number))
    return samples
