"""Expert trajectory collection and cross-domain trajectory alignment.

A BFS planner stands in for the expert policy: it is deterministic, optimal up
to the discrete action set, and gives shortest-path references for free. Each
trajectory records everything needed to replay it exactly through the
simulator (scene id, start pose, actions), plus per-frame object presence
vectors used for alignment and for backbone pretraining.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import envsim
from .envsim import (
    END,
    MOVE_AHEAD,
    NUM_CATEGORIES,
    ROTATE_LEFT,
    ROTATE_RIGHT,
    SUCCESS_RADIUS,
    T_MAX,
    AgentState,
    DomainFactor,
    GridScene,
)


class PlanningError(RuntimeError):
    """Expert cannot reach the goal from the current state."""


class CollectionError(RuntimeError):
    """A factor produced no successful expert episodes."""


def bfs_next_cell(scene: GridScene, start: tuple[int, int], goal: int) -> tuple[int, int] | None:
    """First cell of a shortest free-cell path toward the goal category.

    Returns None when the start is already adjacent to a goal instance.
    """
    occ = scene.occupancy()
    goal_cells = [o.cell for o in scene.objects if o.category == goal]
    if not goal_cells:
        raise envsim.MissingGoalError(f"category {goal} not present in scene")
    targets = set()
    for col, row in goal_cells:
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nc, nr = col + dc, row + dr
            if scene.in_bounds(nc, nr) and occ[nr, nc] == envsim.FREE:
                targets.add((nc, nr))
    if start in targets:
        return None

    parent: dict[tuple[int, int], tuple[int, int]] = {start: start}
    queue = deque([start])
    found = None
    while queue:
        cell = queue.popleft()
        if cell in targets:
            found = cell
            break
        col, row = cell
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nxt = (col + dc, row + dr)
            if nxt not in parent and scene.is_free_cell(*nxt):
                parent[nxt] = cell
                queue.append(nxt)
    if found is None:
        raise PlanningError(f"goal category {goal} unreachable from {start}")
    while parent[found] != start:
        found = parent[found]
    return found


def _angular_error(heading: float, bearing: float) -> float:
    """Smallest signed angle (degrees) from heading to bearing, in (-180, 180]."""
    diff = (bearing - heading) % 360.0
    if diff > 180.0:
        diff -= 360.0
    return diff


def expert_policy(scene: GridScene, agent: AgentState, goal: int, factor: DomainFactor) -> int:
    """Greedy BFS follower: End when close, else align heading and advance."""
    d = envsim.geodesic_distance(scene, agent.position, goal)
    if d <= SUCCESS_RADIUS:
        return END
    start = scene.cell_of(agent.x, agent.y)
    nxt = bfs_next_cell(scene, start, goal)
    if nxt is None:
        return END
    cx, cy = scene.cell_center(*nxt)
    bearing = math.degrees(math.atan2(cy - agent.y, cx - agent.x)) % 360.0
    err = _angular_error(agent.heading, bearing)
    if abs(err) <= factor.rotation_step / 2.0:
        return MOVE_AHEAD
    left = abs(_angular_error((agent.heading + factor.rotation_step) % 360.0, bearing))
    right = abs(_angular_error((agent.heading - factor.rotation_step) % 360.0, bearing))
    return ROTATE_LEFT if left <= right else ROTATE_RIGHT


def presence_vector(
    scene: GridScene, agent: AgentState, factor: DomainFactor, hw: int = envsim.DEFAULT_IMAGE_HW
) -> np.ndarray:
    """Ground-truth visibility bits: category i is 1 iff some ray hits it."""
    kind, index, _ = envsim.raycast(scene, agent, factor, hw)
    m = np.zeros(NUM_CATEGORIES, dtype=np.int8)
    for i in index[kind == envsim.HIT_OBJECT]:
        m[scene.objects[int(i)].category] = 1
    return m


def f1_score(m1: np.ndarray, m2: np.ndarray) -> float:
    """F1 between binary presence vectors; 0 when either vector is all-zero."""
    m1 = np.asarray(m1)
    m2 = np.asarray(m2)
    if m1.shape != m2.shape:
        raise ValueError("presence vectors must have equal length")
    n1 = int(m1.sum())
    n2 = int(m2.sum())
    if n1 == 0 or n2 == 0:
        return 0.0
    inter = int((m1 & m2).sum())
    precision = inter / n2
    recall = inter / n1
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class Trajectory:
    """One expert episode under a single domain factor."""

    factor_id: int
    scene_id: int
    goal: int
    start: AgentState
    actions: list[int]
    rewards: list[float]
    presence: np.ndarray  # (T, NUM_CATEGORIES) int8, presence at each step's start
    frames: np.ndarray | None  # (T, 3, H, W) uint8, None when not loaded
    success: bool

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def start_presence(self) -> np.ndarray:
        return self.presence[0]


@dataclass
class DatasetManifest:
    """Per-factor trajectory lists plus base-vs-alternative alignment pairs."""

    factors: list[DomainFactor]
    scenes: list[GridScene]
    trajectories: list[list[Trajectory]]  # indexed by factor
    pairs: list[dict]  # {"base": [f, j], "other": [f, j], "f1": float}
    image_hw: int = envsim.DEFAULT_IMAGE_HW

    @property
    def n_trajectories(self) -> int:
        return sum(len(ts) for ts in self.trajectories)

    @property
    def n_samples(self) -> int:
        return sum(t.length for ts in self.trajectories for t in ts)

    def all_trajectories(self):
        for fi, ts in enumerate(self.trajectories):
            for tj, t in enumerate(ts):
                yield fi, tj, t


def run_expert_episode(
    scene: GridScene,
    scene_id: int,
    factor: DomainFactor,
    factor_id: int,
    goal: int,
    start: AgentState,
    hw: int = envsim.DEFAULT_IMAGE_HW,
    t_max: int = T_MAX,
    record_frames: bool = True,
) -> Trajectory:
    """Roll the expert until End or the horizon, recording one frame per step."""
    agent = start
    d_prev = envsim.geodesic_distance(scene, agent.position, goal)
    frames = []
    presence = []
    actions = []
    rewards = []
    success = False
    for t in range(t_max):
        obs, (kind, index, _) = envsim.render_with_hits(scene, agent, factor, hw)
        m = np.zeros(NUM_CATEGORIES, dtype=np.int8)
        for i in index[kind == envsim.HIT_OBJECT]:
            m[scene.objects[int(i)].category] = 1
        action = expert_policy(scene, agent, goal, factor)
        out = envsim.step(scene, agent, action, factor, goal, d_prev, t)
        if record_frames:
            frames.append(obs)
        presence.append(m)
        actions.append(action)
        rewards.append(out.reward)
        agent = out.next_agent
        d_prev = out.geodesic
        if out.done:
            success = out.success
            break
    return Trajectory(
        factor_id=factor_id,
        scene_id=scene_id,
        goal=goal,
        start=start,
        actions=actions,
        rewards=rewards,
        presence=np.stack(presence) if presence else np.zeros((0, NUM_CATEGORIES), dtype=np.int8),
        frames=np.stack(frames) if frames else None,
        success=success,
    )


@dataclass(frozen=True)
class EpisodeSpec:
    """Factor-independent episode seed: shared across domains for alignment."""

    scene_id: int
    goal: int
    cell: tuple[int, int]
    heading_frac: float  # in [0, 1); snapped to each factor's rotation lattice
    pitch_level: int  # in {-1, 0, 1}; scaled by each factor's look step

    def start_for(self, scene: GridScene, factor: DomainFactor) -> AgentState:
        x, y = scene.cell_center(*self.cell)
        n_headings = int(round(360.0 / factor.rotation_step))
        heading = (math.floor(self.heading_frac * n_headings) * factor.rotation_step) % 360.0
        pitch = float(self.pitch_level) * factor.look_step
        return AgentState(x=x, y=y, heading=heading, pitch=pitch)


def sample_episode_spec(
    rng: np.random.Generator,
    scenes: list[GridScene],
    min_geodesic: float = 1.25,
    max_geodesic: float = math.inf,
) -> EpisodeSpec:
    """Draw (scene, goal, start cell, heading fraction, pitch level)."""
    scene_id = int(rng.integers(0, len(scenes)))
    scene = scenes[scene_id]
    goal = int(rng.integers(0, NUM_CATEGORIES))
    cells = scene.free_cells()
    for idx in rng.permutation(len(cells)):
        cell = cells[int(idx)]
        d = envsim.geodesic_distance(scene, scene.cell_center(*cell), goal)
        if min_geodesic <= d <= max_geodesic and math.isfinite(d):
            return EpisodeSpec(
                scene_id=scene_id,
                goal=goal,
                cell=cell,
                heading_frac=float(rng.random()),
                pitch_level=int(rng.integers(-1, 2)),
            )
    raise RuntimeError("no admissible start cell in scene")


def collect_and_align(
    scenes: list[GridScene],
    factors: list[DomainFactor],
    n_per_factor: int,
    kappa: float,
    seed: int,
    hw: int = envsim.DEFAULT_IMAGE_HW,
    min_start_geodesic: float = 1.25,
    max_attempts_per_episode: int = 8,
) -> DatasetManifest:
    """Collect successful expert trajectories per factor and align them.

    Episode specs are keyed by (seed, episode index) only, so every factor
    sees the same (scene, goal, start cell, approximate heading) sequence;
    this guarantees same-goal alignment candidates exist. The base factor is
    the first in the list; each of its trajectories is paired, per alternative
    factor, with the same-goal trajectory of maximal presence-F1 provided that
    F1 reaches kappa (ties resolved to the lowest index).
    """
    if not factors:
        raise ValueError("factors must be nonempty")
    if not 0.0 < kappa <= 1.0:
        raise ValueError("kappa must be in (0, 1]")

    episodes = []
    for ep in range(n_per_factor):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, ep])))
        episodes.append(sample_episode_spec(rng, scenes, min_geodesic=min_start_geodesic))

    trajectories: list[list[Trajectory]] = []
    for fi, factor in enumerate(factors):
        collected = []
        for ep, spec in enumerate(episodes):
            scene = scenes[spec.scene_id]
            success = None
            for attempt in range(max_attempts_per_episode):
                if attempt == 0:
                    start = spec.start_for(scene, factor)
                else:
                    rng = np.random.Generator(
                        np.random.PCG64(np.random.SeedSequence([seed, ep, fi, attempt]))
                    )
                    start = envsim.sample_start(
                        rng, scene, factor, spec.goal, min_geodesic=min_start_geodesic
                    )
                traj = run_expert_episode(scene, spec.scene_id, factor, fi, spec.goal, start, hw)
                if traj.success:
                    success = traj
                    break
            if success is not None:
                collected.append(success)
        if not collected:
            raise CollectionError(f"factor {fi} produced no successful expert episodes")
        trajectories.append(collected)

    pairs = []
    base = trajectories[0]
    for fi in range(1, len(factors)):
        for bj, bt in enumerate(base):
            best = None
            for oj, ot in enumerate(trajectories[fi]):
                if ot.goal != bt.goal:
                    continue
                score = f1_score(bt.start_presence, ot.start_presence)
                if score >= kappa and (best is None or score > best[1]):
                    best = (oj, score)
            if best is not None:
                pairs.append({"base": [0, bj], "other": [fi, best[0]], "f1": best[1]})

    return DatasetManifest(
        factors=list(factors), scenes=list(scenes), trajectories=trajectories, pairs=pairs, image_hw=hw
    )


# ---------------------------------------------------------------------------
# On-disk format: one directory per factor with a JSONL manifest and one raw
# RGB blob per trajectory (row-major HWC, 8-bit), plus alignment pairs JSON.
# ---------------------------------------------------------------------------


def save_dataset(manifest: DatasetManifest, root: str | Path):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "image_hw": manifest.image_hw,
        "factors": [f.to_dict() for f in manifest.factors],
        "scenes": [s.to_dict() for s in manifest.scenes],
    }
    (root / "dataset.json").write_text(json.dumps(meta))
    for fi, trajs in enumerate(manifest.trajectories):
        fdir = root / f"factor_{fi:02d}"
        fdir.mkdir(exist_ok=True)
        with open(fdir / "manifest.jsonl", "w") as mf:
            for tj, t in enumerate(trajs):
                blob = f"traj_{tj:04d}.rgb"
                frame_bytes = 3 * manifest.image_hw * manifest.image_hw
                record = {
                    "index": tj,
                    "factor": fi,
                    "scene": t.scene_id,
                    "goal": t.goal,
                    "length": t.length,
                    "blob": blob,
                    "frame_bytes": frame_bytes,
                    "offsets": [k * frame_bytes for k in range(t.length)],
                    "start": {
                        "x": t.start.x,
                        "y": t.start.y,
                        "heading": t.start.heading,
                        "pitch": t.start.pitch,
                    },
                    "actions": t.actions,
                    "rewards": t.rewards,
                    "presence": [int(x) for x in _pack_bits(t.presence)],
                    "success": t.success,
                }
                mf.write(json.dumps(record) + "\n")
                hwc = np.transpose(t.frames, (0, 2, 3, 1))  # row-major RGB frames
                (fdir / blob).write_bytes(hwc.tobytes())
    (root / "alignment.json").write_text(json.dumps(manifest.pairs))


def load_dataset(root: str | Path, load_frames: bool = True) -> DatasetManifest:
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    hw = meta["image_hw"]
    factors = [DomainFactor.from_dict(d) for d in meta["factors"]]
    scenes = [GridScene.from_dict(d) for d in meta["scenes"]]
    trajectories = []
    for fi in range(len(factors)):
        fdir = root / f"factor_{fi:02d}"
        trajs = []
        with open(fdir / "manifest.jsonl") as mf:
            for line in mf:
                rec = json.loads(line)
                frames = None
                if load_frames:
                    raw = np.frombuffer((fdir / rec["blob"]).read_bytes(), dtype=np.uint8)
                    frames = raw.reshape(rec["length"], hw, hw, 3).transpose(0, 3, 1, 2).copy()
                trajs.append(
                    Trajectory(
                        factor_id=rec["factor"],
                        scene_id=rec["scene"],
                        goal=rec["goal"],
                        start=AgentState(**rec["start"]),
                        actions=rec["actions"],
                        rewards=rec["rewards"],
                        presence=_unpack_bits(rec["presence"], rec["length"]),
                        frames=frames,
                        success=rec["success"],
                    )
                )
        trajectories.append(trajs)
    pairs = json.loads((root / "alignment.json").read_text())
    return DatasetManifest(
        factors=factors, scenes=scenes, trajectories=trajectories, pairs=pairs, image_hw=hw
    )


def _pack_bits(presence: np.ndarray) -> np.ndarray:
    """(T, 12) 0/1 -> (T,) int bitmasks for compact JSON storage."""
    weights = (1 << np.arange(NUM_CATEGORIES)).astype(np.int64)
    return (presence.astype(np.int64) * weights).sum(axis=1)


def _unpack_bits(masks: list[int], length: int) -> np.ndarray:
    arr = np.zeros((length, NUM_CATEGORIES), dtype=np.int8)
    for t, m in enumerate(masks):
        for k in range(NUM_CATEGORIES):
            arr[t, k] = (m >> k) & 1
    return arr
