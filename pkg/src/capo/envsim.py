"""Deterministic egocentric grid-world navigation simulator.

Scenes are small occupancy grids holding colored target objects. Observations
are rendered by a 1-D column ray caster whose view geometry (FOV, pitch) and
pixel statistics (brightness/contrast/saturation/hue) are controlled by a
DomainFactor, so the same scene and pose produce systematically different
images under different domains. All functions here are pure: identical inputs
give bit-identical outputs.
"""

from __future__ import annotations

import colorsys
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CELL_SIZE = 0.25
NUM_CATEGORIES = 12
T_MAX = 500
SUCCESS_RADIUS = 1.0
STEP_PENALTY = 0.01
SUCCESS_REWARD = 10.0
DEFAULT_IMAGE_HW = 48

FOV_DEGREES = {"narrow": 60.0, "standard": 90.0, "wide": 120.0}
ROTATION_STEPS = (30.0, 45.0, 90.0)
LOOK_STEPS = (15.0, 30.0)
TRANSLATION_STEPS = (0.25, 0.5)

MOVE_AHEAD = 0
ROTATE_LEFT = 1
ROTATE_RIGHT = 2
LOOK_UP = 3
LOOK_DOWN = 4
END = 5
NUM_ACTIONS = 6
ACTION_NAMES = ("MoveAhead", "RotateLeft", "RotateRight", "LookUp", "LookDown", "End")

BACKGROUND_COLOR = np.array([96, 114, 134], dtype=np.uint8)
WALL_COLOR = np.array([152, 142, 126], dtype=np.uint8)

# Occupancy codes (occupancy grid stores object index >= 0 otherwise).
FREE = -1
WALL = -2

# Ray-hit codes.
HIT_NONE = 0
HIT_WALL = 1
HIT_OBJECT = 2


def category_palette() -> np.ndarray:
    """12 well-separated category colors, one per target category."""
    colors = []
    for k in range(NUM_CATEGORIES):
        r, g, b = colorsys.hsv_to_rgb(k / NUM_CATEGORIES, 0.85, 0.95)
        colors.append([round(r * 255), round(g * 255), round(b * 255)])
    return np.array(colors, dtype=np.uint8)


CATEGORY_COLORS = category_palette()


class InvalidStateError(ValueError):
    """Agent pose is outside free space for the given scene."""


class MissingGoalError(ValueError):
    """Requested goal category is not present in the scene."""


class ContractViolation(ValueError):
    """Caller broke an operation precondition (e.g. unknown action id)."""


@dataclass(frozen=True)
class DomainFactor:
    """One deployment condition: embodiment plus photometric parameters."""

    fov_group: str = "standard"
    rotation_step: float = 45.0
    look_step: float = 30.0
    translation_step: float = 0.25
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue_shift: float = 0.0

    def __post_init__(self):
        if self.fov_group not in FOV_DEGREES:
            raise ValueError(f"unknown fov_group {self.fov_group!r}")
        if self.rotation_step not in ROTATION_STEPS:
            raise ValueError(f"rotation_step must be one of {ROTATION_STEPS}")
        if self.look_step not in LOOK_STEPS:
            raise ValueError(f"look_step must be one of {LOOK_STEPS}")
        if self.translation_step not in TRANSLATION_STEPS:
            raise ValueError(f"translation_step must be one of {TRANSLATION_STEPS}")
        if not 0.5 <= self.brightness <= 1.5:
            raise ValueError("brightness out of range [0.5, 1.5]")
        if not 0.5 <= self.contrast <= 1.5:
            raise ValueError("contrast out of range [0.5, 1.5]")
        if not 0.0 <= self.saturation <= 2.0:
            raise ValueError("saturation out of range [0.0, 2.0]")
        if not -0.1 <= self.hue_shift <= 0.1:
            raise ValueError("hue_shift out of range [-0.1, 0.1]")

    @property
    def fov_degrees(self) -> float:
        return FOV_DEGREES[self.fov_group]

    @property
    def photometric(self) -> tuple[float, float, float, float]:
        return (self.brightness, self.contrast, self.saturation, self.hue_shift)

    def is_photometric_identity(self) -> bool:
        return self.photometric == (1.0, 1.0, 1.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "fov_group": self.fov_group,
            "rotation_step": self.rotation_step,
            "look_step": self.look_step,
            "translation_step": self.translation_step,
            "brightness": self.brightness,
            "contrast": self.contrast,
            "saturation": self.saturation,
            "hue_shift": self.hue_shift,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainFactor":
        return cls(**d)

    @classmethod
    def reference(cls) -> "DomainFactor":
        """Canonical domain: standard embodiment, identity photometrics."""
        return cls()


@dataclass(frozen=True)
class SceneObject:
    category: int
    cell: tuple[int, int]  # (col, row)
    color: tuple[int, int, int]
    size: float

    def __post_init__(self):
        if not 0 <= self.category < NUM_CATEGORIES:
            raise ValueError(f"category {self.category} out of range")
        if not 0.0 < self.size <= 1.0:
            raise ValueError("object size must be in (0, 1]")


@dataclass
class GridScene:
    """Occupancy grid: walls plus up to one object per cell."""

    width: int
    height: int
    walls: np.ndarray  # bool (height, width), indexed [row, col]
    objects: list[SceneObject]
    cell_size: float = CELL_SIZE
    _occupancy: np.ndarray | None = field(default=None, repr=False, compare=False)

    def occupancy(self) -> np.ndarray:
        """int grid: FREE, WALL, or object index; built once per scene."""
        if self._occupancy is None:
            occ = np.full((self.height, self.width), FREE, dtype=np.int32)
            occ[self.walls] = WALL
            for i, obj in enumerate(self.objects):
                col, row = obj.cell
                if occ[row, col] != FREE:
                    raise ValueError(f"object {i} placed on a non-free cell {obj.cell}")
                occ[row, col] = i
            self._occupancy = occ
        return self._occupancy

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size)))

    def in_bounds(self, col: int, row: int) -> bool:
        return 0 <= col < self.width and 0 <= row < self.height

    def is_free_cell(self, col: int, row: int) -> bool:
        return self.in_bounds(col, row) and self.occupancy()[row, col] == FREE

    def free_cells(self) -> list[tuple[int, int]]:
        occ = self.occupancy()
        rows, cols = np.nonzero(occ == FREE)
        return [(int(c), int(r)) for r, c in zip(rows, cols)]

    def cell_center(self, col: int, row: int) -> tuple[float, float]:
        return ((col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size)

    def categories_present(self) -> set[int]:
        return {obj.category for obj in self.objects}

    def validate(self):
        occ = self.occupancy()  # raises on overlapping objects
        free = list(zip(*np.nonzero(occ == FREE)))
        if not free:
            raise ValueError("scene has no free cells")
        # Connectivity of free space: every free cell reachable from the first.
        seen = {free[0]}
        queue = deque([free[0]])
        while queue:
            r, c = queue.popleft()
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nr, nc = r + dr, c + dc
                if (nr, nc) not in seen and self.is_free_cell(nc, nr):
                    seen.add((nr, nc))
                    queue.append((nr, nc))
        if len(seen) != len(free):
            raise ValueError("free space is disconnected")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "cell_size": self.cell_size,
            "walls": self.walls.astype(np.uint8).reshape(-1).tolist(),
            "objects": [
                {
                    "category": o.category,
                    "cell": list(o.cell),
                    "color": list(o.color),
                    "size": o.size,
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridScene":
        walls = np.array(d["walls"], dtype=np.uint8).reshape(d["height"], d["width"]) > 0
        objects = [
            SceneObject(
                category=o["category"],
                cell=tuple(o["cell"]),
                color=tuple(o["color"]),
                size=o["size"],
            )
            for o in d["objects"]
        ]
        return cls(
            width=d["width"],
            height=d["height"],
            walls=walls,
            objects=objects,
            cell_size=d.get("cell_size", CELL_SIZE),
        )

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "GridScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float  # degrees in [0, 360), counter-clockwise, 0 = +x
    pitch: float = 0.0  # degrees in [-60, 60]

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class StepOutcome:
    next_agent: AgentState
    reward: float
    done: bool
    success: bool
    geodesic: float


def _require_free_pose(scene: GridScene, agent: AgentState):
    col, row = scene.cell_of(agent.x, agent.y)
    if not scene.is_free_cell(col, row):
        raise InvalidStateError(f"agent at ({agent.x:.3f}, {agent.y:.3f}) is not in free space")


def raycast(scene: GridScene, agent: AgentState, factor: DomainFactor, n_rays: int):
    """Cast one ray per image column across the factor's horizontal FOV.

    Column c points at heading + fov/2 - fov*c/n_rays (image left = view left),
    so a wide FOV's central block samples exactly the same angles as a narrow
    FOV rendered at the same column count. Returns (kind, index, distance)
    arrays; distance is the exact ray parameter at the hit cell's boundary.
    """
    _require_free_pose(scene, agent)
    occ = scene.occupancy()
    cs = scene.cell_size
    fov = factor.fov_degrees
    cols = np.arange(n_rays)
    angles = np.deg2rad(agent.heading + fov / 2.0 - fov * cols / n_rays)
    dx = np.cos(angles)
    dy = np.sin(angles)

    cellx = np.full(n_rays, int(math.floor(agent.x / cs)), dtype=np.int64)
    celly = np.full(n_rays, int(math.floor(agent.y / cs)), dtype=np.int64)
    step_x = np.where(dx >= 0, 1, -1)
    step_y = np.where(dy >= 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta_x = np.abs(cs / dx)
        t_delta_y = np.abs(cs / dy)
        t_max_x = np.where(
            dx >= 0,
            ((cellx + 1) * cs - agent.x) / dx,
            (cellx * cs - agent.x) / dx,
        )
        t_max_y = np.where(
            dy >= 0,
            ((celly + 1) * cs - agent.y) / dy,
            (celly * cs - agent.y) / dy,
        )
    # Axis-aligned rays: the zero component never crosses its boundary.
    t_max_x = np.where(dx == 0.0, np.inf, t_max_x)
    t_max_y = np.where(dy == 0.0, np.inf, t_max_y)

    kind = np.zeros(n_rays, dtype=np.int8)
    index = np.full(n_rays, -1, dtype=np.int32)
    dist = np.zeros(n_rays, dtype=np.float64)
    active = np.ones(n_rays, dtype=bool)

    for _ in range(scene.width + scene.height + 2):
        if not active.any():
            break
        go_x = active & (t_max_x <= t_max_y)
        go_y = active & ~go_x
        t_entry = np.where(go_x, t_max_x, t_max_y)
        cellx = np.where(go_x, cellx + step_x, cellx)
        celly = np.where(go_y, celly + step_y, celly)
        t_max_x = np.where(go_x, t_max_x + t_delta_x, t_max_x)
        t_max_y = np.where(go_y, t_max_y + t_delta_y, t_max_y)

        inside = (cellx >= 0) & (cellx < scene.width) & (celly >= 0) & (celly < scene.height)
        left = active & ~inside
        kind[left] = HIT_NONE
        active &= inside

        code = np.full(n_rays, FREE, dtype=np.int32)
        code[active] = occ[celly[active], cellx[active]]
        hit_wall = active & (code == WALL)
        hit_obj = active & (code >= 0)
        kind[hit_wall] = HIT_WALL
        kind[hit_obj] = HIT_OBJECT
        index[hit_obj] = code[hit_obj]
        newly = hit_wall | hit_obj
        dist[newly] = t_entry[newly]
        active &= ~newly

    return kind, index, dist


def render_with_hits(
    scene: GridScene, agent: AgentState, factor: DomainFactor, hw: int = DEFAULT_IMAGE_HW
):
    """Render the egocentric view and also return the per-column ray hits."""
    kind, index, dist = raycast(scene, agent, factor, hw)
    img = np.empty((hw, hw, 3), dtype=np.float64)
    img[:, :] = BACKGROUND_COLOR.astype(np.float64)

    horizon = hw / 2.0 + (agent.pitch / 60.0) * (hw / 2.0)
    for c in range(hw):
        if kind[c] == HIT_NONE:
            continue
        d = dist[c]
        shade = 1.0 / (1.0 + d)
        if kind[c] == HIT_WALL:
            color = WALL_COLOR.astype(np.float64)
            size = 1.0
        else:
            obj = scene.objects[index[c]]
            color = np.asarray(obj.color, dtype=np.float64)
            size = obj.size
        half = (hw / 2.0) * size * shade
        r0 = max(0, int(round(horizon - half)))
        r1 = min(hw, int(round(horizon + half)))
        if r1 > r0:
            img[r0:r1, c] = color * shade

    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    obs = np.transpose(img, (2, 0, 1))  # (3, H, W)
    obs = apply_photometric(obs, *factor.photometric)
    return obs, (kind, index, dist)


def render(
    scene: GridScene, agent: AgentState, factor: DomainFactor, hw: int = DEFAULT_IMAGE_HW
) -> np.ndarray:
    obs, _ = render_with_hits(scene, agent, factor, hw)
    return obs


def _rgb_to_hsv(rgb: np.ndarray):
    """Vectorized RGB->HSV on float arrays in [0, 1], channel-last."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def apply_photometric(
    img: np.ndarray, brightness: float, contrast: float, saturation: float, hue_shift: float
) -> np.ndarray:
    """Apply hue -> saturation -> contrast -> brightness to an 8-bit image.

    Pixel math runs on [0, 1] float64 and is re-quantized to 8-bit at the end;
    clamping absorbs any overflow, so there is no error path.
    """
    if img.dtype != np.uint8 or img.shape[0] != 3:
        raise ValueError("expected uint8 image of shape (3, H, W)")
    p = np.transpose(img, (1, 2, 0)).astype(np.float64) / 255.0

    if hue_shift != 0.0:
        h, s, v = _rgb_to_hsv(p)
        p = _hsv_to_rgb((h + hue_shift) % 1.0, s, v)

    gray = p[..., 0] * 0.299 + p[..., 1] * 0.587 + p[..., 2] * 0.114
    p = saturation * p + (1.0 - saturation) * gray[..., None]

    pivot = float(np.mean(p[..., 0] * 0.299 + p[..., 1] * 0.587 + p[..., 2] * 0.114))
    p = contrast * p + (1.0 - contrast) * pivot

    p = p * brightness

    p = np.clip(p, 0.0, 1.0)
    out = np.clip(np.rint(p * 255.0), 0, 255).astype(np.uint8)
    return np.transpose(out, (2, 0, 1))


def geodesic_distance(scene: GridScene, position: tuple[float, float], goal: int) -> float:
    """BFS shortest-path length (meters) to the nearest cell adjacent to the goal.

    Free cells are 4-connected; the result is hop count times cell size, and 0
    when the agent's cell is already adjacent to an instance of the category.
    """
    occ = scene.occupancy()
    goal_cells = [o.cell for o in scene.objects if o.category == goal]
    if not goal_cells:
        raise MissingGoalError(f"category {goal} not present in scene")

    targets = set()
    for col, row in goal_cells:
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nc, nr = col + dc, row + dr
            if scene.in_bounds(nc, nr) and occ[nr, nc] == FREE:
                targets.add((nc, nr))

    start = scene.cell_of(*position)
    if not scene.is_free_cell(*start):
        raise InvalidStateError(f"position {position} is not in free space")
    if start in targets:
        return 0.0
    if not targets:
        return math.inf

    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        (col, row), hops = queue.popleft()
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nxt = (col + dc, row + dr)
            if nxt in seen or not scene.is_free_cell(*nxt):
                continue
            if nxt in targets:
                return (hops + 1) * scene.cell_size
            seen.add(nxt)
            queue.append((nxt, hops + 1))
    return math.inf


def _path_clear(scene: GridScene, x0: float, y0: float, x1: float, y1: float) -> bool:
    """True when every sub-cell sample along the segment lies in free space."""
    length = math.hypot(x1 - x0, y1 - y0)
    n = max(1, int(math.ceil(length / (scene.cell_size / 4.0))))
    for i in range(1, n + 1):
        t = i / n
        x = x0 + (x1 - x0) * t
        y = y0 + (y1 - y0) * t
        if not scene.is_free_cell(*scene.cell_of(x, y)):
            return False
    return True


def step(
    scene: GridScene,
    agent: AgentState,
    action: int,
    factor: DomainFactor,
    goal: int,
    d_prev: float,
    t: int,
) -> StepOutcome:
    """Advance the agent one action and compute the shaped composite reward."""
    if not 0 <= action < NUM_ACTIONS:
        raise ContractViolation(f"unknown action id {action}")
    if t >= T_MAX:
        raise ContractViolation(f"step index {t} beyond horizon {T_MAX}")
    _require_free_pose(scene, agent)

    nxt = agent
    moved = 0.0
    done = False
    if action == MOVE_AHEAD:
        rad = math.radians(agent.heading)
        tx = agent.x + factor.translation_step * math.cos(rad)
        ty = agent.y + factor.translation_step * math.sin(rad)
        if _path_clear(scene, agent.x, agent.y, tx, ty):
            nxt = replace(agent, x=tx, y=ty)
            moved = factor.translation_step
    elif action == ROTATE_LEFT:
        nxt = replace(agent, heading=(agent.heading + factor.rotation_step) % 360.0)
    elif action == ROTATE_RIGHT:
        nxt = replace(agent, heading=(agent.heading - factor.rotation_step) % 360.0)
    elif action == LOOK_UP:
        nxt = replace(agent, pitch=min(60.0, agent.pitch + factor.look_step))
    elif action == LOOK_DOWN:
        nxt = replace(agent, pitch=max(-60.0, agent.pitch - factor.look_step))
    elif action == END:
        done = True

    d_curr = geodesic_distance(scene, nxt.position, goal)
    success = done and d_curr <= SUCCESS_RADIUS
    shaped = min(max(d_prev - d_curr, -moved), moved)
    reward = shaped - STEP_PENALTY + (SUCCESS_REWARD if success else 0.0)
    return StepOutcome(next_agent=nxt, reward=reward, done=done, success=success, geodesic=d_curr)


def euclidean_goal_distance(scene: GridScene, position: tuple[float, float], goal: int) -> float:
    """Straight-line distance to the nearest instance of the goal category."""
    cells = [o.cell for o in scene.objects if o.category == goal]
    if not cells:
        raise MissingGoalError(f"category {goal} not present in scene")
    x, y = position
    return min(math.hypot(cx - x, cy - y) for cx, cy in (scene.cell_center(*c) for c in cells))


def generate_scene(
    rng: np.random.Generator,
    width: int = 11,
    height: int = 11,
    wall_segments: int = 2,
    max_attempts: int = 200,
) -> GridScene:
    """Random bordered scene with interior wall segments and all 12 categories.

    Retries until the free space (excluding object cells) stays connected and
    every object keeps at least one adjacent free cell.
    """
    palette = CATEGORY_COLORS
    for _ in range(max_attempts):
        walls = np.zeros((height, width), dtype=bool)
        walls[0, :] = walls[-1, :] = True
        walls[:, 0] = walls[:, -1] = True
        for _ in range(wall_segments):
            horizontal = bool(rng.integers(0, 2))
            length = int(rng.integers(2, 5))
            if horizontal:
                row = int(rng.integers(2, height - 2))
                col = int(rng.integers(1, max(2, width - length - 1)))
                walls[row, col : col + length] = True
            else:
                col = int(rng.integers(2, width - 2))
                row = int(rng.integers(1, max(2, height - length - 1)))
                walls[row : row + length, col] = True

        occupied = set()
        objects = []
        interior = [
            (c, r)
            for r in range(1, height - 1)
            for c in range(1, width - 1)
            if not walls[r, c]
        ]
        if len(interior) < NUM_CATEGORIES + 4:
            continue
        ok = True
        for cat in range(NUM_CATEGORIES):
            candidates = [cell for cell in interior if cell not in occupied]
            if not candidates:
                ok = False
                break
            cell = candidates[int(rng.integers(0, len(candidates)))]
            occupied.add(cell)
            objects.append(
                SceneObject(
                    category=cat,
                    cell=cell,
                    color=tuple(int(v) for v in palette[cat]),
                    size=float(np.round(rng.uniform(0.6, 1.0), 3)),
                )
            )
        if not ok:
            continue

        scene = GridScene(width=width, height=height, walls=walls, objects=objects)
        try:
            scene.validate()
        except ValueError:
            continue
        # Every object must be reachable (some adjacent free cell).
        occ = scene.occupancy()
        reachable = all(
            any(
                scene.in_bounds(c + dc, r + dr) and occ[r + dr, c + dc] == FREE
                for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1))
            )
            for c, r in (o.cell for o in objects)
        )
        if not reachable:
            continue
        return scene
    raise RuntimeError("failed to generate a connected scene")


def sample_start(
    rng: np.random.Generator,
    scene: GridScene,
    factor: DomainFactor,
    goal: int,
    min_geodesic: float = 1.25,
    max_geodesic: float = math.inf,
    pitch_levels: tuple[int, ...] = (-1, 0, 1),
) -> AgentState:
    """Sample a start pose whose geodesic distance to the goal is in range.

    Heading is a multiple of the factor's rotation step; pitch is a multiple
    of its look step so the look-angle factor is visible in collected frames.
    """
    cells = scene.free_cells()
    order = rng.permutation(len(cells))
    n_headings = int(round(360.0 / factor.rotation_step))
    for idx in order:
        col, row = cells[idx]
        x, y = scene.cell_center(col, row)
        d = geodesic_distance(scene, (x, y), goal)
        if min_geodesic <= d <= max_geodesic and math.isfinite(d):
            heading = (int(rng.integers(0, n_headings)) * factor.rotation_step) % 360.0
            pitch = float(pitch_levels[int(rng.integers(0, len(pitch_levels)))]) * factor.look_step
            return AgentState(x=x, y=y, heading=heading, pitch=pitch)
    raise RuntimeError(f"no start cell with geodesic in [{min_geodesic}, {max_geodesic}]")


def write_ppm(obs: np.ndarray, path: str | Path):
    """Export an observation as binary PPM (P6) for debugging."""
    if obs.dtype != np.uint8 or obs.ndim != 3 or obs.shape[0] != 3:
        raise ValueError("expected uint8 image of shape (3, H, W)")
    h, w = obs.shape[1], obs.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.transpose(obs, (1, 2, 0)).tobytes())
