"""Synthetic 2D tabletop: a point gripper, colored shapes, and containers.

States live in the unit square. Dynamics are deliberately minimal: the
gripper moves by a bounded delta, a grip command above 0.5 closes the
gripper (grabbing the nearest object within reach), at most one object is
held, and a held object tracks the gripper until released. Rendering is a
deterministic 32x32 rasterization, so identical states give bit-identical
images.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
CONTAINER_NAMES = ("box", "tray")

COLOR_RGB = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.85, 0.20),
    "blue": (0.20, 0.35, 0.95),
}
CONTAINER_RGB = {
    "box": (0.55, 0.55, 0.60),
    "tray": (0.75, 0.62, 0.30),
}
BACKGROUND = 0.08
IMAGE_SIZE = 32

MAX_STEP = 0.1
GRAB_RADIUS = 0.05


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    position: tuple  # (x, y)


@dataclass(frozen=True)
class Container:
    name: str
    region: tuple  # (x0, y0, x1, y1)

    def contains(self, point):
        x0, y0, x1, y1 = self.region
        return x0 <= point[0] <= x1 and y0 <= point[1] <= y1

    @property
    def center(self):
        x0, y0, x1, y1 = self.region
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


@dataclass(frozen=True)
class WorldState:
    gripper: tuple  # (x, y)
    gripper_open: bool
    objects: tuple  # of SceneObject
    containers: tuple  # of Container
    held: int | None = None


def env_step(state: WorldState, action) -> WorldState:
    """Apply (dx, dy, grip, _). Movement first, then the grip command."""
    dx = float(np.clip(action[0], -MAX_STEP, MAX_STEP))
    dy = float(np.clip(action[1], -MAX_STEP, MAX_STEP))
    gx = float(np.clip(state.gripper[0] + dx, 0.0, 1.0))
    gy = float(np.clip(state.gripper[1] + dy, 0.0, 1.0))
    gripper = (gx, gy)

    objects = list(state.objects)
    held = state.held
    if held is not None:
        objects[held] = replace(objects[held], position=gripper)

    close = float(action[2]) > 0.5
    if close and held is None:
        dists = [
            float(np.hypot(o.position[0] - gx, o.position[1] - gy)) for o in objects
        ]
        if dists:
            nearest = int(np.argmin(dists))
            if dists[nearest] <= GRAB_RADIUS:
                held = nearest
                objects[nearest] = replace(objects[nearest], position=gripper)
    elif not close:
        held = None

    return WorldState(
        gripper=gripper,
        gripper_open=not close,
        objects=tuple(objects),
        containers=state.containers,
        held=held,
    )


def scripted_expert(state: WorldState, goal) -> np.ndarray:
    """Proportional controller for goal = (object_index, container_index).

    Approach the object, close within reach, carry to the container center,
    release inside the region. Emitted deltas always respect MAX_STEP.
    """
    obj_idx, cont_idx = goal
    gx, gy = state.gripper
    if state.held != obj_idx:
        tx, ty = state.objects[obj_idx].position
        dx, dy = tx - gx, ty - gy
        if np.hypot(dx, dy) > 0.03:
            return _bounded(dx, dy, grip=0.0)
        return _bounded(dx, dy, grip=1.0)
    container = state.containers[cont_idx]
    if container.contains((gx, gy)):
        return np.array([0.0, 0.0, 0.0, 0.0])
    tx, ty = container.center
    return _bounded(tx - gx, ty - gy, grip=1.0)


def _bounded(dx, dy, grip):
    return np.array(
        [np.clip(dx, -MAX_STEP, MAX_STEP), np.clip(dy, -MAX_STEP, MAX_STEP), grip, 0.0]
    )


def task_success(state: WorldState, obj_idx, cont_idx) -> bool:
    obj = state.objects[obj_idx]
    return state.held != obj_idx and state.containers[cont_idx].contains(obj.position)


def native_state(state: WorldState) -> np.ndarray:
    return np.array(
        [state.gripper[0], state.gripper[1], 0.0 if state.gripper_open else 1.0, 0.0]
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _px(v, size=IMAGE_SIZE):
    return int(np.clip(int(v * size), 0, size - 1))


def render(state: WorldState, size=IMAGE_SIZE) -> np.ndarray:
    """Rasterize to a (size, size, 3) float image in [0, 1]; row 0 is y=0."""
    img = np.full((size, size, 3), BACKGROUND, dtype=np.float64)
    for cont in state.containers:
        x0, y0, x1, y1 = cont.region
        r0, r1 = _px(y0, size), _px(y1, size)
        c0, c1 = _px(x0, size), _px(x1, size)
        rgb = np.array(CONTAINER_RGB[cont.name])
        img[r0 : r1 + 1, c0 : c1 + 1] = rgb * 0.35
        img[r0, c0 : c1 + 1] = rgb
        img[r1, c0 : c1 + 1] = rgb
        img[r0 : r1 + 1, c0] = rgb
        img[r0 : r1 + 1, c1] = rgb
    for obj in state.objects:
        _draw_shape(img, obj, size)
    _draw_gripper(img, state, size)
    return img


def _draw_shape(img, obj, size):
    rgb = np.array(COLOR_RGB[obj.color])
    cx, cy = _px(obj.position[0], size), _px(obj.position[1], size)
    if obj.shape == "circle":
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                if dx * dx + dy * dy <= 5:
                    _put(img, cy + dy, cx + dx, rgb, size)
    elif obj.shape == "square":
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                _put(img, cy + dy, cx + dx, rgb, size)
    else:  # triangle: apex up, widening downward
        for dy in range(-2, 3):
            half = (dy + 3) // 2
            for dx in range(-half, half + 1):
                _put(img, cy + dy, cx + dx, rgb, size)


def _draw_gripper(img, state, size):
    cx, cy = _px(state.gripper[0], size), _px(state.gripper[1], size)
    white = np.array([0.95, 0.95, 0.95])
    grey = np.array([0.70, 0.70, 0.70])
    rgb = white if state.gripper_open else grey
    for d in range(-2, 3):
        _put(img, cy, cx + d, rgb, size)
        _put(img, cy + d, cx, rgb, size)


def _put(img, r, c, rgb, size):
    if 0 <= r < size and 0 <= c < size:
        img[r, c] = rgb


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 2
    n_containers: int = 1
    margin: float = 0.08
    min_separation: float = 0.14
    container_extent: float = 0.11


def sample_scene(rng, config: SceneConfig = SceneConfig()) -> WorldState:
    """Random solvable scene: distinct object looks, objects outside containers."""
    names = list(CONTAINER_NAMES)
    rng.shuffle(names)
    containers = []
    for name in names[: config.n_containers]:
        for _ in range(200):
            cx = rng.uniform(config.margin + config.container_extent, 1 - config.margin - config.container_extent)
            cy = rng.uniform(config.margin + config.container_extent, 1 - config.margin - config.container_extent)
            region = (
                cx - config.container_extent,
                cy - config.container_extent,
                cx + config.container_extent,
                cy + config.container_extent,
            )
            if all(_region_gap(region, c.region) > 0.05 for c in containers):
                containers.append(Container(name=name, region=region))
                break
        else:
            raise RuntimeError("could not place containers without overlap")

    looks = [(s, c) for s in SHAPES for c in COLORS]
    idx = rng.choice(len(looks), size=config.n_objects, replace=False)
    objects = []
    for i in idx:
        shape, color = looks[int(i)]
        for _ in range(500):
            pos = (
                float(rng.uniform(config.margin, 1 - config.margin)),
                float(rng.uniform(config.margin, 1 - config.margin)),
            )
            clear_of_containers = all(not c.contains(pos) for c in containers)
            separated = all(
                np.hypot(pos[0] - o.position[0], pos[1] - o.position[1])
                >= config.min_separation
                for o in objects
            )
            if clear_of_containers and separated:
                objects.append(SceneObject(shape=shape, color=color, position=pos))
                break
        else:
            raise RuntimeError("could not place objects in the scene")

    gripper = (
        float(rng.uniform(config.margin, 1 - config.margin)),
        float(rng.uniform(config.margin, 1 - config.margin)),
    )
    return WorldState(
        gripper=gripper,
        gripper_open=True,
        objects=tuple(objects),
        containers=tuple(containers),
        held=None,
    )


def _region_gap(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    dx = max(bx0 - ax1, ax0 - bx1, 0.0)
    dy = max(by0 - ay1, ay0 - by1, 0.0)
    return max(dx, dy)
