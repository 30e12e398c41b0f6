"""Episode datasets: on-disk format, generation, QA samples, padding, mixing.

On disk, a dataset is one directory per episode:

    episode_000042/
        manifest.json       instruction, fps, arm, scene geometry, target
        frames.tens         (T, 32, 32, 3) float32, pixel values in [0, 1]
        states.tens         (T, 20) float32
        actions.tens        (T, 20) float32, last row all zeros
        latent_labels.txt   written later by the latent-action labeler

Tensor files are raw little-endian float32 preceded by an 8-byte magic
"DVTENSOR", a uint32 rank, and uint32 dims; payload is row-major. The JSON
manifest is written with sorted keys so regeneration is byte-identical.

Actions and states are padded to 20 dims: the native 4 dims occupy slots
0-3 for the left arm and 10-13 for the right arm, everything else is zero.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import env as E
from .fast_tokenizer import NormStats

TENSOR_MAGIC = b"DVTENSOR"
ACTION_DIMS = 20
NATIVE_DIMS = 4
ARM_OFFSET = {"left": 0, "right": 10}
FPS = 5.0
MIN_FRAMES = 8


def write_tensor(path, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"{path}: bad tensor magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        payload = fh.read()
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def pad_to_20(native, arm):
    if arm not in ARM_OFFSET:
        raise ValueError(f"arm must be left or right, got {arm!r}")
    native = np.asarray(native, dtype=np.float64)
    out = np.zeros(ACTION_DIMS)
    base = ARM_OFFSET[arm]
    out[base : base + NATIVE_DIMS] = native
    return out


def unpad(vec, arm):
    if arm not in ARM_OFFSET:
        raise ValueError(f"arm must be left or right, got {arm!r}")
    base = ARM_OFFSET[arm]
    return np.asarray(vec, dtype=np.float64)[base : base + NATIVE_DIMS].copy()


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    episode_id: str
    instruction: str
    arm: str
    fps: float
    frames: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    target_object: tuple  # (shape, color)
    target_container: str
    scene: dict  # initial world geometry, replayable
    latent_labels: np.ndarray | None = None

    def __len__(self):
        return self.frames.shape[0]

    def initial_world(self) -> E.WorldState:
        return world_from_dict(self.scene)

    def chunk_at(self, t, k):
        """Padded action window a_{t:t+k}; rows past the end repeat the
        terminal zero action."""
        rows = []
        last = len(self) - 1
        for i in range(k):
            rows.append(self.actions[min(t + i, last)])
        return np.asarray(rows, dtype=np.float64)


def world_to_dict(world: E.WorldState) -> dict:
    return {
        "gripper": list(world.gripper),
        "gripper_open": world.gripper_open,
        "held": world.held,
        "objects": [
            {"shape": o.shape, "color": o.color, "position": list(o.position)}
            for o in world.objects
        ],
        "containers": [
            {"name": c.name, "region": list(c.region)} for c in world.containers
        ],
    }


def world_from_dict(d) -> E.WorldState:
    return E.WorldState(
        gripper=tuple(d["gripper"]),
        gripper_open=d["gripper_open"],
        held=d["held"],
        objects=tuple(
            E.SceneObject(o["shape"], o["color"], tuple(o["position"]))
            for o in d["objects"]
        ),
        containers=tuple(
            E.Container(c["name"], tuple(c["region"])) for c in d["containers"]
        ),
    )


def save_episode(directory, ep: Episode):
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "episode_id": ep.episode_id,
        "instruction": ep.instruction,
        "arm": ep.arm,
        "fps": ep.fps,
        "native_dims": NATIVE_DIMS,
        "target_object": list(ep.target_object),
        "target_container": ep.target_container,
        "scene": ep.scene,
        "length": int(len(ep)),
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    write_tensor(os.path.join(directory, "frames.tens"), ep.frames)
    write_tensor(os.path.join(directory, "states.tens"), ep.states)
    write_tensor(os.path.join(directory, "actions.tens"), ep.actions)


def load_episode(directory) -> Episode:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        m = json.load(fh)
    labels = None
    label_path = os.path.join(directory, "latent_labels.txt")
    if os.path.exists(label_path):
        labels = load_latent_labels(label_path)
    return Episode(
        episode_id=m["episode_id"],
        instruction=m["instruction"],
        arm=m["arm"],
        fps=m["fps"],
        frames=read_tensor(os.path.join(directory, "frames.tens")),
        states=read_tensor(os.path.join(directory, "states.tens")),
        actions=read_tensor(os.path.join(directory, "actions.tens")),
        target_object=tuple(m["target_object"]),
        target_container=m["target_container"],
        scene=m["scene"],
        latent_labels=labels,
    )


def load_dataset(root):
    dirs = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    eps = [load_episode(os.path.join(root, d)) for d in dirs]
    if not eps:
        raise ValueError(f"no episodes found under {root}")
    return eps


def save_latent_labels(path, labels):
    with open(path, "w", encoding="utf-8") as fh:
        for t, row in enumerate(labels):
            fh.write(f"{t} " + " ".join(str(int(v)) for v in row) + "\n")


def load_latent_labels(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                rows.append([int(v) for v in parts[1:]])
    return np.asarray(rows, dtype=np.int64)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def rollout_expert(world, goal, max_steps=120):
    """Run the scripted controller; returns (frames, states, actions, success).

    Arrays include the terminal step with an all-zero action.
    """
    frames, states, actions = [], [], []
    success = False
    for _ in range(max_steps):
        if E.task_success(world, *goal):
            success = True
            break
        action = E.scripted_expert(world, goal)
        frames.append(E.render(world))
        states.append(E.native_state(world))
        actions.append(action)
        world = E.env_step(world, action)
    frames.append(E.render(world))
    states.append(E.native_state(world))
    actions.append(np.zeros(NATIVE_DIMS))
    return frames, states, actions, success


def generate_episode(seed, index, scene_config=E.SceneConfig(), max_steps=120):
    """One successful episode for (seed, index); returns (episode, attempts)."""
    for attempt in range(50):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index, attempt]))
        world = E.sample_scene(rng, scene_config)
        obj_idx = int(rng.integers(len(world.objects)))
        cont_idx = int(rng.integers(len(world.containers)))
        arm = "left" if rng.integers(2) == 0 else "right"
        frames, states, actions, ok = rollout_expert(
            world, (obj_idx, cont_idx), max_steps
        )
        # episodes shorter than MIN_FRAMES cannot carry a 1-second frame gap
        if not ok or len(frames) < MIN_FRAMES:
            continue
        obj = world.objects[obj_idx]
        cont = world.containers[cont_idx]
        ep = Episode(
            episode_id=f"episode_{index:06d}",
            instruction=f"put the {obj.color} {obj.shape} into the {cont.name}",
            arm=arm,
            fps=FPS,
            frames=np.asarray(frames, dtype=np.float32),
            states=np.asarray([pad_to_20(s, arm) for s in states], dtype=np.float32),
            actions=np.asarray([pad_to_20(a, arm) for a in actions], dtype=np.float32),
            target_object=(obj.shape, obj.color),
            target_container=cont.name,
            scene=world_to_dict(world),
            latent_labels=None,
        )
        return ep, attempt + 1
    raise RuntimeError(f"no successful rollout for episode index {index}")


def generate_dataset(out_dir, n_episodes, seed, scene_config=E.SceneConfig(), max_steps=120):
    """Write n successful episodes; abort if the expert succeeds on < 50% of
    attempts (a misconfigured environment, not bad luck)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    attempts = 0
    for i in range(n_episodes):
        ep, n_attempts = generate_episode(seed, i, scene_config, max_steps)
        attempts += n_attempts
        save_episode(os.path.join(out_dir, ep.episode_id), ep)
    success_rate = n_episodes / attempts
    if success_rate < 0.5:
        raise RuntimeError(
            f"expert success rate {success_rate:.2f} below 0.5 during generation"
        )
    return out_dir


# ---------------------------------------------------------------------------
# spatial QA
# ---------------------------------------------------------------------------


@dataclass
class QASample:
    frame: np.ndarray
    question: str
    answer: str


def qa_answer(world, target_idx) -> str:
    """Nearest object strictly left (smaller x) of the target, else nothing."""
    target = world.objects[target_idx]
    best = None
    for i, obj in enumerate(world.objects):
        if i == target_idx:
            continue
        if obj.position[0] < target.position[0]:
            if best is None or obj.position[0] > world.objects[best].position[0]:
                best = i
    if best is None:
        return "nothing"
    obj = world.objects[best]
    return f"the {obj.color} {obj.shape}"


def generate_qa(n, seed, scene_config=None):
    """n spatial QA samples on fresh scenes with 2-3 objects."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7_000_000 + i]))
        cfg = scene_config or E.SceneConfig(n_objects=int(rng.integers(2, 4)))
        world = E.sample_scene(rng, cfg)
        target = int(rng.integers(len(world.objects)))
        obj = world.objects[target]
        samples.append(
            QASample(
                frame=E.render(world).astype(np.float32),
                question=f"which object is left of the {obj.color} {obj.shape}",
                answer=qa_answer(world, target),
            )
        )
    return samples


def save_qa(directory, samples):
    os.makedirs(directory, exist_ok=True)
    write_tensor(
        os.path.join(directory, "frames.tens"),
        np.asarray([s.frame for s in samples], dtype=np.float32),
    )
    rows = [{"question": s.question, "answer": s.answer} for s in samples]
    with open(os.path.join(directory, "qa.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_qa(directory):
    frames = read_tensor(os.path.join(directory, "frames.tens"))
    with open(os.path.join(directory, "qa.json"), encoding="utf-8") as fh:
        rows = json.load(fh)
    return [
        QASample(frame=frames[i], question=r["question"], answer=r["answer"])
        for i, r in enumerate(rows)
    ]


# ---------------------------------------------------------------------------
# mixing and corpus statistics
# ---------------------------------------------------------------------------


def mix_stream(sources, seed):
    """Infinite stream mixing datasets by weight.

    Each draw picks a source with probability weight/sum(weights), then
    yields that source's next item under per-source shuffled epochs, so a
    single source degenerates to a shuffled replay. Deterministic per seed.
    """
    if not sources:
        raise ValueError("mix_stream needs at least one source")
    for items, weight in sources:
        if len(items) == 0:
            raise ValueError("mix_stream source is empty")
        if weight <= 0:
            raise ValueError("mix_stream weights must be positive")
    rng = np.random.default_rng(seed)
    weights = np.asarray([w for _, w in sources], dtype=np.float64)
    probs = weights / weights.sum()
    orders = [rng.permutation(len(items)) for items, _ in sources]
    cursors = [0] * len(sources)

    def stream():
        while True:
            s = int(rng.choice(len(sources), p=probs))
            items, _ = sources[s]
            if cursors[s] >= len(items):
                orders[s] = rng.permutation(len(items))
                cursors[s] = 0
            item = items[int(orders[s][cursors[s]])]
            cursors[s] += 1
            yield s, item

    return stream()


def compute_action_stats(episodes):
    """Percentile range plus mean/std per dim over all action rows."""
    rows = np.concatenate([ep.actions.astype(np.float64) for ep in episodes], axis=0)
    low, high = np.percentile(rows, [1.0, 99.0], axis=0)
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return NormStats(low=low, high=high), mean, std


def action_chunk_corpus(episodes, k):
    """Every k-window of padded actions, for tokenizer fitting."""
    chunks = []
    for ep in episodes:
        for t in range(len(ep)):
            chunks.append(ep.chunk_at(t, k))
    return chunks
