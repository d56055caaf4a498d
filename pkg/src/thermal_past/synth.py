"""Procedural thermal-trace clips: rooms with furniture, a stick-figure actor, decaying contact marks.

The actor walks between waypoints and furniture, and sits, lies on or touches
furniture according to its affordance. Every frame the mark buffer relaxes
exponentially towards zero and the cells where the body touches a piece of
furniture are reset to the deposit intensity. Frames are rendered as ambient
background, darker furniture outlines, the mark buffer and the actor
silhouette on top.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np

from .dataset import FPS, Annotation, ClipRecord, SplitManifest, split_by_clip, write_clip
from .errors import ParameterError
from .pose import BONES, IMAGE_H, IMAGE_W, TORSO, Pose2D, ThermalFrame

AFFORDANCES = ("sit", "lie", "touch", "none")
ACTIONS = ("walk", "sit", "lie", "touch", "stand")
INTERACTIONS = ("sit", "lie", "touch")

AMBIENT = 0.2
OUTLINE = 0.12
BODY_TEMP = 0.9
DEPOSIT = 0.6
DEFAULT_TAU = 20.0
LIMB_WIDTH = 6
HEAD_RADIUS = 6

# Walkable band for the ground point under the actor.
WALK_X = (30.0, IMAGE_W - 30.0)
WALK_Y = (135.0, IMAGE_H - 8.0)


@dataclass(frozen=True)
class Furniture:
    x0: int
    y0: int
    x1: int
    y1: int
    affordance: str
    surface_height: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


@dataclass(frozen=True)
class SceneSpec:
    furniture: tuple[Furniture, ...]
    ambient: float = AMBIENT
    seed: int = 0
    height: int = IMAGE_H
    width: int = IMAGE_W

    def __post_init__(self):
        for f in self.furniture:
            if f.affordance not in AFFORDANCES:
                raise ParameterError(f"unknown affordance {f.affordance!r}")
            if not (0 <= f.x0 < f.x1 <= self.width and 0 <= f.y0 < f.y1 <= self.height):
                raise ParameterError(f"furniture {f} outside the room")

    def to_json(self) -> dict:
        return {"seed": self.seed, "ambient": self.ambient, "height": self.height, "width": self.width,
                "furniture": [asdict(f) for f in self.furniture]}

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        return cls(tuple(Furniture(**f) for f in obj["furniture"]), obj["ambient"], obj["seed"], obj["height"], obj["width"])


@dataclass
class ThermalState:
    mark_buffer: np.ndarray
    body_temp: float = BODY_TEMP
    tau: float = DEFAULT_TAU
    deposit: float = DEPOSIT

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError("tau must be positive")

    @classmethod
    def empty(cls, tau: float = DEFAULT_TAU, **kw) -> "ThermalState":
        return cls(np.zeros((IMAGE_H, IMAGE_W), np.float32), tau=tau, **kw)


@dataclass(frozen=True)
class ScriptStep:
    action: str
    target: int | tuple[float, float]  # furniture index or waypoint
    duration: int  # frames
    anchor: tuple[float, float]  # ground point the step ends at
    facing: str = "right"


@dataclass
class ActionScript:
    steps: list[ScriptStep]
    start: tuple[float, float]
    start_facing: str
    body_scale: float = 1.0

    @property
    def n_frames(self) -> int:
        return sum(s.duration for s in self.steps)

    def to_json(self) -> dict:
        return {"start": list(self.start), "start_facing": self.start_facing, "body_scale": self.body_scale,
                "steps": [{"action": s.action, "target": s.target if isinstance(s.target, int) else list(s.target),
                           "duration": s.duration, "anchor": list(s.anchor), "facing": s.facing} for s in self.steps]}


# ---------------------------------------------------------------- templates

# Joint offsets from the ground point under the body, facing right, y down.
_TEMPLATES = {
    "stand": [(5, -92), (0, -82), (-3, -80), (-4, -62), (-3, -46), (3, -80), (4, -62), (5, -46),
              (0, -48), (-3, -48), (-2, -24), (-2, 0), (3, -48), (3, -24), (3, 0)],
    "walk0": [(7, -91), (2, -81), (-1, -79), (4, -63), (10, -49), (5, -79), (-4, -62), (-10, -49),
              (0, -47), (-3, -47), (-8, -24), (-16, 0), (3, -47), (8, -25), (12, 0)],
    "walk1": [(7, -91), (2, -81), (-1, -79), (-4, -62), (-10, -49), (5, -79), (4, -63), (10, -49),
              (0, -47), (-3, -47), (8, -25), (12, 0), (3, -47), (-8, -24), (-16, 0)],
    "sit": [(3, -70), (-2, -60), (-4, -58), (4, -42), (14, -34), (0, -58), (6, -41), (16, -33),
            (0, -26), (-2, -26), (20, -27), (21, 0), (2, -26), (21, -26), (23, 0)],
    "lie": [(46, -10), (34, -8), (32, -9), (20, -6), (8, -5), (34, -7), (22, -4), (10, -3),
            (0, -6), (-2, -6), (-24, -6), (-48, -5), (2, -6), (-22, -5), (-46, -4)],
    "touch": [(7, -91), (2, -81), (0, -79), (12, -68), (28, -56), (4, -79), (5, -62), (6, -46),
              (0, -48), (-3, -48), (-2, -24), (-2, 0), (3, -48), (3, -24), (3, 0)],
}
_TEMPLATES = {k: np.array(v, dtype=np.float64) for k, v in _TEMPLATES.items()}
_R_ELBOW, _R_WRIST = 3, 4


def template_offsets(action: str, facing: str = "right", scale: float = 1.0, phase: int = 0) -> np.ndarray:
    if action == "walk":
        key = f"walk{phase % 2}"
    elif action in _TEMPLATES:
        key = action
    else:
        raise ParameterError(f"unknown action {action!r}")
    if facing not in ("left", "right"):
        raise ParameterError(f"facing must be 'left' or 'right', got {facing!r}")
    off = _TEMPLATES[key] * scale
    if facing == "left":
        off = off * np.array([-1.0, 1.0])
    return off


def pose_template(action: str, facing: str = "right", anchor=(0.0, 0.0), scale: float = 1.0, phase: int = 0) -> Pose2D:
    """Canonical stick figure for ``action`` with its ground point at ``anchor``.

    ``walk`` has two gait phases. The left-facing figure is the joint-wise
    x-reflection of the right-facing one about the anchor.
    """
    return Pose2D(np.asarray(anchor, dtype=np.float64) + template_offsets(action, facing, scale, phase))


def torso_height(action: str, scale: float = 1.0) -> float:
    return -template_offsets(action, "right", scale)[TORSO, 1]


# ---------------------------------------------------------------- scenes and scripts


def _disjoint(a: Furniture, b: Furniture, gap: int) -> bool:
    return a.x1 + gap <= b.x0 or b.x1 + gap <= a.x0 or a.y1 + gap <= b.y0 or b.y1 + gap <= a.y0


def generate_scene(seed: int) -> SceneSpec:
    """2 to 5 disjoint furniture rectangles; at least two afford an interaction."""
    rng = np.random.default_rng([seed, 0])
    n = int(rng.integers(2, 6))
    sizes = {"lie": ((120, 160), (30, 50)), "sit": ((50, 90), (30, 60)),
             "touch": ((40, 80), (40, 80)), "none": ((40, 100), (30, 70))}
    pieces: list[Furniture] = []
    for i in range(n):
        affordance = str(rng.choice(["sit", "lie", "touch"])) if i < 2 else str(rng.choice(AFFORDANCES, p=[0.35, 0.2, 0.25, 0.2]))
        (wlo, whi), (hlo, hhi) = sizes[affordance]
        for _ in range(200):
            w = int(rng.integers(wlo, whi + 1))
            h = int(rng.integers(hlo, hhi + 1))
            x0 = int(rng.integers(30, IMAGE_W - 30 - w + 1))
            y0 = int(rng.integers(100, 216))
            cand = Furniture(x0, y0, x0 + w, min(y0 + h, IMAGE_H - 4), affordance, min(h, IMAGE_H - 4 - y0))
            if all(_disjoint(cand, f, 12) for f in pieces):
                pieces.append(cand)
                break
    return SceneSpec(tuple(pieces), seed=seed)


def interaction_anchor(f: Furniture, action: str, facing: str, scale: float, rng: np.random.Generator) -> tuple[float, float]:
    """Ground point that puts the actor on (sit, lie) or next to (touch) the furniture."""
    if action in ("sit", "lie"):
        cx = (f.x0 + f.x1) / 2.0 + rng.uniform(-0.15, 0.15) * (f.x1 - f.x0)
        if action == "lie":
            cx = (f.x0 + f.x1) / 2.0
        return cx, f.y0 + 3 + torso_height(action, scale)
    wrist = template_offsets("touch", facing, scale)[_R_WRIST]
    x_target = f.x0 + 8 if facing == "right" else f.x1 - 8
    y_target = f.y0 + 6 + rng.uniform(0, min(10, f.y1 - f.y0 - 8))
    return x_target - wrist[0], y_target - wrist[1]


def _random_waypoint(rng) -> tuple[float, float]:
    return float(rng.uniform(*WALK_X)), float(rng.uniform(*WALK_Y))


def script_episode(scene: SceneSpec, seed: int, duration_s: float, fps: int = FPS) -> ActionScript:
    """Alternate walking with interactions; each interaction is bracketed by walks."""
    if duration_s < 10:
        raise ParameterError("episodes must last at least 10 s")
    rng = np.random.default_rng([seed, 1])
    scale = float(rng.uniform(0.9, 1.1))
    speed = float(rng.uniform(32.0, 45.0)) / fps  # px per frame
    total = int(round(duration_s * fps))
    interactive = [i for i, f in enumerate(scene.furniture) if f.affordance in INTERACTIONS]
    pos = _random_waypoint(rng)
    start, facing = pos, str(rng.choice(["left", "right"]))
    start_facing = facing
    steps: list[ScriptStep] = []
    frames = 0
    last = None

    def walk_to(target, anchor):
        nonlocal pos, frames, facing
        dist = math.hypot(anchor[0] - pos[0], anchor[1] - pos[1])
        n = max(1, int(math.ceil(dist / speed)))
        if abs(anchor[0] - pos[0]) > 1e-6:
            facing = "right" if anchor[0] > pos[0] else "left"
        steps.append(ScriptStep("walk", target, n, anchor, facing))
        pos = anchor
        frames += n

    def hold(action, target, n, face):
        nonlocal frames
        steps.append(ScriptStep(action, target, n, pos, face))
        frames += n

    while frames < total:
        choices = [i for i in interactive if i != last]
        if choices and rng.random() < 0.65:
            idx = int(rng.choice(choices))
            f = scene.furniture[idx]
            face = str(rng.choice(["left", "right"]))
            anchor = interaction_anchor(f, f.affordance, face, scale, rng)
            walk_to(idx, anchor)
            hold("stand", idx, int(rng.integers(3, 7)), face)
            hold(f.affordance, idx, int(round(rng.uniform(1.5, 5.0) * fps)), face)
            hold("stand", idx, int(rng.integers(3, 7)), face)
            last = idx
        else:
            wp = _random_waypoint(rng)
            walk_to(wp, wp)
            pause = int(rng.integers(0, fps + 1))
            if pause:
                hold("stand", wp, pause, facing)
            last = None
    # trim the overshoot off the final step
    extra = frames - total
    while extra > 0:
        s = steps[-1]
        if s.duration > extra:
            steps[-1] = replace(s, duration=s.duration - extra)
            if s.action == "walk":
                # keep the same velocity over the shortened walk
                prev = steps[-2].anchor if len(steps) > 1 else start
                frac = (s.duration - extra) / s.duration
                steps[-1] = replace(steps[-1], anchor=(prev[0] + frac * (s.anchor[0] - prev[0]),
                                                      prev[1] + frac * (s.anchor[1] - prev[1])))
            extra = 0
        else:
            extra -= s.duration
            steps.pop()
    return ActionScript(steps, start, start_facing, scale)


# ---------------------------------------------------------------- thermal model


def step_thermal(state: ThermalState, contact_mask, dt: float) -> ThermalState:
    """Exponential decay over ``dt`` seconds, then deposit under ``contact_mask``."""
    if not dt > 0:
        raise ParameterError("dt must be positive")
    factor = np.float32(math.exp(-dt / state.tau))
    buf = state.mark_buffer * factor
    if contact_mask is not None:
        m = np.asarray(contact_mask, dtype=bool)
        buf[m] = np.maximum(buf[m], np.float32(state.deposit))
    return replace(state, mark_buffer=buf)


def _pt(xy) -> tuple[int, int]:
    return int(round(xy[0] * 4)), int(round(xy[1] * 4))


def silhouette(pose: Pose2D, bones: Sequence[tuple[int, int]] = BONES, head: bool = True) -> np.ndarray:
    """Boolean mask of the skeleton drawn with fixed-width limbs."""
    mask = np.zeros((IMAGE_H, IMAGE_W), np.uint8)
    j = pose.joints
    for a, b in bones:
        cv2.line(mask, _pt(j[a]), _pt(j[b]), 1, LIMB_WIDTH, cv2.LINE_8, 2)
    if head:
        cv2.circle(mask, _pt(j[0]), HEAD_RADIUS * 4, 1, -1, cv2.LINE_8, 2)
    return mask.astype(bool)


def contact_mask(scene: SceneSpec, pose: Pose2D, action: str, target) -> np.ndarray | None:
    if action not in INTERACTIONS or not isinstance(target, int):
        return None
    f = scene.furniture[target]
    body = silhouette(pose, bones=((_R_ELBOW, _R_WRIST),), head=False) if action == "touch" else silhouette(pose)
    rect = np.zeros_like(body)
    rect[f.y0 : f.y1, f.x0 : f.x1] = True
    return body & rect


def scene_background(scene: SceneSpec) -> np.ndarray:
    bg = np.full((IMAGE_H, IMAGE_W), scene.ambient, np.float32)
    for f in scene.furniture:
        cv2.rectangle(bg, (f.x0, f.y0), (f.x1 - 1, f.y1 - 1), OUTLINE, 2)
    return bg


def render_frame(scene: SceneSpec, pose: Pose2D, state: ThermalState, marks: bool = True,
                 timestamp: float = 0.0, background: np.ndarray | None = None) -> ThermalFrame:
    """Background, then marks (unless ablated), then the actor at body temperature."""
    img = (scene_background(scene) if background is None else background).copy()
    if marks:
        img += state.mark_buffer
    img[silhouette(pose)] = state.body_temp
    np.clip(img, 0.0, 1.0, out=img)
    return ThermalFrame(img, timestamp)


# ---------------------------------------------------------------- clip simulation


@dataclass
class SimFrame:
    index: int
    pose: Pose2D
    action: str
    target: object
    state: ThermalState


def _expand(script: ActionScript) -> Iterator[tuple[str, object, np.ndarray, str, int]]:
    pos = np.asarray(script.start, dtype=np.float64)
    facing = script.start_facing
    walked = 0
    for s in script.steps:
        end = np.asarray(s.anchor, dtype=np.float64)
        for i in range(s.duration):
            if s.action == "walk":
                facing = s.facing
                a = pos + (i + 1) / s.duration * (end - pos)
                phase = (walked // 4) % 2
                walked += 1
            else:
                facing = s.facing
                a = end
                phase = 0
            yield s.action, s.target, a, facing, phase
        pos = end


def iter_simulation(scene: SceneSpec, script: ActionScript, tau: float = DEFAULT_TAU, fps: int = FPS,
                    jitter: float = 0.8, seed: int = 0) -> Iterator[SimFrame]:
    """Step the actor and the mark buffer frame by frame.

    ``tau <= 0`` means marks vanish instantly (nothing persists past contact).
    """
    rng = np.random.default_rng([seed, 2])
    state = ThermalState.empty(tau=tau if tau > 0 else 1.0)
    for t, (action, target, anchor, facing, phase) in enumerate(_expand(script)):
        joints = anchor + template_offsets(action, facing, script.body_scale, phase)
        if jitter > 0:
            joints = joints + rng.normal(0.0, jitter, joints.shape)
        pose = Pose2D.from_array(joints, clamp=True)
        contact = contact_mask(scene, pose, action, target)
        if tau > 0:
            state = step_thermal(state, contact, 1.0 / fps)
        else:
            buf = np.zeros_like(state.mark_buffer)
            if contact is not None:
                buf[contact] = state.deposit
            state = replace(state, mark_buffer=buf)
        yield SimFrame(t, pose, action, target, state)


def _annotations(scene: SceneSpec, script: ActionScript) -> list[Annotation]:
    out, t = [], 0
    for s in script.steps:
        if s.action in INTERACTIONS:
            out.append(Annotation(s.action, f"{scene.furniture[s.target].affordance}_{s.target}", t, t + s.duration - 1))
        t += s.duration
    return out


def simulate_clip(scene: SceneSpec, seed: int, duration_s: float = 30.0, tau: float = DEFAULT_TAU,
                  thermal_marks: bool = True, clip_id: str | None = None, out_root=None,
                  fps: int = FPS, jitter: float = 0.8) -> ClipRecord:
    """Simulate a 15 fps clip; write it in the dataset layout when ``out_root`` is given.

    ``thermal_marks=False`` (or ``tau <= 0``) renders with the mark buffer
    zeroed; poses and annotations are unchanged.
    """
    script = script_episode(scene, seed, duration_s, fps)
    bg = scene_background(scene)
    marks = thermal_marks and tau > 0
    frames, poses = [], []
    for sf in iter_simulation(scene, script, tau, fps, jitter, seed):
        frames.append(render_frame(scene, sf.pose, sf.state, marks=marks, timestamp=sf.index / fps, background=bg))
        poses.append(sf.pose)
    clip = ClipRecord(
        clip_id=clip_id or f"synth_{seed}",
        fps=fps,
        frames=frames,
        poses=poses,
        annotations=_annotations(scene, script),
        source="synthetic",
        meta={"actor": "synthetic", "room": f"scene_{scene.seed}", "intensity_range": [0, 65535],
              "seed": seed, "tau": tau, "jitter": jitter, "thermal_marks": marks, "scene": scene.to_json(), "script": script.to_json()},
    )
    if out_root is not None:
        write_clip(clip, out_root)
    return clip


@dataclass
class SynthConfig:
    n_clips: int = 20
    duration_s: float = 30.0
    tau: float = DEFAULT_TAU
    seed: int = 0
    thermal_marks: bool = True
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    jitter: float = 0.8
    extra: dict = field(default_factory=dict)


def clip_seed(base: int, i: int) -> int:
    return int(np.random.SeedSequence([base, i]).generate_state(1)[0])


def generate_dataset(root, cfg: SynthConfig) -> SplitManifest:
    """Write ``cfg.n_clips`` synthetic clips plus ``splits.json`` under ``root``."""
    ids = []
    for i in range(cfg.n_clips):
        s = clip_seed(cfg.seed, i)
        scene = generate_scene(s)
        cid = f"synth_{i:04d}"
        simulate_clip(scene, s, cfg.duration_s, cfg.tau, cfg.thermal_marks, cid, root, jitter=cfg.jitter)
        ids.append(cid)
    manifest = split_by_clip(ids, cfg.ratios, cfg.seed)
    manifest.save(Path(root) / "splits.json")
    return manifest
