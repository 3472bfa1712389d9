"""Deterministic synthetic gait generator.

Builds labeled 20-joint skeleton sequences from a two-segment-per-limb
stick figure: each limb's joint angles follow amplitude * sin(2*pi*freq*t
+ phase), joints are placed along the kinematic chain with per-walker
bone lengths, and optional Gaussian noise is added per coordinate. Output
conforms to the builtin20 joint layout, so generated data drives the full
pipeline without a custom partition scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .skeldata import SkeletonFrame, SkeletonSequence

BONE_NAMES = (
    "torso_lower", "torso_upper", "neck", "shoulder_offset", "hip_offset",
    "upper_arm", "forearm", "hand", "thigh", "shin", "foot",
)

BASE_BONE_LENGTHS = {
    "torso_lower": 0.25,
    "torso_upper": 0.25,
    "neck": 0.15,
    "shoulder_offset": 0.20,
    "hip_offset": 0.10,
    "upper_arm": 0.30,
    "forearm": 0.26,
    "hand": 0.08,
    "thigh": 0.42,
    "shin": 0.40,
    "foot": 0.15,
}

LIMB_NAMES = ("arm_l", "elbow_l", "arm_r", "elbow_r", "leg_l", "knee_l", "leg_r", "knee_r")

BASE_AMPLITUDES = {
    "arm_l": 0.50, "elbow_l": 0.25, "arm_r": 0.50, "elbow_r": 0.25,
    "leg_l": 0.55, "knee_l": 0.30, "leg_r": 0.55, "knee_r": 0.30,
}

# left leg leads; arms counter-swing their own side's leg
BASE_PHASES = {
    "arm_l": math.pi, "elbow_l": 1.5 * math.pi,
    "arm_r": 0.0, "elbow_r": 0.5 * math.pi,
    "leg_l": 0.0, "knee_l": 0.5 * math.pi,
    "leg_r": math.pi, "knee_r": 1.5 * math.pi,
}

# (parent joint, child joint, bone name) for every generated segment
BONE_SEGMENTS = (
    (0, 1, "torso_lower"), (1, 2, "torso_upper"), (2, 3, "neck"),
    (2, 4, "shoulder_offset"), (2, 8, "shoulder_offset"),
    (4, 5, "upper_arm"), (5, 6, "forearm"), (6, 7, "hand"),
    (8, 9, "upper_arm"), (9, 10, "forearm"), (10, 11, "hand"),
    (0, 12, "hip_offset"), (0, 16, "hip_offset"),
    (12, 13, "thigh"), (13, 14, "shin"), (14, 15, "foot"),
    (16, 17, "thigh"), (17, 18, "shin"), (18, 19, "foot"),
)


@dataclass
class WalkerSpec:
    """One synthetic identity: anthropometrics plus a walking pattern."""

    identity: str
    bone_lengths: dict[str, float] = field(default_factory=lambda: dict(BASE_BONE_LENGTHS))
    frequency: float = 1.0  # gait cycles per second
    phases: dict[str, float] = field(default_factory=lambda: dict(BASE_PHASES))
    amplitudes: dict[str, float] = field(default_factory=lambda: dict(BASE_AMPLITUDES))
    noise_sigma: float = 0.0  # meters, per coordinate

    def validate(self) -> None:
        missing = set(BONE_NAMES) - set(self.bone_lengths)
        if missing:
            raise ValueError(f"walker {self.identity!r}: missing bone lengths {sorted(missing)}")
        for name in BONE_NAMES:
            if self.bone_lengths[name] <= 0:
                raise ValueError(f"walker {self.identity!r}: bone {name!r} must be > 0")
        if self.frequency <= 0:
            raise ValueError(f"walker {self.identity!r}: frequency must be > 0")
        if self.noise_sigma < 0:
            raise ValueError(f"walker {self.identity!r}: noise sigma must be >= 0")
        for name in LIMB_NAMES:
            if name not in self.amplitudes or name not in self.phases:
                raise ValueError(f"walker {self.identity!r}: limb {name!r} needs amplitude and phase")


def _sagittal(theta: float) -> np.ndarray:
    """Unit vector of a limb hanging down, swung by theta about the
    lateral axis (positive theta moves the tip backward)."""
    return np.array([0.0, -math.cos(theta), -math.sin(theta)])


def _shank_forward(theta: float) -> np.ndarray:
    """Forward unit vector rotated with the shank, for the foot segment."""
    return np.array([0.0, -math.sin(theta), math.cos(theta)])


def skeleton_at(spec: WalkerSpec, t: float, phase_offset: float = 0.0) -> np.ndarray:
    """Noise-free joint positions (20 x 3) of the walker at time t."""
    lengths = spec.bone_lengths
    omega = 2.0 * math.pi * spec.frequency

    def angle(limb: str) -> float:
        return spec.amplitudes[limb] * math.sin(omega * t + spec.phases[limb] + phase_offset)

    joints = np.zeros((20, 3))
    hip_center = np.zeros(3)
    joints[0] = hip_center
    joints[1] = spine = hip_center + np.array([0.0, lengths["torso_lower"], 0.0])
    joints[2] = shoulder_center = spine + np.array([0.0, lengths["torso_upper"], 0.0])
    joints[3] = shoulder_center + np.array([0.0, lengths["neck"], 0.0])

    for side, sign, arm, elbow, base in (
        ("l", 1.0, "arm_l", "elbow_l", 4),
        ("r", -1.0, "arm_r", "elbow_r", 8),
    ):
        shoulder = shoulder_center + np.array([sign * lengths["shoulder_offset"], 0.0, 0.0])
        upper_dir = _sagittal(angle(arm))
        lower_dir = _sagittal(angle(arm) + angle(elbow))
        joints[base] = shoulder
        joints[base + 1] = elbow_pos = shoulder + lengths["upper_arm"] * upper_dir
        joints[base + 2] = wrist = elbow_pos + lengths["forearm"] * lower_dir
        joints[base + 3] = wrist + lengths["hand"] * lower_dir

    for side, sign, leg, knee, base in (
        ("l", 1.0, "leg_l", "knee_l", 12),
        ("r", -1.0, "leg_r", "knee_r", 16),
    ):
        hip = hip_center + np.array([sign * lengths["hip_offset"], 0.0, 0.0])
        thigh_dir = _sagittal(angle(leg))
        shank_angle = angle(leg) + angle(knee)
        shank_dir = _sagittal(shank_angle)
        joints[base] = hip
        joints[base + 1] = knee_pos = hip + lengths["thigh"] * thigh_dir
        joints[base + 2] = ankle = knee_pos + lengths["shin"] * shank_dir
        joints[base + 3] = ankle + lengths["foot"] * _shank_forward(shank_angle)

    return joints


def _yaw(joints: np.ndarray, degrees: float) -> np.ndarray:
    rad = math.radians(degrees)
    c, s = math.cos(rad), math.sin(rad)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return joints @ rot.T


def generate(
    specs: list[WalkerSpec],
    sequences_per_identity: int,
    frames_per_sequence: int,
    frame_rate: float = 30.0,
    seed: int = 0,
    views: list[tuple[str, float]] | None = None,
) -> list[SkeletonSequence]:
    """Generate labeled sequences, deterministically per seed.

    Each sequence draws its own start phase and noise from a stream keyed
    by (seed, identity index, sequence index), so generation parallelizes
    and reordering specs never changes a walker's data. When views are
    given as (name, yaw degrees) pairs, sequences cycle through them and
    all joints are yaw-rotated accordingly.
    """
    if not specs:
        raise ValueError("need at least one walker spec")
    if frames_per_sequence < 1:
        raise ValueError(f"frames_per_sequence must be >= 1, got {frames_per_sequence}")
    if frame_rate <= 0:
        raise ValueError(f"frame_rate must be > 0, got {frame_rate}")
    for spec in specs:
        spec.validate()

    sequences = []
    for i, spec in enumerate(specs):
        for j in range(sequences_per_identity):
            rng = np.random.default_rng([seed, i, j])
            phase_offset = rng.uniform(0.0, 2.0 * math.pi)
            frames = []
            for k in range(frames_per_sequence):
                joints = skeleton_at(spec, k / frame_rate, phase_offset)
                if spec.noise_sigma > 0:
                    joints = joints + rng.normal(0.0, spec.noise_sigma, size=joints.shape)
                frames.append(joints)
            view = None
            if views:
                name, yaw_deg = views[j % len(views)]
                view = name
                frames = [_yaw(f, yaw_deg) for f in frames]
            sequences.append(
                SkeletonSequence(
                    frames=[SkeletonFrame(joints=f) for f in frames],
                    identity=spec.identity,
                    view=view,
                )
            )
    return sequences


def make_walker_specs(
    n_identities: int,
    *,
    seed: int = 0,
    length_spread: float = 0.2,
    freq_spread: float = 0.3,
    amplitude_spread: float = 0.25,
    phase_jitter: float = 0.3,
    noise_sigma: float = 0.0,
) -> list[WalkerSpec]:
    """Walker population with controllable separability.

    Every bone length and limb amplitude varies independently per identity
    (uniform within +-spread of the base value), and gait frequency within
    +-freq_spread, so identities differ in both static geometry and motion.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    specs = []
    for i in range(n_identities):
        lengths = {
            name: base * (1.0 + length_spread * rng.uniform(-1.0, 1.0))
            for name, base in BASE_BONE_LENGTHS.items()
        }
        amplitudes = {
            name: base * (1.0 + amplitude_spread * rng.uniform(-1.0, 1.0))
            for name, base in BASE_AMPLITUDES.items()
        }
        phases = {
            name: base + phase_jitter * rng.uniform(-1.0, 1.0)
            for name, base in BASE_PHASES.items()
        }
        frequency = 1.0 * (1.0 + freq_spread * rng.uniform(-1.0, 1.0))
        specs.append(
            WalkerSpec(
                identity=f"id{i:03d}",
                bone_lengths=lengths,
                frequency=frequency,
                phases=phases,
                amplitudes=amplitudes,
                noise_sigma=noise_sigma,
            )
        )
    return specs
