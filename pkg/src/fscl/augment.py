"""Feature-space augmentations: crop-resize, flip, right-angle rotation.

Classic image augmentations adapted to C×H×W activation maps.  Everything is
index remapping (nearest neighbor), so outputs keep the exact value set of the
input channel — no interpolation, no negative values, and the channel axis is
never mixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AugmentError

#: quarter-turn steps allowed by the rotation component
ROTATIONS = (0, 90, 180, 270)


@dataclass
class AugmentPolicy:
    """Randomized augmentation chain configuration.

    ``rotation_probs`` maps degrees (0/90/180/270) to selection probability;
    probabilities must sum to 1.
    """

    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    flip_probability: float = 0.5
    rotation_probs: dict[int, float] = field(
        default_factory=lambda: {0: 0.5, 90: 1.0 / 6.0, 180: 1.0 / 6.0, 270: 1.0 / 6.0}
    )

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise AugmentError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        if not (0.0 <= self.flip_probability <= 1.0):
            raise AugmentError("flip_probability must lie in [0, 1]")
        for deg, p in self.rotation_probs.items():
            if deg not in ROTATIONS:
                raise AugmentError(f"rotation angle {deg} not in {ROTATIONS}")
            if not (0.0 <= p <= 1.0):
                raise AugmentError("rotation probabilities must lie in [0, 1]")
        if abs(sum(self.rotation_probs.values()) - 1.0) > 1e-9:
            raise AugmentError("rotation probabilities must sum to 1")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        """Policy whose chain is always a no-op (useful for tests/ablations)."""
        return cls(crop_scale_range=(1.0, 1.0), flip_probability=0.0,
                   rotation_probs={0: 1.0})

    def to_dict(self) -> dict:
        return {
            "crop_scale_range": list(self.crop_scale_range),
            "flip_probability": self.flip_probability,
            "rotation_probs": {str(k): v for k, v in self.rotation_probs.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AugmentPolicy":
        return cls(
            crop_scale_range=tuple(doc.get("crop_scale_range", (0.6, 1.0))),
            flip_probability=float(doc.get("flip_probability", 0.5)),
            rotation_probs={
                int(k): float(v)
                for k, v in doc.get(
                    "rotation_probs",
                    {0: 0.5, 90: 1 / 6, 180: 1 / 6, 270: 1 / 6},
                ).items()
            },
        )


def spatial_crop_resize(fm: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    """Crop an h×w window at (top, left) and resize back to H×W.

    Nearest-neighbor index map: out[c, i, j] = fm[c, top + (i*h)//H, left + (j*w)//W].
    A full-window crop is the identity.
    """
    _, H, W = fm.shape
    if h < 1 or w < 1:
        raise AugmentError(f"crop window must be at least 1x1, got {h}x{w}")
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise AugmentError(
            f"crop window (top={top}, left={left}, h={h}, w={w}) "
            f"outside {H}x{W} grid"
        )
    rows = top + (np.arange(H) * h) // H
    cols = left + (np.arange(W) * w) // W
    return fm[:, rows[:, None], cols[None, :]].copy()


def horizontal_flip(fm: np.ndarray) -> np.ndarray:
    """Mirror each channel left-right: out[c, i, j] = fm[c, i, W-1-j]."""
    return fm[:, :, ::-1].copy()


def rotate90(fm: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Rotate the spatial grid counterclockwise by 90° * quarter_turns."""
    q = quarter_turns % 4
    _, H, W = fm.shape
    if q % 2 == 1 and H != W:
        raise AugmentError(f"odd quarter turns need a square grid, got {H}x{W}")
    if q == 0:
        return fm.copy()
    return np.ascontiguousarray(np.rot90(fm, k=q, axes=(1, 2)))


def _augment_once(fm: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    _, H, W = fm.shape
    lo, hi = policy.crop_scale_range
    scale = rng.uniform(lo, hi)
    h = max(1, int(round(scale * H)))
    w = max(1, int(round(scale * W)))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    out = spatial_crop_resize(fm, top, left, h, w)
    if rng.uniform() < policy.flip_probability:
        out = horizontal_flip(out)
    degrees = sorted(policy.rotation_probs)
    probs = np.array([policy.rotation_probs[d] for d in degrees])
    deg = degrees[int(rng.choice(len(degrees), p=probs / probs.sum()))]
    if deg:
        out = rotate90(out, deg // 90)
    return out


def sample_view_pair(
    fm: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw two independent augmentation chains of the same input.

    Returns (query view, key view); deterministic given the generator state.
    """
    x_q = _augment_once(fm, policy, rng)
    x_k = _augment_once(fm, policy, rng)
    return x_q, x_k
