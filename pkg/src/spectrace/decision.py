"""Decision rules on top of response maps.

Response maps are orientation-ambiguous: when a splice covers most of the
frame, the small authentic remainder is what disagrees with the dominant
mode. maybe_invert normalizes orientation before any scoring. Detection
scores an image as a whole (spatial average or thresholded area fraction);
localization thresholds the same post-inversion map into a binary mask so
the two outputs cannot contradict each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .consistency import ResponseMap

DETECTION_METHODS = ("spavg", "pctarea")


@dataclass(frozen=True)
class Thresholds:
    delta_b: float = 0.25
    delta_l: float | None = None
    rho_threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.delta_b <= 1.0:
            raise ValueError("delta_b must lie in [0, 1]")
        if self.delta_l is not None and not 0.0 <= self.delta_l <= 1.0:
            raise ValueError("delta_l must lie in [0, 1]")
        if not 0.0 <= self.rho_threshold <= 1.0:
            raise ValueError("rho_threshold must lie in [0, 1]")

    @property
    def localization_threshold(self) -> float:
        # delta_l falls back to delta_b when unset
        return self.delta_b if self.delta_l is None else self.delta_l


@dataclass
class DetectionResult:
    image_id: str
    method: str
    score: float
    inverted: bool

    def __post_init__(self):
        if self.method not in DETECTION_METHODS:
            raise ValueError(f"unknown detection method {self.method!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("detection score must lie in [0, 1]")

    def verdict(self, rho_threshold: float = 0.5) -> bool:
        """True (spliced) when the score strictly exceeds the cutoff."""
        return self.score > rho_threshold

    def csv_row(self, rho_threshold: float = 0.5) -> str:
        label = "spliced" if self.verdict(rho_threshold) else "authentic"
        return f"{self.image_id},{self.method},{self.score:.6f},{int(self.inverted)},{label}"


@dataclass
class BinaryMask:
    image_id: str
    values: np.ndarray = field(repr=False)
    threshold: float | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype != np.bool_:
            raise ValueError("mask values must be boolean")
        if v.ndim != 2:
            raise ValueError("mask must be 2-D")
        self.values = v


def maybe_invert(response: ResponseMap) -> tuple[ResponseMap, bool]:
    """Flip the map (1 - R) when its mean is strictly above 0.5.

    A majority-high map means the dominant mode itself was the anomaly, so
    orientation is restored by inversion. Returns (map, inverted_flag).
    """
    if float(response.values.mean()) > 0.5:
        return ResponseMap(response.image_id, 1.0 - response.values), True
    return response, False


def detect_spavg(response: ResponseMap, inverted: bool = False) -> DetectionResult:
    """Score an already-oriented map by its spatial average."""
    return DetectionResult(response.image_id, "spavg", float(response.values.mean()), inverted)


def detect_pctarea(
    response: ResponseMap, delta_b: float, inverted: bool = False
) -> DetectionResult:
    """Score an already-oriented map by the fraction of pixels strictly
    above delta_b."""
    score = float((response.values > delta_b).mean())
    return DetectionResult(response.image_id, "pctarea", score, inverted)


def score_response(
    response: ResponseMap, method: str, thresholds: Thresholds
) -> DetectionResult:
    """Orientation-normalize, then score with the chosen detector."""
    if method not in DETECTION_METHODS:
        raise ValueError(f"unknown detection method {method!r}, expected one of {DETECTION_METHODS}")
    oriented, inverted = maybe_invert(response)
    if method == "spavg":
        return detect_spavg(oriented, inverted)
    return detect_pctarea(oriented, thresholds.delta_b, inverted)


def localize(response: ResponseMap, delta_l: float | Thresholds) -> BinaryMask:
    """Orientation-normalize, then mark pixels strictly above delta_l."""
    cut = delta_l.localization_threshold if isinstance(delta_l, Thresholds) else float(delta_l)
    if not 0.0 <= cut <= 1.0:
        raise ValueError("delta_l must lie in [0, 1]")
    oriented, _ = maybe_invert(response)
    return BinaryMask(response.image_id, oriented.values > cut, cut)
