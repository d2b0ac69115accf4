"""Intersection layout, the twelve fixed vehicle paths and conflict classification.

Frame: intersection center at the origin, x east, y north, right-hand traffic.
Each approach has one inbound lane offset half a lane width to the right of the
road centerline. Paths for the four entrances are built once in the "down"
frame (entering from the south, heading north) and rotated by quarter turns.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize

# quarter turns (counter-clockwise) that map the "down" frame onto each entrance
_ROTATION = {"D": 0, "R": 1, "U": 2, "L": 3}
_EXIT_BY_MANEUVER = {
    # entrance -> maneuver -> exit
    "D": {"right": "R", "straight": "U", "left": "L"},
    "R": {"right": "U", "straight": "L", "left": "D"},
    "U": {"right": "L", "straight": "D", "left": "R"},
    "L": {"right": "D", "straight": "R", "left": "U"},
}


class VehicleType(enum.Enum):
    """The twelve entrance/exit combinations, numbered as in the vehicle-type table."""

    DR = 1
    DU = 2
    DL = 3
    RU = 4
    RL = 5
    RD = 6
    LD = 7
    LR = 8
    LU = 9
    UL = 10
    UD = 11
    UR = 12

    @property
    def entrance(self) -> str:
        return self.name[0]

    @property
    def exit(self) -> str:
        return self.name[1]

    @property
    def maneuver(self) -> str:
        for maneuver, exit_ in _EXIT_BY_MANEUVER[self.entrance].items():
            if exit_ == self.exit:
                return maneuver
        raise AssertionError(self.name)

    @classmethod
    def from_maneuver(cls, entrance: str, maneuver: str) -> "VehicleType":
        return cls[entrance + _EXIT_BY_MANEUVER[entrance][maneuver]]


# concatenation order of the 16-dimensional state
EXPERIMENT_MODES = (
    VehicleType.DR,
    VehicleType.DL,
    VehicleType.RU,
    VehicleType.RL,
    VehicleType.LD,
    VehicleType.LU,
    VehicleType.UL,
    VehicleType.UD,
)


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class IntersectionLayout:
    zone_radius: float = 50.0
    lane_width: float = 3.75
    right_turn_radius: float = 1.875
    left_turn_radius: float = 5.625
    resolution: float = 0.1

    def validate(self) -> None:
        for name in ("zone_radius", "lane_width", "right_turn_radius", "left_turn_radius", "resolution"):
            if not getattr(self, name) > 0:
                raise GeometryError(f"layout.{name} must be positive, got {getattr(self, name)}")
        half = self.lane_width / 2
        # straight approach/departure legs must keep positive length
        if self.right_turn_radius >= self.zone_radius - half:
            raise GeometryError(
                f"layout.right_turn_radius={self.right_turn_radius} does not fit inside "
                f"zone_radius={self.zone_radius} with lane offset {half}"
            )
        if self.left_turn_radius >= self.zone_radius + half:
            raise GeometryError(
                f"layout.left_turn_radius={self.left_turn_radius} does not fit inside "
                f"zone_radius={self.zone_radius} with lane offset {half}"
            )
        if self.left_turn_radius <= half:
            raise GeometryError(
                f"layout.left_turn_radius={self.left_turn_radius} must exceed the lane offset {half} "
                "so the turn crosses the opposing lane"
            )


@dataclass(frozen=True)
class _Line:
    x0: float
    y0: float
    heading: float
    length: float

    def pose(self, s):
        return (
            self.x0 + s * math.cos(self.heading),
            self.y0 + s * math.sin(self.heading),
            np.full_like(s, self.heading, dtype=float),
        )

    def xy(self, s: float) -> tuple[float, float]:
        return self.x0 + s * math.cos(self.heading), self.y0 + s * math.sin(self.heading)

    def rotated(self, q: int) -> "_Line":
        x0, y0 = _rotate(self.x0, self.y0, q)
        return _Line(x0, y0, self.heading + q * math.pi / 2, self.length)


@dataclass(frozen=True)
class _Arc:
    cx: float
    cy: float
    radius: float
    start_angle: float  # polar angle of the start point about the center
    turn: int  # +1 counter-clockwise (left), -1 clockwise (right)
    start_heading: float
    length: float

    def pose(self, s):
        sweep = self.turn * s / self.radius
        angle = self.start_angle + sweep
        return (
            self.cx + self.radius * np.cos(angle),
            self.cy + self.radius * np.sin(angle),
            self.start_heading + sweep,
        )

    def xy(self, s: float) -> tuple[float, float]:
        angle = self.start_angle + self.turn * s / self.radius
        return self.cx + self.radius * math.cos(angle), self.cy + self.radius * math.sin(angle)

    def rotated(self, q: int) -> "_Arc":
        cx, cy = _rotate(self.cx, self.cy, q)
        turn = q * math.pi / 2
        return _Arc(cx, cy, self.radius, self.start_angle + turn, self.turn,
                    self.start_heading + turn, self.length)


def _rotate(x, y, quarter_turns: int):
    c = round(math.cos(quarter_turns * math.pi / 2))
    s = round(math.sin(quarter_turns * math.pi / 2))
    return c * x - s * y, s * x + c * y


@dataclass(frozen=True, eq=False)
class Path:
    """A fixed centerline from zone entry to zone exit.

    Arc progress ``p`` runs from 0 at zone entry to ``total_length``.  The
    signed center distance used in the state is ``d = center_offset - p``.
    """

    vehicle_type: VehicleType
    total_length: float
    center_offset: float
    resolution: float
    lane_width: float
    segments: tuple = field(repr=False)

    @cached_property
    def _breaks(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([seg.length for seg in self.segments])])

    @cached_property
    def sample_progress(self) -> np.ndarray:
        n = int(math.floor(self.total_length / self.resolution + 1e-9))
        return np.arange(n + 1) * self.resolution

    @cached_property
    def sampled_centerline(self) -> np.ndarray:
        """(N, 3) array of (x, y, heading) at every resolution step of arc length."""
        return self.poses_at_progress(self.sample_progress)

    def sample(self, resolution: float) -> np.ndarray:
        n = int(math.floor(self.total_length / resolution + 1e-9))
        progress = np.append(np.arange(n + 1) * resolution, self.total_length)
        if progress[-1] - progress[-2] < 1e-12:
            progress = progress[:-1]
        return self.poses_at_progress(progress)

    def poses_at_progress(self, progress) -> np.ndarray:
        p = np.atleast_1d(np.asarray(progress, dtype=float))
        out = np.empty((p.size, 3))
        idx = np.clip(np.searchsorted(self._breaks, p, side="right") - 1, 0, len(self.segments) - 1)
        for k, seg in enumerate(self.segments):
            mask = idx == k
            if not mask.any():
                continue
            out[mask, 0], out[mask, 1], out[mask, 2] = seg.pose(p[mask] - self._breaks[k])
        return out

    def xy(self, progress: float) -> tuple[float, float]:
        """Scalar (x, y) at arc progress; the fast path for per-step collision checks."""
        breaks = self._break_list
        k = 0
        while k + 1 < len(self.segments) and progress >= breaks[k + 1]:
            k += 1
        return self.segments[k].xy(progress - breaks[k])

    @cached_property
    def _break_list(self) -> list[float]:
        return [float(b) for b in self._breaks]

    @property
    def d_range(self) -> tuple[float, float]:
        return self.center_offset - self.total_length, self.center_offset

    @property
    def center_point(self) -> tuple[float, float, float]:
        return tuple(self.poses_at_progress(self.center_offset)[0])


def _down_frame_segments(maneuver: str, layout: IntersectionLayout):
    R = layout.zone_radius
    half = layout.lane_width / 2
    north = math.pi / 2
    if maneuver == "straight":
        line = _Line(half, -R, north, 2 * R)
        return (line,), R
    if maneuver == "right":
        r = layout.right_turn_radius
        leg = R - half - r
        arc = _Arc(half + r, -half - r, r, math.pi, -1, north, math.pi * r / 2)
        return (
            _Line(half, -R, north, leg),
            arc,
            _Line(half + r, -half, 0.0, leg),
        ), leg + arc.length / 2
    r = layout.left_turn_radius
    leg = R + half - r
    arc = _Arc(half - r, half - r, r, 0.0, 1, north, math.pi * r / 2)
    return (
        _Line(half, -R, north, leg),
        arc,
        _Line(half - r, half, math.pi, leg),
    ), leg + arc.length / 2


def build_paths(layout: IntersectionLayout | None = None) -> dict[VehicleType, Path]:
    """One path per vehicle type, keyed by type in table order."""
    layout = layout or IntersectionLayout()
    layout.validate()
    paths = {}
    for vt in VehicleType:
        segments, center_offset = _down_frame_segments(vt.maneuver, layout)
        paths[vt] = Path(
            vehicle_type=vt,
            total_length=float(sum(seg.length for seg in segments)),
            center_offset=float(center_offset),
            resolution=layout.resolution,
            lane_width=layout.lane_width,
            segments=tuple(seg.rotated(_ROTATION[vt.entrance]) for seg in segments),
        )
    return paths


def path_position(path: Path, d: float) -> tuple[float, float, float]:
    lo, hi = path.d_range
    if not lo - 1e-9 <= d <= hi + 1e-9:
        raise GeometryError(f"d={d} outside [{lo}, {hi}] for path {path.vehicle_type.name}")
    x, y, h = path.poses_at_progress(path.center_offset - d)[0]
    return float(x), float(y), float(h)


def positions_xy(paths, types, d) -> np.ndarray:
    """Vectorised (x, y) lookup for one vehicle per type; no range check."""
    out = np.empty((len(types), 2))
    for i, vt in enumerate(types):
        path = paths[vt]
        out[i] = path.xy(path.center_offset - float(d[i]))
    return out


@dataclass(frozen=True)
class ConflictRelation:
    pair: tuple[VehicleType, VehicleType]
    kind: str
    conflict_arc_positions: tuple[float, float] | None = None
    min_distance: float | None = None

    def swapped(self) -> "ConflictRelation":
        pos = self.conflict_arc_positions
        return ConflictRelation(
            (self.pair[1], self.pair[0]),
            self.kind,
            None if pos is None else (pos[1], pos[0]),
            self.min_distance,
        )


def closest_approach(path_a: Path, path_b: Path) -> tuple[float, float, float]:
    """Arc positions (p_a, p_b) minimising centerline distance, and that distance.

    Grid search over the sampled centerlines, then bounded local refinement on
    the exact curves.  Ties (overlapping centerlines) resolve to the earliest
    point along both paths.
    """
    ca = path_a.sampled_centerline[:, :2]
    cb = path_b.sampled_centerline[:, :2]
    dist = np.hypot(ca[:, None, 0] - cb[None, :, 0], ca[:, None, 1] - cb[None, :, 1])
    best = dist.min()
    ii, jj = np.nonzero(dist <= best + 1e-9)
    k = np.argmin(ii + jj)
    pa0 = float(path_a.sample_progress[ii[k]])
    pb0 = float(path_b.sample_progress[jj[k]])
    if best < 1e-9:
        return pa0, pb0, float(best)

    def sq_dist(p):
        xa = path_a.poses_at_progress(p[0])[0]
        xb = path_b.poses_at_progress(p[1])[0]
        return (xa[0] - xb[0]) ** 2 + (xa[1] - xb[1]) ** 2

    step = 2 * max(path_a.resolution, path_b.resolution)
    bounds = [
        (max(0.0, pa0 - step), min(path_a.total_length, pa0 + step)),
        (max(0.0, pb0 - step), min(path_b.total_length, pb0 + step)),
    ]
    res = optimize.minimize(sq_dist, [pa0, pb0], method="L-BFGS-B", bounds=bounds,
                            options={"ftol": 1e-15, "gtol": 1e-12})
    if res.fun < best**2:
        return float(res.x[0]), float(res.x[1]), float(math.sqrt(max(res.fun, 0.0)))
    return pa0, pb0, float(best)


def classify_conflict(a: VehicleType, b: VehicleType, paths, lane_width: float | None = None) -> ConflictRelation:
    if a == b:
        raise GeometryError("conflict classification needs two distinct vehicle types")
    if lane_width is None:
        lane_width = paths[a].lane_width
    if b.value < a.value:
        # shared exit lanes tie along a whole segment; compute in canonical order
        return classify_conflict(b, a, paths, lane_width).swapped()
    if a.entrance == b.entrance:
        return ConflictRelation((a, b), "diverging")
    p_a, p_b, dist = closest_approach(paths[a], paths[b])
    if a.exit == b.exit:
        return ConflictRelation((a, b), "converging", (p_a, p_b), dist)
    # opposing lanes sit exactly one lane width apart; they must not count as crossing
    if dist < lane_width - 1e-6:
        return ConflictRelation((a, b), "crossing", (p_a, p_b), dist)
    return ConflictRelation((a, b), "none", None, dist)


def conflict_table(paths, types=EXPERIMENT_MODES) -> dict[tuple[VehicleType, VehicleType], ConflictRelation]:
    table = {}
    for i, a in enumerate(types):
        for b in types[i + 1:]:
            rel = classify_conflict(a, b, paths)
            table[(a, b)] = rel
            table[(b, a)] = rel.swapped()
    return table
