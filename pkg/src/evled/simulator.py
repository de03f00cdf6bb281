"""Deterministic synthetic event streams from LED markers and moving edges.

Everything is seeded: the RNG for each marker and for the noise injector is
derived from (seed, role, index), so regenerating a scene with the same seed
is bit-identical regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .core import CameraIntrinsics, EventStream, Pose, rotation_exp
from .protocol import ProtocolConfig, encode_id, symbols_to_waveform, tile_waveform

TRAJECTORY_KINDS = ("static", "translation", "rotation", "waypoints")
SENSITIVITY_PRESETS = ("low", "medium", "high")

# preset -> contrast threshold (log-intensity units); low disables edge events
_PRESET_THRESHOLD = {"low": 0.4, "medium": 0.4, "high": 0.2}


@dataclass(frozen=True)
class LedMarker:
    """One modulated LED: protocol ID, world position, emitter radius, phase."""

    id: int
    position: np.ndarray
    radius_m: float
    phase_us: int = 0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if self.radius_m <= 0:
            raise ValueError("marker radius must be positive")
        if self.id < 0:
            raise ValueError("marker id must be non-negative")


@dataclass(frozen=True)
class EdgeSegment:
    """A straight scene edge rendered as a bright anti-aliased line."""

    p0: np.ndarray
    p1: np.ndarray
    contrast: float

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float).reshape(3))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float).reshape(3))
        if np.allclose(self.p0, self.p1):
            raise ValueError("segment endpoints must be distinct")
        if self.contrast <= 0:
            raise ValueError("segment contrast must be positive")


@dataclass
class TrajectorySpec:
    """Camera motion over [t0, t1]: constant-velocity kinds or timed waypoints."""

    kind: str
    t0_us: int
    t1_us: int
    pose0: Pose = field(default_factory=Pose.identity)
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    waypoints: tuple = ()

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.t0_us < self.t1_us:
            raise ValueError("need t0 < t1")
        self.linear_velocity = np.asarray(self.linear_velocity, dtype=float).reshape(3)
        self.angular_velocity = np.asarray(self.angular_velocity, dtype=float).reshape(3)
        self._slerp = None
        if self.kind == "waypoints":
            self.waypoints = tuple(self.waypoints)
            if len(self.waypoints) < 2:
                raise ValueError("waypoints kind needs at least two waypoints")
            times = np.array([t for t, _ in self.waypoints], dtype=np.int64)
            if np.any(np.diff(times) <= 0):
                raise ValueError("waypoint times must strictly increase")
            if times[0] > self.t0_us or times[-1] < self.t1_us:
                raise ValueError("waypoints must cover [t0, t1]")
            self._wp_times = times
            self._wp_translations = np.stack([p.translation for _, p in self.waypoints])
            self._slerp = Slerp(
                times.astype(float),
                Rotation.from_matrix(np.stack([p.rotation for _, p in self.waypoints])),
            )


def sample_trajectory(spec: TrajectorySpec, t_us: int) -> Pose:
    """Camera pose at time t; t must be inside [t0, t1]."""
    if not spec.t0_us <= t_us <= spec.t1_us:
        raise ValueError(f"t={t_us} outside trajectory range [{spec.t0_us}, {spec.t1_us}]")
    if spec.kind == "static":
        return spec.pose0
    dt_s = (t_us - spec.t0_us) * 1e-6
    if spec.kind == "translation":
        return Pose(spec.pose0.rotation, spec.pose0.translation + dt_s * spec.linear_velocity)
    if spec.kind == "rotation":
        return Pose(rotation_exp(dt_s * spec.angular_velocity) @ spec.pose0.rotation,
                    spec.pose0.translation)
    # waypoints: piecewise-linear translation, spherical-linear rotation
    times = spec._wp_times
    i = int(np.searchsorted(times, t_us, side="right")) - 1
    i = min(max(i, 0), len(times) - 2)
    u = (t_us - times[i]) / (times[i + 1] - times[i])
    trans = (1 - u) * spec._wp_translations[i] + u * spec._wp_translations[i + 1]
    rot = spec._slerp([float(t_us)]).as_matrix()[0]
    return Pose(rot, trans)


@dataclass(frozen=True)
class SimConfig:
    """Scene-independent simulation knobs.

    The sensitivity preset maps to a contrast threshold and switches edge
    events on or off (low records markers only); an explicit
    contrast_threshold overrides the preset value.
    """

    intrinsics: CameraIntrinsics
    preset: str = "medium"
    contrast_threshold: float | None = None
    render_step_us: int = 100
    noise_rate: float = 0.0
    jitter_us: int = 0
    dup_events: int = 0
    seed: int = 0
    frame_rate_hz: float = 40.0
    annotation_rate_hz: float = 120.0
    gt_pose_rate_hz: float = 100.0
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)

    def __post_init__(self):
        if self.preset not in SENSITIVITY_PRESETS:
            raise ValueError(f"unknown sensitivity preset {self.preset!r}")
        if self.contrast_threshold is not None and self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.render_step_us < 1:
            raise ValueError("render step must be at least 1 us")
        if self.noise_rate < 0 or self.jitter_us < 0 or self.dup_events < 0:
            raise ValueError("noise_rate, jitter_us, dup_events must be non-negative")
        if min(self.frame_rate_hz, self.annotation_rate_hz, self.gt_pose_rate_hz) <= 0:
            raise ValueError("rates must be positive")

    @property
    def threshold(self) -> float:
        if self.contrast_threshold is not None:
            return self.contrast_threshold
        return _PRESET_THRESHOLD[self.preset]

    @property
    def edge_events_enabled(self) -> bool:
        return self.preset != "low"


def sample_ticks(t0_us: int, t1_us: int, rate_hz: float) -> np.ndarray:
    """Tick grid t0 + round(k * 1e6 / rate), up to and including t1."""
    n = int(np.floor((t1_us - t0_us) * rate_hz / 1e6)) + 2
    ticks = t0_us + np.rint(np.arange(n) * 1e6 / rate_hz).astype(np.int64)
    return ticks[ticks <= t1_us]


def _marker_disk(marker: LedMarker, pose: Pose, K: CameraIntrinsics):
    """Projected center, pixel radius, and lit pixel centers; None if invisible.

    A pixel belongs to the disk when its center lies within the projected
    radius (half the mean focal length times radius/depth).
    """
    xc = pose.rotation.T @ (marker.position - pose.translation)
    if xc[2] <= 1e-9:
        return None
    u = K.fx * xc[0] / xc[2] + K.cx
    v = K.fy * xc[1] / xc[2] + K.cy
    r_px = 0.5 * (K.fx + K.fy) * marker.radius_m / xc[2]
    x0 = max(int(np.ceil(u - r_px)), 0)
    x1 = min(int(np.floor(u + r_px)), K.width - 1)
    y0 = max(int(np.ceil(v - r_px)), 0)
    y1 = min(int(np.floor(v + r_px)), K.height - 1)
    if x0 > x1 or y0 > y1:
        return None
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    inside = (gx - u) ** 2 + (gy - v) ** 2 <= r_px**2
    if not inside.any():
        return None
    return u, v, r_px, gx[inside].ravel(), gy[inside].ravel()


def simulate_led_events(markers, spec: TrajectorySpec, cfg: SimConfig) -> EventStream:
    """Events from the blinking LED disks along the camera trajectory.

    Each ON transition emits positive events and each OFF transition negative
    events at every pixel inside the projected disk, 1 + dup_events copies
    per pixel with uniform timestamp jitter of +-jitter_us.
    """
    K = cfg.intrinsics
    xs, ys, ts, ps = [], [], [], []
    for idx, marker in enumerate(markers):
        rng = np.random.default_rng([cfg.seed, 1, idx])
        waveform = symbols_to_waveform(encode_id(marker.id, cfg.protocol), cfg.protocol)
        copies = 1 + cfg.dup_events
        for t_tr, state in tile_waveform(waveform, spec.t0_us, spec.t1_us, marker.phase_us):
            disk = _marker_disk(marker, sample_trajectory(spec, t_tr), K)
            if disk is None:
                continue
            _, _, _, px, py = disk
            n = len(px) * copies
            if cfg.jitter_us > 0:
                jitter = rng.integers(-cfg.jitter_us, cfg.jitter_us + 1, n)
            else:
                jitter = np.zeros(n, dtype=np.int64)
            xs.append(np.repeat(px, copies))
            ys.append(np.repeat(py, copies))
            ts.append(t_tr + jitter)
            ps.append(np.full(n, 1 if state else -1, dtype=np.int8))
    if not xs:
        return EventStream.empty(K.width, K.height)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    t = np.concatenate(ts)
    p = np.concatenate(ps)
    keep = t >= 0
    order = np.argsort(t[keep], kind="stable")
    return EventStream(x[keep][order], y[keep][order], t[keep][order], p[keep][order],
                       K.width, K.height)


def _segment_distance(px, py, a, b):
    """Distance from pixel centers to the 2-D segment a-b."""
    d = b - a
    len2 = float(d @ d)
    rx = px - a[0]
    ry = py - a[1]
    if len2 < 1e-12:
        return np.hypot(rx, ry)
    u = np.clip((rx * d[0] + ry * d[1]) / len2, 0.0, 1.0)
    return np.hypot(rx - u * d[0], ry - u * d[1])


def _project_segments(edges, pose: Pose, K: CameraIntrinsics):
    """2-D endpoints of visible segments; segments touching the camera plane are skipped."""
    out = []
    for seg in edges:
        pts = []
        for endpoint in (seg.p0, seg.p1):
            xc = pose.rotation.T @ (endpoint - pose.translation)
            if xc[2] <= 1e-9:
                pts = None
                break
            pts.append(np.array([K.fx * xc[0] / xc[2] + K.cx, K.fy * xc[1] / xc[2] + K.cy]))
        if pts is not None:
            out.append((pts[0], pts[1], seg.contrast))
    return out


def _active_region(segments_2d, width, height, margin=4.0):
    """Flat pixel indices within `margin` of any segment's bounding box."""
    pieces = []
    for a, b, _ in segments_2d:
        x0 = max(int(np.floor(min(a[0], b[0]) - margin)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0]) + margin)), width - 1)
        y0 = max(int(np.floor(min(a[1], b[1]) - margin)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1]) + margin)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        pieces.append((gy.ravel() * width + gx.ravel()))
    if not pieces:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.concatenate(pieces))


def _render_levels(segments_2d, flat_idx, width):
    """Log-intensity at the given pixels: per-pixel max of segment tents."""
    levels = np.zeros(len(flat_idx))
    px = (flat_idx % width).astype(float)
    py = (flat_idx // width).astype(float)
    for a, b, contrast in segments_2d:
        dist = _segment_distance(px, py, a, b)
        np.maximum(levels, contrast * np.clip(1.0 - dist, 0.0, None), out=levels)
    return levels


def simulate_edge_events(edges, spec: TrajectorySpec, cfg: SimConfig) -> EventStream:
    """Threshold-crossing events from moving scene edges.

    The log-intensity field is rendered every render_step_us (anti-aliased
    segment tents of height `contrast` on a zero background); each pixel
    tracks a reference level and emits an event whenever the level crosses
    the reference by the contrast threshold, advancing the reference by one
    threshold per event. Event timestamps interpolate linearly inside the
    render step.
    """
    if not cfg.edge_events_enabled:
        raise ValueError("edge events are disabled by the low sensitivity preset")
    K = cfg.intrinsics
    width, height = K.width, K.height
    thresh = cfg.threshold
    times = np.arange(spec.t0_us, spec.t1_us, cfg.render_step_us, dtype=np.int64)
    if len(times) == 0 or times[-1] != spec.t1_us:
        times = np.append(times, spec.t1_us)

    ref = np.zeros(height * width)
    level_prev = np.zeros(height * width)
    segs0 = _project_segments(edges, sample_trajectory(spec, int(times[0])), K)
    prev_region = _active_region(segs0, width, height)
    if len(prev_region):
        init = _render_levels(segs0, prev_region, width)
        ref[prev_region] = init
        level_prev[prev_region] = init

    out_x, out_y, out_t, out_p = [], [], [], []
    t_prev = int(times[0])
    for t_now in times[1:]:
        t_now = int(t_now)
        segs = _project_segments(edges, sample_trajectory(spec, t_now), K)
        region = _active_region(segs, width, height)
        touched = np.union1d(region, prev_region)
        prev_region = region
        if len(touched) == 0:
            t_prev = t_now
            continue
        levels = _render_levels(segs, touched, width)
        lp = level_prev[touched]
        rf = ref[touched]
        diff = levels - rf
        # the 1e-9 guards exact-threshold crossings against accumulated
        # rounding in the reference level (ref only ever moves by +-thresh)
        n_pos = np.maximum(np.floor(diff / thresh + 1e-9), 0.0).astype(np.int64)
        n_neg = np.maximum(np.floor(-diff / thresh + 1e-9), 0.0).astype(np.int64)
        span = t_now - t_prev
        denom = levels - lp
        for count, sign in ((n_pos, 1), (n_neg, -1)):
            top = int(count.max()) if len(count) else 0
            for i in range(1, top + 1):
                m = count >= i
                crossing = rf[m] + sign * i * thresh
                frac = (crossing - lp[m]) / np.where(np.abs(denom[m]) > 1e-30, denom[m], 1e-30)
                t_evt = t_prev + np.clip(frac, 0.0, 1.0) * span
                idx = touched[m]
                out_x.append((idx % width).astype(np.int32))
                out_y.append((idx // width).astype(np.int32))
                out_t.append(np.rint(t_evt).astype(np.int64))
                out_p.append(np.full(int(m.sum()), sign, dtype=np.int8))
        ref[touched] = rf + (n_pos - n_neg) * thresh
        level_prev[touched] = levels
        t_prev = t_now

    if not out_x:
        return EventStream.empty(width, height)
    x = np.concatenate(out_x)
    y = np.concatenate(out_y)
    t = np.concatenate(out_t)
    p = np.concatenate(out_p)
    order = np.argsort(t, kind="stable")
    return EventStream(x[order], y[order], t[order], p[order], width, height)


def inject_noise(stream: EventStream, cfg: SimConfig,
                 t0_us: int | None = None, t1_us: int | None = None) -> EventStream:
    """Add uniform background-activity noise events (Poisson count).

    The time span defaults to the stream's own range; pass it explicitly for
    empty streams.
    """
    if cfg.noise_rate == 0:
        return stream
    if t0_us is None or t1_us is None:
        if len(stream) == 0:
            raise ValueError("empty stream needs an explicit time span")
        t0_us = int(stream.t[0]) if t0_us is None else t0_us
        t1_us = int(stream.t[-1]) if t1_us is None else t1_us
    if t1_us < t0_us:
        raise ValueError("need t0 <= t1")
    rng = np.random.default_rng([cfg.seed, 2])
    duration_s = (t1_us - t0_us) * 1e-6
    n = int(rng.poisson(cfg.noise_rate * duration_s * stream.width * stream.height))
    noise = EventStream(
        rng.integers(0, stream.width, n),
        rng.integers(0, stream.height, n),
        np.sort(rng.integers(t0_us, t1_us + 1, n)),
        rng.choice(np.array([-1, 1], dtype=np.int8), n),
        stream.width,
        stream.height,
        validate=False,
    )
    return EventStream.merged([stream, noise])


@dataclass(frozen=True)
class Annotation:
    """Axis-aligned LED box at one annotation tick (inclusive pixel bounds)."""

    t_us: int
    marker_id: int
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def contains(self, x: int, y: int) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


def make_annotations(markers, spec: TrajectorySpec, cfg: SimConfig):
    """Bounding boxes of visible LED disks at the annotation rate.

    Boxes are the pixel bounds of the rasterized disk expanded by a 1 px
    margin, clamped to the frame.
    """
    K = cfg.intrinsics
    out = []
    for tick in sample_ticks(spec.t0_us, spec.t1_us, cfg.annotation_rate_hz):
        pose = sample_trajectory(spec, int(tick))
        for marker in markers:
            disk = _marker_disk(marker, pose, K)
            if disk is None:
                continue
            _, _, _, px, py = disk
            out.append(
                Annotation(
                    int(tick),
                    marker.id,
                    max(int(px.min()) - 1, 0),
                    max(int(py.min()) - 1, 0),
                    min(int(px.max()) + 1, K.width - 1),
                    min(int(py.max()) + 1, K.height - 1),
                )
            )
    return out


def export_ground_truth(spec: TrajectorySpec, cfg: SimConfig):
    """(t, Pose) samples of the trajectory at the ground-truth pose rate."""
    return [
        (int(tick), sample_trajectory(spec, int(tick)))
        for tick in sample_ticks(spec.t0_us, spec.t1_us, cfg.gt_pose_rate_hz)
    ]
