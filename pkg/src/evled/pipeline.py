"""Per-frame processing: motion compensation, per-pixel ID decoding,
detection clustering, and PnP camera localization.

Frames are independent given the per-frame event window; each window gets a
fresh time map, so warped coordinates never mix across windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .cmax import MODELS, CmaxConfig, WarpParams, estimate_motion, warp_events
from .core import CameraIntrinsics, EventStream, Pose, rotation_exp, skew, so3_right_jacobian
from .protocol import DecodedId, ProtocolConfig, decode_intervals


class PnpError(RuntimeError):
    """Pose estimation failed for a recoverable, per-frame reason."""


class InsufficientCorrespondences(PnpError):
    pass


class DegenerateConfiguration(PnpError):
    pass


@dataclass(frozen=True)
class Detection:
    """One decoded LED blob in a frame."""

    id: int
    center: tuple
    bbox: tuple  # (x_min, y_min, x_max, y_max), inclusive
    pixel_count: int
    t_us: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        cx, cy = self.center
        if not (x0 <= cx <= x1 and y0 <= cy <= y1):
            raise ValueError("center must lie inside the bounding box")
        if self.pixel_count < 1:
            raise ValueError("detection needs at least one pixel")


@dataclass(frozen=True)
class MarkerMap:
    """Known world positions (meters) of the LED markers, keyed by ID."""

    positions: dict

    def __post_init__(self):
        clean = {int(k): np.asarray(v, dtype=float).reshape(3) for k, v in self.positions.items()}
        object.__setattr__(self, "positions", clean)

    def __contains__(self, ident):
        return int(ident) in self.positions

    def __getitem__(self, ident):
        return self.positions[int(ident)]

    def __len__(self):
        return len(self.positions)

    def items(self):
        return self.positions.items()


@dataclass(frozen=True)
class PipelineConfig:
    """Per-frame window length, compensation switch, and stage configs."""

    window_us: int = 25_000
    compensate: bool = True
    model: str = "flow2"
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    cmax: CmaxConfig = field(default_factory=CmaxConfig)
    min_points_pnp: int = 4

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown motion model {self.model!r}")
        if self.min_points_pnp < 4:
            raise ValueError("PnP needs at least 4 correspondences")
        if self.window_us < self.protocol.pattern_period_us:
            raise ValueError(
                f"window ({self.window_us} us) must cover a full pattern "
                f"({self.protocol.pattern_period_us} us)"
            )


def decode_pixels(events: EventStream, cfg: PipelineConfig, positions=None):
    """Per-pixel decoded IDs from the positive events of one window.

    Positive events pass through the time-map debounce per pixel; the
    accepted timestamps feed the interval decoder. When warped (real-valued)
    positions are given they replace the event coordinates, rounded to the
    nearest pixel. Returns {(x, y): [DecodedId, ...]}.
    """
    width, height = events.width, events.height
    base = cfg.protocol.base_period_us
    tol = cfg.protocol.tolerance_us
    pos_mask = events.p == 1
    if positions is None:
        xs = events.x[pos_mask].astype(np.int64)
        ys = events.y[pos_mask].astype(np.int64)
    else:
        positions = np.asarray(positions, dtype=float)
        xs = np.rint(positions[pos_mask, 0]).astype(np.int64)
        ys = np.rint(positions[pos_mask, 1]).astype(np.int64)
    ts = events.t[pos_mask]
    keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    xs, ys, ts = xs[keep], ys[keep], ts[keep]
    if len(ts) == 0:
        return {}
    key = ys * width + xs
    order = np.lexsort((ts, key))
    key, ts = key[order], ts[order]
    boundaries = np.flatnonzero(np.diff(key)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(key)]])
    min_edges = cfg.protocol.bit_width + 2  # START + bits + closing edge
    out = {}
    for s, e in zip(starts, ends):
        group = ts[s:e]
        last = int(group[0])
        accepted = [last]
        for t_raw in group[1:]:
            t = int(t_raw)
            if t > last + base - tol:  # same rule as TimeMap.update
                accepted.append(t)
                last = t
        if len(accepted) < min_edges:
            continue
        decoded = decode_intervals(accepted, cfg.protocol)
        if decoded:
            out[(int(key[s] % width), int(key[s] // width))] = decoded
    return out


def cluster_detections(decoded: dict, t_frame_us: int):
    """Group decoded pixels into per-ID 8-connected components.

    Components of different IDs never merge; the detection center is the
    unweighted centroid of the component's pixels.
    """
    by_id = {}
    for (px, py), ids in decoded.items():
        for ident in {d.id for d in ids}:
            by_id.setdefault(ident, []).append((px, py))
    detections = []
    eight = np.ones((3, 3), dtype=int)
    for ident in sorted(by_id):
        pts = np.array(by_id[ident])
        x0, y0 = pts.min(axis=0)
        x1, y1 = pts.max(axis=0)
        mask = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        mask[pts[:, 1] - y0, pts[:, 0] - x0] = True
        labels, count = ndimage.label(mask, structure=eight)
        for lab in range(1, count + 1):
            ys, xs = np.nonzero(labels == lab)
            xs = xs + x0
            ys = ys + y0
            detections.append(
                Detection(
                    id=int(ident),
                    center=(float(xs.mean()), float(ys.mean())),
                    bbox=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
                    pixel_count=len(xs),
                    t_us=int(t_frame_us),
                )
            )
    detections.sort(key=lambda d: (d.id, d.bbox))
    return detections


def _normalize_2d(pts):
    """Hartley normalization: zero-mean, sqrt(2) RMS distance."""
    centroid = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1)))
    scale = np.sqrt(2.0) / max(rms, 1e-12)
    T = np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    return (pts - centroid) * scale, T


def _homography(src, dst):
    """DLT homography mapping src (N,2) -> dst (N,2), both normalized inside."""
    src_n, t_src = _normalize_2d(src)
    dst_n, t_dst = _normalize_2d(dst)
    rows = []
    for (a, b), (mx, my) in zip(src_n, dst_n):
        rows.append([a, b, 1, 0, 0, 0, -mx * a, -mx * b, -mx])
        rows.append([0, 0, 0, a, b, 1, -my * a, -my * b, -my])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h = vt[-1].reshape(3, 3)
    return np.linalg.inv(t_dst) @ h @ t_src


def _pose_from_homography(pts3d, calibrated, origin, basis):
    """Camera-from-world rotation/translation from a plane-induced homography."""
    plane_uv = (pts3d - origin) @ basis[:, :2]
    h = _homography(plane_uv, calibrated)
    scale = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    h = h * scale
    # points must end up in front of the camera
    hom = np.column_stack([plane_uv, np.ones(len(plane_uv))]) @ h.T
    if np.median(hom[:, 2]) < 0:
        h = -h
        hom = -hom
    r1, r2 = h[:, 0], h[:, 1]
    m = np.column_stack([r1, r2, np.cross(r1, r2)])
    u, _, vt = np.linalg.svd(m)
    m_ortho = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    r_cw = m_ortho @ basis.T
    t_cw = h[:, 2] - r_cw @ origin
    return r_cw, t_cw


def _pose_from_dlt(pts3d, calibrated):
    """Direct linear transform for >= 6 non-coplanar points."""
    rows = []
    for (x, y, z), (mx, my) in zip(pts3d, calibrated):
        rows.append([x, y, z, 1, 0, 0, 0, 0, -mx * x, -mx * y, -mx * z, -mx])
        rows.append([0, 0, 0, 0, x, y, z, 1, -my * x, -my * y, -my * z, -my])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    p = vt[-1].reshape(3, 4)
    m = p[:, :3]
    u, s, vt2 = np.linalg.svd(m)
    if np.mean(s) < 1e-12:
        raise DegenerateConfiguration("degenerate configuration")
    r_cw = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt2)]) @ vt2
    scale = np.mean(s)
    t_cw = p[:, 3] / scale
    depths = pts3d @ r_cw.T + t_cw
    if np.median(depths[:, 2]) < 0:
        r_cw = u @ np.diag([-1.0, -1.0, np.linalg.det(u @ vt2)]) @ vt2
        t_cw = -t_cw
    return r_cw, t_cw


def _project_cam(pts_cam, intrinsics):
    z = np.maximum(pts_cam[:, 2], 1e-9)
    return np.column_stack([
        intrinsics.fx * pts_cam[:, 0] / z + intrinsics.cx,
        intrinsics.fy * pts_cam[:, 1] / z + intrinsics.cy,
    ])


def _refine_pose(r_cw, t_cw, pts3d, pts2d, intrinsics, max_iters=50):
    """Damped (Levenberg-Marquardt) minimization of squared reprojection error.

    Steps are only accepted when they reduce the cost, so the returned
    per-iteration residual history is non-increasing by construction.
    """
    phi = Rotation.from_matrix(r_cw).as_rotvec()
    t = t_cw.copy()

    def residuals(phi_, t_):
        r = rotation_exp(phi_)
        cam = pts3d @ r.T + t_
        if np.any(cam[:, 2] <= 1e-9):
            return None, None
        return (_project_cam(cam, intrinsics) - pts2d).ravel(), cam

    res, cam = residuals(phi, t)
    if res is None:
        raise DegenerateConfiguration("initialization places points behind the camera")
    cost = float(res @ res)
    history = [cost]
    lam = 1e-3
    for _ in range(max_iters):
        r = rotation_exp(phi)
        jac = np.zeros((2 * len(pts3d), 6))
        z = cam[:, 2]
        for i, (point, c) in enumerate(zip(pts3d, cam)):
            d_proj = np.array([
                [intrinsics.fx / z[i], 0.0, -intrinsics.fx * c[0] / z[i] ** 2],
                [0.0, intrinsics.fy / z[i], -intrinsics.fy * c[1] / z[i] ** 2],
            ])
            d_phi = -r @ skew(point) @ so3_right_jacobian(phi)
            jac[2 * i : 2 * i + 2, :3] = d_proj @ d_phi
            jac[2 * i : 2 * i + 2, 3:] = d_proj
        jtj = jac.T @ jac
        jtr = jac.T @ res
        accepted = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)) + 1e-15 * np.eye(6), -jtr)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            res_new, cam_new = residuals(phi + delta[:3], t + delta[3:])
            if res_new is not None and float(res_new @ res_new) < cost:
                phi = phi + delta[:3]
                t = t + delta[3:]
                res, cam = res_new, cam_new
                cost = float(res_new @ res_new)
                history.append(cost)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted or np.linalg.norm(delta) < 1e-14:
            break
    return rotation_exp(phi), t, history


def solve_pnp(detections, markers: MarkerMap, intrinsics: CameraIntrinsics,
              min_points: int = 4, full_output: bool = False):
    """Camera pose from detection centers and known marker positions.

    Linear initialization (plane-induced homography for coplanar points,
    DLT otherwise) followed by damped nonlinear refinement of the total
    squared reprojection error. No outlier rejection.
    """
    pts3d, pts2d = [], []
    for det in detections:
        if det.id in markers:
            pts3d.append(markers[det.id])
            pts2d.append(det.center)
    if len(pts3d) < min_points:
        raise InsufficientCorrespondences(
            f"insufficient correspondences: {len(pts3d)} < {min_points}"
        )
    pts3d = np.asarray(pts3d)
    pts2d = np.asarray(pts2d, dtype=float)

    centered = pts3d - pts3d.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered)
    extent = max(float(svals[0]), 1e-12)
    if svals[1] < 1e-8 * extent:
        raise DegenerateConfiguration("degenerate configuration: markers are collinear")
    calibrated = np.column_stack([
        (pts2d[:, 0] - intrinsics.cx) / intrinsics.fx,
        (pts2d[:, 1] - intrinsics.cy) / intrinsics.fy,
    ])
    coplanar = svals[2] < 1e-6 * extent
    if not coplanar and len(pts3d) >= 6:
        r_cw, t_cw = _pose_from_dlt(pts3d, calibrated)
    else:
        # best-fit plane; exact for coplanar points, an adequate seed otherwise
        basis = vt.T  # columns: two in-plane directions then the normal
        basis[:, 2] = np.cross(basis[:, 0], basis[:, 1])  # right-handed frame
        r_cw, t_cw = _pose_from_homography(pts3d, calibrated, pts3d.mean(axis=0), basis)
    r_cw, t_cw, history = _refine_pose(r_cw, t_cw, pts3d, pts2d, intrinsics)
    pose = Pose(r_cw.T, -r_cw.T @ t_cw)
    if full_output:
        rms = np.sqrt(np.array(history) / len(pts3d))
        return pose, {"residual_history": rms.tolist(), "n_points": len(pts3d)}
    return pose


@dataclass(frozen=True)
class FrameResult:
    """Output of one pipeline frame."""

    t_us: int
    pose: Pose | None
    failure: str | None
    detections: list
    warp: WarpParams | None
    decoded_pixels: np.ndarray  # (n, 3) int32 columns x, y, id
    n_decodes: int = 0  # total decoded ID frames, multiplicity included


def _decoded_pixel_array(decoded: dict) -> np.ndarray:
    rows = sorted(
        {(px, py, d.id) for (px, py), ids in decoded.items() for d in ids}
    )
    if not rows:
        return np.empty((0, 3), dtype=np.int32)
    return np.array(rows, dtype=np.int32)


def run_pipeline(events: EventStream, markers: MarkerMap, intrinsics: CameraIntrinsics,
                 cfg: PipelineConfig, frame_times) -> list:
    """Decode and localize each frame; failures are recorded, never raised.

    Each frame takes the events in (t_f - window, t_f]; with compensation on,
    motion is estimated from those events and all of them are warped to t_f
    before decoding.
    """
    results = []
    for t_frame in frame_times:
        t_frame = int(t_frame)
        window = events.select(
            (events.t > t_frame - cfg.window_us) & (events.t <= t_frame)
        )
        warp = None
        positions = None
        if cfg.compensate and len(window) >= 2:
            try:
                estimate = estimate_motion(window, cfg.model, cfg.cmax, intrinsics)
                warp = estimate.params
                positions, _ = warp_events(window, warp, t_frame, intrinsics)
            except ValueError:
                warp = None
                positions = None
        decoded = decode_pixels(window, cfg, positions)
        detections = cluster_detections(decoded, t_frame)
        pose, failure = None, None
        try:
            pose = solve_pnp(detections, markers, intrinsics, cfg.min_points_pnp)
        except PnpError as err:
            failure = str(err)
        results.append(
            FrameResult(
                t_us=t_frame,
                pose=pose,
                failure=failure,
                detections=detections,
                warp=warp,
                decoded_pixels=_decoded_pixel_array(decoded),
                n_decodes=sum(len(ids) for ids in decoded.values()),
            )
        )
    return results
