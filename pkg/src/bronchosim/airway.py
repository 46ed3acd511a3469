"""Airway-tree geometry: procedural generation, JSON load/save, centerline
queries, generation labels, and reference paths.

Conventions (documented in the README): the trachea is generation 0 and
every bifurcation increments the label by exactly 1. The tube surface is
implicit: a point is inside the airway iff its distance to some segment's
centerline is below the local radius. All units are millimetres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FILE_VERSION = 1


@dataclass(frozen=True)
class AirwaySegment:
    """One branch of the tree: a centerline polyline with per-point radii."""
    id: int
    parent: int | None
    points: np.ndarray      # (P,3) float64, mm
    radii: np.ndarray       # (P,) float64, mm
    generation: int

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def arc_positions(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def segment_direction(seg: AirwaySegment) -> np.ndarray:
    """Unit vector from the segment's first to last centerline point."""
    d = seg.points[-1] - seg.points[0]
    n = np.linalg.norm(d)
    if n < 1e-9:
        raise ValueError(f"segment {seg.id} is degenerate (zero length)")
    return d / n


class AirwayTree:
    """Immutable branching airway; shared freely across threads."""

    def __init__(self, segments: dict[int, AirwaySegment]):
        self.segments = dict(segments)
        self._children: dict[int, list[int]] = {}
        roots = []
        for seg in self.segments.values():
            if seg.parent is None:
                roots.append(seg.id)
            else:
                self._children.setdefault(seg.parent, []).append(seg.id)
        for v in self._children.values():
            v.sort()
        if len(roots) != 1:
            raise ValueError(f"tree must have exactly one root, found {len(roots)}")
        self.root_id = roots[0]
        self._validate()
        pts = np.concatenate([s.points for s in self.segments.values()])
        rmax = max(float(s.radii.max()) for s in self.segments.values())
        self.bbox = np.stack([pts.min(axis=0) - rmax, pts.max(axis=0) + rmax])
        self._edges = None

    # -- validation --------------------------------------------------------

    def _validate(self) -> None:
        seen = set()
        stack = [(self.root_id, 0)]
        while stack:
            sid, gen = stack.pop()
            if sid in seen:
                raise ValueError("tree contains a cycle")
            seen.add(sid)
            seg = self.segments[sid]
            if seg.generation != gen:
                raise ValueError(f"segment {sid}: generation {seg.generation}, expected {gen}")
            if len(seg.points) < 2:
                raise ValueError(f"segment {sid}: polyline needs >= 2 points")
            r = seg.radii
            if np.any(r[1:] > r[:-1] * 1.10 + 1e-12):
                raise ValueError(f"segment {sid}: radii increase beyond 10% slack")
            if seg.parent is not None:
                pseg = self.segments[seg.parent]
                if not np.allclose(seg.points[0], pseg.points[-1], atol=1e-6):
                    raise ValueError(f"segment {sid}: does not start at parent end")
            for cid in self._children.get(sid, []):
                stack.append((cid, gen + 1))
        if seen != set(self.segments):
            raise ValueError("tree has unreachable segments")

    def children(self, sid: int) -> list[int]:
        return self._children.get(sid, [])

    def max_generation(self) -> int:
        return max(s.generation for s in self.segments.values())

    # -- geometry queries ----------------------------------------------------

    def edge_arrays(self):
        """Flattened per-edge arrays for vectorized distance queries:
        (starts, vecs, lengths, seg_ids, arc_starts, r0, r1)."""
        if self._edges is None:
            starts, vecs, lens, sids, arcs, r0, r1 = [], [], [], [], [], [], []
            for sid in sorted(self.segments):
                seg = self.segments[sid]
                p = seg.points
                a = seg.arc_positions()
                v = np.diff(p, axis=0)
                ln = np.linalg.norm(v, axis=1)
                keep = ln > 1e-12
                starts.append(p[:-1][keep])
                vecs.append(v[keep])
                lens.append(ln[keep])
                sids.append(np.full(keep.sum(), sid, dtype=np.int64))
                arcs.append(a[:-1][keep])
                r0.append(seg.radii[:-1][keep])
                r1.append(seg.radii[1:][keep])
            self._edges = (
                np.concatenate(starts), np.concatenate(vecs), np.concatenate(lens),
                np.concatenate(sids), np.concatenate(arcs),
                np.concatenate(r0), np.concatenate(r1),
            )
        return self._edges

    def nearest_centerline_point(self, p) -> tuple[int, float, float, float]:
        """Global nearest point on any centerline.

        Returns (segment id, arc position along that segment, distance,
        local radius), all in mm.
        """
        p = np.asarray(p, dtype=np.float64)
        if not np.all(np.isfinite(p)):
            raise ValueError("query point must be finite")
        starts, vecs, lens, sids, arcs, r0, r1 = self.edge_arrays()
        rel = p[None, :] - starts
        t = np.clip(np.einsum("ij,ij->i", rel, vecs) / (lens * lens), 0.0, 1.0)
        closest = starts + t[:, None] * vecs
        d = np.linalg.norm(p[None, :] - closest, axis=1)
        i = int(np.argmin(d))
        radius = float(r0[i] + t[i] * (r1[i] - r0[i]))
        return int(sids[i]), float(arcs[i] + t[i] * lens[i]), float(d[i]), radius

    def signed_distances(self, pts: np.ndarray) -> np.ndarray:
        """Union tube SDF for a batch of points: min over segments of
        (distance to centerline - local radius). Negative inside."""
        pts = np.asarray(pts, dtype=np.float64)
        starts, vecs, lens, _, _, r0, r1 = self.edge_arrays()
        rel = pts[:, None, :] - starts[None, :, :]
        t = np.einsum("nij,ij->ni", rel, vecs) / (lens * lens)
        t = np.clip(t, 0.0, 1.0)
        closest = starts[None] + t[..., None] * vecs[None]
        d = np.linalg.norm(pts[:, None, :] - closest, axis=2)
        radius = r0[None] + t * (r1[None] - r0[None])
        return (d - radius).min(axis=1)

    def project_inside(self, pts: np.ndarray, clearance: float,
                       tol: float = 1e-6, max_iters: int = 12):
        """Project points so every one satisfies sdf <= -clearance + tol.

        Returns (projected points, pre-projection penetration depths).
        Projection is radial toward the best segment's centerline and is
        iterated because the radius varies along segments.
        """
        pts = np.array(pts, dtype=np.float64)
        starts, vecs, lens, _, _, r0, r1 = self.edge_arrays()
        pen = np.zeros(len(pts))
        for it in range(max_iters):
            rel = pts[:, None, :] - starts[None, :, :]
            t = np.einsum("nij,ij->ni", rel, vecs) / (lens * lens)
            t = np.clip(t, 0.0, 1.0)
            closest = starts[None] + t[..., None] * vecs[None]
            diff = pts[:, None, :] - closest
            d = np.linalg.norm(diff, axis=2)
            radius = r0[None] + t * (r1[None] - r0[None])
            sdf_all = d - radius
            best = np.argmin(sdf_all, axis=1)
            rows = np.arange(len(pts))
            sdf = sdf_all[rows, best]
            viol = sdf > -clearance + tol
            if it == 0:
                pen = np.maximum(sdf + clearance, 0.0)
            if not np.any(viol):
                break
            db = d[rows, best]
            rb = radius[rows, best]
            dirs = np.where(db[:, None] > 1e-9,
                            diff[rows, best] / np.maximum(db, 1e-9)[:, None],
                            np.zeros(3))
            target_d = np.maximum(rb - clearance, 0.0)
            newpts = closest[rows, best] + dirs * target_d[:, None]
            pts[viol] = newpts[viol]
        return pts, pen

    # -- serialization -------------------------------------------------------

    def to_json(self) -> str:
        segs = []
        for sid in sorted(self.segments):
            seg = self.segments[sid]
            segs.append({
                "id": seg.id,
                "parent": seg.parent,
                "points": [[float(x) for x in p] for p in seg.points],
                "radii": [float(r) for r in seg.radii],
            })
        doc = {"version": FILE_VERSION, "segments": segs}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AirwayTree":
        doc = json.loads(text)
        if doc.get("version") != FILE_VERSION:
            raise ValueError(f"unsupported airway file version {doc.get('version')!r}")
        raw = {s["id"]: s for s in doc["segments"]}
        gens: dict[int, int] = {}

        def gen_of(sid: int) -> int:
            if sid in gens:
                return gens[sid]
            parent = raw[sid]["parent"]
            g = 0 if parent is None else gen_of(parent) + 1
            gens[sid] = g
            return g

        segments = {}
        for sid, s in raw.items():
            segments[sid] = AirwaySegment(
                id=sid, parent=s["parent"],
                points=np.asarray(s["points"], dtype=np.float64),
                radii=np.asarray(s["radii"], dtype=np.float64),
                generation=gen_of(sid))
        return cls(segments)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "AirwayTree":
        return cls.from_json(Path(path).read_text())


# --- reference paths ---------------------------------------------------------

@dataclass(frozen=True)
class ReferencePath:
    """Unique root-to-target chain plus per-generation subgoal endpoints."""
    segment_ids: tuple[int, ...]
    target: np.ndarray            # (3,)
    subgoals: np.ndarray          # (K,3): end point of each path segment
    arc_length: float             # root entry to target along centerlines
    polyline: np.ndarray          # (M,3) concatenated centerline up to target

    def distance_to_path(self, p) -> float:
        p = np.asarray(p, dtype=np.float64)
        seg = np.diff(self.polyline, axis=0)
        ln2 = (seg * seg).sum(axis=1)
        rel = p[None, :] - self.polyline[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, seg) / np.maximum(ln2, 1e-18), 0.0, 1.0)
        closest = self.polyline[:-1] + t[:, None] * seg
        return float(np.linalg.norm(p[None, :] - closest, axis=1).min())


def build_reference_path(tree: AirwayTree, target) -> ReferencePath:
    """Resolve the unique root chain to the segment containing ``target``."""
    target = np.asarray(target, dtype=np.float64)
    sid, arc, dist, radius = tree.nearest_centerline_point(target)
    if dist > radius:
        raise ValueError(f"target {target.tolist()} lies outside every airway tube "
                         f"(nearest segment {sid}, distance {dist:.2f}mm > radius {radius:.2f}mm)")
    chain = [sid]
    while tree.segments[chain[-1]].parent is not None:
        chain.append(tree.segments[chain[-1]].parent)
    chain.reverse()

    polyline_parts = []
    total = 0.0
    for cid in chain[:-1]:
        seg = tree.segments[cid]
        polyline_parts.append(seg.points)
        total += seg.length()
    last = tree.segments[chain[-1]]
    arcs = last.arc_positions()
    idx = int(np.searchsorted(arcs, arc, side="right"))
    idx = min(max(idx, 1), len(arcs) - 1)
    frac_prev = arcs[idx - 1]
    span = arcs[idx] - frac_prev
    t = 0.0 if span <= 0 else (arc - frac_prev) / span
    cut = last.points[idx - 1] + t * (last.points[idx] - last.points[idx - 1])
    part = np.vstack([last.points[:idx], cut])
    polyline_parts.append(part)
    total += arc

    polyline = np.vstack([p if i == 0 else p[1:] for i, p in enumerate(polyline_parts)])
    subgoals = np.stack([tree.segments[cid].points[-1] for cid in chain])
    return ReferencePath(segment_ids=tuple(chain), target=target,
                         subgoals=subgoals, arc_length=float(total),
                         polyline=polyline)


# --- procedural generation -----------------------------------------------------

@dataclass
class TreeConfig:
    """Knobs for recursive bifurcating tree generation."""
    generations: int = 4
    seg_points: int = 11
    trachea_length: float = 50.0
    trachea_radius: float = 9.0
    length_decay: float = 0.78
    radius_decay: float = 0.80
    radius_taper: float = 0.93      # end/start radius inside one segment
    branch_angle: float = 0.62      # rad, mean child deviation from parent
    angle_jitter: float = 0.10
    roll_jitter: float = 0.25
    length_jitter: float = 0.10
    min_turn_radius: float = 18.0   # mm, curvature bound so tubes stay navigable
    preset: str | None = None       # "upper-lobe" inserts a sharp (>=120 deg) turn
    upper_lobe_turn: float = 2.15   # rad, ~123 deg

    def validate(self) -> None:
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not (0 < self.radius_decay <= 1 and 0 < self.length_decay <= 1.2):
            raise ValueError("decay factors out of range")
        if self.branch_angle <= 0 or self.branch_angle > 1.4:
            raise ValueError("branch_angle out of range (0, 1.4] rad")
        if self.preset not in (None, "upper-lobe"):
            raise ValueError(f"unknown preset {self.preset!r}")


def _any_perpendicular(v: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    p = np.cross(v, ref)
    return p / np.linalg.norm(p)


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    return (v * np.cos(angle) + np.cross(axis, v) * np.sin(angle)
            + axis * np.dot(axis, v) * (1 - np.cos(angle)))


def _curved_segment(p0: np.ndarray, t0: np.ndarray, direction: np.ndarray,
                    length: float, turn_radius: float, n_points: int) -> np.ndarray:
    """Polyline starting at p0 tangent to t0, arcing onto ``direction`` with
    the given turn radius, then running straight to the full length."""
    cosang = float(np.clip(np.dot(t0, direction), -1.0, 1.0))
    phi = float(np.arccos(cosang))
    dense = []
    if phi < 1e-6:
        arc_len = 0.0
        arc_end, arc_tan = p0, t0
    else:
        m = direction - cosang * t0
        m = m / np.linalg.norm(m)
        arc_len = phi * turn_radius
        thetas = np.linspace(0.0, phi, max(8, int(arc_len / 1.0)))
        pts = (p0[None, :] + turn_radius * np.sin(thetas)[:, None] * t0[None, :]
               + turn_radius * (1 - np.cos(thetas))[:, None] * m[None, :])
        dense.append(pts)
        arc_end = pts[-1]
        arc_tan = direction
    straight = max(length - arc_len, 4.0)
    n_str = max(4, int(straight / 1.0))
    line = arc_end[None, :] + np.linspace(0.0, straight, n_str)[1 if dense else 0:, None] * arc_tan[None, :]
    dense.append(line)
    dense = np.vstack(dense)
    # resample to n_points uniform in arc length
    steps = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    arcs = np.concatenate([[0.0], np.cumsum(steps)])
    s = np.linspace(0.0, arcs[-1], n_points)
    out = np.stack([np.interp(s, arcs, dense[:, k]) for k in range(3)], axis=1)
    out[0] = p0
    return out


def generate_tree(seed: int, config: TreeConfig | None = None) -> AirwayTree:
    """Deterministic procedural airway; same seed+config gives a byte-identical
    serialized tree."""
    cfg = config or TreeConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)

    segments: dict[int, AirwaySegment] = {}
    next_id = [0]

    def alloc() -> int:
        sid = next_id[0]
        next_id[0] += 1
        return sid

    z = np.array([0.0, 0.0, 1.0])
    n_tr = cfg.seg_points
    tr_pts = np.zeros((n_tr, 3))
    tr_pts[:, 2] = np.linspace(0.0, cfg.trachea_length, n_tr)
    tr_radii = np.linspace(cfg.trachea_radius, cfg.trachea_radius * cfg.radius_taper, n_tr)
    root = alloc()
    segments[root] = AirwaySegment(root, None, tr_pts, tr_radii, 0)

    # the upper-lobe preset forces one sharp take-off at generation 2,
    # reached through the first child of the root
    sharp_gen = 2 if cfg.preset == "upper-lobe" else None

    def grow(parent_id: int, gen: int, child_rank: int, plane: np.ndarray,
             on_chain: bool) -> None:
        if gen > cfg.generations - 1:
            return
        parent = segments[parent_id]
        p0 = parent.points[-1]
        t0 = parent.points[-1] - parent.points[-2]
        t0 = t0 / np.linalg.norm(t0)
        r_start = parent.radii[-1] * cfg.radius_decay
        length = (cfg.trachea_length * cfg.length_decay ** gen
                  * (1.0 + rng.uniform(-cfg.length_jitter, cfg.length_jitter)))

        sharp = on_chain and child_rank == 0 and gen == sharp_gen
        if sharp:
            angle = cfg.upper_lobe_turn
            length = max(length, angle * cfg.min_turn_radius + 10.0)
        else:
            angle = cfg.branch_angle * (1.0 + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter))
        sign = 1.0 if child_rank == 0 else -1.0
        direction = _rotate(t0, plane, sign * angle)
        pts = _curved_segment(p0, t0, direction, length, cfg.min_turn_radius, cfg.seg_points)
        radii = np.linspace(r_start, r_start * cfg.radius_taper, cfg.seg_points)
        sid = alloc()
        segments[sid] = AirwaySegment(sid, parent_id, pts, radii, gen)

        tangent = pts[-1] - pts[-2]
        tangent = tangent / np.linalg.norm(tangent)
        next_plane = _rotate(_any_perpendicular(tangent), tangent,
                             rng.uniform(-cfg.roll_jitter, cfg.roll_jitter)
                             + (0.5 * np.pi if gen % 2 else 0.0))
        for rank in range(2):
            grow(sid, gen + 1, rank, next_plane,
                 on_chain=on_chain and child_rank == 0)

    base_plane = _rotate(_any_perpendicular(z), z, rng.uniform(0, 2 * np.pi))
    for rank in range(2):
        grow(root, 1, rank, base_plane, on_chain=True)

    return AirwayTree(segments)
