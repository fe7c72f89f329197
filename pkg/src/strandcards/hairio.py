"""Strand model and head mesh I/O.

Handles the two strand input formats (binary ``HAIR`` and a plain-text format),
uniform arc-length resampling, seeded downsampling, and ASCII OBJ head meshes.
All loaders return fully validated in-memory models; downstream stages never
touch files in these formats again.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

HAIR_MAGIC = b"HAIR"
# header: magic, num_strands u4, num_points u4, flags u4, default_segments u4,
# default_thickness f4, default_transparency f4, default_color 3*f4, info 88s
_HAIR_HEADER = struct.Struct("<4sIIIIff3f88s")
_FLAG_SEGMENTS = 1 << 0
_FLAG_POINTS = 1 << 1


class HairFormatError(ValueError):
    """Base class for strand/mesh parse failures."""


class MalformedHeaderError(HairFormatError):
    pass


class TruncatedDataError(HairFormatError):
    pass


class EmptyModelError(HairFormatError):
    pass


class MeshFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Strand:
    """A single hair strand: (n, 3) array of uniformly spaced samples."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 3 or s.shape[0] < 2:
            raise ValueError(f"strand samples must be (n>=2, 3), got {s.shape}")
        object.__setattr__(self, "samples", s)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def spacing_uniformity(self) -> float:
        """Max relative deviation of consecutive sample distances from their mean."""
        d = np.linalg.norm(np.diff(self.samples, axis=0), axis=1)
        m = d.mean()
        if m == 0.0:
            return 0.0
        return float(np.abs(d - m).max() / m)


@dataclass(frozen=True)
class BoundingSphere:
    center: np.ndarray
    radius: float

    def contains(self, points: np.ndarray, slack: float = 1e-9) -> bool:
        r = np.linalg.norm(np.asarray(points) - self.center, axis=-1)
        return bool(np.all(r <= self.radius * (1.0 + slack) + slack))


@dataclass
class HairModel:
    """A strand hairstyle: every strand resampled to the same sample count."""

    strands: list[Strand]
    bounds: BoundingSphere = field(init=False)

    def __post_init__(self):
        if not self.strands:
            raise EmptyModelError("empty model: no strands")
        counts = {s.n_samples for s in self.strands}
        if len(counts) != 1:
            raise ValueError(f"strands disagree on sample count: {sorted(counts)}")
        self.bounds = _bounding_sphere(self.samples.reshape(-1, 3))

    @property
    def n_samples(self) -> int:
        return self.strands[0].n_samples

    @property
    def samples(self) -> np.ndarray:
        """All samples stacked, shape (n_strands, n_samples, 3)."""
        arr = getattr(self, "_samples", None)
        if arr is None:
            arr = np.stack([s.samples for s in self.strands])
            object.__setattr__(self, "_samples", arr)
        return arr


@dataclass(frozen=True)
class HeadMesh:
    vertices: np.ndarray  # (v, 3)
    triangles: np.ndarray  # (t, 3) int
    vertex_normals: np.ndarray  # (v, 3) unit
    uv: np.ndarray | None = None  # (v, 2), only if the OBJ carried vt

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        n = np.asarray(self.vertex_normals, dtype=np.float64)
        if t.min(initial=0) < 0 or t.max(initial=-1) >= len(v):
            raise MeshFormatError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "vertex_normals", n)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _bounding_sphere(points: np.ndarray) -> BoundingSphere:
    # AABB center + max distance: cheap, deterministic, guaranteed to contain.
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = 0.5 * (lo + hi)
    radius = float(np.linalg.norm(points - center, axis=1).max())
    return BoundingSphere(center=center, radius=radius)


def resample_strand(points: np.ndarray, n: int) -> Strand:
    """Resample a polyline to n points at equal arc-length spacing.

    Linear interpolation along the input polyline; endpoints preserved exactly.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
        raise ValueError(f"polyline must be (m>=2, 3), got {pts.shape}")
    if n < 2:
        raise ValueError("need n >= 2 samples")
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seg.sum()
    if total <= 0.0:
        raise ValueError("degenerate zero-length polyline")
    if pts.shape[0] == n and np.abs(seg - seg.mean()).max() <= 1e-9 * seg.mean():
        # already uniform at the requested count: identity, exactly
        return Strand(pts)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, 3))
    for k in range(3):
        out[:, k] = np.interp(targets, cum, pts[:, k])
    out[0] = pts[0]
    out[-1] = pts[-1]
    return Strand(out)


def downsample_strands(model: HairModel, count: int, seed: int) -> HairModel:
    """Seeded uniform subsample of strands, without replacement, order-preserving."""
    n = len(model.strands)
    if count == 0:
        raise ValueError("count must be positive")
    if count > n:
        raise ValueError(f"count {count} exceeds strand count {n}")
    if count == n:
        return HairModel(list(model.strands))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    return HairModel([model.strands[i] for i in idx])


def load_hair(path, n_samples: int | None = 32) -> HairModel:
    """Load a strand model (binary HAIR or plain text), resampled to n_samples.

    n_samples=None keeps the file's native sampling (all strands must then
    share one count); the pipeline always resamples.
    """
    with open(path, "rb") as f:
        head = f.read(8)
        f.seek(0)
        # the text header also starts with the bytes HAIR, so sniff further
        if head[:4] == HAIR_MAGIC and not head.startswith(b"HAIRTXT"):
            polylines = _read_hair_binary(f)
        else:
            polylines = _read_hair_text(f)
    if not polylines:
        raise EmptyModelError("empty model: no strands")
    strands = []
    for pts in polylines:
        if len(pts) < 2:
            raise TruncatedDataError("strand with fewer than 2 points")
        if n_samples is None:
            strands.append(Strand(pts))
        else:
            strands.append(resample_strand(pts, n_samples))
    return HairModel(strands)


def _read_hair_binary(f) -> list[np.ndarray]:
    raw = f.read(_HAIR_HEADER.size)
    if len(raw) < _HAIR_HEADER.size:
        raise MalformedHeaderError("malformed header: file shorter than 128 bytes")
    (magic, n_strands, n_points, flags, d_segments,
     _thick, _transp, _r, _g, _bcol, _info) = _HAIR_HEADER.unpack(raw)
    if magic != HAIR_MAGIC:
        raise MalformedHeaderError(f"malformed header: bad magic {magic!r}")
    if not flags & _FLAG_POINTS:
        raise MalformedHeaderError("malformed header: no points array")
    if flags & _FLAG_SEGMENTS:
        seg_raw = f.read(2 * n_strands)
        if len(seg_raw) < 2 * n_strands:
            raise TruncatedDataError("truncated segments array")
        segments = np.frombuffer(seg_raw, dtype="<u2").astype(np.int64)
    else:
        segments = np.full(n_strands, d_segments, dtype=np.int64)
    if segments.sum() + n_strands != n_points:
        raise MalformedHeaderError(
            f"malformed header: segment counts imply "
            f"{segments.sum() + n_strands} points, header says {n_points}")
    pts_raw = f.read(12 * n_points)
    if len(pts_raw) < 12 * n_points:
        raise TruncatedDataError("truncated points array")
    pts = np.frombuffer(pts_raw, dtype="<f4").reshape(n_points, 3).astype(np.float64)
    # thickness/transparency/color arrays, if present, follow; positions only.
    out = []
    offset = 0
    for s in segments:
        cnt = int(s) + 1
        out.append(pts[offset:offset + cnt])
        offset += cnt
    return out


def _read_hair_text(f) -> list[np.ndarray]:
    text = f.read().decode("utf-8", errors="replace")
    lines = [ln for ln in (l.strip() for l in text.splitlines())
             if ln and not ln.startswith("#")]
    if not lines:
        raise MalformedHeaderError("malformed header: empty file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "HAIRTXT":
        raise MalformedHeaderError(f"malformed header: {lines[0]!r}")
    try:
        n_strands, per = int(header[1]), int(header[2])
    except ValueError as e:
        raise MalformedHeaderError(f"malformed header: {lines[0]!r}") from e
    if n_strands == 0:
        raise EmptyModelError("empty model: zero strands declared")
    body = lines[1:]
    need = n_strands * per
    if len(body) < need:
        raise TruncatedDataError(
            f"truncated data: expected {need} sample lines, found {len(body)}")
    try:
        flat = np.array([[float(v) for v in ln.split()] for ln in body[:need]])
    except ValueError as e:
        raise TruncatedDataError(f"bad sample line: {e}") from e
    if flat.shape[1] != 3:
        raise TruncatedDataError("sample lines must hold exactly x y z")
    return list(flat.reshape(n_strands, per, 3))


def save_hair_text(path, model: HairModel) -> None:
    """Write the plain-text format; %.17g keeps float64 values bit-exact."""
    with open(path, "w") as f:
        f.write(f"HAIRTXT {len(model.strands)} {model.n_samples}\n")
        for s in model.strands:
            for p in s.samples:
                f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def save_hair_binary(path, polylines: list[np.ndarray]) -> None:
    """Write a minimal binary HAIR file (points + segments arrays only)."""
    segments = np.array([len(p) - 1 for p in polylines], dtype="<u2")
    n_points = int(segments.sum()) + len(polylines)
    header = _HAIR_HEADER.pack(
        HAIR_MAGIC, len(polylines), n_points, _FLAG_SEGMENTS | _FLAG_POINTS,
        0, 0.1, 1.0, 0.0, 0.0, 0.0, b"")
    with open(path, "wb") as f:
        f.write(header)
        f.write(segments.tobytes())
        for p in polylines:
            f.write(np.asarray(p, dtype="<f4").tobytes())


def load_head_mesh(path) -> HeadMesh:
    """Parse an ASCII OBJ head mesh (v/vn/vt/f, triangles only).

    Area-weighted vertex normals are computed when the file has no vn lines.
    Faces may be `f v`, `f v//vn`, `f v/vt` or `f v/vt/vn`; indices 1-based.
    """
    verts: list[list[float]] = []
    norms: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    face_uvs: list[list[int]] = []
    with open(path) as f:
        for ln_no, ln in enumerate(f, 1):
            parts = ln.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshFormatError(
                        f"line {ln_no}: non-triangle face with {len(parts) - 1} corners")
                vi, ti = [], []
                for corner in parts[1:]:
                    fields = corner.split("/")
                    v = int(fields[0])
                    if v < 1:
                        raise MeshFormatError(f"line {ln_no}: face index {v} (OBJ is 1-based)")
                    vi.append(v - 1)
                    if len(fields) > 1 and fields[1]:
                        ti.append(int(fields[1]) - 1)
                faces.append(vi)
                if len(ti) == 3:
                    face_uvs.append(ti)
    if not verts or not faces:
        raise MeshFormatError("OBJ has no vertices or no faces")
    v = np.array(verts, dtype=np.float64)
    t = np.array(faces, dtype=np.int64)
    if t.max() >= len(v):
        raise MeshFormatError("face index out of range")
    if norms and len(norms) == len(verts):
        n = np.array(norms, dtype=np.float64)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
    else:
        n = _area_weighted_normals(v, t)
    uv = None
    if uvs and len(face_uvs) == len(faces):
        # re-index per-corner uv onto vertices (last write wins; fine for charts
        # where vertex->uv is single-valued, which is all this pipeline needs)
        uv_arr = np.array(uvs, dtype=np.float64)
        uv = np.zeros((len(v), 2))
        for vi3, ti3 in zip(faces, face_uvs):
            uv[vi3] = uv_arr[ti3]
    return HeadMesh(vertices=v, triangles=t, vertex_normals=n, uv=uv)


def _area_weighted_normals(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    fn = np.cross(b - a, c - a)  # length = 2 * area, so adding is area-weighting
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, t[:, k], fn)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    lens[lens == 0.0] = 1.0
    return n / lens


def save_head_mesh(path, mesh: HeadMesh) -> None:
    with open(path, "w") as f:
        for p in mesh.vertices:
            f.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for n in mesh.vertex_normals:
            f.write(f"vn {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}\n")
        for tri in mesh.triangles:
            i, j, k = (int(x) + 1 for x in tri)
            f.write(f"f {i}//{i} {j}//{j} {k}//{k}\n")
