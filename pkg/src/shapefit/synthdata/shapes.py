"""Procedural analytic shapes with exact signed-distance oracles.

Primitives have closed-form (or machine-precision iterative) SDFs; trees
combine them with union/intersection plus per-node uniform scale and
offset. The union SDF (min of children) is exact outside and a
conservative lower bound inside, so surface sampling only accepts points
where a single child attains the minimum.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, StructuralError
from ..rng import substream

# margin kept between samples and primitive edges/rims so that normals and
# finite-difference gradients at sample points are well defined
EDGE_MARGIN = 1e-4
# minimum |sdf| every other leaf must have for a surface sample (unique-min rule)
UNIQUE_GAP = 1e-4
_SURFACE_TOL = 1e-9


def _pts(x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    return (x[None, :] if single else x), single


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    kind = "sphere"

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius

    def normal(self, p):
        d = p - np.asarray(self.center)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def sample_surface(self, n, rng, margin=EDGE_MARGIN):
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * dirs

    def area(self):
        return 4 * np.pi * self.radius**2

    def bbox(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass
class Box:
    center: np.ndarray
    half_extents: np.ndarray

    kind = "box"

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def normal(self, p):
        d = p - np.asarray(self.center)
        q = np.abs(d) - np.asarray(self.half_extents)
        pos = np.maximum(q, 0.0)
        norm = np.linalg.norm(pos, axis=1)
        out = np.zeros_like(d)
        far = norm > 1e-9
        out[far] = np.sign(d[far]) * pos[far] / norm[far, None]
        rows = np.flatnonzero(~far)
        if rows.size:
            axis = q[rows].argmax(axis=1)
            sign = np.sign(d[rows, axis])
            sign[sign == 0] = 1.0
            out[rows, axis] = sign
        return out

    def sample_surface(self, n, rng, margin=EDGE_MARGIN):
        h = np.asarray(self.half_extents, dtype=np.float64)
        areas = 4 * np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        areas = np.repeat(areas, 2)  # +face, -face per axis
        face = rng.choice(6, size=n, p=areas / areas.sum())
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        pts = rng.uniform(-1.0, 1.0, (n, 3)) * np.maximum(h - margin, 0.0)
        pts[np.arange(n), axis] = sign * h[axis]
        return np.asarray(self.center) + pts

    def area(self):
        h = self.half_extents
        return 8 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])

    def bbox(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.half_extents, dtype=np.float64)
        return c - h, c + h


@dataclass
class RoundedBox:
    """Minkowski sum of a box and a sphere: exact SDF is box minus radius."""

    center: np.ndarray
    half_extents: np.ndarray  # inner core, before rounding
    round_radius: float

    kind = "rounded_box"

    def _core(self):
        return Box(self.center, self.half_extents)

    def sdf(self, p):
        return self._core().sdf(p) - self.round_radius

    def normal(self, p):
        return self._core().normal(p)

    def sample_surface(self, n, rng, margin=EDGE_MARGIN):
        core = self._core()
        pts = core.sample_surface(n, rng, margin=margin)
        return pts + self.round_radius * core.normal(pts)

    def area(self):
        h = np.asarray(self.half_extents) + self.round_radius
        return 8 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])

    def bbox(self):
        lo, hi = self._core().bbox()
        return lo - self.round_radius, hi + self.round_radius


@dataclass
class Cylinder:
    """Capped cylinder along coordinate axis `axis`."""

    center: np.ndarray
    axis: int
    radius: float
    half_height: float

    kind = "cylinder"

    def _decompose(self, p):
        d = p - np.asarray(self.center)
        perp = [i for i in range(3) if i != self.axis]
        dr = np.linalg.norm(d[:, perp], axis=1) - self.radius
        dh = np.abs(d[:, self.axis]) - self.half_height
        return d, perp, dr, dh

    def sdf(self, p):
        _, _, dr, dh = self._decompose(p)
        outside = np.sqrt(np.maximum(dr, 0.0) ** 2 + np.maximum(dh, 0.0) ** 2)
        inside = np.minimum(np.maximum(dr, dh), 0.0)
        return outside + inside

    def normal(self, p):
        d, perp, dr, dh = self._decompose(p)
        n = np.zeros_like(d)
        radial = np.zeros_like(d)
        rn = np.linalg.norm(d[:, perp], axis=1)
        safe = rn > 1e-12
        radial[np.ix_(safe, perp)] = d[np.ix_(safe, perp)] / rn[safe, None]
        side = dr >= dh
        n[side] = radial[side]
        cap = ~side
        n[cap, self.axis] = np.sign(d[cap, self.axis])
        return n

    def sample_surface(self, n, rng, margin=EDGE_MARGIN):
        r, hh = self.radius, self.half_height
        area_side = 2 * np.pi * r * 2 * hh
        area_caps = 2 * np.pi * r**2
        on_side = rng.random(n) < area_side / (area_side + area_caps)
        theta = rng.uniform(0, 2 * np.pi, n)
        perp = [i for i in range(3) if i != self.axis]
        pts = np.zeros((n, 3))
        ns = on_side.sum()
        pts[on_side, perp[0]] = r * np.cos(theta[on_side])
        pts[on_side, perp[1]] = r * np.sin(theta[on_side])
        pts[on_side, self.axis] = rng.uniform(-(hh - margin), hh - margin, ns)
        caps = ~on_side
        nc = caps.sum()
        rad = np.sqrt(rng.random(nc)) * max(r - margin, 0.0)
        pts[caps, perp[0]] = rad * np.cos(theta[caps])
        pts[caps, perp[1]] = rad * np.sin(theta[caps])
        pts[caps, self.axis] = np.where(rng.random(nc) < 0.5, hh, -hh)
        return np.asarray(self.center) + pts

    def area(self):
        return 2 * np.pi * self.radius * (2 * self.half_height + self.radius)

    def bbox(self):
        c = np.asarray(self.center, dtype=np.float64)
        ext = np.full(3, self.radius)
        ext[self.axis] = self.half_height
        return c - ext, c + ext


@dataclass
class Ellipsoid:
    """Axis-aligned ellipsoid; exact distance via bisection on the closest-
    point parameter (one monotone scalar root per query)."""

    center: np.ndarray
    radii: np.ndarray

    kind = "ellipsoid"
    _BISECT_ITERS = 100

    def sdf(self, p):
        a = np.asarray(self.radii, dtype=np.float64)
        y = np.abs(p - np.asarray(self.center))
        y = np.maximum(y, 1e-12)  # keep the root bracketing valid on axis planes
        a2 = a * a
        # F(t) = sum (a_i y_i / (t + a_i^2))^2 - 1, strictly decreasing on
        # (-min a^2, inf); its unique root gives the closest surface point.
        lo = np.full(y.shape[0], -a2.min())
        hi = np.linalg.norm(a * y, axis=1) + a2.max()
        for _ in range(self._BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            f = np.sum((a * y / (mid[:, None] + a2)) ** 2, axis=1) - 1.0
            take_lo = f > 0
            lo = np.where(take_lo, mid, lo)
            hi = np.where(take_lo, hi, mid)
        t = 0.5 * (lo + hi)
        closest = a2 * y / (t[:, None] + a2)
        dist = np.linalg.norm(y - closest, axis=1)
        inside = np.sum((y / a) ** 2, axis=1) < 1.0
        return np.where(inside, -dist, dist)

    def normal(self, p):
        d = (p - np.asarray(self.center)) / np.square(self.radii)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def sample_surface(self, n, rng, margin=EDGE_MARGIN):
        dirs = rng.standard_normal((n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return np.asarray(self.center) + np.asarray(self.radii) * dirs

    def area(self):
        a, b, c = np.asarray(self.radii, dtype=np.float64)
        p = 1.6075  # Thomsen approximation exponent
        return 4 * np.pi * (((a * b) ** p + (b * c) ** p + (a * c) ** p) / 3) ** (1 / p)

    def bbox(self):
        c = np.asarray(self.center, dtype=np.float64)
        r = np.asarray(self.radii, dtype=np.float64)
        return c - r, c + r


_PRIMITIVES = {cls.kind: cls for cls in (Sphere, Box, RoundedBox, Cylinder, Ellipsoid)}


# ---------------------------------------------------------------------------
# tree nodes


@dataclass
class Node:
    """Interior node: union or intersection of children, with an optional
    uniform scale and offset applied to this subtree."""

    op: str  # "union" | "intersection" | "leaf"
    children: list = field(default_factory=list)
    primitive: object = None
    scale: float = 1.0
    offset: np.ndarray = None

    def __post_init__(self):
        if self.offset is None:
            self.offset = np.zeros(3)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if self.scale <= 0:
            raise StructuralError("node scale must be positive")
        if self.op not in ("union", "intersection", "leaf"):
            raise StructuralError(f"unknown node op {self.op!r}")

    def _local(self, p):
        return (p - self.offset) / self.scale

    def sdf(self, p):
        q = self._local(p)
        if self.op == "leaf":
            return self.scale * self.primitive.sdf(q)
        ds = np.stack([c.sdf(q) for c in self.children])
        agg = ds.min(axis=0) if self.op == "union" else ds.max(axis=0)
        return self.scale * agg


def leaf(primitive, scale=1.0, offset=(0.0, 0.0, 0.0)):
    return Node("leaf", primitive=primitive, scale=scale, offset=np.asarray(offset, float))


def union(*children):
    return Node("union", children=list(children))


def intersection(*children):
    return Node("intersection", children=list(children))


def _collect_leaves(node, scale=1.0, offset=None):
    """Flatten the tree into (primitive, world_scale, world_offset) triples."""
    offset = np.zeros(3) if offset is None else offset
    s = scale * node.scale
    o = offset + scale * node.offset
    if node.op == "leaf":
        return [(node.primitive, s, o)]
    out = []
    for c in node.children:
        out.extend(_collect_leaves(c, s, o))
    return out


# ---------------------------------------------------------------------------
# shapes


@dataclass
class AnalyticShape:
    """A primitive tree in the canonical frame (identity pose, unit cube)."""

    root: Node
    category: str = "custom"
    name: str = "shape"

    def sdf(self, x):
        p, single = _pts(x)
        d = self.root.sdf(p)
        return float(d[0]) if single else d

    def leaves(self):
        return _collect_leaves(self.root)

    def bbox(self):
        los, his = [], []
        for prim, s, o in self.leaves():
            lo, hi = prim.bbox()
            los.append(s * lo + o)
            his.append(s * hi + o)
        return np.min(los, axis=0), np.max(his, axis=0)

    def bounding_radius(self):
        lo, hi = self.bbox()
        return float(np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi))))

    def validate_unit_cube(self, tol=1e-9):
        lo, hi = self.bbox()
        if (lo < -1 - tol).any() or (hi > 1 + tol).any():
            raise StructuralError(f"shape {self.name} exceeds the unit cube: [{lo}, {hi}]")
        return self

    # -- sampling ----------------------------------------------------------

    def _leaf_distances(self, pts):
        cols = []
        for prim, s, o in self.leaves():
            cols.append(s * prim.sdf((pts - o) / s))
        return np.stack(cols, axis=1)

    def sample_surface(self, n, rng, max_rounds=60):
        """Surface points with outward unit normals.

        Candidates are drawn per leaf (area-weighted), then kept only when
        they lie on the composite surface and every other leaf is at least
        UNIQUE_GAP away, so the min/max combination is attained uniquely.
        """
        leaves = self.leaves()
        areas = np.array([prim.area() * s**2 for prim, s, o in leaves])
        weights = areas / areas.sum()
        got_p, got_n = [], []
        remaining = n
        for _ in range(max_rounds):
            draw = max(2 * remaining, 64)
            counts = rng.multinomial(draw, weights)
            for col, ((prim, s, o), cnt) in enumerate(zip(leaves, counts)):
                if cnt == 0:
                    continue
                local = prim.sample_surface(cnt, rng)
                world = s * local + o
                d = self._leaf_distances(world)
                ok = np.abs(d[:, col]) < _SURFACE_TOL
                ok &= np.abs(self.root.sdf(world)) < _SURFACE_TOL
                if d.shape[1] > 1:
                    others = np.delete(d, col, axis=1)
                    if self.root.op == "intersection":
                        ok &= others.max(axis=1) < -UNIQUE_GAP
                    else:
                        ok &= others.min(axis=1) > UNIQUE_GAP
                if not ok.any():
                    continue
                pts = world[ok]
                normals = prim.normal((pts - o) / s)
                got_p.append(pts)
                got_n.append(normals)
            have = sum(len(p) for p in got_p)
            if have >= n:
                break
            remaining = n - have
        else:
            raise DataError(
                f"surface sampling for {self.name} exhausted {max_rounds} rounds; "
                f"got {sum(len(p) for p in got_p)}/{n} points"
            )
        pts = np.concatenate(got_p)[:n]
        normals = np.concatenate(got_n)[:n]
        return pts, normals

    def sample_free(self, n, rng):
        """Uniform free-space points in the cube with oracle SDF attached."""
        pts = rng.uniform(-1.0, 1.0, (n, 3))
        return pts, self.root.sdf(pts)

    # -- serialization -------------------------------------------------------

    def to_json(self):
        return {"category": self.category, "name": self.name, "root": _node_to_json(self.root)}

    @classmethod
    def from_json(cls, doc):
        try:
            return cls(_node_from_json(doc["root"]), doc["category"], doc["name"])
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed shape document: {e}") from e


def _node_to_json(node):
    base = {"scale": float(node.scale), "offset": [float(v) for v in node.offset]}
    if node.op == "leaf":
        prim = node.primitive
        doc = {"type": prim.kind, **base}
        for f in ("center", "half_extents", "radii"):
            if hasattr(prim, f):
                doc[f] = [float(v) for v in np.asarray(getattr(prim, f))]
        for f in ("radius", "half_height", "round_radius"):
            if hasattr(prim, f):
                doc[f] = float(getattr(prim, f))
        if hasattr(prim, "axis"):
            doc["axis"] = int(prim.axis)
        return doc
    return {"type": node.op, **base, "children": [_node_to_json(c) for c in node.children]}


def _node_from_json(doc):
    kind = doc["type"]
    scale = doc.get("scale", 1.0)
    offset = doc.get("offset", (0.0, 0.0, 0.0))
    if kind in ("union", "intersection"):
        children = [_node_from_json(c) for c in doc["children"]]
        return Node(kind, children=children, scale=scale, offset=offset)
    if kind not in _PRIMITIVES:
        raise DataError(f"unknown primitive type {kind!r}")
    cls = _PRIMITIVES[kind]
    kwargs = {k: doc[k] for k in doc if k not in ("type", "scale", "offset", "children")}
    return Node("leaf", primitive=cls(**kwargs), scale=scale, offset=offset)


# ---------------------------------------------------------------------------
# shape sample sets


@dataclass
class ShapeSampleSet:
    """Training samples for one shape: oriented surface points plus
    free-space points with ground-truth signed distances."""

    surface_points: np.ndarray  # (S, 3)
    surface_normals: np.ndarray  # (S, 3), unit
    free_points: np.ndarray  # (F, 3) in [-1, 1]^3
    free_sdf: np.ndarray  # (F,)

    def validate(self):
        if len(self.surface_points) == 0 or len(self.free_points) == 0:
            raise StructuralError("sample set must contain surface and free points")
        norms = np.linalg.norm(self.surface_normals, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise StructuralError("surface normals are not unit length")
        if np.abs(self.free_points).max() > 1.0 + 1e-12:
            raise StructuralError("free points outside the [-1,1]^3 cube")
        return self


def sample_shape(shape, n_surface, n_free, seed):
    """Draw a ShapeSampleSet from the analytic oracle, deterministic per seed."""
    if n_surface <= 0 or n_free <= 0:
        raise StructuralError("sample counts must be positive")
    rng = substream(seed, "sample", shape.name)
    pts, normals = shape.sample_surface(n_surface, rng)
    free, sdf = shape.sample_free(n_free, rng)
    return ShapeSampleSet(pts, normals, free, sdf).validate()


def analytic_sdf(shape, x):
    """Signed distance of `x` under the shape's oracle."""
    return shape.sdf(x)


# ---------------------------------------------------------------------------
# families

CATEGORIES = ("sphere", "car", "chair", "plane")


def make_family(category, count, seed):
    """Deterministic list of same-category shapes with varied parameters."""
    if count <= 0:
        raise StructuralError("family count must be positive")
    if category not in CATEGORIES:
        raise StructuralError(f"unknown category {category!r}, expected one of {CATEGORIES}")
    rng = substream(seed, "family", category)
    maker = {"sphere": _make_sphere, "car": _make_car, "chair": _make_chair, "plane": _make_plane}[category]
    shapes = []
    for i in range(count):
        shape = maker(rng, f"{category}_{i:04d}")
        shapes.append(shape.validate_unit_cube())
    return shapes


def _make_sphere(rng, name):
    r = rng.uniform(0.3, 0.6)
    return AnalyticShape(leaf(Sphere(np.zeros(3), r)), "sphere", name)


def _make_car(rng, name):
    half = np.array([rng.uniform(0.5, 0.62), rng.uniform(0.2, 0.26), rng.uniform(0.1, 0.16)])
    rr = rng.uniform(0.04, 0.08)
    wheel_r = rng.uniform(0.09, 0.13)
    body_z = -0.04 + rng.uniform(0.0, 0.04)
    body = leaf(RoundedBox(np.array([0.0, 0.0, body_z]), half - rr, rr))
    cabin = leaf(
        RoundedBox(
            np.array([rng.uniform(-0.1, 0.1), 0.0, body_z + half[2] + 0.06]),
            np.array([half[0] * 0.45, half[1] * 0.8, 0.07]),
            0.03,
        )
    )
    wheels = []
    zw = body_z - half[2]
    for sx in (-1, 1):
        for sy in (-1, 1):
            c = np.array([sx * half[0] * 0.62, sy * half[1], zw])
            wheels.append(leaf(Cylinder(c, axis=1, radius=wheel_r, half_height=0.05)))
    return AnalyticShape(union(body, cabin, *wheels), "car", name)


def _make_chair(rng, name):
    seat_h = rng.uniform(-0.1, 0.05)
    seat = leaf(Box(np.array([0.0, 0.0, seat_h]), np.array([0.35, 0.35, 0.045])))
    back = leaf(
        Box(
            np.array([-0.35 + 0.045, 0.0, seat_h + 0.38]),
            np.array([0.045, 0.33, rng.uniform(0.3, 0.42)]),
        )
    )
    legs = []
    leg_len = (seat_h + 0.8) / 2
    for sx in (-1, 1):
        for sy in (-1, 1):
            c = np.array([sx * 0.3, sy * 0.3, seat_h - leg_len])
            legs.append(leaf(Box(c, np.array([0.04, 0.04, leg_len]))))
    parts = [seat, back, *legs]
    if rng.random() < 0.5:  # optional armrests
        for sy in (-1, 1):
            parts.append(
                leaf(Box(np.array([0.05, sy * 0.33, seat_h + 0.22]), np.array([0.25, 0.035, 0.03])))
            )
    return AnalyticShape(union(*parts), "chair", name)


def _make_plane(rng, name):
    body = leaf(Ellipsoid(np.zeros(3), np.array([rng.uniform(0.55, 0.7), 0.09, 0.09])))
    span = rng.uniform(0.5, 0.7)
    wing = leaf(Box(np.array([0.05, 0.0, 0.0]), np.array([rng.uniform(0.1, 0.15), span, 0.015])))
    tail = leaf(Box(np.array([-0.55, 0.0, 0.1]), np.array([0.06, 0.18, 0.012])))
    fin = leaf(Box(np.array([-0.55, 0.0, 0.12]), np.array([0.06, 0.012, 0.1])))
    return AnalyticShape(union(body, wing, tail, fin), "plane", name)
