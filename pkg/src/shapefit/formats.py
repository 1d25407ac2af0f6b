"""On-disk formats: checkpoint container, PLY, PFM, OBJ, mask RLE.

Checkpoint container layout (all little-endian):

    magic     8 bytes   b"SHAPEFIT"
    version   u32       currently 1
    nsections u32
    section, repeated nsections times:
        name_len u32, name utf-8 bytes
        kind     u8        0 = mlp, 1 = array
        mlp:   omega0 f64, n_layers u32, then per layer:
               act u8 (0 sine, 1 relu, 2 linear), out u32, in u32,
               weights f64[out*in] row-major, bias f64[out]
        array: ndim u8, dims u32[ndim], data f64 row-major

Writes are atomic (temp file + rename) so interrupted runs never leave
half-written checkpoints behind.
"""

import json
import os
import struct
import tempfile

import numpy as np

from .autodiff import ACT_LINEAR, ACT_RELU, ACT_SINE, MLPParams
from .errors import DataError

MAGIC = b"SHAPEFIT"
VERSION = 1
_KIND_MLP = 0
_KIND_ARRAY = 1
_ACT_CODE = {ACT_SINE: 0, ACT_RELU: 1, ACT_LINEAR: 2}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# checkpoint container


def save_container(path, sections: dict):
    """Write named MLPParams / float arrays to the binary container."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, obj in sections.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        if isinstance(obj, MLPParams):
            parts.append(struct.pack("<Bd I", _KIND_MLP, obj.omega0, obj.n_layers))
            for w, b, act in zip(obj.weights, obj.biases, obj.activations):
                parts.append(struct.pack("<BII", _ACT_CODE[act], w.shape[0], w.shape[1]))
                parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
                parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        else:
            arr = np.asarray(obj, dtype=np.float64)
            parts.append(struct.pack("<BB", _KIND_ARRAY, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    _atomic_write(path, b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.data):
            raise DataError("container truncated")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_container(path):
    """Read a container back into {name: MLPParams | ndarray}."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint container")
    version, nsec = r.unpack("<II")
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    out = {}
    for _ in range(nsec):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (kind,) = r.unpack("<B")
        if kind == _KIND_MLP:
            omega0, n_layers = r.unpack("<dI")
            weights, biases, acts = [], [], []
            for _ in range(n_layers):
                act, n_out, n_in = r.unpack("<BII")
                if act not in _ACT_NAME:
                    raise DataError(f"{path}: unknown activation code {act}")
                weights.append(r.f64(n_out * n_in).reshape(n_out, n_in))
                biases.append(r.f64(n_out))
                acts.append(_ACT_NAME[act])
            out[name] = MLPParams(weights, biases, tuple(acts), omega0)
        elif kind == _KIND_ARRAY:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            out[name] = r.f64(int(np.prod(shape)) if ndim else 1).reshape(shape)
        else:
            raise DataError(f"{path}: unknown section kind {kind}")
    return out


# ---------------------------------------------------------------------------
# PLY point clouds


def save_ply(path, points, binary=True):
    """Write an (N, 3) point cloud as PLY with float x,y,z properties."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DataError(f"PLY expects (N, 3) points, got {points.shape}")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    ).encode("ascii")
    if binary:
        body = np.ascontiguousarray(points, dtype="<f4").tobytes()
    else:
        body = "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in points).encode("ascii")
    _atomic_write(path, header + body)


_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4), "double": ("<f8", 8), "float64": ("<f8", 8),
    "int": ("<i4", 4), "int32": ("<i4", 4), "uint": ("<u4", 4), "uint32": ("<u4", 4),
    "short": ("<i2", 2), "ushort": ("<u2", 2), "int16": ("<i2", 2), "uint16": ("<u2", 2),
    "char": ("<i1", 1), "uchar": ("<u1", 1), "int8": ("<i1", 1), "uint8": ("<u1", 1),
}


def load_ply(path):
    """Read x,y,z vertex coordinates from an ASCII or binary-LE PLY file."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read PLY {path}: {e}") from e
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = data[: end + len(b"end_header\n")]
    body = data[len(header):]
    fmt = None
    n_vertex = None
    props = []
    in_vertex = False
    for line in header.decode("ascii", "replace").splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise DataError(f"{path}: list properties on vertices unsupported")
            props.append((tok[1], tok[2]))
    if fmt not in ("ascii", "binary_little_endian") or n_vertex is None:
        raise DataError(f"{path}: unsupported PLY format {fmt!r}")
    names = [p[1] for p in props]
    for axis in "xyz":
        if axis not in names:
            raise DataError(f"{path}: vertex property {axis!r} missing")
    if fmt == "ascii":
        rows = body.decode("ascii").split()
        table = np.array(rows, dtype=np.float64).reshape(n_vertex, len(props))
        cols = {name: table[:, i] for i, (_, name) in enumerate(props)}
    else:
        dtype = np.dtype([(name, _PLY_TYPES[t][0]) for t, name in props])
        table = np.frombuffer(body, dtype=dtype, count=n_vertex)
        cols = {name: table[name].astype(np.float64) for _, name in props}
    return np.stack([cols["x"], cols["y"], cols["z"]], axis=1)


# ---------------------------------------------------------------------------
# PFM depth maps


def save_pfm(path, image):
    """Write a 2D float image as grayscale PFM (little-endian)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise DataError(f"PFM expects a 2D image, got shape {image.shape}")
    h, w = image.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    # PFM stores rows bottom-to-top
    body = np.ascontiguousarray(image[::-1], dtype="<f4").tobytes()
    _atomic_write(path, header + body)


def load_pfm(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read PFM {path}: {e}") from e
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"Pf", b"PF"):
        raise DataError(f"{path}: not a PFM file")
    if parts[0] == b"PF":
        raise DataError(f"{path}: color PFM unsupported")
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dt = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(parts[3], dtype=dt, count=w * h).reshape(h, w)
    return np.array(img[::-1], dtype=np.float64)


# ---------------------------------------------------------------------------
# OBJ meshes


def save_obj(path, vertices, triangles):
    """Wavefront OBJ with v/f records and 1-based indices."""
    lines = []
    for x, y, z in np.asarray(vertices, dtype=np.float64):
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    for i, j, k in np.asarray(triangles, dtype=np.int64):
        lines.append(f"f {i + 1} {j + 1} {k + 1}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def load_obj(path):
    vertices, triangles = [], []
    try:
        with open(path, "r", encoding="ascii") as f:
            for line in f:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "v":
                    vertices.append([float(v) for v in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(t.split("/")[0]) - 1 for t in tok[1:4]]
                    triangles.append(idx)
    except OSError as e:
        raise DataError(f"cannot read OBJ {path}: {e}") from e
    return (
        np.array(vertices, dtype=np.float64).reshape(-1, 3),
        np.array(triangles, dtype=np.int64).reshape(-1, 3),
    )


# ---------------------------------------------------------------------------
# boolean mask run-length encoding (for depth-image sidecars)


def mask_to_rle(mask):
    """Run lengths of the row-major flattened mask, starting with False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_to_mask(runs, shape):
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    if pos != total:
        raise DataError(f"RLE covers {pos} pixels, mask has {total}")
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# JSON helpers (deterministic byte output)


def save_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise DataError(f"cannot read JSON {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e
