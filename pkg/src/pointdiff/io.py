"""File formats: KITTI scans/labels/poses, PLY clouds, model weights, run configs."""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from .geometry import InvalidPoseError, RigidPose, as_cloud


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- KITTI

def read_kitti_bin(path) -> np.ndarray:
    """Velodyne scan: little-endian float32 (x, y, z, intensity) records; intensity dropped."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        whole = len(raw) - len(raw) % 16
        raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of 16-byte records "
                          f"(trailing data at byte offset {whole})")
    rec = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return rec[:, :3].astype(np.float64)


def write_kitti_bin(path, points, intensity=None) -> None:
    pts = as_cloud(points)
    rec = np.zeros((len(pts), 4), dtype="<f4")
    rec[:, :3] = pts
    if intensity is not None:
        rec[:, 3] = intensity
    Path(path).write_bytes(rec.tobytes())


def read_labels(path) -> np.ndarray:
    """SemanticKITTI labels: one little-endian u32 per point, class in the low 16 bits."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of u32 labels "
                          f"(trailing data at byte offset {len(raw) - len(raw) % 4})")
    return (np.frombuffer(raw, dtype="<u4") & 0xFFFF).astype(np.uint32)


def write_labels(path, labels) -> None:
    Path(path).write_bytes(np.asarray(labels, dtype="<u4").tobytes())


def read_poses(path) -> list[RigidPose]:
    """KITTI poses: 12 reals per line, the row-major 3x4 matrix [R | t]."""
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
            try:
                m = np.array([float(v) for v in tokens]).reshape(3, 4)
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            try:
                poses.append(RigidPose(m[:, :3], m[:, 3]))
            except InvalidPoseError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    return poses


def write_poses(path, poses) -> None:
    with open(path, "w") as f:
        for p in poses:
            m = np.hstack([p.rotation, p.translation[:, None]])
            f.write(" ".join(f"{v:.17g}" for v in m.ravel()) + "\n")


# ---------------------------------------------------------------- PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, points) -> None:
    pts = as_cloud(points)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(pts.astype("<f4").tobytes())


def _parse_ply_header(path, data: bytes):
    pos = 0
    lines = []
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: header not terminated by end_header")
        line = data[pos:nl].decode("ascii", errors="replace").strip()
        lines.append(line)
        pos = nl + 1
        if line == "end_header":
            break
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(name, dtype or ("list", count_t, item_t))])
    for lineno, line in enumerate(lines[1:-1], 2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"{path}:{lineno}: unsupported format {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError(f"{path}:{lineno}: malformed element line")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{path}:{lineno}: property before any element")
            if tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise FormatError(f"{path}:{lineno}: malformed list property")
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise FormatError(f"{path}:{lineno}: unknown property type {line!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise FormatError(f"{path}:{lineno}: unexpected header line {line!r}")
    if fmt is None:
        raise FormatError(f"{path}: header has no format line")
    return fmt, elements, pos


def read_ply(path) -> np.ndarray:
    """Vertex positions from an ascii or binary little-endian PLY file."""
    data = Path(path).read_bytes()
    fmt, elements, offset = _parse_ply_header(path, data)
    text_rows = data[offset:].decode("ascii", errors="replace").splitlines() if fmt == "ascii" else None
    row = 0
    for name, count, props in elements:
        names = [p[0] for p in props]
        is_vertex = name == "vertex"
        if is_vertex and not {"x", "y", "z"} <= set(names):
            raise FormatError(f"{path}: vertex element lacks x/y/z properties")
        if fmt == "ascii":
            if is_vertex:
                cols = [names.index(c) for c in "xyz"]
                out = np.empty((count, 3))
                for i in range(count):
                    if row + i >= len(text_rows):
                        raise FormatError(f"{path}: vertex {i} missing from ascii body")
                    vals = text_rows[row + i].split()
                    try:
                        out[i] = [float(vals[c]) for c in cols]
                    except (IndexError, ValueError):
                        raise FormatError(f"{path}: malformed ascii vertex {i}") from None
                return out
            row += count
            continue
        if any(isinstance(p[1], tuple) for p in props):
            if is_vertex:
                raise FormatError(f"{path}: list properties on vertices are not supported")
            offset = _skip_list_element(path, data, offset, count, props)
            continue
        dt = np.dtype([(n, "<" + t) for n, t in props])
        need = dt.itemsize * count
        if offset + need > len(data):
            raise FormatError(f"{path}: element {name!r} truncated at byte offset {len(data)}, "
                              f"needs {offset + need}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        offset += need
        if is_vertex:
            return np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    raise FormatError(f"{path}: no vertex element")


def _skip_list_element(path, data, offset, count, props):
    for _ in range(count):
        for _, t in props:
            if isinstance(t, tuple):
                _, ct, it = t
                n = int(np.frombuffer(data, dtype="<" + ct, count=1, offset=offset)[0])
                offset += np.dtype(ct).itemsize + n * np.dtype(it).itemsize
            else:
                offset += np.dtype(t).itemsize
            if offset > len(data):
                raise FormatError(f"{path}: list element truncated at byte offset {len(data)}")
    return offset


def read_cloud(path) -> np.ndarray:
    """Dispatch on extension: ``.bin`` (KITTI) or ``.ply``."""
    ext = Path(path).suffix.lower()
    if ext == ".bin":
        return read_kitti_bin(path)
    if ext == ".ply":
        return read_ply(path)
    raise FormatError(f"{path}: unknown point-cloud extension {ext!r}")


# ---------------------------------------------------------------- model files

FORMAT_VERSION = 1
NOISE_MAGIC = b"PCDF"
REFINE_MAGIC = b"PCRF"
_ACTIVATIONS = {"silu": 0}


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def u32(self, v):
        self.buf += struct.pack("<I", int(v))

    def f64(self, v):
        self.buf += struct.pack("<d", float(v))

    def tensor(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u32(a.ndim)
        for d in a.shape:
            self.u32(d)
        self.buf += a.tobytes()


class _Reader:
    def __init__(self, path, data: bytes):
        self.path, self.data, self.pos = path, data, 0

    def _take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte offset {self.pos}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def tensor(self):
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self._take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def _header(r: _Reader, magic: bytes):
    got = r._take(4)
    if got != magic:
        raise FormatError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.path}: unsupported format version {version}")


def _tensors(r: _Reader, names: list[str], shapes):
    n = r.u32()
    if n != len(names):
        raise FormatError(f"{r.path}: {n} tensors, model expects {len(names)}")
    params = {}
    for name in names:
        at = r.pos
        t = r.tensor()
        if t.shape != shapes[name]:
            raise FormatError(f"{r.path}: tensor {name} at byte offset {at} has shape {t.shape}, "
                              f"expected {shapes[name]}")
        params[name] = t
    if r.pos != len(r.data):
        raise FormatError(f"{r.path}: trailing bytes at offset {r.pos}")
    return params


def save_noise_model(path, model) -> None:
    c = model.config
    w = _Writer()
    w.buf += NOISE_MAGIC
    w.u32(FORMAT_VERSION)
    w.u32(c.d_t)
    w.u32(c.d_c)
    w.u32(c.n_condition_points)
    w.u32(c.encoder_hidden)
    w.f64(c.coord_scale)
    w.u32(_ACTIVATIONS[c.activation])
    w.u32(len(c.layer_dims))
    for d in c.layer_dims:
        w.u32(d)
    w.u32(len(model.params))
    for a in model.params.values():
        w.tensor(a)
    Path(path).write_bytes(bytes(w.buf))


def load_noise_model(path):
    from .noise_model import ModelConfig, ToyNoisePredictor, init_params

    r = _Reader(path, Path(path).read_bytes())
    _header(r, NOISE_MAGIC)
    d_t, d_c, n_cond, enc_h = r.u32(), r.u32(), r.u32(), r.u32()
    scale = r.f64()
    act_code = r.u32()
    acts = {v: k for k, v in _ACTIVATIONS.items()}
    if act_code not in acts:
        raise FormatError(f"{path}: unknown activation code {act_code}")
    dims = tuple(r.u32() for _ in range(r.u32()))
    cfg = ModelConfig(d_t=d_t, d_c=d_c, layer_dims=dims, n_condition_points=n_cond,
                      encoder_hidden=enc_h, coord_scale=scale, activation=acts[act_code])
    shapes = {k: v.shape for k, v in init_params(cfg).items()}
    return ToyNoisePredictor(cfg, _tensors(r, list(shapes), shapes))


def save_refine_model(path, net) -> None:
    c = net.config
    w = _Writer()
    w.buf += REFINE_MAGIC
    w.u32(FORMAT_VERSION)
    w.u32(c.kappa)
    w.f64(c.max_offset)
    w.f64(c.jitter_sigma)
    w.f64(c.coord_scale)
    w.u32(len(c.hidden))
    for d in c.hidden:
        w.u32(d)
    w.u32(len(net.params))
    for a in net.params.values():
        w.tensor(a)
    Path(path).write_bytes(bytes(w.buf))


def load_refine_model(path):
    from .refinement import RefineConfig, RefineNet, init_refine_params

    r = _Reader(path, Path(path).read_bytes())
    _header(r, REFINE_MAGIC)
    kappa = r.u32()
    max_offset, sigma, scale = r.f64(), r.f64(), r.f64()
    hidden = tuple(r.u32() for _ in range(r.u32()))
    cfg = RefineConfig(kappa=kappa, max_offset=max_offset, jitter_sigma=sigma,
                       coord_scale=scale, hidden=hidden)
    shapes = {k: v.shape for k, v in init_refine_params(cfg).items()}
    return RefineNet(cfg, _tensors(r, list(shapes), shapes))


# ---------------------------------------------------------------- scene directories

def write_scene(directory, scan_local, pose: RigidPose, world_map, labels=None) -> None:
    """One scene: ``scan.bin`` in the sensor frame, ``pose.txt``, ``map.ply`` in the world frame."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_kitti_bin(d / "scan.bin", scan_local)
    write_poses(d / "pose.txt", [pose])
    write_ply(d / "map.ply", world_map)
    if labels is not None:
        write_labels(d / "scan.label", labels)


def read_scene(directory):
    d = Path(directory)
    poses = read_poses(d / "pose.txt")
    if len(poses) != 1:
        raise FormatError(f"{d / 'pose.txt'}: expected exactly one pose, got {len(poses)}")
    return read_kitti_bin(d / "scan.bin"), poses[0], read_ply(d / "map.ply")


def scene_dirs(root) -> list[Path]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "scan.bin").exists())
    if not dirs:
        raise FormatError(f"{root}: no scene directories (expected */scan.bin)")
    return dirs


# ---------------------------------------------------------------- run config

def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, (tuple, frozenset)):
        items = [v for v in value.replace(",", " ").split() if v]
        kind = type(next(iter(like))) if like else float
        out = [kind(v) for v in items]
        return frozenset(out) if isinstance(like, frozenset) else tuple(out)
    if like is None:
        v = value.strip().lower()
        return None if v in ("", "none", "off") else float(value)
    return value


class RunConfig:
    """Flat key=value settings shared by every config dataclass.

    A key names a dataclass field; it applies to every config that has a
    field of that name.
    """

    def __init__(self, *config_types):
        self.defaults = {}
        for ct in config_types:
            for f in dataclasses.fields(ct):
                inst = ct()
                self.defaults.setdefault(f.name, getattr(inst, f.name))
        self.values: dict[str, object] = {}

    def set(self, key: str, value, where: str = "") -> None:
        if key not in self.defaults:
            raise FormatError(f"{where}unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = _coerce(value, self.defaults[key])
            except ValueError as e:
                raise FormatError(f"{where}bad value for {key!r}: {e}") from None
        self.values[key] = value

    def load(self, path) -> "RunConfig":
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise FormatError(f"{path}:{lineno}: expected key=value")
                k, v = line.split("=", 1)
                self.set(k.strip(), v.strip(), f"{path}:{lineno}: ")
        return self

    def build(self, config_type, **overrides):
        names = {f.name for f in dataclasses.fields(config_type)}
        kw = {k: v for k, v in self.values.items() if k in names}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return config_type(**kw)
