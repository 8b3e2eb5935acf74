"""File formats: point clouds, OBJ meshes, correspondences and run configs.

Point clouds
    ``.xyz``/``.txt``/``.pts``: one point per line, ``x y z`` or
    ``x y z nx ny nz``; ``#`` starts a comment. ``.ply``: ASCII PLY with a
    ``vertex`` element carrying ``x y z`` and optionally ``nx ny nz``.
    ``.obj``: the ``v`` lines.
Correspondences
    One ``i j`` pair of 0-based integers per line (source index, target
    index); ``#`` starts a comment.
Run config
    INI file with sections ``[data]``, ``[train]`` and ``[run]``; unknown
    sections or keys are rejected. See the README for the key table.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .surface import TriMesh
from .trainer import TrainConfig

POINT_SUFFIXES = {".xyz", ".txt", ".pts", ".ply", ".obj"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in length")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def _read_xyz(path: Path) -> PointCloud:
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = _strip(line)
        if not line:
            continue
        vals = line.split()
        if len(vals) not in (3, 6):
            raise ValueError(f"{path}:{lineno}: expected 3 or 6 columns, got {len(vals)}")
        rows.append([float(v) for v in vals])
    if not rows:
        raise ValueError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: mixed 3- and 6-column rows")
    arr = np.array(rows)
    return PointCloud(arr[:, :3], arr[:, 3:6] if arr.shape[1] == 6 else None)


def _read_ply(path: Path) -> PointCloud:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: missing 'ply' magic")
    n_vertex, props, element, body = None, [], None, None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vertex = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i + 1
            break
    if n_vertex is None or body is None:
        raise ValueError(f"{path}: malformed PLY header")
    data = np.array([[float(v) for v in lines[body + k].split()[: len(props)]] for k in range(n_vertex)])
    col = {name: k for k, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = data[:, [col["nx"], col["ny"], col["nz"]]] if {"nx", "ny", "nz"} <= col.keys() else None
    return PointCloud(pts, normals)


def load_point_cloud(path) -> PointCloud:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".xyz", ".txt", ".pts"):
        return _read_xyz(path)
    if suffix == ".ply":
        return _read_ply(path)
    if suffix == ".obj":
        return PointCloud(load_obj(path).vertices)
    raise ValueError(f"{path}: unsupported point-cloud format {suffix!r}")


def save_point_cloud(path, cloud: PointCloud | np.ndarray) -> Path:
    """Write ``.xyz`` text with round-trippable ``repr`` floats."""
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud)
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    path = Path(path)
    path.write_text("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in data))
    return path


def load_obj(path) -> TriMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = _strip(line).split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if len(idx) < 3:
                raise ValueError(f"{path}:{lineno}: face with fewer than 3 vertices")
            faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def save_obj(path, mesh: TriMesh) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for v in mesh.vertices.tolist():
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in mesh.triangles + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    return path


def load_correspondences(path) -> np.ndarray:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = _strip(line)
        if not line:
            continue
        vals = line.split()
        if len(vals) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'i j'")
        pairs.append((int(vals[0]), int(vals[1])))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def save_correspondences(path, C) -> Path:
    path = Path(path)
    C = np.asarray(C, dtype=np.int64).reshape(-1, 2)
    path.write_text("# source_index target_index\n" + "".join(f"{i} {j}\n" for i, j in C))
    return path


# -- run configuration -----------------------------------------------------------

@dataclass
class RunSpec:
    source: Path | None = None
    target: Path | None = None
    correspondences: Path | None = None
    output_dir: Path = Path("runs")
    train: dict = field(default_factory=dict)
    mode: str = "mlse"
    div_free: bool = False
    normals: bool = False
    normalize: bool = True
    correspondence_fraction: float = 1.0
    times: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    resolution: int = 128

    def validate(self, check_files: bool = True) -> "RunSpec":
        if self.mode not in ("mlse", "olse"):
            raise ConfigError(f"mode must be 'mlse' or 'olse', got {self.mode!r}")
        if any(not 0.0 <= t <= 1.0 for t in self.times):
            raise ConfigError("extraction times must lie in [0, 1]")
        if not 0 < self.correspondence_fraction <= 1:
            raise ConfigError("correspondence_fraction must lie in (0, 1]")
        if check_files:
            for name in ("source", "target", "correspondences"):
                p = getattr(self, name)
                if p is not None and not Path(p).exists():
                    raise FileNotFoundError(f"{name} file not found: {p}")
        self.train_config()
        return self

    def train_config(self) -> TrainConfig:
        overrides = dict(self.train)
        overrides.setdefault("eikonal_mode", self.mode)
        overrides.setdefault("lam_div", 1.0 if self.div_free else 0.0)
        epochs = overrides.pop("epochs", None)
        try:
            cfg = TrainConfig.from_dict({})
            if epochs is not None and "warmup_epochs" not in overrides:
                cfg = cfg.scaled(int(epochs))
            elif epochs is not None:
                overrides["epochs"] = epochs
            return dataclasses.replace(cfg, **overrides)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


_DATA_KEYS = {"source", "target", "correspondences", "output_dir"}
_RUN_KEYS = {"mode", "div_free", "normals", "normalize", "correspondence_fraction", "times", "resolution"}
_TRAIN_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _parse_train_value(key: str, value: str):
    kind = str(_TRAIN_TYPES[key])
    if value.strip().lower() in ("none", "") and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            return int(value)
        if kind.startswith("float"):
            return float(value)
        if kind.startswith("bool"):
            return _parse_bool(value)
    except ValueError as exc:
        raise ConfigError(f"[train] {key}: {exc}") from exc
    return value.strip()


def parse_times(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"bad time list {text!r}") from exc


def load_run_spec(path, overrides: dict[str, str] | None = None, base_dir=None) -> RunSpec:
    """Read an INI run config; ``overrides`` maps ``section.key`` to a string value."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)

    unknown_sections = set(parser.sections()) - {"data", "train", "run"}
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    base = Path(base_dir) if base_dir is not None else (Path(path).parent if path else Path("."))
    spec = RunSpec()
    if parser.has_section("data"):
        for key, value in parser.items("data"):
            if key not in _DATA_KEYS:
                raise ConfigError(f"unknown key [data] {key}")
            p = Path(value)
            setattr(spec, key, p if p.is_absolute() else base / p)
    if parser.has_section("train"):
        for key, value in parser.items("train"):
            if key not in _TRAIN_TYPES:
                raise ConfigError(f"unknown key [train] {key}")
            spec.train[key] = _parse_train_value(key, value)
    if parser.has_section("run"):
        for key, value in parser.items("run"):
            if key not in _RUN_KEYS:
                raise ConfigError(f"unknown key [run] {key}")
            if key in ("div_free", "normals", "normalize"):
                setattr(spec, key, _parse_bool(value))
            elif key == "times":
                spec.times = parse_times(value)
            elif key == "resolution":
                spec.resolution = int(value)
            elif key == "correspondence_fraction":
                spec.correspondence_fraction = float(value)
            else:
                spec.mode = value.strip().lower()
    return spec
