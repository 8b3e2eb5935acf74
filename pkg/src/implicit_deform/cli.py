"""Command line: ``implicit-deform {train,extract,eval,make-synthetic,ablate}``.

Exit codes: 0 ok, 2 configuration error, 3 training diverged, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, fields
from .io import (
    ConfigError,
    PointCloud,
    RunSpec,
    load_correspondences,
    load_obj,
    load_point_cloud,
    load_run_spec,
    parse_times,
    save_correspondences,
    save_obj,
    save_point_cloud,
)
from .flow import euler_paths, write_trajectories
from .sampler import NormalizationTransform, normalize_pair, perturb_correspondences, select_correspondences
from .surface import (
    boundary_edge_count,
    chamfer,
    compare,
    extract_mesh,
    mesh_volume,
    near_surface_samples,
    sample_mesh_surface,
)
from .synthetic import DEFAULTS, KINDS, make_synthetic
from .trainer import TrainingDiverged, load_state, metrics_csv, save_state, train, write_manifest

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
MAX_TRAJECTORIES = 256

logger = logging.getLogger("implicit_deform")


class InputError(Exception):
    """Unreadable or malformed input file."""


# -- shared pieces ------------------------------------------------------------------------

def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _spec_from_args(args) -> RunSpec:
    spec = load_run_spec(args.config, _overrides(args.set))
    if getattr(args, "seed", None) is not None:
        spec.train["seed"] = args.seed
    return spec.validate()


def _run_dir(args, spec: RunSpec, tag: str) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        out = Path(spec.output_dir) / f"{tag}-{time.strftime('%Y%m%d-%H%M%S')}"
    for sub in ("checkpoints", "meshes", "trajectories"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _load_inputs(spec: RunSpec):
    if spec.source is None or spec.target is None:
        raise ConfigError("[data] source and target are required")
    try:
        c0 = load_point_cloud(spec.source)
        c1 = load_point_cloud(spec.target)
        C = load_correspondences(spec.correspondences) if spec.correspondences else np.zeros((0, 2), np.int64)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    return c0, c1, C


def _time_tag(t: float) -> str:
    return f"{t:.3f}"


def _mesh_rows(F, tf: NormalizationTransform, times, resolution, P0n=None, P1n=None, seed=0):
    """Per-time mesh statistics in the normalised frame."""
    rows, meshes = [], {}
    for t in times:
        mesh = extract_mesh(F, t, resolution)
        meshes[t] = mesh
        row = {"t": t, "vertices": len(mesh.vertices), "faces": len(mesh.triangles),
               "open_edges": boundary_edge_count(mesh) if not mesh.is_empty else 0}
        if mesh.is_empty:
            row.update(volume=float("nan"), eikonal=float("nan"))
        else:
            row["volume"] = mesh_volume(mesh) / tf.scale ** 3 if row["open_edges"] == 0 else float("nan")
            X = near_surface_samples(mesh, 4000, 0.02, seed)
            row["eikonal"] = float(np.mean(np.asarray(fields.eikonal_residual(F, X, t))))
        if P0n is not None and t == 0.0 and not mesh.is_empty:
            row["cd_source"] = chamfer(sample_mesh_surface(mesh, 10000, seed)[0], P0n)
        if P1n is not None and t == 1.0 and not mesh.is_empty:
            row["cd_target"] = chamfer(sample_mesh_surface(mesh, 10000, seed)[0], P1n)
        rows.append(row)
    return rows, meshes


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _write_rows(path: Path, rows: list[dict]):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})


def _prepare(spec: RunSpec, c0, c1, C, seed: int):
    """Normalise, pick the correspondence subset, and drop normals if unused."""
    if spec.normalize:
        P0n, P1n, tf = normalize_pair(c0.points, c1.points)
    else:
        P0n, P1n, tf = c0.points, c1.points, NormalizationTransform.identity()
    if len(C) and spec.correspondence_fraction < 1.0:
        C = select_correspondences(C, spec.correspondence_fraction, np.random.default_rng([seed, 1]))
    N0 = c0.normals if spec.normals else None
    N1 = c1.normals if spec.normals else None
    if spec.normals and (N0 is None or N1 is None):
        raise ConfigError("[run] normals = on needs 6-column clouds or PLY normals")
    return P0n, P1n, tf, C, N0, N1


def _train_into(out: Path, spec: RunSpec, cfg, c0, c1, C, extra_manifest=None):
    P0n, P1n, tf, Csel, N0, N1 = _prepare(spec, c0, c1, C, cfg.seed)
    write_manifest(out / "manifest.json", cfg,
                   {"source": spec.source, "target": spec.target, "correspondences": spec.correspondences},
                   {"version": __version__, "run": _spec_dict(spec), "n_correspondences": int(len(Csel)),
                    **(extra_manifest or {})})
    try:
        result = train(P0n, P1n, Csel, cfg, N0, N1, transform=tf)
    except TrainingDiverged as exc:
        save_state(out / "checkpoints" / "last_finite.npz", exc.state)
        raise
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    _write_rows(out / "timings.csv", [{"epoch": i, "seconds": s} for i, s in enumerate(result.timings)])
    save_state(out / "checkpoints" / "final.npz", result.state)
    F = result.state.F
    rows, meshes = _mesh_rows(F, tf, spec.times, spec.resolution, P0n, P1n, seed=cfg.seed)
    for t, mesh in meshes.items():
        save_obj(out / "meshes" / f"mesh_t{_time_tag(t)}.obj", mesh.transformed(tf.invert))
    _write_rows(out / "surface_metrics.csv", rows)
    if len(Csel):
        src = P0n[Csel[: MAX_TRAJECTORIES, 0]]
        paths = np.asarray(euler_paths(result.state.Vf, src, cfg.T), dtype=np.float64)
        paths = tf.invert(paths.reshape(-1, 3)).reshape(paths.shape)
        write_trajectories(out / "trajectories" / "trajectories.csv", paths)
    return result, rows


def _spec_dict(spec: RunSpec) -> dict:
    d = dataclasses.asdict(spec)
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in d.items()}


# -- commands ---------------------------------------------------------------------------------

def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    cfg = spec.train_config()
    c0, c1, C = _load_inputs(spec)
    out = _run_dir(args, spec, "train")
    _, rows = _train_into(out, spec, cfg, c0, c1, C)
    for r in rows:
        logger.info("t=%s volume=%s eikonal=%s", r["t"], r.get("volume"), r.get("eikonal"))
    print(out)
    return EXIT_OK


def cmd_extract(args) -> int:
    try:
        state = load_state(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    times = parse_times(args.times)
    if any(not 0 <= t <= 1 for t in times):
        raise ConfigError("times must lie in [0, 1]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in times:
        mesh = extract_mesh(state.F, t, args.resolution, transform=state.transform)
        save_obj(out / f"mesh_t{_time_tag(t)}.obj", mesh)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        A = load_obj(args.mesh)
        B = load_obj(args.gt)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if A.is_empty or B.is_empty:
        raise InputError("meshes must have faces")
    pa, _ = sample_mesh_surface(A, args.samples, args.seed)
    pb, _ = sample_mesh_surface(B, args.samples, args.seed + 1)
    report = compare(pa, pb)
    row = {"mesh": str(args.mesh), "gt": str(args.gt), "samples": args.samples, **report.as_dict()}
    if args.out:
        _write_rows(Path(args.out), [row])
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: _cell(v) for k, v in row.items()})
    return EXIT_OK


def _parse_param(value: str):
    value = value.strip()
    if "," in value:
        return tuple(float(v) for v in value.split(","))
    try:
        return int(value)
    except ValueError:
        return float(value)


def cmd_make_synthetic(args) -> int:
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            params[k.strip()] = _parse_param(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r}") from exc
    try:
        pair = make_synthetic(args.kind, params, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_point_cloud(out / "source.xyz", PointCloud(pair.P0, pair.N0))
    save_point_cloud(out / "target.xyz", PointCloud(pair.P1, pair.N1))
    save_correspondences(out / "correspondences.txt", pair.C)
    for s in parse_times(args.times):
        save_obj(out / f"reference_t{_time_tag(s)}.obj", pair.reference(s))
    (out / "synthetic.json").write_text(json.dumps(
        {"kind": args.kind, "seed": args.seed, "params": {k: list(v) if isinstance(v, tuple) else v
                                                         for k, v in pair.params.items()}},
        indent=2, sort_keys=True) + "\n")
    (out / "run.cfg").write_text(
        "[data]\nsource = source.xyz\ntarget = target.xyz\ncorrespondences = correspondences.txt\n"
        "output_dir = runs\n\n[train]\nepochs = 2000\nimplicit_width = 64\nimplicit_layers = 3\n"
        "velocity_width = 64\nvelocity_layers = 3\nbatch_size = 1000\ncloud_batch = 1000\nT = 10\n"
        "lr = 0.0003\ndtype = float32\n\n[run]\nmode = mlse\ncorrespondence_fraction = 0.05\nresolution = 64\n"
    )
    print(out)
    return EXIT_OK


PROTOCOLS = {
    "mode": [("mlse", {"mode": "mlse"}), ("olse", {"mode": "olse"})],
    "div": [("div_off", {"div_free": False}), ("div_on", {"div_free": True})],
    "fraction": [(f"frac_{p:02d}", {"correspondence_fraction": p / 100}) for p in (1, 5, 10, 20)],
    "noise": [(f"local_{p:02d}", {"noise": ("local_k_swap", p / 100)}) for p in (1, 5, 10, 20)]
    + [(f"global_{p:02d}", {"noise": ("global_swap", p / 100)}) for p in (1, 5, 10)],
}


def cmd_ablate(args) -> int:
    spec = _spec_from_args(args)
    c0, c1, C = _load_inputs(spec)
    out = _run_dir(args, spec, f"ablate-{args.protocol}")
    summary = []
    for name, change in PROTOCOLS[args.protocol]:
        variant = dataclasses.replace(spec, train=dict(spec.train))
        noise = change.get("noise")
        for k, v in change.items():
            if k != "noise":
                setattr(variant, k, v)
        if variant.mode != spec.mode:
            variant.train.pop("eikonal_mode", None)
        if "div_free" in change:
            variant.train.pop("lam_div", None)
        cfg = variant.train_config()
        Cv = C
        if noise is not None:
            if not len(C):
                raise ConfigError("the noise protocol needs correspondences")
            Cv, _ = perturb_correspondences(C, c1.points, noise[0], noise[1], np.random.default_rng([cfg.seed, 2]))
        sub = out / name
        for d in ("checkpoints", "meshes", "trajectories"):
            (sub / d).mkdir(parents=True, exist_ok=True)
        result, rows = _train_into(sub, variant, cfg, c0, c1, Cv, {"ablation": args.protocol, "variant": name})
        last = result.metrics[-1]
        inner = [r["eikonal"] for r in rows if 0 < r["t"] < 1]
        summary.append({
            "variant": name, "fit0": last["fit0"], "fit1": last["fit1"], "trajectory": last["trajectory"],
            "eikonal_intermediate": float(np.mean(inner)) if inner else float("nan"),
            **{f"volume_t{_time_tag(r['t'])}": r["volume"] for r in rows},
        })
    _write_rows(out / "summary.csv", summary)
    print(out)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="implicit-deform", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(q):
        q.add_argument("--config", required=True, help="INI run config")
        q.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config entry")
        q.add_argument("--seed", type=int)
        q.add_argument("--out", help="exact output directory (default: timestamped under [data] output_dir)")

    q = sub.add_parser("train", help="fit a deformation and write checkpoint, meshes and metrics")
    run_args(q)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("extract", help="marching-cubes meshes from a checkpoint")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--times", default="0,0.25,0.5,0.75,1")
    q.add_argument("--resolution", type=int, default=128)
    q.add_argument("--out", default="meshes")
    q.set_defaults(func=cmd_extract)

    q = sub.add_parser("eval", help="Chamfer and Hausdorff distance between two OBJ meshes")
    q.add_argument("--mesh", required=True)
    q.add_argument("--gt", required=True)
    q.add_argument("--samples", type=int, default=10000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="CSV path (default: stdout)")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("make-synthetic", help="write a ground-truth pair")
    q.add_argument("--kind", required=True, choices=KINDS)
    q.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="generator parameter; vectors as comma lists. Keys per kind: "
                        + "; ".join(f"{k}: {', '.join(DEFAULTS[k])}" for k in KINDS))
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--times", default="0,0.25,0.5,0.75,1", help="reference mesh times")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_make_synthetic)

    q = sub.add_parser("ablate", help="train the variants of one ablation protocol")
    run_args(q)
    q.add_argument("--protocol", required=True, choices=sorted(PROTOCOLS))
    q.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
