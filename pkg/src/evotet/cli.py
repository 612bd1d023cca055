"""Command-line interface.

Subcommands: fit-geometry, fit-appearance, export, metrics, gradcheck.
Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import AssetIOError, ConfigurationError, ContractError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _write_run_outputs(cfg, ctx, out: Path) -> None:
    from .pipeline import dump_config
    from .report import write_report
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.lock").write_text(dump_config(cfg), encoding="utf-8")
    write_report(ctx.loss_rows, out)


def cmd_fit_geometry(args) -> int:
    from .fieldgrid import save_field
    from .pipeline import load_config, run_geometry
    from .sdfkit import save_obj
    cfg = load_config(args.config)
    out = Path(cfg.output.directory)
    params, mesh, ctx = run_geometry(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(out / "mesh.obj", mesh)
    save_field(out / "geometry.tfld", params)
    _write_run_outputs(cfg, ctx, out)
    print(f"geometry done: {mesh.n_vertices} vertices, {mesh.n_faces} faces -> {out}")
    return EXIT_OK


def cmd_fit_appearance(args) -> int:
    from .fieldgrid import save_field
    from .pipeline import load_config, prepare_run, stage_appearance
    from .report import read_loss_csv
    from .sdfkit import load_obj
    cfg = load_config(args.config)
    out = Path(cfg.output.directory)
    mesh = load_obj(args.mesh)
    mesh.validate()
    ctx = prepare_run(cfg)
    existing = []
    if (out / "losses.csv").exists():
        existing = read_loss_csv(out / "losses.csv")
        ctx.global_step = (existing[-1]["step"] + 1) if existing else 0
    result = stage_appearance(cfg, ctx, mesh)
    ctx.loss_rows = existing + ctx.loss_rows
    out.mkdir(parents=True, exist_ok=True)
    save_field(out / "appearance.tfld", result.params)
    _write_run_outputs(cfg, ctx, out)
    print(f"appearance done -> {out / 'appearance.tfld'}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .assets import export_assets
    from .fieldgrid import load_field
    from .pipeline import load_config, normalize_points_uniform, RunConfig
    from .sdfkit import load_obj
    run = Path(args.run)
    mesh_path = run / "mesh.obj"
    params_path = run / "appearance.tfld"
    for p in (mesh_path, params_path):
        if not p.exists():
            raise AssetIOError(f"missing {p}")
    cfg = load_config(run / "config.lock") if (run / "config.lock").exists() else RunConfig()
    tex = args.texture_size or cfg.output.texture_size
    mesh = load_obj(mesh_path)
    params = load_field(params_path)
    _, transform = normalize_points_uniform(mesh.vertices)
    export_assets(mesh, params, transform, run, texture_size=tex)
    print(f"exported mesh + textures ({tex}x{tex}) -> {run}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .pipeline import metrics
    from .sdfkit import load_obj
    m = metrics(load_obj(args.a), load_obj(args.b), seed=args.seed)
    print(f"chamfer {m['chamfer']:.8f}")
    print(f"hausdorff {m['hausdorff']:.8f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck
    ok, lines = run_gradcheck(args.module, seeds=args.seeds)
    for line in lines:
        print(line)
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evotet",
                                description="Constrained implicit-surface optimization "
                                            "with self-evolving templates")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("fit-geometry", help="run init + coarse + refine geometry stages")
    g.add_argument("--config", required=True)
    g.set_defaults(fn=cmd_fit_geometry)

    a = sub.add_parser("fit-appearance", help="optimize the PBR texture field on a mesh")
    a.add_argument("--config", required=True)
    a.add_argument("--mesh", required=True)
    a.set_defaults(fn=cmd_fit_appearance)

    e = sub.add_parser("export", help="bake textures and write the final OBJ/MTL")
    e.add_argument("--run", required=True)
    e.add_argument("--texture-size", type=int, default=0)
    e.set_defaults(fn=cmd_export)

    m = sub.add_parser("metrics", help="chamfer/hausdorff between two meshes")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_metrics)

    c = sub.add_parser("gradcheck", help="finite-difference checks per module")
    c.add_argument("--module", default="all")
    c.add_argument("--seeds", type=int, default=5)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AssetIOError, FileNotFoundError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
