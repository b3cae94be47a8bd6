"""Command-line entry point: optimize, render, postprocess, verify, metrics, hs-bound, serve."""
import argparse
import json
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from services.exceptions import ConfigError, NumericalError, RenderBudgetError, ToponetError

load_dotenv()

logger = logging.getLogger("toponet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _registry():
    if os.getenv("TOPONET_REGISTRY", "true").lower() != "true":
        return None, None
    from database import Base, SessionLocal, engine
    import models  # noqa: F401  (registers tables)
    from services.registry_service import RegistryService

    Base.metadata.create_all(bind=engine)
    db = SessionLocal()
    return RegistryService(db), db


def cmd_optimize(args) -> int:
    from services.run_service import RunService, load_run_config

    config = load_run_config(args.config)
    if args.render_only and not args.checkpoint:
        raise ConfigError("--render-only needs --checkpoint", field_path="checkpoint")
    if args.checkpoint and not args.render_only:
        raise ConfigError("--checkpoint is only read with --render-only", field_path="checkpoint")
    registry, db = _registry()
    try:
        service = RunService(registry=registry, verbose=not args.quiet)
        summary = service.run(config, checkpoint_path=args.checkpoint)
    finally:
        if db is not None:
            db.close()
    print(f"✅ Run {summary.run_name} finished in {summary.wall_time_s:.1f}s")
    if summary.rmse is not None:
        print(f"   RMSE (homogenized): {summary.rmse:.6f}")
    if summary.rmse_full_scale is not None:
        print(f"   RMSE (full scale):  {summary.rmse_full_scale:.6f}")
    if summary.delta is not None:
        print(f"   Delta: {summary.delta:.6f} (normalized {summary.delta_normalized:.6f})")
    if summary.mean_percent_hs is not None:
        print(f"   Mean %HS: {summary.mean_percent_hs:.2f}")
    return EXIT_OK


def cmd_render(args) -> int:
    from services.postprocess_service import PostprocessService, provenance_comment, write_pgm
    from services.training_service import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    post = PostprocessService(pixel_budget=args.pixel_budget)
    design = post.render(ckpt.net, ckpt.macro_dims, ckpt.micro_dims, args.upsample, ckpt.config_hash, ckpt.epoch)
    out = Path(args.out or Path(args.checkpoint).with_name(f"design_x{args.upsample}.pgm"))
    write_pgm(out, design.raster, provenance_comment(ckpt.config_hash, ckpt.epoch))
    print(f"🖼️  Wrote {out} ({design.raster.shape[1]}x{design.raster.shape[0]})")
    return EXIT_OK


def _pixels_per_cell(raster_shape, setup):
    nx, ny = setup.macro_dims
    rows, cols = raster_shape
    if rows % ny or cols % nx:
        raise ConfigError(f"raster {cols}x{rows} does not tile the {nx}x{ny} macro grid")
    return cols // nx, rows // ny


def cmd_postprocess(args) -> int:
    from services.postprocess_service import (
        PostprocessService, parse_provenance, protection_mask, provenance_comment, read_pgm, write_pgm,
    )

    raster, comments = read_pgm(args.raster)
    protect = None
    if args.config:
        from services.preset_service import setup_problem
        from services.run_service import load_run_config, resolve_preset

        setup = setup_problem(resolve_preset(load_run_config(args.config)))
        protect = protection_mask(setup.problem, _pixels_per_cell(raster.shape, setup))
    post = PostprocessService()
    islands = post.remove_islands(raster, args.low, args.min_area, protect)
    cleaned = post.remove_dangling(raster, args.low, args.high, args.min_area, args.dilation, protect)
    comment = provenance_comment(*parse_provenance(comments))
    stem = Path(args.raster).with_suffix("")
    write_pgm(f"{stem}_islands.pgm", islands.mask, comment)
    write_pgm(f"{stem}_cleaned.pgm", cleaned.mask, comment)
    print(f"🧹 Wrote {stem}_islands.pgm and {stem}_cleaned.pgm")
    return EXIT_OK


def cmd_verify(args) -> int:
    from services.postprocess_service import read_pgm
    from services.preset_service import setup_problem
    from services.run_service import load_run_config, resolve_preset, resolve_train, verify_raster

    config = load_run_config(args.config)
    preset = resolve_preset(config)
    setup = setup_problem(preset)
    if setup.target is None:
        raise ConfigError(f"preset {preset.name!r} has no displacement target to verify against")
    raster, _ = read_pgm(args.raster)
    px, py = _pixels_per_cell(raster.shape, setup)
    mx, my = setup.micro_dims
    if px % mx or py % my or px // mx != py // my:
        raise ConfigError(f"raster resolution is not an integer upsample of the {mx}x{my} micro grid")
    report = verify_raster(raster, setup, px // mx, resolve_train(config, preset),
                           require_connected=not args.allow_disconnected)
    print(json.dumps({
        "rmse": report.rmse,
        "mean_signed_error": report.mean_signed_error,
        "connected": report.connected,
    }, indent=2))
    return EXIT_OK


def cmd_metrics(args) -> int:
    from services.run_service import compute_metrics

    summary = compute_metrics(args.artifacts)
    print(json.dumps(summary.model_dump(mode="json"), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_hs_bound(args) -> int:
    from services.fea_service import Material
    from services.homogenization_service import hs_moduli, hs_upper_bound

    material = Material(args.E, args.nu)
    k0, g0 = hs_moduli(material)
    print(json.dumps({"K0": k0, "G0": g0, "K_HS": hs_upper_bound(args.vf, material)}, indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=os.getenv("HOST", "0.0.0.0"), port=int(os.getenv("PORT", 8000)),
                reload=os.getenv("DEBUG", "False").lower() == "true")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toponet", description="Two-scale neural metamaterial design")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="train, render, postprocess and verify one run config")
    p.add_argument("config")
    p.add_argument("--render-only", action="store_true", help="skip training and render --checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress lines")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("render", help="render a checkpoint to a PGM raster")
    p.add_argument("checkpoint")
    p.add_argument("--upsample", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--pixel-budget", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("postprocess", help="island and dangling-edge cleanup of a PGM raster")
    p.add_argument("raster")
    p.add_argument("--low", type=float, default=0.3)
    p.add_argument("--high", type=float, default=0.5)
    p.add_argument("--min-area", type=int, default=400)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--config", help="run config whose supports and loads are protected")
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("verify", help="full-scale FE check of a rendered raster")
    p.add_argument("raster")
    p.add_argument("config")
    p.add_argument("--allow-disconnected", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("metrics", help="recompute the run summary from an artifacts directory")
    p.add_argument("artifacts")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("hs-bound", help="Hashin-Shtrikman upper bound on the bulk modulus")
    p.add_argument("--vf", type=float, required=True)
    p.add_argument("--E", type=float, default=1.0)
    p.add_argument("--nu", type=float, default=0.3)
    p.set_defaults(func=cmd_hs_bound)

    p = sub.add_parser("serve", help="start the read-only HTTP API")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.getenv("TOPONET_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, RenderBudgetError) as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"❌ Numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ToponetError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"❌ Invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
