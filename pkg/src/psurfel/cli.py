"""Command-line front end: ``psurfel {encode,decode,eval,sweep,gen}``.

Exit codes: 0 success, 1 codec error, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace

from .codec import CodecConfig, decode, encode
from .errors import CoordinateRangeError, PlyParseError, PsurfelError
from .metrics import d1_psnr, d2_psnr, default_peak, estimate_normals
from .plyio import load_ply, save_ply
from .rdtree import DEFAULT_FLOOR, DEFAULT_TOP, prepare_candidates
from .surfel import FitConfig
from .synth import SHAPES, generate

DEFAULT_LAMBDAS = (0.1, 0.3, 0.8, 1.0, 1.5)
SWEEP_COLUMNS = ("lambda", "bpp", "d1_db", "d2_db", "octree_bits", "surfel_bits", "flag_bits")


class UsageError(Exception):
    pass


def _codec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--levels", type=int, default=DEFAULT_TOP, metavar="L",
                   help="highest level where a node may terminate as a surfel (default %(default)s)")
    p.add_argument("--floor", type=int, default=DEFAULT_FLOOR,
                   help="level where every remaining node becomes a surfel (default %(default)s)")
    p.add_argument("--rho", type=float, default=1.0, help="output size as a fraction of N")
    p.add_argument("--fit-iters", type=int, default=FitConfig.max_iters)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=None, help="bit depth of the input cloud")
    p.add_argument("--quantize", action="store_true",
                   help="round non-integer input coordinates instead of rejecting them")
    p.add_argument("--threads", type=int, default=None,
                   help="fitting workers (default: the CPU count; PSURFEL_THREADS caps it)")


def _config(args, lam: float) -> CodecConfig:
    try:
        return CodecConfig(lam=lam, top=args.levels, floor=args.floor, rho=args.rho,
                           fit=FitConfig(max_iters=args.fit_iters, seed=args.seed),
                           workers=args.threads)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load(path, args):
    return load_ply(path, depth=getattr(args, "depth", None), quantize=getattr(args, "quantize", False))


def cmd_encode(args) -> int:
    cloud = _load(args.input, args)
    result = encode(cloud, _config(args, args.lam))
    with open(args.output, "wb") as fh:
        fh.write(result.data)
    s = result.stats
    print(f"points,{len(cloud)}")
    print(f"bytes,{s['bytes']}")
    print(f"bpp,{s['bpp']:.6f}")
    print(f"d1_db,{s['d1_db']:.6f}")
    print(f"octree_bits,{s['octree_bits']:.1f}")
    print(f"surfel_bits,{s['surfel_bits']:.1f}")
    print(f"flag_bits,{s['flag_bits']:.1f}")
    if s["clamped_params"]:
        print(f"clamped_params,{s['clamped_params']}")
    print("level,surfel,split")
    for level in sorted(s["levels"], reverse=True):
        n_surf, n_split = s["levels"][level]
        print(f"{level},{n_surf},{n_split}")
    return 0


def cmd_decode(args) -> int:
    with open(args.input, "rb") as fh:
        data = fh.read()
    cloud = decode(data)
    save_ply(cloud, args.output)
    print(f"points,{len(cloud)}")
    return 0


def cmd_eval(args) -> int:
    ref = load_ply(args.reference)
    rec = load_ply(args.reconstruction)
    peak = args.peak
    if peak is None:
        if rec.depth != ref.depth:
            print(f"warning: depth mismatch ({ref.depth} vs {rec.depth}); "
                  f"using peak {default_peak(ref):g} from the reference", file=sys.stderr)
        peak = default_peak(ref)
    d1 = d1_psnr(ref, rec, peak)
    d2 = d2_psnr(ref, rec, estimate_normals(ref, min(args.k, len(ref))) if len(ref) >= 3 else None, peak)
    print("d1_db,d2_db")
    print(f"{d1:.6f},{d2:.6f}")
    return 0


def _parse_lambdas(values) -> list[float]:
    lams = [float(v) for v in values]
    if any(l <= 0 for l in lams):
        raise UsageError("lambda values must be positive")
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise UsageError("lambda values must be strictly ascending")
    return lams


def run_sweep(cloud, lambdas, config: CodecConfig, out_path=None, k: int = 9) -> list[dict]:
    """Encode, decode and evaluate ``cloud`` at each lambda; optionally stream rows to CSV.

    Surfel fits do not depend on lambda and are computed once.
    """
    cands = prepare_candidates(cloud, config.top, config.floor, config.fit, config.quantizer,
                               config.workers)
    normals = estimate_normals(cloud, min(k, len(cloud))) if len(cloud) >= 3 else None
    rows = []
    fh = open(out_path, "w", newline="") if out_path else None
    try:
        writer = csv.writer(fh) if fh else None
        if writer:
            writer.writerow(SWEEP_COLUMNS)
            fh.flush()
        for lam in lambdas:
            cfg = replace(config, lam=lam, report_d1=False)
            result = encode(cloud, cfg, cands)
            rec = decode(result.data)
            row = {
                "lambda": lam,
                "bpp": result.bpp,
                "d1_db": d1_psnr(cloud, rec),
                "d2_db": d2_psnr(cloud, rec, normals) if normals is not None else d1_psnr(cloud, rec),
                "octree_bits": result.stats["octree_bits"],
                "surfel_bits": result.stats["surfel_bits"],
                "flag_bits": result.stats["flag_bits"],
                "n_points": len(cloud),
                "levels": result.stats["levels"],
            }
            rows.append(row)
            if writer:
                writer.writerow([f"{row[c]:.6f}" for c in SWEEP_COLUMNS])
                fh.flush()
    finally:
        if fh:
            fh.close()
    return rows


def cmd_sweep(args) -> int:
    cloud = _load(args.input, args)
    lambdas = _parse_lambdas(args.lam or DEFAULT_LAMBDAS)
    rows = run_sweep(cloud, lambdas, _config(args, lambdas[0]), args.out)
    if not args.out:
        print(",".join(SWEEP_COLUMNS))
        for row in rows:
            print(",".join(f"{row[c]:.6f}" for c in SWEEP_COLUMNS))
    if args.plot:
        from .plotting import plot_sweep
        plot_sweep(rows, args.plot)
    return 0


def cmd_gen(args) -> int:
    try:
        cloud = generate(args.shape, args.depth, args.density, args.seed, args.scale)
    except ValueError as exc:
        if isinstance(exc, PsurfelError):
            raise
        raise UsageError(str(exc)) from exc
    save_ply(cloud, args.out)
    print(f"points,{len(cloud)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psurfel", description="Surfel-octree point cloud geometry codec")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a PLY cloud")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    _codec_args(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress to PLY")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="D1/D2 PSNR between two clouds")
    p.add_argument("reference")
    p.add_argument("reconstruction")
    p.add_argument("--peak", type=float, default=None)
    p.add_argument("--k", type=int, default=9, help="neighbours for normal estimation")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="RD sweep over lambda values")
    p.add_argument("input")
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", default=None)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.add_argument("--plot", default=None, help="also render the curve to this image file")
    _codec_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen", help="write a synthetic cloud")
    p.add_argument("shape", choices=SHAPES)
    p.add_argument("--depth", type=int, default=8)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=1.0, help="fraction of the grid the shape spans")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, PlyParseError, CoordinateRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PsurfelError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
