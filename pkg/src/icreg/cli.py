"""Command-line front end.

Subcommands: register (full pipeline), affine, warp, ic-map, evaluate,
compose. Exit codes: 0 success, 1 runtime failure, 2 usage error. All numeric
knobs are driven by one flat config schema: a `--config` file plus repeatable
`--set dotted.key=value` overrides (overrides win).

The thread budget (--threads, or the ICREG_THREADS environment variable; the
flag wins, default: hardware parallelism) only bounds how many --batch cases
run concurrently. A single registration is sequential and bitwise
reproducible.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys

from .imgio import read_field, read_landmarks, read_nifti, write_landmarks, write_nifti
from .landmarks import Landmark, LandmarkSet
from .metrics import (
    CaseScore,
    case_mae,
    jacobian_stats,
    landmark_distances_mm,
    robustness,
    score_table,
)
from .pipeline import (
    PipelineConfig,
    StageError,
    affine_register,
    apply_settings,
    ic_error_map,
    ic_weight_mask,
    load_config,
    run_pipeline,
)
from .transform import affine_to_field, compose, warp, warp_landmarks
from .volume import Volume, normalize_channels

log = logging.getLogger("icreg")

THREADS_ENV = "ICREG_THREADS"


def _thread_budget(args: argparse.Namespace) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}")
    return os.cpu_count() or 1


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    try:
        if getattr(args, "config", None):
            cfg = apply_settings(cfg, load_config(args.config))
        overrides: dict[str, str] = {}
        for item in getattr(args, "set", None) or []:
            if "=" not in item:
                raise ValueError(f"--set expects dotted.key=value, got {item!r}")
            key, value = item.split("=", 1)
            overrides[key.strip()] = value.strip()
        if overrides:
            cfg = apply_settings(cfg, overrides)
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _parse_spacing(text: str | None) -> tuple[float, float, float] | None:
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--spacing expects sx,sy,sz, got {text!r}")
    try:
        sx, sy, sz = (float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"--spacing expects numbers, got {text!r}") from exc
    return (sx, sy, sz)


# --- subcommands -------------------------------------------------------------


def _register_one(
    moving: str,
    fixed: str,
    cfg: PipelineConfig,
    init_field: str | None,
    out_field: str | None,
    out_warped: str | None,
    out_report: str | None,
) -> str:
    S = read_nifti(moving)
    T = read_nifti(fixed)
    u_ext = read_field(init_field) if init_field else None
    u, report = run_pipeline(S, T, u_ext, cfg)
    if out_field:
        write_nifti(u, out_field)
    if out_warped:
        write_nifti(warp(S, u), out_warped)
    if out_report:
        with open(out_report, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    return report.to_text()


def cmd_register(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    if args.batch:
        return _run_batch(args, cfg)
    if not args.moving or not args.fixed:
        raise UsageError("register needs --moving and --fixed (or --batch)")
    text = _register_one(
        args.moving, args.fixed, cfg, args.init_field,
        args.out_field, args.out_warped, args.out_report,
    )
    sys.stdout.write(text)
    return 0


def _run_batch(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    try:
        with open(args.batch, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    cases = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        cols = line.split()
        if len(cols) < 3 or len(cols) > 4:
            raise UsageError(
                f"{args.batch}: line {lineno}: expected "
                "'moving fixed out_field [out_warped]'"
            )
        cases.append((cols[0], cols[1], cols[2], cols[3] if len(cols) == 4 else None))
    if not cases:
        raise UsageError(f"{args.batch}: no cases")
    budget = _thread_budget(args)
    failures = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=budget) as pool:
        futs = {
            pool.submit(
                _register_one, mov, fix, cfg, args.init_field, out_f, out_w, None
            ): (idx, mov)
            for idx, (mov, fix, out_f, out_w) in enumerate(cases, start=1)
        }
        for fut in concurrent.futures.as_completed(futs):
            idx, mov = futs[fut]
            try:
                fut.result()
                sys.stdout.write(f"case {idx} ({mov}): ok\n")
            except Exception as exc:
                failures.append((idx, mov, str(exc)))
                sys.stdout.write(f"case {idx} ({mov}): failed\n")
    for idx, mov, msg in failures:
        sys.stderr.write(f"case {idx} ({mov}): {msg}\n")
    return 1 if failures else 0


def cmd_affine(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    S = normalize_channels(read_nifti(args.moving))
    T = normalize_channels(read_nifti(args.fixed))
    A = affine_register(S, T, cfg.affine)
    if args.out_field:
        write_nifti(affine_to_field(A, T.dims, T.spacing), args.out_field)
    if args.out_matrix:
        with open(args.out_matrix, "w", encoding="utf-8") as fh:
            for row in A.matrix:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")
    sys.stdout.write("affine matrix [A | t] (voxel coordinates):\n")
    for row in A.matrix:
        sys.stdout.write("  " + "  ".join(f"{x: .6f}" for x in row) + "\n")
    return 0


def cmd_warp(args: argparse.Namespace) -> int:
    if (args.volume is None) == (args.landmarks is None):
        raise UsageError("warp needs exactly one of --volume or --landmarks")
    u = read_field(args.field)
    if args.volume:
        v = read_nifti(args.volume)
        write_nifti(warp(v, u), args.out)
        return 0
    lms = read_landmarks(args.landmarks)
    if args.one_based:
        lms = LandmarkSet(tuple(Landmark(p.id, p.x - 1, p.y - 1, p.z - 1) for p in lms))
    warped, clamped = warp_landmarks(lms, u)
    if args.one_based:
        warped = LandmarkSet(
            tuple(Landmark(p.id, p.x + 1, p.y + 1, p.z + 1) for p in warped)
        )
    for cid in clamped:
        sys.stderr.write(f"warning: landmark {cid} outside the field, clamped\n")
    write_landmarks(warped, args.out)
    return 0


def cmd_ic_map(args: argparse.Namespace) -> int:
    u_st = read_field(args.forward)
    u_ts = read_field(args.backward)
    icmap = ic_error_map(u_st, u_ts)
    mask = ic_weight_mask(icmap, args.sigma, args.power)
    write_nifti(Volume(mask.values[None], u_st.spacing), args.out)
    if args.out_error_map:
        write_nifti(Volume(icmap[None], u_st.spacing), args.out_error_map)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    spacing = _parse_spacing(args.spacing)
    warped = read_landmarks(args.warped_lm)
    target = read_landmarks(args.target_lm)
    after = landmark_distances_mm(warped, target, spacing)
    mae = case_mae(warped, target, spacing)
    rob = None
    before_list = None
    if args.before_lm:
        before_lms = read_landmarks(args.before_lm)
        before = landmark_distances_mm(before_lms, target, spacing)
        order = sorted(after)
        before_list = tuple(before[i] for i in order)
        rob = robustness(before_list, tuple(after[i] for i in order))
    smooth = jacobian_stats(read_field(args.field)) if args.field else None
    score = CaseScore(
        case_id=args.case_id,
        mae_mm=mae,
        robustness=rob,
        distances_before=before_list,
        distances_after=tuple(after[i] for i in sorted(after)),
        smoothness=smooth,
    )
    table = score_table([score])
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    if args.out_json:
        with open(args.out_json, "w", encoding="utf-8") as fh:
            json.dump(score.to_dict(), fh, indent=2)
            fh.write("\n")
    return 0


def cmd_compose(args: argparse.Namespace) -> int:
    outer = read_field(args.outer)
    inner = read_field(args.inner)
    write_nifti(compose(outer, inner), args.out)
    return 0


# --- parser ------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (dotted.key=value, repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icreg",
        description="Deformable registration with inverse-consistency weighting.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="run the full registration pipeline")
    p.add_argument("--moving", help="moving (source) volume")
    p.add_argument("--fixed", help="fixed (target) volume")
    p.add_argument("--init-field", help="initial field; skips the affine stage")
    p.add_argument("--out-field", help="output displacement field (.nii/.nii.gz)")
    p.add_argument("--out-warped", help="output warped moving volume")
    p.add_argument("--out-report", help="output report (JSON)")
    p.add_argument("--batch", help="manifest: 'moving fixed out_field [out_warped]' per line")
    p.add_argument("--threads", type=int, help=f"batch thread budget (or ${THREADS_ENV})")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_register)

    p = sub.add_parser("affine", help="affine stage only")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--out-field", help="write the affine transform as a dense field")
    p.add_argument("--out-matrix", help="write the 3x4 matrix as text")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_affine)

    p = sub.add_parser("warp", help="apply a field to a volume or landmarks")
    p.add_argument("--field", required=True)
    p.add_argument("--volume")
    p.add_argument("--landmarks")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--one-based",
        action="store_true",
        help="landmark file uses 1-based indices (shifted in and back out)",
    )
    p.set_defaults(fn=cmd_warp)

    p = sub.add_parser("ic-map", help="inverse-consistency weight mask from two fields")
    p.add_argument("--forward", required=True, help="source-to-target field")
    p.add_argument("--backward", required=True, help="target-to-source field")
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--out", required=True, help="output weight mask volume")
    p.add_argument("--out-error-map", help="also write the raw IC error map")
    p.set_defaults(fn=cmd_ic_map)

    p = sub.add_parser("evaluate", help="landmark error, robustness, smoothness")
    p.add_argument("--warped-lm", required=True, help="warped landmarks CSV")
    p.add_argument("--target-lm", required=True, help="reference landmarks CSV")
    p.add_argument("--before-lm", help="pre-registration landmarks CSV (for robustness)")
    p.add_argument("--spacing", help="sx,sy,sz in mm (default: 1,1,1 with a warning)")
    p.add_argument("--field", help="displacement field for Jacobian statistics")
    p.add_argument("--case-id", default="case")
    p.add_argument("--out", help="write the score table")
    p.add_argument("--out-json", help="write the score as JSON")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compose", help="compose two displacement fields")
    p.add_argument("--outer", required=True, help="field applied second")
    p.add_argument("--inner", required=True, help="field applied first")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_compose)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 2
    except StageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
