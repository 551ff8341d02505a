"""Command-line entry points.

Subcommands: ``phantom`` (generate synthetic cases), ``register`` (run the
baseline registrar), ``evaluate`` (score fields against ground truth),
``rank`` (build a leaderboard from a metric table) and ``convert`` (field
format conversion). Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import pathlib
import sys

import numpy as np

from . import field as fieldmod
from . import nifti
from .metrics import CaseRecord, evaluate_case, read_metric_csv, write_metric_csv
from .phantom import CbctConfig, PhantomCase, make_phantom
from .ranking import RankConfig, build_leaderboard
from .register import RegistrationConfig, RegistrationError, register_pair
from .volume import LandmarkSet

__all__ = ["CaseManifest", "write_case", "main"]

_CASE_FILES = {
    "fixed": "fixed.nii.gz",
    "moving": "moving.nii.gz",
    "labels_fixed": "labels_fixed.nii.gz",
    "labels_moving": "labels_moving.nii.gz",
    "trunk": "trunk.nii.gz",
    "landmarks_fixed": "landmarks_fixed.csv",
    "landmarks_moving": "landmarks_moving.csv",
    "gt_field": "gt_field.nii.gz",
}


class UsageError(ValueError):
    """Bad command-line arguments."""


@dataclasses.dataclass(frozen=True)
class CaseManifest:
    """Paths and provenance of one stored case directory."""

    case_id: str
    directory: pathlib.Path
    files: dict[str, pathlib.Path]
    seed: int
    deform_magnitude: float

    @staticmethod
    def load(case_dir) -> "CaseManifest":
        case_dir = pathlib.Path(case_dir)
        mpath = case_dir / "manifest.json"
        if not mpath.is_file():
            raise FileNotFoundError(f"no manifest.json in {case_dir}")
        with open(mpath, "r", encoding="ascii") as fh:
            raw = json.load(fh)
        if raw.get("schema_version") != 1:
            raise ValueError(f"{mpath}: missing or unsupported schema_version")
        required = {"schema_version", "case_id", "seed", "deform_magnitude", "files"}
        allowed = required | {"dims", "spacing", "cbct", "attempts"}
        missing = required - set(raw)
        if missing:
            raise ValueError(f"{mpath}: missing keys {sorted(missing)}")
        unknown = set(raw) - allowed
        if unknown:
            raise ValueError(f"{mpath}: unknown keys {sorted(unknown)}")
        files = {}
        for key, rel in raw["files"].items():
            path = case_dir / rel
            if not path.is_file():
                raise FileNotFoundError(f"{mpath}: referenced file missing: {path}")
            files[key] = path
        for key in _CASE_FILES:
            if key not in files and key != "gt_field":
                raise ValueError(f"{mpath}: files entry lacks {key!r}")
        return CaseManifest(
            case_id=str(raw["case_id"]),
            directory=case_dir,
            files=files,
            seed=int(raw["seed"]),
            deform_magnitude=float(raw["deform_magnitude"]),
        )

    def landmarks(self) -> LandmarkSet:
        return LandmarkSet.read_csv(
            self.files["landmarks_fixed"], self.files["landmarks_moving"]
        )


def write_case(case: PhantomCase, case_dir) -> pathlib.Path:
    """Persist one phantom case as NIfTI + CSV files plus a manifest."""
    case_dir = pathlib.Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    nifti.write_nifti(case.fixed, case_dir / _CASE_FILES["fixed"])
    nifti.write_nifti(case.moving, case_dir / _CASE_FILES["moving"])
    nifti.write_nifti(case.labels_fixed, case_dir / _CASE_FILES["labels_fixed"])
    nifti.write_nifti(case.labels_moving, case_dir / _CASE_FILES["labels_moving"])
    nifti.write_nifti(case.trunk, case_dir / _CASE_FILES["trunk"])
    case.landmarks.write_csv(
        case_dir / _CASE_FILES["landmarks_fixed"],
        case_dir / _CASE_FILES["landmarks_moving"],
    )
    fieldmod.write_field(case.gt_field, case_dir / _CASE_FILES["gt_field"])
    manifest = {
        "schema_version": 1,
        "case_id": case.case_id,
        "seed": case.seed,
        "dims": list(case.fixed.dims),
        "spacing": list(case.fixed.spacing),
        "deform_magnitude": case.deform_magnitude,
        "cbct": case.cbct.to_dict() if case.cbct else None,
        "attempts": case.attempts,
        "files": dict(_CASE_FILES),
    }
    with open(case_dir / "manifest.json", "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return case_dir


def _prepare_out_dir(path, force: bool) -> pathlib.Path:
    out = pathlib.Path(path)
    if out.exists():
        if not out.is_dir():
            raise UsageError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise UsageError(
                f"output directory {out} is not empty; pass --force to reuse it"
            )
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    cbct = CbctConfig.typical() if args.cbct else None
    for i in range(args.cases):
        seed = args.seed + i
        case = make_phantom(
            seed=seed,
            dims=tuple(args.dims),
            spacing=tuple(args.spacing),
            deform_magnitude=args.magnitude,
            cbct=cbct,
        )
        case_dir = write_case(case, out / case.case_id)
        print(f"wrote {case_dir}")
    return 0


def _register_one(case_dir: str, cfg: RegistrationConfig, out_dir: str) -> str:
    manifest = CaseManifest.load(case_dir)
    fixed = nifti.read_nifti(manifest.files["fixed"])
    moving = nifti.read_nifti(manifest.files["moving"])
    trunk = nifti.read_trunk_mask(manifest.files["trunk"])
    field, report = register_pair(fixed, moving, trunk, cfg,
                                  case_id=manifest.case_id)
    out = pathlib.Path(out_dir)
    fieldmod.write_field(field, out / f"{manifest.case_id}.nii.gz")
    with open(out / f"{manifest.case_id}.report.json", "w", encoding="ascii") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest.case_id


def cmd_register(args) -> int:
    cfg = RegistrationConfig.from_json(args.config) if args.config else RegistrationConfig()
    out = _prepare_out_dir(args.out, args.force)
    if args.jobs > 1 and len(args.cases) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(_register_one, str(c), cfg, str(out)) for c in args.cases
            ]
            for fut in futures:
                print(f"registered {fut.result()}")
    else:
        for c in args.cases:
            print(f"registered {_register_one(str(c), cfg, str(out))}")
    return 0


def _identity_field(dims, spacing) -> fieldmod.DisplacementField:
    return fieldmod.DisplacementField(
        np.zeros(tuple(dims) + (3,), dtype=np.float32), spacing
    )


def _evaluate_one(case_dir: str, method: str, field_path,
                  runtime_s: float) -> tuple[CaseRecord, list]:
    manifest = CaseManifest.load(case_dir)
    labels_fixed = nifti.read_label_mask(manifest.files["labels_fixed"])
    labels_moving = nifti.read_label_mask(manifest.files["labels_moving"])
    trunk = nifti.read_trunk_mask(manifest.files["trunk"])
    lms = manifest.landmarks()
    if field_path is None:
        disp = _identity_field(labels_fixed.dims, labels_fixed.spacing)
    else:
        disp = fieldmod.read_field(field_path)
    cm = evaluate_case(manifest.case_id, method, labels_fixed, labels_moving,
                       lms, disp, trunk, runtime_s=runtime_s)
    detail = [
        (method, manifest.case_id, lab, cm.dice_by_label[lab],
         cm.hd95_by_label.get(lab))
        for lab in sorted(cm.dice_by_label)
    ]
    return cm.to_record(), detail


def _stored_runtime(fields_dir: pathlib.Path, case_id: str) -> float:
    report = fields_dir / f"{case_id}.report.json"
    if report.is_file():
        with open(report, "r", encoding="ascii") as fh:
            return float(json.load(fh).get("runtime_s", 0.0))
    return 0.0


def cmd_evaluate(args) -> int:
    fields_root = pathlib.Path(args.fields) if args.fields else None
    methods = []
    if fields_root is not None:
        if not fields_root.is_dir():
            raise FileNotFoundError(f"fields directory {fields_root} does not exist")
        methods = sorted(p.name for p in fields_root.iterdir() if p.is_dir())
    if not methods and not args.initial:
        raise UsageError("nothing to evaluate: no method directories and no --initial")
    out = _prepare_out_dir(args.out, args.force)

    jobs = []
    for case_dir in args.cases:
        case_id = CaseManifest.load(case_dir).case_id
        if args.initial:
            jobs.append((str(case_dir), "Initial", None, 0.0))
        for m in methods:
            fpath = fields_root / m / f"{case_id}.nii.gz"
            jobs.append((str(case_dir), m, fpath if fpath.is_file() else None, 0.0))

    records, details, failures = [], [], []
    roots = [str(fields_root) for _ in jobs]
    if args.jobs > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_eval_worker, jobs, roots))
    else:
        results = [_eval_worker(j, r) for j, r in zip(jobs, roots)]

    for status, method, case_id, rec, det in results:
        if status == "missing":
            failures.append((method, case_id, "field file missing"))
            continue
        records.append(rec)
        details.extend(det)

    records.sort(key=lambda r: (r.method, r.case))
    write_metric_csv(records, out / "metrics.csv")
    with open(out / "labels_detail.csv", "w", encoding="ascii") as fh:
        fh.write("method,case,label,dice,hd95\n")
        for method, case_id, lab, d, h in sorted(details):
            htxt = "" if h is None else f"{h:.9g}"
            fh.write(f"{method},{case_id},{lab},{d:.9g},{htxt}\n")
    if failures:
        with open(out / "failures.csv", "w", encoding="ascii") as fh:
            fh.write("method,case,reason\n")
            for method, case_id, reason in sorted(failures):
                fh.write(f"{method},{case_id},{reason}\n")
        print(f"{len(failures)} evaluation failures; see {out / 'failures.csv'}",
              file=sys.stderr)
        return 2
    print(f"wrote {out / 'metrics.csv'}")
    return 0


def _eval_worker(job, fields_root_str):
    case_dir, method, fpath, _ = job
    case_id = CaseManifest.load(case_dir).case_id
    if method != "Initial" and fpath is None:
        return ("missing", method, case_id, None, None)
    runtime = 0.0
    if method != "Initial":
        runtime = _stored_runtime(pathlib.Path(fields_root_str) / method, case_id)
    rec, det = _evaluate_one(case_dir, method, fpath, runtime)
    return ("ok", method, case_id, rec, det)


def cmd_rank(args) -> int:
    table = read_metric_csv(args.metrics)
    cfg = RankConfig.from_json(args.config) if args.config else RankConfig()
    board = build_leaderboard(table, cfg)
    out = _prepare_out_dir(args.out, args.force)
    with open(out / "leaderboard.csv", "w", encoding="ascii") as fh:
        fh.write(board.to_csv_text())
    with open(out / "leaderboard.json", "w", encoding="ascii") as fh:
        json.dump(board.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(board.to_csv_text(), end="")
    return 0


def cmd_convert(args) -> int:
    if args.to_raw:
        src, dst = args.to_raw
        fld = fieldmod.read_field(src)
        fieldmod.write_field_raw(fld, dst)
        print(f"wrote {dst} dims={fld.dims} spacing={fld.spacing}")
        return 0
    if args.from_raw:
        if not (args.dims and args.spacing and args.out_field):
            raise UsageError("--from-raw needs --dims, --spacing and --out-field")
        fld = fieldmod.read_field_raw(args.from_raw, args.dims, tuple(args.spacing))
        fieldmod.write_field(fld, args.out_field)
        print(f"wrote {args.out_field}")
        return 0
    raise UsageError("convert needs --to-raw or --from-raw")


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="regbench",
                     description="Registration benchmarking toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic thorax cases")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=[96, 96, 96])
    p.add_argument("--spacing", type=float, nargs=3, default=[1.5, 1.5, 1.5])
    p.add_argument("--magnitude", type=float, default=5.0)
    p.add_argument("--cbct", action="store_true",
                   help="apply cone-beam degradation to the moving image")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="run the baseline registrar")
    p.add_argument("cases", nargs="+", help="case directories with manifest.json")
    p.add_argument("--config", help="RegistrationConfig JSON")
    p.add_argument("--out", required=True, help="output directory (one method)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score displacement fields")
    p.add_argument("cases", nargs="+")
    p.add_argument("--fields", help="root directory with one subdirectory per method")
    p.add_argument("--initial", action="store_true",
                   help="also score the identity transform as method 'Initial'")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="build a leaderboard from metrics.csv")
    p.add_argument("--metrics", required=True)
    p.add_argument("--config", help="RankConfig JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("convert", help="convert displacement-field formats")
    p.add_argument("--to-raw", nargs=2, metavar=("FIELD_NII", "OUT_RAW"))
    p.add_argument("--from-raw", metavar="IN_RAW")
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--spacing", type=float, nargs=3)
    p.add_argument("--out-field")
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (FileNotFoundError, OSError, nifti.NiftiError, ValueError, KeyError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except (RegistrationError, np.linalg.LinAlgError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
