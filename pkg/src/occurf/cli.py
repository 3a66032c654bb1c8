"""``occurf`` command line: synth, train, reconstruct, eval, ablate.

Exit codes: 0 success (including soft warnings), 2 usage or config error,
3 numeric failure during training.
"""

import argparse
import logging
import os
import sys

from . import _accel
from . import config as cfgio
from .errors import EmptySurface, NotWatertight, NumericError, OccurfError
from .geom import NOISE_PRESETS, read_obj, read_xyz, synth_fixture, write_obj, write_xyz

log = logging.getLogger("occurf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# option tables: name -> (type, default). Each entry is both a --flag and a config key.
SYNTH_OPTS = {"shapes": (str, "all"), "noise": (str, "med"), "n_points": (int, 3000), "seed": (int, 0)}
RECON_OPTS = {"grid_res": (int, 65), "min_cover": (int, 10), "supersamples": (int, 8), "sparse_size": (int, 0),
              "seed": (int, 0)}
EVAL_OPTS = {"samples": (int, 100000), "seed": (int, 0)}
ABLATE_OPTS = {"grid_res": (int, 65), "min_cover": (int, 10), "supersamples": (int, 8), "samples": (int, 10000),
               "seed": (int, 0)}


def _add_opts(p, table):
    for name, (typ, default) in table.items():
        if name == "seed":
            continue
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None,
                       help=f"default {default}")


def _resolve(args, table, file_cfg):
    """Flag, else config file, else env (seed only), else default."""
    unknown = [k for k in file_cfg if k not in table]
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for name, (typ, default) in table.items():
        flag = getattr(args, name, None)
        if flag is not None:
            out[name] = flag
        elif name in file_cfg:
            out[name] = cfgio.coerce(default, file_cfg[name], name)
        elif name == "seed" and os.environ.get("OCCURF_SEED"):
            out[name] = cfgio.coerce(0, os.environ["OCCURF_SEED"], "OCCURF_SEED")
        else:
            out[name] = default
    return out


def _file_cfg(args):
    return cfgio.read_file(args.config) if getattr(args, "config", None) else {}


def _write_resolved(out_dir, mapping):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfgio.format_lines(mapping))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    opts = _resolve(args, SYNTH_OPTS, _file_cfg(args))
    if opts["noise"] not in NOISE_PRESETS:
        raise UsageError(f"unknown noise preset {opts['noise']!r}; choose from {sorted(NOISE_PRESETS)}")
    kinds = None if opts["shapes"] == "all" else set(opts["shapes"].split(","))
    fixture = synth_fixture(kinds, opts["noise"], opts["n_points"], opts["seed"])
    out = args.out_dir
    os.makedirs(os.path.join(out, "meshes"), exist_ok=True)
    os.makedirs(os.path.join(out, "clouds"), exist_ok=True)
    lines = [f"# noise={opts['noise']} n_points={opts['n_points']} seed={opts['seed']}\n"]
    for sid, mesh, cloud, sigma_rel in fixture:
        mesh_rel, cloud_rel = f"meshes/{sid}.obj", f"clouds/{sid}.xyz"
        write_obj(os.path.join(out, mesh_rel), mesh)
        write_xyz(os.path.join(out, cloud_rel), cloud)
        lines.append(f"# sigma_rel {sid} {sigma_rel!r}\n")
        lines.append(f"{sid}\t{mesh_rel}\t{cloud_rel}\n")
    with open(os.path.join(out, "manifest.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    _write_resolved(out, opts)
    return EXIT_OK


def _train_configs(args):
    from .model import ModelConfig
    from .trainer import TrainConfig

    raw = dict(_file_cfg(args))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    elif "seed" not in raw and os.environ.get("OCCURF_SEED"):
        raw["seed"] = os.environ["OCCURF_SEED"]
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainConfig.__dataclass_fields__)
    unknown = [k for k in raw if k not in model_keys | train_keys]
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    mcfg = ModelConfig.from_dict({k: v for k, v in raw.items() if k in model_keys})
    tcfg = TrainConfig.from_dict({k: v for k, v in raw.items() if k in train_keys})
    return mcfg, tcfg


def cmd_train(args):
    from .model import save_checkpoint
    from .trainer import TrainingFailed, build_dataset, load_fixture, train, write_loss_csv

    mcfg, tcfg = _train_configs(args)
    out = args.out_dir
    _write_resolved(out, {**mcfg.to_dict(), **tcfg.to_dict()})
    dataset = build_dataset(load_fixture(args.manifest), tcfg)
    try:
        result = train(mcfg, tcfg, dataset, progress=lambda e, l, lr: log.info("epoch %d loss %.6f lr %.1e", e, l, lr))
    except TrainingFailed as exc:
        dump = os.path.join(out, "failed_batch.txt")
        with open(dump, "w", encoding="utf-8") as fh:
            fh.write(f"# {exc}\n")
            for sid, idx in exc.batch:
                fh.write(f"{sid}\t{','.join(map(str, idx))}\n")
        print(f"error: {exc} (batch written to {dump})", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(os.path.join(out, "model.ckpt"), result.params)
    write_loss_csv(os.path.join(out, "loss.csv"), result.trace)
    return EXIT_OK


def _reconstruct_one(params, cloud, opts):
    from .reconstruct import reconstruct

    return reconstruct(params, cloud, res=opts["grid_res"], min_cover=opts["min_cover"],
                       supersamples=opts["supersamples"], seed=opts["seed"], m=opts["sparse_size"] or None)


def cmd_reconstruct(args):
    from .model import load_checkpoint
    from .reconstruct import write_report
    from .trainer import read_manifest

    opts = _resolve(args, RECON_OPTS, _file_cfg(args))
    if (args.cloud is None) == (args.manifest is None):
        raise UsageError("give exactly one of --cloud or --manifest")
    params = load_checkpoint(args.checkpoint)
    if args.cloud:
        out_obj = args.out or os.path.join(args.out_dir, "recon.obj")
        jobs = [(args.shape_id or os.path.splitext(os.path.basename(args.cloud))[0], args.cloud, out_obj)]
    else:
        jobs = [(sid, cloud, os.path.join(args.out_dir, f"{sid}.obj")) for sid, _, cloud in read_manifest(args.manifest)]
    out_dir = os.path.dirname(os.path.abspath(jobs[0][2]))
    _write_resolved(out_dir, opts)
    rows = []
    for sid, cloud_path, out_obj in jobs:
        cloud = read_xyz(cloud_path)
        try:
            result = _reconstruct_one(params, cloud, opts)
        except EmptySurface as exc:
            print(f"warning: {sid}: {exc}; writing an empty mesh", file=sys.stderr)
            result = exc.result
        if result.clipped:
            print(f"warning: {sid}: surface touches the grid boundary", file=sys.stderr)
        os.makedirs(os.path.dirname(os.path.abspath(out_obj)), exist_ok=True)
        write_obj(out_obj, result.mesh)
        rows.append((sid, result))
    if args.report:
        report = args.report
    elif args.cloud:
        report = os.path.splitext(jobs[0][2])[0] + ".csv"
    else:
        report = os.path.join(out_dir, "report.csv")
    write_report(report, rows)
    return EXIT_OK


def cmd_eval(args):
    from .metrics import MetricReport, evaluate, mean_report, write_reports

    opts = _resolve(args, EVAL_OPTS, _file_cfg(args))
    n_s, seed = opts["samples"], opts["seed"]
    batch = os.path.isdir(args.gt) and os.path.isdir(args.recon)
    if batch:
        pairs = []
        for name in sorted(os.listdir(args.gt)):
            if name.endswith(".obj"):
                pairs.append((name[:-4], os.path.join(args.gt, name), os.path.join(args.recon, name)))
        if not pairs:
            raise UsageError(f"no .obj files in {args.gt}")
    else:
        pairs = [(os.path.splitext(os.path.basename(args.gt))[0], args.gt, args.recon)]
    reports = []
    for sid, gt_path, recon_path in pairs:
        try:
            rep = evaluate(read_obj(gt_path, min_area=None), read_obj(recon_path, min_area=None), n_s=n_s, seed=seed)
            rep.shape_id = sid
        except (NotWatertight, OccurfError, OSError) as exc:
            if not batch:
                raise
            nan = float("nan")
            rep = MetricReport(nan, nan, nan, nan, n_s, seed, sid, f"error:{type(exc).__name__}")
            print(f"warning: {sid}: {exc}", file=sys.stderr)
        reports.append(rep)
    if batch:
        reports.append(mean_report(reports, n_s, seed))
    out = args.out or os.path.join(args.out_dir, "metrics.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_reports(out, reports, flag_column=batch)
    _write_resolved(os.path.dirname(os.path.abspath(out)), opts)
    return EXIT_OK


def cmd_ablate(args):
    from .trainer import ablation_variants, load_fixture, parse_axes, run_ablation, write_ablation_csv

    if not args.axes:
        raise UsageError("at least one --axes key=v1,v2 is required")
    axes = parse_axes(args.axes)
    opts = _resolve(args, ABLATE_OPTS, {})
    args.set = args.set or []
    mcfg, tcfg = _train_configs(args)
    variants = ablation_variants(axes, mcfg, tcfg)
    fixture = load_fixture(args.fixture)
    recon = dict(res=opts["grid_res"], min_cover=opts["min_cover"], supersamples=opts["supersamples"], seed=opts["seed"])
    rows = run_ablation(variants, fixture, recon, n_s=opts["samples"], eval_seed=opts["seed"],
                        progress=lambda r: log.info("%s %s iou=%s", r["variant"], r["shape_id"], r["iou"]))
    out = args.out or os.path.join(args.out_dir, "ablation.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_ablation_csv(out, rows)
    _write_resolved(os.path.dirname(os.path.abspath(out)),
                    {**opts, **mcfg.to_dict(), **tcfg.to_dict(), "axes": ";".join(args.axes)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (falls back to $OCCURF_SEED)")
    common.add_argument("--threads", type=int, default=1, help="worker threads; 1 is bit-exact (default)")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("--config", default=None, help="key=value config file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="occurf", description="Occupancy-field surface reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the primitive fixture")
    _add_opts(p, SYNTH_OPTS)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common], help="mesh a point cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud")
    p.add_argument("--manifest", help="reconstruct every cloud of a manifest into --out-dir")
    p.add_argument("--out", help="output OBJ (single cloud)")
    p.add_argument("--report", help="report CSV (default next to the OBJ)")
    p.add_argument("--shape-id")
    _add_opts(p, RECON_OPTS)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", parents=[common], help="compare meshes (files or directories)")
    p.add_argument("--gt", required=True)
    p.add_argument("--recon", required=True)
    p.add_argument("--out", help="metrics CSV")
    _add_opts(p, EVAL_OPTS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate a grid of variants")
    p.add_argument("--fixture", required=True, help="manifest of the fixture")
    p.add_argument("--axes", action="append", metavar="KEY=V1,V2", help="axis to sweep (repeatable)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a base config key")
    p.add_argument("--out", help="ablation CSV")
    _add_opts(p, ABLATE_OPTS)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    _accel.set_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OccurfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
