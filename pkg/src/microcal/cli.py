"""Command-line entry point: ``microcal <subcommand> [flags]``.

Machine-readable results go to files or standard output; diagnostics go to
standard error.  Exit status is 0 only on full success.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import campaign, densities, descriptors, lattice, optimizer

logger = logging.getLogger("microcal")


class UsageError(ValueError):
    pass


def _size(text):
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or WxL, got {text!r}") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"size must be N or WxL, got {text!r}")
    return tuple(vals)


def _ids(text):
    try:
        ids = sorted({int(t) for t in text.split(",") if t.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"descriptor list must be comma-separated ints: {text!r}") from None
    if not ids or ids[0] < 1 or ids[-1] > 11:
        raise argparse.ArgumentTypeError("descriptor ids must lie in 1..11")
    return ids


def _floats(text):
    return tuple(float(t) for t in text.split(","))


def _add_descriptor_flags(p, required_ids=False):
    p.add_argument("--descriptors", type=_ids, required=required_ids,
                   help="comma-separated descriptor ids (1..11)")
    p.add_argument("--threshold", type=float, default=0.0,
                   help="grain-area filter threshold (0 disables the filter)")
    p.add_argument("--band-width", type=int, default=60)
    p.add_argument("--band-spacing", type=int, default=20)
    p.add_argument("--num-bands", type=int, default=5)


def _descriptor_configs(args):
    filt = descriptors.FilterConfig(args.threshold, enabled=args.threshold > 0)
    bands = descriptors.BandConfig(args.band_width, args.band_spacing, args.num_bands)
    return filt, bands


def _summary_line(ms):
    comp, n = descriptors.label_components(ms)
    return f"grains={n} mean_area={ms.spins.size / n:.4f} shape={ms.width}x{ms.length}"


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate_gg(args):
    if args.kbts < 0:
        raise UsageError(f"--kbts {args.kbts} violates bound kbts >= 0")
    side = 1024 if args.full_scale else 256
    width, length = args.size or (side, side)
    q = args.spins or max(2, width * length // 16)
    p = lattice.GrainGrowthParams(width=width, length=length, num_spins=q, kbts=args.kbts,
                                  steps=args.steps, seed=args.seed)
    ms = lattice.run_grain_growth(p)
    lattice.save_msv1(ms, args.out)
    print(_summary_line(ms))


def cmd_simulate_weld(args):
    values = {"velocity": args.v, "haz": args.haz, "pool_width": args.width}
    if not args.no_bounds:
        for name, (lo, hi) in lattice.WELD_BOUNDS.items():
            if not lo <= values[name] <= hi:
                raise UsageError(f"{name}={values[name]} outside bound [{lo}, {hi}]")
    width, length = args.size or ((805, 1575) if args.full_scale else (256, 512))
    p = lattice.WeldParams(width=width, length=length, seed=args.seed, kbts=args.kbts,
                           pool_shape=args.pool_shape, epitaxy=args.epitaxy, **values)
    ms = lattice.run_weld(p)
    lattice.save_msv1(ms, args.out)
    print(_summary_line(ms))


def _load_samples(path, ids, filt, bands):
    """Samples from an MSV1 file or a samples CSV, plus the ids they cover."""
    with open(path) as fh:
        head = fh.readline()
    if head.startswith("MSV1"):
        if ids is None:
            raise UsageError("--descriptors is required for microstructure inputs")
        ms = lattice.load_msv1(path)
        return descriptors.compute_descriptors(ms, ids, filt, bands, strict=True)
    samples = descriptors.read_samples_csv(path)
    have = [s.descriptor_id for s in samples]
    if ids is not None and have != list(ids):
        raise UsageError(f"{path} holds descriptors {have}, requested {list(ids)}")
    return samples


def cmd_describe(args):
    filt, bands = _descriptor_configs(args)
    ms = lattice.load_msv1(args.input)
    samples = descriptors.compute_descriptors(ms, args.descriptors, filt, bands, strict=True)
    if args.out:
        descriptors.write_samples_csv(samples, args.out)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["descriptor_id", "value"])
        for s in samples:
            w.writerows([s.descriptor_id, repr(float(v))] for v in s.samples)
    if args.density_dir:
        d = Path(args.density_dir)
        d.mkdir(parents=True, exist_ok=True)
        for s in samples:
            densities.write_density_csv(densities.kde(s), d / f"density_d{s.descriptor_id}.csv")
    for s in samples:
        print(f"descriptor {s.descriptor_id}: {s.count} samples", file=sys.stderr)


def cmd_compare(args):
    filt, bands = _descriptor_configs(args)
    target = _load_samples(args.target, args.descriptors, filt, bands)
    cand = _load_samples(args.candidate, args.descriptors, filt, bands)
    t_ids = [s.descriptor_id for s in target]
    c_ids = [s.descriptor_id for s in cand]
    if t_ids != c_ids:
        raise UsageError(f"descriptor sets differ: target {t_ids} vs candidate {c_ids}")
    for s in target + cand:
        if not s.sufficient:
            raise descriptors.InsufficientSamplesError(s.descriptor_id, s.count)
    yv = densities.objective_vector(target, cand, args.orientation)
    cfg = densities.ScalarizationConfig(args.scalarization, args.weights, args.ideal, args.rho)
    y = densities.scalarize(yv, cfg)
    out = {"descriptorIds": list(yv.descriptor_ids), "yVector": [float(v) for v in yv.y],
           "yScalar": y, "scalarization": args.scalarization}
    text = json.dumps(out, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def _config(args):
    with open(args.config) as fh:
        raw = json.load(fh)
    if getattr(args, "full_scale", False):
        raw["full_scale"] = True
    cfg = campaign.apply_seed_override(campaign.CampaignConfig.from_dict(raw))
    if getattr(args, "seed", None) is not None:
        cfg = campaign.dataclasses.replace(cfg, master_seed=args.seed)
    if getattr(args, "max_trials", None) is not None:
        cfg = campaign.dataclasses.replace(cfg, max_trials=args.max_trials)
    return cfg


def cmd_noise(args):
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = campaign.prepare_target(campaign.TargetSpec.from_config(cfg), cfg)
    prof = campaign.run_noise_study(cfg, target, replicates=args.replicates, jobs=args.jobs,
                                    out_path=out / "noise.csv")
    print(json.dumps({"replicates": prof.replicates, "totalMean": prof.total_mean,
                      "totalVariance": prof.total_variance}))


def cmd_calibrate(args):
    cfg = _config(args)
    res = campaign.run_campaign(cfg, out_dir=args.out_dir, jobs=args.jobs, resume=args.resume,
                                executor="serial" if args.serial else "thread", noise=args.noise)
    print(json.dumps(res.summary))


def cmd_report(args):
    trials = optimizer.read_trials(args.log)
    out = Path(args.out_dir) if args.out_dir else Path(args.log).parent
    R = campaign.write_report(trials, out)
    done = [t for t in trials if t.status == "completed"]
    best = min(done, key=lambda t: t.y_scalar) if done else None
    print(json.dumps({
        "trials": len(trials), "completed": len(done),
        "bestObservedYScalar": None if best is None else best.y_scalar,
        "bestObservedX": None if best is None else [float(v) for v in best.x],
        "correlations": R is not None,
    }))


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="microcal", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("simulate-gg", parents=[common], help="isothermal Potts grain growth")
    g.add_argument("--kbts", type=float, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=20, help="Monte Carlo sweeps")
    g.add_argument("--size", type=_size, help="N or WxL lattice size")
    g.add_argument("--spins", type=int, help="number of initial labels (default W*L/16)")
    g.add_argument("--full-scale", action="store_true")
    g.set_defaults(func=cmd_simulate_gg)

    w = sub.add_parser("simulate-weld", parents=[common], help="moving weld pool")
    w.add_argument("--v", type=float, required=True, help="travel speed (sites per step)")
    w.add_argument("--haz", type=float, required=True)
    w.add_argument("--width", type=float, required=True, help="pool width")
    w.add_argument("--seed", type=int, required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--size", type=_size, help="WxL lattice size")
    w.add_argument("--kbts", type=float, default=0.25)
    w.add_argument("--pool-shape", choices=("teardrop", "ellipse"), default="teardrop")
    w.add_argument("--epitaxy", type=float, default=0.3)
    w.add_argument("--no-bounds", action="store_true", help="skip the parameter-range check")
    w.add_argument("--full-scale", action="store_true")
    w.set_defaults(func=cmd_simulate_weld)

    d = sub.add_parser("describe", parents=[common], help="descriptor samples of a microstructure")
    d.add_argument("--in", dest="input", required=True)
    _add_descriptor_flags(d, required_ids=True)
    d.add_argument("--out", help="samples CSV (default: stdout)")
    d.add_argument("--density-dir", help="also write one KDE CSV per descriptor here")
    d.set_defaults(func=cmd_describe)

    c = sub.add_parser("compare", parents=[common], help="KL objectives between two microstructures or sample files")
    c.add_argument("--target", required=True)
    c.add_argument("--candidate", required=True)
    _add_descriptor_flags(c)
    c.add_argument("--orientation", choices=("target||candidate", "candidate||target"),
                   default="target||candidate")
    c.add_argument("--scalarization", choices=("weighted_sum", "chebyshev", "augmented_chebyshev"),
                   default="weighted_sum")
    c.add_argument("--weights", type=_floats)
    c.add_argument("--ideal", type=_floats)
    c.add_argument("--rho", type=float, default=0.05)
    c.add_argument("--out", help="JSON output path")
    c.set_defaults(func=cmd_compare)

    n = sub.add_parser("noise", parents=[common], help="objective noise at the target parameters")
    n.add_argument("--config", required=True)
    n.add_argument("--replicates", type=int)
    n.add_argument("--out-dir", default=".")
    n.add_argument("--jobs", type=int)
    n.add_argument("--seed", type=int, help="master seed (overrides config and environment)")
    n.add_argument("--full-scale", action="store_true")
    n.set_defaults(func=cmd_noise)

    k = sub.add_parser("calibrate", parents=[common], help="run a calibration campaign")
    k.add_argument("--config", required=True)
    k.add_argument("--out-dir", default=".")
    k.add_argument("--jobs", type=int)
    k.add_argument("--resume", action="store_true")
    k.add_argument("--serial", action="store_true", help="evaluate in-process, one at a time")
    k.add_argument("--noise", action="store_true", help="also run the noise study first")
    k.add_argument("--max-trials", type=int)
    k.add_argument("--seed", type=int, help="master seed (overrides config and environment)")
    k.add_argument("--full-scale", action="store_true")
    k.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("report", parents=[common], help="convergence and correlation CSVs from a trial log")
    r.add_argument("--log", required=True)
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"microcal {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
