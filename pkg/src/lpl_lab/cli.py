"""Command line entry point: ``lpl-lab <command> --out DIR [options]``.

Exit codes: 0 success, 1 invalid configuration, 2 missing or unreadable
inputs, 3 numerical abort. Error messages go to standard error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import RunConfig, load_config
from .errors import LplLabError
from .runtime import configure_torch


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _cmd_gen_data(args):
    path = harness.run_gen_data(_config(args), args.out)
    print(f"dataset written to {path}")


def _cmd_train_ae(args):
    report = harness.run_train_ae(_config(args), args.data, args.out)
    print(f"autoencoder: train mse {report['train_mse']:.5f}, "
          f"holdout mse {report['holdout_mse']:.5f}")


def _cmd_train_gen(args):
    trainer = harness.run_train_gen(_config(args), args.data, args.ae, args.out)
    print(f"trained {trainer.step_count} steps; checkpoint {args.out}/final.ckpt")


def _cmd_sample(args):
    out = harness.run_sample(_config(args), args.ckpt, args.ae, args.out, args.count)
    print(f"samples written to {out}")


def _cmd_eval(args):
    report = harness.run_eval(_config(args), args.data, args.ae, args.samples, args.out,
                              args.ckpt or ())
    for name, m in report["sets"].items():
        b = m["band_errors"]
        print(f"{name}: frechet {m['frechet']:.4f} precision {m['precision']:.3f} "
              f"recall {m['recall']:.3f} density {m['density']:.3f} "
              f"coverage {m['coverage']:.3f} band low/mid/high "
              f"{b['low']:.3f}/{b['mid']:.3f}/{b['high']:.3f}")


def _cmd_spectrum(args):
    bands = harness.run_spectrum(_config(args), args.data, args.samples, args.out)
    for name, b in bands.items():
        print(f"{name}: band low/mid/high {b['low']:.3f}/{b['mid']:.3f}/{b['high']:.3f}")


def _cmd_probe(args):
    report = harness.run_probe(_config(args), args.data, args.ae, args.out,
                               tuple(harness.parse_values(args.scales)))
    print(f"probe report with {len(report['roundtrip'])} round-trip rows in {args.out}")


def _cmd_verify_theory(args):
    cfg = load_config(args.config) if args.config else None
    report = harness.run_verify_theory(args.out, args.instances, args.seed, cfg)
    print(f"penalty identity: {report['identity_passes']}/{report['instances']} passes, "
          f"{report['bound_violations']} bound violations")
    return 0 if (report["identity_passes"] == report["instances"]
                 and report["bound_violations"] == 0) else 3


def _cmd_sweep(args):
    rows = harness.run_sweep(_config(args), args.data, args.ae, args.param,
                             harness.parse_values(args.values), args.out)
    print(f"{len(rows)} runs; summary in {args.out}/summary.csv")


def _cmd_repro(args):
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    summary = harness.run_repro(_config(args), args.data, args.ae, seeds, args.out)
    v = summary["verdict"]
    print(f"LPL wins on seeds {v['winning_seeds']} (need {v['needed']}): "
          f"{'PASS' if v['passed'] else 'FAIL'}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpl-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_, needs=()):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        if "data" in needs:
            p.add_argument("--data", help="dataset directory or image folder "
                                          "(regenerated from the config when omitted)")
        if "ae" in needs:
            p.add_argument("--ae", required=True, help="autoencoder checkpoint")
        p.set_defaults(func=func)
        return p

    command("gen-data", _cmd_gen_data, "render the textured toy corpus")
    command("train-ae", _cmd_train_ae, "train and freeze the autoencoder", ("data",))
    command("train-gen", _cmd_train_gen, "two-phase generator training", ("data", "ae"))
    p = command("sample", _cmd_sample, "sample from a generator checkpoint", ("ae",))
    p.add_argument("--ckpt", required=True, help="generator checkpoint")
    p.add_argument("--count", type=int, help="number of samples (config default otherwise)")
    p = command("eval", _cmd_eval, "metrics of sample sets against the corpus", ("data", "ae"))
    p.add_argument("--samples", nargs="+", required=True, help="sample directories")
    p.add_argument("--ckpt", nargs="*", help="checkpoints for the NFE sweep (eval.nfe_sweep)")
    p = command("spectrum", _cmd_spectrum, "power spectra of sample sets", ("data",))
    p.add_argument("--samples", nargs="+", required=True, help="sample directories")
    p = command("probe", _cmd_probe, "latent round-trip and perturbation probes", ("data", "ae"))
    p.add_argument("--scales", default="1.3,2", help="comma-separated down-scale factors")
    p = command("verify-theory", _cmd_verify_theory, "linear-decoder penalty identity sweep")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p = command("sweep", _cmd_sweep, "post-training sweep over one parameter", ("data", "ae"))
    p.add_argument("--param", required=True, choices=sorted(harness.SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p = command("repro", _cmd_repro, "baseline vs LPL comparison over seeds", ("data", "ae"))
    p.add_argument("--seeds", default="0,1,2")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    configure_torch()
    try:
        code = args.func(args)
    except LplLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
