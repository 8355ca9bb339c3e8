"""Command-line entry point: ``latflow <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..metrics import default_cutoff, s_smooth
from ..simenv import DT
from .config import DEFAULTS, make_config, stage_dir, stage_hash
from .io import read_trajectory_csv
from .pipeline import eval_stage, gen_demos, train_flow_stage, train_latent_stage
from .report import write_report

log = logging.getLogger("latflow")


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _config(args) -> dict:
    overrides = dict(args.overrides or [])
    for key in ("task", "policy"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    return make_config(overrides, args.config)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file (keys as in DEFAULTS)")
    p.add_argument("--set", dest="overrides", action="append", type=parse_override, metavar="KEY=VALUE",
                   help="override one config key; VALUE is parsed as JSON when possible")
    p.add_argument("--root", type=Path, default=Path("runs"), help="run root directory (default ./runs)")
    p.add_argument("--task", choices=("reach", "pick-place", "obstacle-reach"))
    p.add_argument("--policy", choices=("latent-flow", "raw-flow"))


def cmd_gen_demos(args) -> Path:
    return gen_demos(_config(args), args.root)


def cmd_train_latent(args) -> Path:
    return train_latent_stage(_config(args), args.root)


def cmd_train_flow(args) -> Path:
    return train_flow_stage(_config(args), args.root)


def cmd_eval(args) -> Path:
    return eval_stage(_config(args), args.root)


def cmd_run(args) -> Path:
    """gen-demos, both training stages and eval for each policy, then a report."""
    cfg = _config(args)
    gen_demos(cfg, args.root)
    evals = []
    for policy in args.policies:
        c = dict(cfg, policy=policy)
        if policy == "latent-flow" and not (stage_dir(args.root, c, "latent") / "checkpoint.npz").exists():
            train_latent_stage(c, args.root)
        train_flow_stage(c, args.root)
        evals.append(eval_stage(c, args.root))
    return write_report(evals, root=args.root)


def cmd_report(args) -> Path:
    return write_report(args.evals, out_dir=args.out, root=args.root, reference=args.reference,
                        plots=not args.no_plots)


def cmd_metrics(args) -> None:
    traj = read_trajectory_csv(args.trajectory)
    if args.columns:
        traj = traj[:, args.columns]
    f_c = args.cutoff if args.cutoff is not None else default_cutoff(args.dt, args.fc_ratio)
    rep = s_smooth(traj, args.dt, f_c, args.j_ref)
    print("s_jerk,s_freq,s_smooth,j_ref,f_c,dt,alpha,beta")
    print(",".join(repr(float(v)) for v in (rep.s_jerk, rep.s_freq, rep.s_smooth, rep.j_ref, rep.f_c, rep.dt,
                                             rep.alpha, rep.beta)))


def cmd_hash(args) -> None:
    cfg = _config(args)
    for stage in ("demos", "latent", "flow", "eval"):
        print(f"{stage}\t{stage_hash(cfg, stage)}\t{stage_dir(args.root, cfg, stage)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in [
        ("gen-demos", cmd_gen_demos, "generate scripted expert demonstrations"),
        ("train-latent", cmd_train_latent, "stage 1: train the latent action encoder/decoder"),
        ("train-flow", cmd_train_flow, "stage 2: train the flow policy (latent-flow or raw-flow)"),
        ("eval", cmd_eval, "closed-loop evaluation over seeds x trials"),
        ("hash", cmd_hash, "print per-stage config hashes and run directories"),
    ]:
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("run", help="full pipeline for both policies plus a report")
    _add_common(p)
    p.add_argument("--policies", nargs="+", default=["latent-flow", "raw-flow"])
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="comparison table, plot CSVs and figures from eval directories")
    p.add_argument("evals", nargs="+", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--root", type=Path)
    p.add_argument("--reference", default="raw-flow")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("metrics", help="smoothness of a trajectory CSV (one row per step)")
    p.add_argument("trajectory", type=Path)
    p.add_argument("--dt", type=float, default=DT)
    p.add_argument("--j-ref", type=float, default=1.0)
    p.add_argument("--cutoff", type=float, help="cutoff in Hz (overrides --fc-ratio)")
    p.add_argument("--fc-ratio", type=float, default=DEFAULTS["fc_ratio"])
    p.add_argument("--columns", type=int, nargs="+", help="column indices to use (default: all)")
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = args.func(args)
    except (FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"latflow {args.command}: {exc}", file=sys.stderr)
        return 1
    if out is not None:
        print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
