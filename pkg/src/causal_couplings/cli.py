"""Command-line entry point: ``causal-couplings <subcommand> [options]``.

Subcommands ``maximality``, ``variance``, ``mdp`` and ``theory`` run the
experiment suites; ``train`` fits one gadget from a run description and
``eval`` compares a trained checkpoint with the fixed mechanisms.  Exit code
is 0 only when every requested step completed.
"""
import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .gadgets import load_params, save_params
from .training import TrainingDiverged

log = logging.getLogger("causal_couplings")


def _seeds(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers: {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="causal-couplings", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_help="experiment config (JSON)"):
        p.add_argument("--config", type=Path, help=config_help)
        p.add_argument("--seed", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        p.add_argument("--profile", choices=sorted(ex.PROFILES), default="desk")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("maximality", help="mismatch probability vs training noise scale"))
    common(sub.add_parser("variance", help="variance table over query cells"))
    mdp = common(sub.add_parser("mdp", help="treatment-effect variance on a tabular MDP"))
    mdp.add_argument("--variants", default=None, help="comma list from fixed,generalized")
    common(sub.add_parser("theory", help="randomized checks of the closed forms"))
    common(sub.add_parser("train", help="train one gadget"), "training run description (JSON)")
    ev = common(sub.add_parser("eval", help="evaluate a trained gadget"),
                "training run description (JSON)")
    ev.add_argument("--params", type=Path, required=True, help="checkpoint written by train")
    ev.add_argument("--pairs", type=int, default=200)
    ev.add_argument("--samples", type=int, default=1000)
    return parser


def _experiment_config(args):
    return ex.load_config(args.config, args.profile, seeds=args.seed)


def _finish(out, name, payload, failures):
    payload = dict(payload, failures=failures, completed=not failures)
    ex.write_json(payload, out / f"{name}_summary.json")
    if failures:
        log.error("%d step(s) failed; see %s", len(failures), out / f"{name}_summary.json")
        return 1
    return 0


def cmd_maximality(args):
    cfg = _experiment_config(args)
    res = ex.run_maximality(cfg, args.out)
    for r in res["rows"]:
        print(f"rho={r['rho']:g} seed={r['seed']} learned={r['learned']} "
              f"maximal={r['maximal']:.4f} gumbel_max={r['gumbel_max']:.4f}")
    return _finish(args.out, "maximality_run", {"config_hash": cfg.digest()}, res["failures"])


def cmd_variance(args):
    cfg = _experiment_config(args)
    res = ex.run_variance_suite(cfg, args.out)
    for s in res["summary"]:
        print(f"{s['cell']:20s} {s['mechanism']:12s} {s['variance']:.4f} +- {s['std_error']:.4f}")
    return _finish(args.out, "variance", {"config_hash": cfg.digest(), "summary": res["summary"]},
                   res["failures"])


def cmd_mdp(args):
    cfg = _experiment_config(args)
    variants = tuple(args.variants.split(",")) if args.variants else None
    try:
        res = ex.run_mdp_experiment(cfg, args.out, variants=variants)
    except RuntimeError as exc:
        log.error("%s", exc)
        return 1
    for s in res["summary"]:
        print(f"{s['variant']:12s} {s['setting']:15s} {s['mechanism']:12s} "
              f"{s['variance']:.4f} +- {s['std_error']:.4f}")
    return 1 if res["failures"] else 0


def cmd_theory(args):
    cfg = _experiment_config(args)
    report = ex.run_theory_checks(cfg, args.out)
    for c in report["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['check']}: {c['detail']}")
    return 0 if report["passed"] else 1


def _digest(desc):
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def _run_desc(args):
    if args.config is None:
        raise SystemExit("train/eval need --config with a run description")
    desc = json.loads(args.config.read_text())
    if args.seed:
        desc["seed"] = args.seed[0]
    return ex.run_description(desc)


def cmd_train(args):
    desc = _run_desc(args)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        params, history = ex.run_training(desc)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return 1
    digest = _digest(desc)
    save_params(params, args.out / "params.json")
    ex.write_csv([{"iteration": i + 1, "loss": v} for i, v in enumerate(history)],
                 args.out / "loss_history.csv", ["iteration", "loss"], f"config {digest}")
    ex.write_json(dict(desc, config_hash=digest), args.out / "run.json")
    from .plotting import plot_loss_history
    plot_loss_history(history, args.out / "loss_history.png")
    if history:
        print(f"trained {desc['gadget']} for {len(history)} iterations; "
              f"final loss {history[-1]:.5f}")
    return 0


def cmd_eval(args):
    desc = _run_desc(args)
    args.out.mkdir(parents=True, exist_ok=True)
    params = load_params(args.params)
    results = ex.evaluate_against_baselines(params, desc, args.pairs, args.samples,
                                            desc.get("seed", 0))
    digest = _digest(desc)
    ex.write_csv(results, args.out / "eval.csv", ["mechanism", "metric", "value", "std_error"],
                 f"config {digest}")
    ex.write_json({"config_hash": digest, "results": results}, args.out / "eval.json")
    for r in results:
        print(f"{r['mechanism']:12s} {r['metric']} {r['value']:.4f} +- {r['std_error']:.4f}")
    return 0


COMMANDS = {"maximality": cmd_maximality, "variance": cmd_variance, "mdp": cmd_mdp,
            "theory": cmd_theory, "train": cmd_train, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
