"""Experiment runners behind the command line: maximality curve, variance table,
MDP treatment effects, theory checks, and single training runs.

Every runner takes an :class:`ExperimentConfig`; results are plain row dicts,
optionally written as CSV/JSON (with the config hash in a header comment) plus
PNG figures when ``out_dir`` is given.
"""
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .couplings import (check_gumbel_max_suboptimal,
                        estimate_gumbel_max_coupling, gumbel_max_diagonal, inverse_cdf_coupling,
                        maximal_coupling, optimal_transport_coupling, variance_cost)
from .gadgets import gadget2_conditional
from .gumbel import log_softmax, softmax
from .mdp import (epsilon_greedy, estimate_mdp, extract_query_pairs, make_synthetic_sepsis_like,
                  policy_iteration, restrict_to_support, sample_trajectories, select_pairs,
                  sepsis_state_space, state_reward_draw, transition_counts,
                  treatment_effect_experiment, write_results, write_trajectories)
from .mechanisms import make_mechanism
from .training import (IndependentPairs, MirroredPairs, PairList, PerturbedPair, QuerySpec,
                       TrainConfig, TrainingDiverged, init_gadget, mismatch_loss,
                       reward_monotone, reward_nonmonotone, squared_difference_loss, train)

log = logging.getLogger(__name__)

VARIANCE_CELLS = ("independent_linear", "mirrored_linear", "fixed_monotone", "fixed_nonmonotone")
TABLE_MECHANISMS = ("independent", "gumbel_max", "inverse_cdf", "optimal_lp", "gadget1", "gadget2")
EXPLICIT = ("independent", "inverse_cdf", "optimal_lp", "maximal")


@dataclass
class ExperimentConfig:
    k: int = 10
    z: int = 5
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    sinkhorn_steps: int = 10
    out_scale: float = 0.1
    iterations: int = 5000
    learning_rate: dict = field(default_factory=lambda: {"gadget1": 3e-3, "gadget2": 3e-3})
    batch_pairs: int = 64
    noise_draws: int = 16
    seeds: tuple = (0, 1, 2, 3, 4)
    logit_scale: float = 1.0
    # variance table
    cells: tuple = VARIANCE_CELLS
    mechanisms: tuple = TABLE_MECHANISMS
    eval_pairs: int = 200
    eval_samples: int = 1000
    fixed_eval_samples: int = 20000
    nonmonotone_variant: str = "sin_of_gaussian"
    # maximality curve (noise scales are multiples of the test logits' spread)
    rho: tuple = (0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0, 1000.0)
    maximality_seeds: tuple = (0,)
    test_seed: int = 2024
    # treatment effects on the tabular MDP
    env_seed: int = 7
    n_trajectories: int = 20000
    max_t: int = 20
    behavior_epsilon: float = 0.05
    min_support: int = 4
    n_query_pairs: int = 6
    n_rewards: int = 5
    mdp_samples: int = 2000
    mdp_seeds: int = 10
    mdp_iterations: int = 1500
    mdp_batch_pairs: int = 8
    mdp_noise_draws: int = 32
    generalized_rho: float = 0.5
    mdp_variants: tuple = ("fixed", "generalized")
    # theory checks
    theory_pairs: int = 1000
    theory_mc_pairs: int = 1000
    theory_mc_samples: int = 200_000

    def learning_rate_for(self, kind):
        lr = self.learning_rate
        return float(lr[kind] if isinstance(lr, dict) else lr)

    def train_config(self, kind, seed, iterations=None, batch_pairs=None, noise_draws=None):
        return TrainConfig(learning_rate=self.learning_rate_for(kind),
                           batch_pairs=batch_pairs or self.batch_pairs,
                           noise_draws_per_pair=noise_draws or self.noise_draws,
                           iterations=self.iterations if iterations is None else iterations,
                           seed=int(seed))

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


PROFILES = {
    "desk": {},
    "full": {"hidden": (1024, 1024), "z": 20, "iterations": 50000, "eval_pairs": 10000},
}


def load_config(path=None, profile="desk", **overrides):
    """Profile defaults, then the JSON file at ``path``, then keyword overrides."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    values = dict(PROFILES[profile])
    if path is not None:
        values.update(json.loads(Path(path).read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in ("hidden", "seeds", "cells", "mechanisms", "rho", "maximality_seeds",
                "mdp_variants"):
        if key in values:
            values[key] = tuple(values[key])
    cfg = ExperimentConfig(**values)
    if not cfg.seeds:
        raise ValueError("seeds must be nonempty")
    return cfg


# --------------------------------------------------------------------------- output helpers

def write_csv(rows, path, fieldnames, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable))
    return path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _summarize(rows, keys, value="variance"):
    groups = {}
    for r in rows:
        if r.get(value) is None:
            continue
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    out = []
    for key, vals in groups.items():
        vals = np.array(vals, dtype=float)
        se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append(dict(zip(keys, key), **{value: float(vals.mean()), "std_error": se,
                                           "n": len(vals)}))
    return out


# --------------------------------------------------------------------------- evaluation helpers

def exact_pair_metrics(name, l1, l2, h):
    """Exact mean and variance of ``h(x) - h(y)`` for an explicit coupling mechanism."""
    p, q = softmax(l1), softmax(l2)
    builders = {
        "independent": lambda: np.outer(p, q),
        "inverse_cdf": lambda: inverse_cdf_coupling(p, q).joint,
        "optimal_lp": lambda: optimal_transport_coupling(p, q, variance_cost(h)).joint,
        "maximal": lambda: maximal_coupling(p, q).joint,
    }
    joint = builders[name]()
    h = np.asarray(h, dtype=float)
    diff = h[:, None] - h[None, :]
    mean = float(np.sum(joint * diff))
    return mean, float(np.sum(joint * (diff - mean) ** 2))


def mc_pair_metrics(mechanism, l1, l2, h, n, rng):
    x, y = mechanism.sample_pairs(l1, l2, n, rng)
    d = h[x] - h[y]
    return float(d.mean()), float(d.var(ddof=1))


def gadget2_mismatch(params, l1, l2):
    """Exact ``P(x != y)`` for Gadget 2: cluster mixture of Gumbel-max closed forms."""
    c1 = ad.value(gadget2_conditional(params, l1))
    c2 = ad.value(gadget2_conditional(params, l2))
    agree = sum(params.cluster_prior[i] * gumbel_max_diagonal(c1[i], c2[i]).sum()
                for i in range(params.z))
    return float(1.0 - agree)


def _train_gadget(config, kind, query, seed, rng_init, **train_kw):
    params = init_gadget(kind, config.k if "k" not in train_kw else train_kw.pop("k"),
                         z=config.z, hidden=config.hidden, rng=rng_init,
                         activation=config.activation, sinkhorn_steps=config.sinkhorn_steps,
                         out_scale=config.out_scale)
    params, history = train(params, query, config.train_config(kind, seed, **train_kw))
    return params, history


# --------------------------------------------------------------------------- variance table

def fixed_increasing_pair(k):
    """``p`` proportional to ``1..K`` and ``q`` its reverse, as logits."""
    l1 = log_softmax(np.log(np.arange(1, k + 1, dtype=float)))
    return l1, l1[::-1].copy()


def variance_cell(cell, k, seed, config):
    """Query source, score vector and evaluation pairs for one (cell, seed)."""
    cell_id = VARIANCE_CELLS.index(cell)
    rng = np.random.default_rng([seed, cell_id, 1])
    if cell in ("independent_linear", "mirrored_linear"):
        cls = IndependentPairs if cell == "independent_linear" else MirroredPairs
        source = cls(k, config.logit_scale)
        h = np.arange(k, dtype=float)
        l1, l2 = source.sample(config.eval_pairs, rng)
        return source, h, list(zip(l1, l2)), config.eval_samples
    l1, l2 = fixed_increasing_pair(k)
    h_rng = np.random.default_rng([seed, cell_id, 2])
    if cell == "fixed_monotone":
        h = reward_monotone(k, h_rng)
    elif cell == "fixed_nonmonotone":
        h = reward_nonmonotone(k, h_rng, config.nonmonotone_variant)
    else:
        raise ValueError(f"unknown cell {cell!r}")
    return PerturbedPair(l1, l2, 0.0), h, [(l1, l2)], config.fixed_eval_samples


def run_variance_suite(config, out_dir=None):
    """Mechanism x cell variance of ``h(x) - h(y)``; one row per (cell, mechanism, seed).

    Explicit couplings are evaluated exactly, Gumbel-max and the gadgets by
    Monte Carlo on the same evaluation pairs.  Gadgets are trained per (cell,
    seed) with loss ``(h(x) - h(y))^2``.
    """
    rows, failures = [], []
    for cell in config.cells:
        for seed in config.seeds:
            source, h, pairs, n_eval = variance_cell(cell, config.k, seed, config)
            query = QuerySpec(source, squared_difference_loss(h))
            for mech in config.mechanisms:
                t0 = time.time()
                row = {"cell": cell, "mechanism": mech, "seed": seed}
                try:
                    if mech in EXPLICIT:
                        stats = [exact_pair_metrics(mech, a, b, h) for a, b in pairs]
                    else:
                        if mech in ("gadget1", "gadget2"):
                            params, _ = _train_gadget(config, mech, query, seed,
                                                      np.random.default_rng([seed, 17]))
                            m = make_mechanism(mech, params)
                        else:
                            m = make_mechanism(mech)
                        rng = np.random.default_rng([seed, VARIANCE_CELLS.index(cell), 3])
                        stats = [mc_pair_metrics(m, a, b, h, n_eval, rng) for a, b in pairs]
                    row["mean_diff"] = float(np.mean([s[0] for s in stats]))
                    row["variance"] = float(np.mean([s[1] for s in stats]))
                    row["status"] = "ok"
                except (TrainingDiverged, ValueError, FloatingPointError) as exc:
                    row.update(mean_diff=None, variance=None, status=f"failed: {exc}")
                    failures.append(row)
                row["seconds"] = round(time.time() - t0, 2)
                log.info("variance %s %s seed=%s -> %s", cell, mech, seed, row.get("variance"))
                rows.append(row)
    summary = _summarize(rows, ("cell", "mechanism"))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = f"config {config.digest()}"
        write_csv(rows, out / "variance_rows.csv",
                  ["cell", "mechanism", "seed", "mean_diff", "variance", "status", "seconds"], tag)
        write_csv(summary, out / "variance_table.csv",
                  ["cell", "mechanism", "variance", "std_error", "n"], tag)
        from .plotting import plot_variance_table
        plot_variance_table(summary, out / "variance_table.png")
    return {"rows": rows, "summary": summary, "failures": failures}


# --------------------------------------------------------------------------- maximality

def maximality_test_pair(config):
    rng = np.random.default_rng(config.test_seed)
    l1 = config.logit_scale * rng.standard_normal(config.k)
    l2 = config.logit_scale * rng.standard_normal(config.k)
    return l1, l2


def run_maximality(config, out_dir=None):
    """Train Gadget 2 for ``P(x != y)`` on noisy copies of a fixed pair, one run per noise scale."""
    l1, l2 = maximality_test_pair(config)
    p, q = softmax(l1), softmax(l2)
    maximal = float(1.0 - np.minimum(p, q).sum())
    gumbel = float(1.0 - gumbel_max_diagonal(p, q).sum())
    signal = float(np.std(np.concatenate([l1, l2])))
    rows, failures = [], []
    for rho in config.rho:
        for seed in config.maximality_seeds:
            row = {"rho": float(rho), "noise_scale": float(rho) * signal, "seed": seed,
                   "maximal": maximal, "gumbel_max": gumbel}
            t0 = time.time()
            try:
                query = QuerySpec(PerturbedPair(l1, l2, float(rho) * signal),
                                  mismatch_loss(config.k))
                params, history = _train_gadget(config, "gadget2", query, seed,
                                                np.random.default_rng([seed, 17]))
                row["learned"] = gadget2_mismatch(params, l1, l2)
                row["final_loss"] = float(np.mean(history[-100:])) if history else None
                row["status"] = "ok"
            except (TrainingDiverged, ValueError, FloatingPointError) as exc:
                row.update(learned=None, final_loss=None, status=f"failed: {exc}")
                failures.append(row)
            row["seconds"] = round(time.time() - t0, 2)
            log.info("maximality rho=%s seed=%s -> %s", rho, seed, row.get("learned"))
            rows.append(row)
    result = {"rows": rows, "failures": failures, "maximal": maximal, "gumbel_max": gumbel,
              "signal": signal, "p_test": p, "q_test": q}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(rows, out / "maximality.csv",
                  ["rho", "noise_scale", "seed", "learned", "maximal", "gumbel_max",
                   "final_loss", "status", "seconds"], f"config {config.digest()}")
        write_json({k: v for k, v in result.items() if k != "rows"}
                   | {"config_hash": config.digest()}, out / "maximality.json")
        from .plotting import plot_maximality
        plot_maximality(rows, out / "maximality.png")
    return result


# --------------------------------------------------------------------------- MDP

def build_mdp_queries(config):
    """Environment, data, estimated model, and the selected single-step query pairs.

    Each query is restricted to the union support of its two kernels and padded
    with impossible outcomes to a common width.
    """
    stage = "environment"
    try:
        env = make_synthetic_sepsis_like(rng=np.random.default_rng(config.env_seed))
        stage = "behavior policy"
        behavior = epsilon_greedy(policy_iteration(env), config.behavior_epsilon)
        stage = "trajectories"
        trajs = sample_trajectories(env, behavior, config.n_trajectories, config.max_t,
                                    np.random.default_rng([config.env_seed, 1]))
        stage = "estimation"
        counts = transition_counts(trajs, env.n_states, env.n_actions)
        mdp_hat = estimate_mdp(trajs, env.n_states, env.n_actions, absorbing=env.absorbing,
                               state_reward=env.state_reward, discount=env.discount)
        stage = "target policy"
        target = policy_iteration(mdp_hat)
        stage = "query pairs"
        pairs = extract_query_pairs(trajs, mdp_hat, behavior, target, config.min_support, counts)
        chosen = select_pairs(pairs, config.n_query_pairs)
        if not chosen:
            raise ValueError("no query pair passed the support filter")
    except Exception as exc:
        raise RuntimeError(f"MDP pipeline failed at stage '{stage}': {exc}") from exc
    width = max(int((np.isfinite(a) | np.isfinite(b)).sum()) for a, b, _ in chosen)
    queries = []
    for a, b, ctx in chosen:
        s1, s2, index = restrict_to_support(a, b, width)
        ctx = dict(ctx, x_obs=int(np.flatnonzero(index == ctx["next_state"])[0]),
                   index=index.tolist())
        queries.append((s1, s2, ctx))
    return {"env": env, "behavior": behavior, "trajectories": trajs, "mdp_hat": mdp_hat,
            "target": target, "n_candidates": len(pairs), "queries": queries, "width": width}


def _perturb(l, rho, rng):
    return np.where(np.isfinite(l), l + rho * rng.standard_normal(len(l)), -np.inf)


def run_mdp_experiment(config, out_dir=None, mechanisms=None, variants=None):
    """Single-step treatment-effect variance on the synthetic MDP.

    A trial is one query pair with one reward realization.  ``fixed`` trains
    the gadgets on the trial's pair and evaluates on it; ``generalized`` trains
    on Gaussian-perturbed copies and evaluates every mechanism on a fresh
    perturbation per seed.
    """
    mechanisms = tuple(mechanisms or ("independent", "inverse_cdf", "optimal_lp", "gumbel_max",
                                      "gadget1", "gadget2"))
    variants = tuple(variants or config.mdp_variants)
    built = build_mdp_queries(config)
    width = built["width"]
    space = sepsis_state_space()
    trials = []
    for pid, (l1, l2, ctx) in enumerate(built["queries"]):
        for r in range(config.n_rewards):
            full = state_reward_draw(space, np.random.default_rng([config.env_seed, pid, r, 5]))
            index = np.array(ctx["index"])
            h = np.where(index >= 0, full[np.maximum(index, 0)], 0.0)
            trials.append((l1, l2, ctx, h))

    rows, failures = [], []
    for variant in variants:
        rho = 0.0 if variant == "fixed" else config.generalized_rho
        for tid, (l1, l2, ctx, h) in enumerate(trials):
            trained = {}
            for kind in ("gadget1", "gadget2"):
                if kind not in mechanisms:
                    continue
                query = QuerySpec(PerturbedPair(l1, l2, rho), squared_difference_loss(h))
                try:
                    trained[kind], _ = _train_gadget(
                        config, kind, query, tid, np.random.default_rng([tid, 17]), k=width,
                        iterations=config.mdp_iterations, batch_pairs=config.mdp_batch_pairs,
                        noise_draws=config.mdp_noise_draws)
                except TrainingDiverged as exc:
                    failures.append({"variant": variant, "trial": tid, "mechanism": kind,
                                     "status": f"failed: {exc}"})
            for seed in range(config.mdp_seeds):
                if rho > 0:
                    prng = np.random.default_rng([tid, seed, 99])
                    a, b = _perturb(l1, rho, prng), _perturb(l2, rho, prng)
                else:
                    a, b = l1, l2
                for name in mechanisms:
                    if name in ("gadget1", "gadget2"):
                        if name not in trained:
                            continue
                        mech = make_mechanism(name, trained[name])
                    else:
                        mech = make_mechanism(name, h=h)
                    for setting in ("joint", "counterfactual"):
                        res = treatment_effect_experiment(
                            [(a, b, ctx)], mech, setting, h, config.mdp_samples, 1,
                            seed=config.env_seed * 1000 + seed)
                        for rrow in res:
                            rrow.update(pair_id=tid, seed=seed, variant=variant,
                                        query=int(tid // config.n_rewards),
                                        analytic_mean=float(softmax(a) @ h - softmax(b) @ h))
                            rows.append(rrow)
    # average seeds within a trial, then mean and standard error over trials
    per_trial = {}
    for r in rows:
        key = (r["variant"], r["setting"], r["mechanism"], r["pair_id"])
        per_trial.setdefault(key, []).append(r)
    trial_rows = [{"variant": k[0], "setting": k[1], "mechanism": k[2], "pair_id": k[3],
                   "variance": float(np.mean([x["variance"] for x in v])),
                   "mean_diff": float(np.mean([x["mean_diff"] for x in v])),
                   "analytic_mean": float(np.mean([x["analytic_mean"] for x in v]))}
                  for k, v in per_trial.items()]
    summary = _summarize(trial_rows, ("variant", "setting", "mechanism"))
    result = {"rows": rows, "trial_rows": trial_rows, "summary": summary, "failures": failures,
              "width": width, "n_candidates": built["n_candidates"],
              "queries": [q[2] for q in built["queries"]]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = f"config {config.digest()}"
        for variant in variants:
            write_results([r for r in rows if r["variant"] == variant],
                          out / f"mdp_results_{variant}.csv", tag)
        write_csv(summary, out / "mdp_summary.csv",
                  ["variant", "setting", "mechanism", "variance", "std_error", "n"], tag)
        write_trajectories(built["trajectories"], out / "trajectories.csv", tag)
        built["mdp_hat"].to_json(out / "mdp_estimated.json")
        write_json({"config_hash": config.digest(), "queries": result["queries"],
                    "n_candidates": built["n_candidates"], "width": width,
                    "failures": failures}, out / "mdp_summary.json")
        from .plotting import plot_mdp_variance
        plot_mdp_variance(summary, out / "mdp_variance.png")
    return result


# --------------------------------------------------------------------------- theory checks

def _random_simplex(rng, k, n):
    return rng.dirichlet(np.ones(k), size=n)


def run_theory_checks(config, out_dir=None):
    """Randomized checks of the Gumbel-max closed forms; returns a pass/fail report."""
    rng = np.random.default_rng(config.seeds[0])
    checks = []

    def record(name, passed, detail):
        checks.append({"check": name, "passed": bool(passed), "detail": detail})

    worst = 0.0
    for _ in range(config.theory_mc_pairs):
        k = int(rng.integers(3, 9))
        p, q = _random_simplex(rng, k, 2)
        d = gumbel_max_diagonal(p, q)
        mc = np.diag(estimate_gumbel_max_coupling(np.log(p), np.log(q),
                                                  config.theory_mc_samples, rng).joint)
        tol = 4 * np.sqrt(d * (1 - d) / config.theory_mc_samples) + 1e-12
        worst = max(worst, float(np.max(np.abs(mc - d) / tol)))
    record("closed-form diagonal vs Monte Carlo", worst <= 1.0,
           f"worst deviation {worst:.3f} x tolerance over {config.theory_mc_pairs} pairs")

    violations = 0
    for _ in range(config.theory_pairs):
        k = int(rng.integers(2, 11))
        p, q = _random_simplex(rng, k, 2)
        if np.minimum(p, q).sum() > 2 * gumbel_max_diagonal(p, q).sum():
            violations += 1
    record("maximal agreement at most twice Gumbel-max agreement", violations == 0,
           f"{violations} violations in {config.theory_pairs} pairs")

    worst = 0.0
    for _ in range(config.theory_pairs):
        p, q = _random_simplex(rng, 2, 2)
        worst = max(worst, float(np.abs(gumbel_max_diagonal(p, q) - np.minimum(p, q)).max()))
    record("two outcomes: Gumbel-max is maximal", worst <= 1e-12, f"max error {worst:.2e}")

    mismatched = 0
    for _ in range(config.theory_pairs):
        k = int(rng.integers(2, 8))
        p, q = _random_simplex(rng, k, 2)
        suboptimal = check_gumbel_max_suboptimal(p, q)
        gap = np.minimum(p, q).sum() - gumbel_max_diagonal(p, q).sum()
        if suboptimal != (gap > 1e-12):
            mismatched += 1
    record("suboptimality test matches the agreement gap", mismatched == 0,
           f"{mismatched} disagreements in {config.theory_pairs} pairs")

    worst = 0.0
    for _ in range(config.theory_pairs):
        k = int(rng.integers(2, 9))
        p, q = _random_simplex(rng, k, 2)
        plan = optimal_transport_coupling(p, q, 1.0 - np.eye(k))
        worst = max(worst, abs(float(np.sum(plan.joint * (1 - np.eye(k))))
                               - 0.5 * float(np.abs(p - q).sum())))
    record("transport solver recovers total variation", worst <= 1e-9, f"max error {worst:.2e}")

    report = {"config_hash": config.digest(), "checks": checks,
              "passed": all(c["passed"] for c in checks)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(report, out / "theory_report.json")
        write_csv(checks, out / "theory_report.csv", ["check", "passed", "detail"],
                  f"config {config.digest()}")
    return report


# --------------------------------------------------------------------------- single runs

def build_scores(scores, k):
    """Score vector from a run description: explicit list or a named generator."""
    if isinstance(scores, (list, tuple)):
        h = np.asarray(scores, dtype=float)
        if len(h) != k:
            raise ValueError("score vector length does not match K")
        return h
    kind = scores.get("kind", "linear")
    rng = np.random.default_rng(scores.get("seed", 0))
    if kind == "linear":
        return np.arange(k, dtype=float)
    if kind == "monotone":
        return reward_monotone(k, rng)
    if kind == "nonmonotone":
        return reward_nonmonotone(k, rng, scores.get("variant", "sin_of_gaussian"))
    raise ValueError(f"unknown score kind {kind!r}")


def build_query(desc):
    """QuerySpec from a run description's ``source`` and ``loss`` entries."""
    k = int(desc["k"])
    src = desc.get("source", {"kind": "independent"})
    kind = src.get("kind", "independent")
    if kind == "independent":
        source = IndependentPairs(k, src.get("scale", 1.0))
    elif kind == "mirrored":
        source = MirroredPairs(k, src.get("scale", 1.0))
    elif kind == "perturbed":
        source = PerturbedPair(np.array(src["l1"], dtype=float), np.array(src["l2"], dtype=float),
                               src.get("rho", 0.0))
    elif kind == "list":
        source = PairList([(np.array(a, dtype=float), np.array(b, dtype=float))
                           for a, b in src["pairs"]])
    else:
        raise ValueError(f"unknown pair source {kind!r}")
    if source.k != k:
        raise ValueError("pair source dimension does not match K")
    loss = desc.get("loss", {"kind": "squared_difference"})
    if loss.get("kind") == "mismatch":
        table = mismatch_loss(k)
    elif loss.get("kind", "squared_difference") == "squared_difference":
        table = squared_difference_loss(build_scores(loss.get("h", {"kind": "linear"}), k))
    else:
        raise ValueError(f"unknown loss {loss.get('kind')!r}")
    return QuerySpec(source, table)


RUN_DEFAULTS = {"gadget": "gadget2", "k": 10, "z": 5, "hidden": [64, 64], "activation": "tanh",
                "sinkhorn_steps": 10, "out_scale": 0.1, "seed": 0,
                "optimizer": {"learning_rate": 3e-3, "batch_pairs": 64,
                              "noise_draws_per_pair": 16, "iterations": 5000}}


def run_description(desc):
    """Fill a training run description with defaults."""
    out = dict(RUN_DEFAULTS, **desc)
    out["optimizer"] = dict(RUN_DEFAULTS["optimizer"], **desc.get("optimizer", {}))
    return out


def run_training(desc):
    """Train one gadget from a run description; returns ``(params, history)``."""
    desc = run_description(desc)
    query = build_query(desc)
    params = init_gadget(desc["gadget"], desc["k"], z=desc["z"], hidden=tuple(desc["hidden"]),
                         rng=np.random.default_rng([desc["seed"], 17]),
                         activation=desc["activation"], sinkhorn_steps=desc["sinkhorn_steps"],
                         out_scale=desc["out_scale"])
    opt = desc["optimizer"]
    cfg = TrainConfig(learning_rate=opt["learning_rate"], batch_pairs=opt["batch_pairs"],
                      noise_draws_per_pair=opt["noise_draws_per_pair"],
                      iterations=opt["iterations"], seed=desc["seed"],
                      temperature=opt.get("temperature", 1.0))
    return train(params, query, cfg)


def evaluate_against_baselines(params, desc, n_pairs=200, n_samples=1000, seed=0):
    """Variance of the trained gadget and the fixed mechanisms on fresh pairs from the source."""
    desc = run_description(desc)
    query = build_query(desc)
    k = desc["k"]
    loss = desc.get("loss", {"kind": "squared_difference"})
    mismatch = loss.get("kind") == "mismatch"
    h = None if mismatch else build_scores(loss.get("h", {"kind": "linear"}), k)
    rng = np.random.default_rng([seed, 3])
    l1, l2 = query.pairs.sample(n_pairs, rng)
    results = []
    names = ["independent", "gumbel_max", "inverse_cdf", "maximal"] + \
        ([] if mismatch else ["optimal_lp"]) + [desc["gadget"]]
    for name in names:
        mech = make_mechanism(name, params if name == desc["gadget"] else None,
                              cost=mismatch_loss(k) if mismatch else None, h=h)
        erng = np.random.default_rng([seed, 4])
        vals = []
        for a, b in zip(l1, l2):
            x, y = mech.sample_pairs(a, b, n_samples, erng)
            vals.append(float(np.mean(x != y)) if mismatch else float(np.var(h[x] - h[y], ddof=1)))
        vals = np.array(vals)
        results.append({"mechanism": name, "metric": "p_mismatch" if mismatch else "variance",
                        "value": float(vals.mean()),
                        "std_error": float(vals.std(ddof=1) / np.sqrt(len(vals)))})
    return results
