"""Tabular MDP harness for single-step counterfactual treatment effects.

A synthetic vital-signs environment stands in for a clinical simulator:
three vitals (heart rate, blood pressure, oxygen) plus three treatment flags
(antibiotics, vasopressors, ventilation), giving 3*3*2*2*2*2 = 144 live
states and two absorbing states (death, discharge).
"""
import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gumbel import as_rng

ROW_TOL = 1e-9


class PolicyIterationError(RuntimeError):
    pass


@dataclass
class TabularMDP:
    """``transition[s, a, s']``; rewards are collected on entering a state."""

    transition: np.ndarray
    state_reward: np.ndarray
    absorbing: tuple = ()
    discount: float = 0.99

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.state_reward = np.asarray(self.state_reward, dtype=float)
        self.absorbing = tuple(int(s) for s in self.absorbing)
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def validate(self, tol=ROW_TOL):
        t = self.transition
        if t.ndim != 3 or t.shape[0] != t.shape[2]:
            raise ValueError(f"transition has shape {t.shape}, expected (S, A, S)")
        if np.any(t < 0) or np.abs(t.sum(axis=-1) - 1).max() > tol:
            raise ValueError("transition rows are not distributions")
        for s in self.absorbing:
            if np.any(np.abs(t[s, :, s] - 1) > tol):
                raise ValueError(f"absorbing state {s} does not self-loop")
        return self

    def with_reward(self, state_reward):
        return TabularMDP(self.transition, state_reward, self.absorbing, self.discount)

    def to_json(self, path):
        Path(path).write_text(json.dumps({
            "n_states": self.n_states, "n_actions": self.n_actions,
            "discount": self.discount, "absorbing": list(self.absorbing),
            "state_reward": self.state_reward.tolist(),
            "transition": self.transition.ravel().tolist()}))
        return path

    @classmethod
    def from_json(cls, path):
        d = json.loads(Path(path).read_text())
        t = np.array(d["transition"], dtype=float).reshape(d["n_states"], d["n_actions"],
                                                            d["n_states"])
        return cls(t, d["state_reward"], d["absorbing"], d["discount"]).validate()


# --------------------------------------------------------------------------- environment

@dataclass
class SepsisLikeConfig:
    vital_levels: tuple = (3, 3, 2)      # heart rate, blood pressure, oxygen
    normal_level: tuple = (1, 1, 1)
    n_treatments: int = 3
    death_threshold: int = 3             # number of abnormal vitals that kills
    death_reward: float = -4.0
    discharge_reward: float = 4.0
    stickiness: float = 2.0              # penalty per level of change
    kernel_noise: float = 0.7
    treatment_strength: float = 1.5
    discount: float = 0.99


@dataclass
class StateSpace:
    """Mixed-radix encoding of (vitals..., treatment flags...) plus two absorbing states."""

    levels: tuple
    n_vitals: int
    names: tuple = field(default=())

    def __post_init__(self):
        self.n_live = int(np.prod(self.levels))
        self.death = self.n_live
        self.discharge = self.n_live + 1
        self.n_states = self.n_live + 2
        self.values = np.array(list(itertools.product(*[range(n) for n in self.levels])))

    def encode(self, values):
        return int(np.ravel_multi_index(tuple(values), self.levels))


def sepsis_state_space(config=None):
    config = config or SepsisLikeConfig()
    levels = tuple(config.vital_levels) + (2,) * config.n_treatments
    return StateSpace(levels, len(config.vital_levels))


def make_synthetic_sepsis_like(config=None, rng=None):
    """Random vital-sign dynamics with treatment effects and absorbing outcomes.

    Each vital moves independently given (current value, treatments): logits
    penalize large jumps, carry seeded random offsets, and each treatment pulls
    its own vital toward normal when abnormal but pushes it off normal
    otherwise.  The action is a bit vector of treatments and becomes the next
    state's flags.  Next vitals that are all normal lead to discharge;
    ``death_threshold`` or more abnormal vitals lead to death.
    """
    config = config or SepsisLikeConfig()
    rng = as_rng(rng)
    levels = tuple(config.vital_levels)
    if not levels or config.n_treatments < 1 or any(n < 2 for n in levels):
        raise ValueError("need at least one vital with two or more levels and one treatment")
    if len(config.normal_level) != len(levels) or \
            any(not 0 <= m < n for m, n in zip(config.normal_level, levels)):
        raise ValueError("normal_level must give one valid level per vital")
    space = sepsis_state_space(config)
    n_vitals = space.n_vitals
    n_actions = 2 ** config.n_treatments
    actions = np.array(list(itertools.product(range(2), repeat=config.n_treatments)))

    kernels = []  # kernels[v][current, action] -> distribution over next level
    for v, n in enumerate(config.vital_levels):
        lv = np.arange(n)
        base = -config.stickiness * np.abs(lv[None, :] - lv[:, None]) \
            + config.kernel_noise * rng.standard_normal((n, n))
        side = 0.5 * config.kernel_noise * rng.standard_normal((config.n_treatments, n))
        # own treatment: pull an abnormal vital to normal, push a normal one off it
        aim = np.where(lv == config.normal_level[v], (config.normal_level[v] + 1) % n,
                       config.normal_level[v])
        own = -config.treatment_strength * np.abs(lv[None, :] - aim[:, None])
        on = actions[:, v % config.n_treatments].astype(float)
        logits = base[:, None, :] + (actions @ side)[None, :, :] \
            + on[None, :, None] * own[:, None, :]
        logits -= logits.max(axis=-1, keepdims=True)
        k = np.exp(logits)
        kernels.append(k / k.sum(axis=-1, keepdims=True))

    vital_combos = np.array(list(itertools.product(*[range(n) for n in config.vital_levels])))
    abnormal = (vital_combos != np.array(config.normal_level)).sum(axis=1)
    t = np.zeros((space.n_states, n_actions, space.n_states))
    for s in range(space.n_live):
        cur = space.values[s][:n_vitals]
        for a in range(n_actions):
            probs = np.ones(len(vital_combos))
            for v in range(n_vitals):
                probs *= kernels[v][cur[v], a][vital_combos[:, v]]
            for combo, pr, ab in zip(vital_combos, probs, abnormal):
                if ab == 0:
                    t[s, a, space.discharge] += pr
                elif ab >= config.death_threshold:
                    t[s, a, space.death] += pr
                else:
                    t[s, a, space.encode(tuple(combo) + tuple(actions[a]))] += pr
    for s in (space.death, space.discharge):
        t[s, :, s] = 1.0

    reward = np.zeros(space.n_states)
    reward[space.death] = config.death_reward
    reward[space.discharge] = config.discharge_reward
    return TabularMDP(t, reward, (space.death, space.discharge), config.discount).validate()


def state_reward_draw(space, rng=None, death_reward=-4.0, discharge_reward=4.0):
    """Per-variable-value standard normal rewards, summed over a state's variables."""
    rng = as_rng(rng)
    tables = [rng.standard_normal(n) for n in space.levels]
    live = sum(tables[i][space.values[:, i]] for i in range(len(space.levels)))
    return np.concatenate([live, [death_reward, discharge_reward]])


# --------------------------------------------------------------------------- policies

def policy_evaluation(mdp, policy):
    """Exact state values of a stochastic ``policy[s, a]`` by a linear solve."""
    reward = expected_reward(mdp)
    p_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, reward)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * p_pi, r_pi)


def expected_reward(mdp):
    reward = mdp.transition @ mdp.state_reward
    reward[list(mdp.absorbing)] = 0.0
    return reward


def q_values(mdp, values):
    return expected_reward(mdp) + mdp.discount * (mdp.transition @ values)


def bellman_residual(mdp, values):
    return float(np.abs(q_values(mdp, values).max(axis=1) - values).max())


def policy_iteration(mdp, max_iter=1000, tol=1e-12):
    """Deterministic optimal policy as an ``(S, A)`` one-hot array.

    Improvement keeps the current action unless another beats it by more than
    ``tol``; ties otherwise go to the lowest action index.
    """
    if mdp.discount >= 1:
        raise ValueError("policy iteration needs discount < 1")
    n, a = mdp.n_states, mdp.n_actions
    actions = np.zeros(n, dtype=np.intp)
    for it in range(max_iter):
        policy = np.eye(a)[actions]
        values = policy_evaluation(mdp, policy)
        q = q_values(mdp, values)
        best = q.max(axis=1)
        current = q[np.arange(n), actions]
        improve = current < best - tol * np.maximum(1.0, np.abs(best))
        if not improve.any():
            residual = bellman_residual(mdp, values)
            if residual > 1e-8:
                raise PolicyIterationError(f"stable policy with Bellman residual {residual:.3g}")
            return policy
        actions = np.where(improve, q.argmax(axis=1), actions)
    raise PolicyIterationError(f"no convergence after {max_iter} iterations")


def epsilon_greedy(policy, epsilon):
    a = policy.shape[1]
    return (1 - epsilon) * policy + epsilon / a


# --------------------------------------------------------------------------- data

@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __len__(self):
        return len(self.states)


def sample_trajectories(mdp, policy, n, max_t, rng=None, start=None):
    """Roll out ``n`` trajectories; each stops on entering an absorbing state or at ``max_t``.

    ``start`` is an initial-state distribution (uniform over live states by default).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = as_rng(rng)
    s_count = mdp.n_states
    absorbing = np.zeros(s_count, dtype=bool)
    absorbing[list(mdp.absorbing)] = True
    if start is None:
        start = (~absorbing).astype(float)
    start = np.asarray(start, dtype=float) / np.sum(start)
    pol_cdf = np.cumsum(policy, axis=1)
    t_cdf = np.cumsum(mdp.transition, axis=2)

    state = rng.choice(s_count, size=n, p=start)
    alive = ~absorbing[state]
    steps = []
    for _ in range(max_t):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        s = state[idx]
        a = np.minimum((rng.random((len(idx), 1)) > pol_cdf[s]).sum(axis=1), mdp.n_actions - 1)
        nxt = np.minimum((rng.random((len(idx), 1)) > t_cdf[s, a]).sum(axis=1), s_count - 1)
        steps.append((idx, s, a, nxt))
        state[idx] = nxt
        alive[idx] = ~absorbing[nxt]

    per = [([], [], []) for _ in range(n)]
    for idx, s, a, nxt in steps:
        for i, si, ai, ni in zip(idx, s, a, nxt):
            per[i][0].append(si)
            per[i][1].append(ai)
            per[i][2].append(ni)
    return [Trajectory(np.array(s, dtype=np.intp), np.array(a, dtype=np.intp),
                       np.array(ns, dtype=np.intp)) for s, a, ns in per]


def write_trajectories(trajectories, path, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["traj_id", "t", "state", "action", "next_state"])
        for i, tr in enumerate(trajectories):
            for t, (s, a, ns) in enumerate(zip(tr.states, tr.actions, tr.next_states)):
                writer.writerow([i, t, int(s), int(a), int(ns)])
    return path


def read_trajectories(path):
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        if reader.fieldnames != ["traj_id", "t", "state", "action", "next_state"]:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for r in reader:
            rows.setdefault(int(r["traj_id"]), []).append(
                (int(r["t"]), int(r["state"]), int(r["action"]), int(r["next_state"])))
    out = []
    for i in range(max(rows) + 1 if rows else 0):
        steps = sorted(rows.get(i, []))
        arr = np.array([s[1:] for s in steps], dtype=np.intp).reshape(-1, 3)
        out.append(Trajectory(arr[:, 0], arr[:, 1], arr[:, 2]))
    return out


def transition_counts(trajectories, n_states, n_actions):
    counts = np.zeros((n_states, n_actions, n_states))
    for tr in trajectories:
        np.add.at(counts, (tr.states, tr.actions, tr.next_states), 1.0)
    return counts


def estimate_mdp(trajectories, n_states, n_actions, smoothing=0.0, absorbing=(),
                 state_reward=None, discount=0.99):
    """Maximum-likelihood kernel with additive smoothing; unseen (s, a) fall back to uniform."""
    if not trajectories:
        raise ValueError("no trajectories")
    counts = transition_counts(trajectories, n_states, n_actions) + smoothing
    totals = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(totals > 0, counts / totals, 1.0 / n_states)
    for s in absorbing:
        t[s] = 0.0
        t[s, :, s] = 1.0
    if state_reward is None:
        state_reward = np.zeros(n_states)
    return TabularMDP(t, state_reward, absorbing, discount).validate()


# --------------------------------------------------------------------------- query pairs

def extract_query_pairs(trajectories, mdp_hat, behavior, target, min_support=4, counts=None):
    """One ``(l1, l2, context)`` per observed step whose two kernels both have enough support.

    ``l1`` is the log-kernel at ``(s, a_doctor)`` and ``l2`` the log-kernel at
    ``(s, argmax target[s])``.  ``behavior`` is accepted for symmetry with the
    data-collection policy and recorded in the context.  When ``counts`` are
    given, steps whose target kernel was never observed are skipped.
    """
    if min_support < 1:
        raise ValueError("min_support must be >= 1")
    t = mdp_hat.transition
    support = (t > 0).sum(axis=-1)
    greedy = np.argmax(target, axis=1)
    out = []
    for tr in trajectories:
        for s, a, ns in zip(tr.states, tr.actions, tr.next_states):
            a_t = greedy[s]
            if support[s, a] < min_support or support[s, a_t] < min_support:
                continue
            if counts is not None and counts[s, a_t].sum() == 0:
                continue
            with np.errstate(divide="ignore"):
                l1, l2 = np.log(t[s, a]), np.log(t[s, a_t])
            out.append((l1, l2, {"state": int(s), "a_doctor": int(a), "a_target": int(a_t),
                                 "next_state": int(ns),
                                 "behavior_prob": float(behavior[s, a])}))
    return out


def restrict_to_support(l1, l2, width=None):
    """Drop outcomes impossible under both kernels; pad with ``-inf`` up to ``width``.

    Returns ``(l1_small, l2_small, index)`` where ``index[i]`` is the original
    outcome of position ``i`` (``-1`` for padding).
    """
    idx = np.flatnonzero(np.isfinite(l1) | np.isfinite(l2))
    width = len(idx) if width is None else width
    if width < len(idx):
        raise ValueError(f"union support {len(idx)} exceeds width {width}")
    a = np.full(width, -np.inf)
    b = np.full(width, -np.inf)
    a[:len(idx)], b[:len(idx)] = l1[idx], l2[idx]
    index = np.full(width, -1)
    index[:len(idx)] = idx
    return a, b, index


def select_pairs(pairs, n_pairs=6):
    """Distinct ``(s, a_doctor, a_target)`` queries with ``a_doctor != a_target``, largest support first."""
    seen = {}
    for l1, l2, ctx in pairs:
        if ctx["a_doctor"] == ctx["a_target"]:
            continue
        key = (ctx["state"], ctx["a_doctor"], ctx["a_target"])
        seen.setdefault(key, (l1, l2, ctx))
    ranked = sorted(seen.values(), key=lambda p: (
        -int((np.isfinite(p[0]) | np.isfinite(p[1])).sum()),
        p[2]["state"], p[2]["a_doctor"]))
    return ranked[:n_pairs]


# --------------------------------------------------------------------------- experiment

SETTINGS = ("joint", "counterfactual")


def treatment_effect_experiment(pairs, mechanism, setting, h, n_samples=2000, n_seeds=10,
                                seed=0, resample_observed=False):
    """Variance of ``h(x) - h(y)`` per (pair, seed) under one mechanism.

    ``pairs`` holds ``(l1, l2, context)``.  In the joint setting ``(x, y)`` come
    from shared noise.  In the counterfactual setting ``x`` is the observed
    ``context["x_obs"]`` (or, with ``resample_observed``, a fresh draw from
    ``softmax(l1)``) and ``y`` the mechanism's counterfactual.  ``h`` is one
    score vector or a list with one per pair.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    rows = []
    for pid, (l1, l2, ctx) in enumerate(pairs):
        hp = np.asarray(h[pid] if isinstance(h, (list, tuple)) else h, dtype=float)
        mech = mechanism(pid) if callable(mechanism) and not hasattr(mechanism, "sample_pairs") \
            else mechanism
        for sd in range(n_seeds):
            rng = np.random.default_rng([seed, pid, sd])
            if setting == "joint":
                x, y = mech.sample_pairs(l1, l2, n_samples, rng)
            else:
                if resample_observed:
                    p = np.exp(l1 - np.max(l1))
                    x = rng.choice(len(l1), size=n_samples, p=p / p.sum())
                else:
                    x = np.full(n_samples, ctx["x_obs"], dtype=np.intp)
                y = mech.counterfactual(l1, l2, x, rng)
            d = hp[x] - hp[y]
            rows.append({"mechanism": getattr(mech, "name", str(mech)), "setting": setting,
                         "pair_id": pid, "seed": sd, "mean_diff": float(d.mean()),
                         "variance": float(d.var(ddof=1))})
    return rows


RESULT_FIELDS = ["mechanism", "setting", "pair_id", "seed", "mean_diff", "variance"]


def write_results(rows, path, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
