"""Acceptance battery AC-1..AC-8, shared by ``pevdn verify`` and the test suite.

Every check is hermetic: fixed seeds, in-process transport, bounded
runtime.  Training runs are memoized per process so criteria that compare
the same (mode, seed, config) cells do not train them twice.
"""

from __future__ import annotations

import itertools
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import dp, mpc
from .config import Mode, RunConfig
from .env import make_env
from .field import DEFAULT_FIELD, TEST_FIELD
from .train import Trainer, train

SEEDS = (0, 1, 2, 3, 4)
TOY_STEPS = 40_000
TOY_EVAL = 500

# PE-VDN C operating point for the climbing game: eps(500) = 6.13 at
# noise multiplier 1.5, so throughput 2.5 gives eps_tilde = 2.45
DP_OVERRIDES = {"noise_multiplier": 1.5, "buffer_throughput": 2.5, "delta": 1e-5}


@dataclass
class Outcome:
    key: str
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{self.key} {'PASS' if self.passed else 'FAIL'} ({self.seconds:.1f}s) {self.title}: {self.detail}"


_RUNS: dict = {}


def toy_config(mode, seed: int, **overrides) -> RunConfig:
    base = dict(mode=mode, env="climbing", seed=seed, max_steps=TOY_STEPS, eval_interval=TOY_EVAL)
    if Mode(mode) == Mode.PEVDN_C:
        base.update(DP_OVERRIDES)
    base.update(overrides)
    return RunConfig(**base)


def cached_run(mode, seed: int, **overrides):
    key = (Mode(mode), seed, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        _RUNS[key] = train(toy_config(mode, seed, **overrides))
    return _RUNS[key]


def clear_cache():
    _RUNS.clear()


# -- AC-1 / AC-2: dual-run comparisons -------------------------------------------

def _trajectory(mode, seed, iterations, capture):
    cfg = RunConfig(mode=mode, env="climbing", seed=seed, max_steps=iterations,
                    eval_interval=iterations, eval_episodes=1)
    out = []
    Trainer(cfg, observer=lambda tr, info: out.append(capture(tr, info))).run()
    return out


def ac1(iterations: int = 500, seed: int = 0) -> Outcome:
    """Mode A and Vanilla VDN parameter trajectories agree at every iteration."""
    snap = lambda tr, info: np.concatenate([a.params.flat for a in tr.agents])  # noqa: E731
    ref = _trajectory(Mode.VANILLA_VDN, seed, iterations, snap)
    dec = _trajectory(Mode.PEVDN_A, seed, iterations, snap)
    if len(ref) != len(dec):
        return Outcome("AC-1", "decentralization exactness", False,
                       f"iteration counts differ ({len(ref)} vs {len(dec)})")
    worst = max(float(np.max(np.abs(a - b))) for a, b in zip(ref, dec))
    return Outcome("AC-1", "decentralization exactness", worst <= 1e-9,
                   f"max |dtheta| over {len(ref)} iterations = {worst:.3g} (gate 1e-9)",
                   values={"max_abs_diff": worst, "iterations": len(ref)})


def ac2(iterations: int = 500, seed: int = 0) -> Outcome:
    """Term A under secret sharing stays within N * 10^-PRECISION of plaintext."""
    def terms(tr, info):
        return [np.asarray(t, dtype=np.float64) for t in info.term_a]

    plain = _trajectory(Mode.PEVDN_A, seed, iterations, terms)
    secure = _trajectory(Mode.PEVDN_B, seed, iterations, terms)
    cfg = RunConfig(env="climbing")
    n, precision = make_env(cfg.env_options()).spec.n_agents, cfg.precision
    bound = n * 10.0 ** -precision
    worst, compared = 0.0, 0
    for a_views, b_views in zip(plain, secure):
        for a, b in zip(a_views, b_views):
            if a.shape != b.shape:
                return Outcome("AC-2", "MPC quantization bound", False, "minibatch shapes diverged")
            if a.size:
                worst = max(worst, float(np.max(np.abs(a - b))))
                compared += a.size
    ok = worst <= bound and len(plain) == len(secure)
    return Outcome("AC-2", "MPC quantization bound", ok,
                   f"max |A_B - A_A| = {worst:.3g} over {compared} values (gate {bound:.0e})",
                   values={"max_abs_diff": worst, "bound": bound, "compared": compared})


# -- AC-3 / AC-4: secret sharing -------------------------------------------------

class FixedMasks:
    """Generator stand-in that hands out preset masks to ``PrimeField.share``."""

    def __init__(self, masks):
        self.masks = np.asarray(masks, dtype=np.uint64)

    def integers(self, low, high, size=None, dtype=np.uint64):
        if tuple(np.atleast_1d(size)) != self.masks.shape:
            raise ValueError(f"asked for {size}, holding {self.masks.shape}")
        return self.masks


def ac3(random_cases: int = 100_000, seed: int = 3) -> Outcome:
    failures = []
    f = TEST_FIELD
    p = f.p
    secrets = np.arange(p, dtype=np.uint64)
    for n in (2, 3, 4):
        rng = np.random.default_rng((seed, n))
        # every secret against every value of the first mask; any further masks random
        s = np.repeat(secrets, p)
        first = np.tile(secrets, p)
        rest = rng.integers(0, p, size=(n - 2, s.size), dtype=np.uint64)
        masks = np.concatenate([first[None], rest]) if n > 2 else first[None]
        shares = f.share(s, n, FixedMasks(masks))
        if not np.array_equal(f.reconstruct(shares), s):
            failures.append(f"reconstruction p=257 n={n}")
        # pairwise homomorphism over all (s1, s2)
        s1, s2 = np.repeat(secrets, p), np.tile(secrets, p)
        sh1, sh2 = f.share(s1, n, rng), f.share(s2, n, rng)
        summed = f.add(sh1, sh2)
        if not np.array_equal(f.reconstruct(summed), (s1 + s2) % np.uint64(p)):
            failures.append(f"homomorphism p=257 n={n}")
    big = DEFAULT_FIELD
    rng = np.random.default_rng((seed, 61))
    per_n = random_cases // 4
    for n in (2, 3, 4, 5):
        s1 = big.random(rng, per_n)
        s2 = big.random(rng, per_n)
        sh1, sh2 = big.share(s1, n, rng), big.share(s2, n, rng)
        if not np.array_equal(big.reconstruct(sh1), s1):
            failures.append(f"reconstruction p=2^61-1 n={n}")
        if not np.array_equal(big.reconstruct(big.add(sh1, sh2)), big.add(s1, s2)):
            failures.append(f"homomorphism p=2^61-1 n={n}")
    detail = "zero failures" if not failures else "failed: " + ", ".join(failures)
    return Outcome("AC-3", "secret-sharing correctness", not failures, detail)


def ac4(transcripts: int = 10_000, n: int = 3, alpha: float = 0.01, seed: int = 4) -> Outcome:
    f = DEFAULT_FIELD
    secrets = (f.encode(0.0), f.encode(123.45678))
    samples = []
    for k, s in enumerate(secrets):
        rng = np.random.default_rng((seed, k))
        samples.append(f.share(np.full(transcripts, s, dtype=np.uint64), n, rng))
    worst_p, tests = 1.0, 0
    for size in range(1, n):
        for subset in itertools.combinations(range(n), size):
            views = []
            for sh in samples:
                cols = [sh[j] for j in subset]
                if size > 1:
                    cols.append(f.sum(np.stack(cols)))
                views.append(cols)
            for c0, c1 in zip(*views):
                pval = stats.ks_2samp(c0 / f.p, c1 / f.p).pvalue
                worst_p = min(worst_p, pval)
                tests += 1
    # masks are drawn before the secret is read: same stream, different secrets, same masks
    a = f.share(np.uint64(secrets[0]), n, np.random.default_rng(99))
    b = f.share(np.uint64(secrets[1]), n, np.random.default_rng(99))
    structural = bool(np.array_equal(a[: n - 1], b[: n - 1]))
    ok = worst_p > alpha and structural
    return Outcome("AC-4", "share secrecy", ok,
                   f"min KS p-value {worst_p:.3f} over {tests} marginals (alpha {alpha}); "
                   f"masks independent of secret: {structural}",
                   values={"min_pvalue": worst_p, "tests": tests})


# -- AC-5: DP mechanics ------------------------------------------------------------

def mc_moment(q: float, sigma: float, lam: int, samples: int = 10_000_000, seed: int = 5,
              chunk: int = 1_000_000):
    """Monte-Carlo means and standard errors of the two accountant moments."""
    rng = np.random.default_rng(seed)
    out = []
    for which in (0, 1):
        total, total_sq, count = 0.0, 0.0, 0
        while count < samples:
            m = min(chunk, samples - count)
            z = rng.normal(0.0, sigma, m)
            if which == 1:
                z = z + (rng.random(m) < q)
            log_ratio = np.logaddexp(math.log1p(-q), math.log(q) + (2 * z - 1) / (2 * sigma ** 2))
            v = np.exp(-lam * log_ratio) if which == 0 else np.exp(lam * log_ratio)
            total += v.sum()
            total_sq += (v * v).sum()
            count += m
        mean = total / count
        se = math.sqrt(max(total_sq / count - mean * mean, 0.0) / count)
        out.append((mean, se))
    return out


def ac5(seed: int = 5) -> Outcome:
    rng = np.random.default_rng(seed)
    checks = {}
    # clipping bound on vectors of widely varying scale
    g = rng.normal(size=(10_000, 16)) * 10.0 ** rng.uniform(-3, 3, size=(10_000, 1))
    c = 1.0
    norms = np.array([np.linalg.norm(dp.clip(v, c)) for v in g])
    checks["clip"] = bool(np.all(norms <= c * (1 + 1e-12)))
    # Poisson minibatch size
    buffer_len, q, trials = 5000, 0.02, 1000
    sizes = np.array([len(dp.poisson_sample(buffer_len, q, rng)) for _ in range(trials)])
    sd = math.sqrt(buffer_len * q * (1 - q) / trials)
    checks["poisson"] = abs(sizes.mean() - buffer_len * q) <= 3 * sd
    # update gate
    hits = sum(dp.update_gate(4.0, rng) for _ in range(10_000))
    checks["gate"] = abs(hits / 10_000 - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 10_000)
    # noise moments
    sigma, draws = 2.0, 10_000
    base = rng.normal(size=8)
    noisy = np.stack([dp.noise(base, sigma, rng) for _ in range(draws)])
    checks["noise_mean"] = bool(np.all(np.abs(noisy.mean(axis=0) - base) <= 3 * sigma / 100))
    checks["noise_var"] = bool(np.all(np.abs(noisy.var(axis=0, ddof=1) / sigma ** 2 - 1) <= 0.10))
    # accountant against the q = 1 closed form
    worst_rel = 0.0
    for s in (1.0, 2.0, 4.0):
        for lam in range(1, 33):
            exact = lam * (lam + 1) / (2 * s * s)
            worst_rel = max(worst_rel, abs(dp.log_moment(1.0, s, lam) - exact) / exact)
    checks["closed_form"] = worst_rel <= 0.01
    # accountant against the Monte-Carlo oracle
    (m1, se1), (m2, se2) = mc_moment(0.01, 1.0, 2)
    numeric = math.exp(dp.log_moment(0.01, 1.0, 2))
    mc, se = (m1, se1) if m1 >= m2 else (m2, se2)
    checks["monte_carlo"] = abs(numeric - mc) <= 3 * se
    # ledger scaling
    cfg = dp.DPConfig(noise_multiplier=1.5, delta=1e-4, buffer_size=500, buffer_throughput=4.0)
    eps_t, delta_t = dp.replay_ledger(cfg)
    raw = dp.epsilon_for(cfg.buffer_size, cfg.sample_rate, cfg.noise_multiplier, cfg.delta)
    checks["ledger"] = eps_t == raw / 4.0 and delta_t == 1e-4 / 4.0
    failed = [k for k, v in checks.items() if not v]
    detail = (f"closed-form rel err {worst_rel:.2g}; MC moment {mc:.8f}+-{3 * se:.1g} vs {numeric:.8f}; "
              + ("all mechanics within bounds" if not failed else "failed: " + ", ".join(failed)))
    return Outcome("AC-5", "DP mechanics", not failed, detail, values={"checks": checks})


# -- AC-6 / AC-8: learning outcomes ------------------------------------------------

def ac6(seeds=SEEDS) -> Outcome:
    finals = {}
    for mode in (Mode.VANILLA_VDN, Mode.PEVDN_A, Mode.PEVDN_B, Mode.IQL):
        finals[mode] = [cached_run(mode, s).final for s in seeds]
    win = {m: float(np.mean([r["win_rate"] for r in rows])) for m, rows in finals.items()}
    iql_below = sum(r["mean_return"] < 11 for r in finals[Mode.IQL])
    vdn_ok = all(win[m] >= 0.9 for m in (Mode.VANILLA_VDN, Mode.PEVDN_A, Mode.PEVDN_B))
    iql_ok = iql_below >= math.ceil(0.8 * len(seeds))
    returns = {m.value: [r["mean_return"] for r in rows] for m, rows in finals.items()}
    detail = (f"final win rate VDN {win[Mode.VANILLA_VDN]:.2f} / A {win[Mode.PEVDN_A]:.2f} / "
              f"B {win[Mode.PEVDN_B]:.2f} (gate 0.90); IQL below 11 in {iql_below}/{len(seeds)} seeds; "
              f"final returns {returns}")
    return Outcome("AC-6", "coordination benefit", vdn_ok and iql_ok, detail,
                   values={"win": {m.value: v for m, v in win.items()}, "returns": returns})


def ac7(steps: int = 1500, seed: int = 7) -> Outcome:
    allowed = {mpc.Kind.INDICES, mpc.Kind.SHARE, mpc.Kind.PARTIAL_SUM}
    problems, scanned = [], 0
    for mode in (Mode.PEVDN_B, Mode.PEVDN_C):
        codes = set()

        def collect(tr, info):
            for m in info.m_values:
                codes.update(int(c) for c in np.atleast_1d(DEFAULT_FIELD.encode(m, tr.cfg.precision)))

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "transcript.bin")
            cfg = RunConfig(mode=mode, env="climbing", seed=seed, max_steps=steps, eval_interval=steps,
                            transcript=path, **(DP_OVERRIDES if mode == Mode.PEVDN_C else {}))
            Trainer(cfg, observer=collect).run()
            with open(path, "rb") as fh:
                messages = mpc.parse_transcript(fh.read())
        kinds = {m.kind for m in messages}
        if not kinds <= allowed:
            problems.append(f"{mode.value} carried {sorted(k.name for k in kinds - allowed)}")
        for m in messages:
            if m.kind == mpc.Kind.INDICES:
                continue  # minibatch positions, not environment data
            scanned += len(m.payload)
            leaked = codes.intersection(int(w) for w in m.payload)
            if leaked:
                problems.append(f"{mode.value} round {m.round_id} payload equals an encoded message")
                break
    detail = (f"{scanned} payload words scanned; only INDICES/SHARE/PARTIAL_SUM seen"
              if not problems else "; ".join(problems))
    return Outcome("AC-7", "no plaintext leakage", not problems, detail, values={"scanned": scanned})


def delta_bound(n_records: int) -> float:
    return 1.0 / n_records ** 1.1


def ac8(seeds=SEEDS, gridworld: bool = True) -> Outcome:
    b_runs = [cached_run(Mode.PEVDN_B, s) for s in seeds]
    c_runs = [cached_run(Mode.PEVDN_C, s) for s in seeds]
    b_ret = float(np.mean([r.final["mean_return"] for r in b_runs]))
    c_ret = float(np.mean([r.final["mean_return"] for r in c_runs]))
    ratio = c_ret / b_ret if b_ret else float("nan")
    eps_t, delta_t = dp.replay_ledger(c_runs[0].config.dp_config())
    n_records = min(r.iterations for r in c_runs)
    ledger_ok = eps_t <= 3.0 and delta_t <= delta_bound(n_records)
    ok = ledger_ok and ratio >= 0.7
    detail = (f"C/B mean final return {c_ret:.3f}/{b_ret:.3f} = {ratio:.3f} (gate 0.7); "
              f"ledger (eps~, delta~) = ({eps_t:.3f}, {delta_t:.2g}) with n = {n_records} episodes, "
              f"1/n^1.1 = {delta_bound(n_records):.2g}; reference point (2.90, 4.9e-04)")
    values = {"ratio": ratio, "epsilon_tilde": eps_t, "delta_tilde": delta_t, "n": n_records}
    if gridworld:
        grid = gridworld_report(seed=seeds[0])
        values["gridworld"] = grid
        detail += (f"; gridworld (reported only) C/B return {grid['C']:.3f}/{grid['B']:.3f}"
                   f" = {grid['ratio']:.3f}")
    return Outcome("AC-8", "DP performance analog", ok, detail, values=values)


GRID_STEPS = 20_000


def gridworld_report(seed: int = 0, steps: int = GRID_STEPS) -> dict:
    out = {}
    for mode, tag in ((Mode.PEVDN_B, "B"), (Mode.PEVDN_C, "C")):
        run = cached_run(mode, seed, env="gridworld", max_steps=steps, eval_interval=steps // 10)
        out[tag] = run.final["mean_return"]
        out[f"{tag}_win"] = run.final["win_rate"]
    out["ratio"] = out["C"] / out["B"] if out["B"] else float("nan")
    return out


CRITERIA: dict[str, Callable[[], Outcome]] = {
    "AC-1": ac1, "AC-2": ac2, "AC-3": ac3, "AC-4": ac4,
    "AC-5": ac5, "AC-6": ac6, "AC-7": ac7, "AC-8": ac8,
}


def run_criterion(key: str) -> Outcome:
    start = time.perf_counter()
    outcome = CRITERIA[key]()
    outcome.seconds = time.perf_counter() - start
    return outcome


def run_all(keys=None, echo: Callable[[str], None] | None = print) -> list[Outcome]:
    results = []
    for key in keys or CRITERIA:
        outcome = run_criterion(key)
        if echo is not None:
            echo(outcome.line())
        results.append(outcome)
    return results
