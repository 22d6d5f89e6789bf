"""Acceptance suite: one test per primary criterion, each printing a single
PASS/FAIL line (collected again in the terminal summary)."""

import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from budgetrl.cli import main
from budgetrl.curation import HISTOGRAM_BUCKETS, curate, histogram
from budgetrl.experiments import algorithm_comparison, curriculum_comparison, format_table, summarize
from budgetrl.objective import (ObjectiveConfig, balance_loss_and_grad, c3po_loss, entropy_reg, group_advantages,
                                grpo_loss, grpo_table, z_loss_and_grad)
from budgetrl.policy import PolicyParams, Vocabulary, forward, imprint
from budgetrl.rewards import Problem, TestCase, reward
from budgetrl.scheduler import select_budget
from budgetrl.tasks import GeneratorSpec, gen_code, gen_math, gen_science
from budgetrl.trainer import Stage, TrainerConfig, init_state, run_stage

from conftest import fake_batch, gradient_error, length_batch, small_params

pytestmark = pytest.mark.slow

# Heavy-tailed arithmetic workload shared by the budget and stability checks.
HEAVY = GeneratorSpec("math", 64, seed=0, operand_max=9, length_profile="heavy_tailed", len_min=4, len_max=64)
HEAVY_CFG = TrainerConfig(prompts_per_step=8, group_size=8, learning_rate=0.03, max_response_len=72,
                          vocab="arithmetic", hash_buckets=4096, objective=ObjectiveConfig(token_budget=256))

# Depth-1 addition task used for the learning check. Few prompts with large groups:
# each group then samples the rare correct digit often enough to escape collapse.
LEARN_TASK = GeneratorSpec("math", 25, seed=0, operand_max=4)
LEARN_CFG = TrainerConfig(prompts_per_step=2, group_size=128, learning_rate=0.03, max_response_len=4,
                          vocab="arithmetic", hash_buckets=4096, objective=ObjectiveConfig(token_budget=1024))
LEARN_STEPS = 500
LEARN_WINDOW = 20


# ---------------------------------------------------------------------------
# budget invariant
# ---------------------------------------------------------------------------


def test_budget_invariant(criterion):
    problems = gen_math(HEAVY)
    start = time.perf_counter()
    _, rows = run_stage(init_state(HEAVY_CFG), Stage("heavy", ("math",), 200), problems, HEAVY_CFG)
    elapsed = time.perf_counter() - start
    tokens = np.array([m.tokens_selected for m in rows])
    generated = np.array([m.tokens_selected + m.tokens_discarded for m in rows])
    phi = HEAVY_CFG.objective.token_budget
    ok = (len(rows) == 200 and np.all(tokens == phi) and tokens.var() == 0.0 and np.all(generated > phi)
          and not any(m.underbudget for m in rows) and elapsed < 120)
    criterion("budget invariant", ok,
              f"200 steps, tokens_selected={sorted(set(tokens.tolist()))} (Phi={phi}), var={tokens.var()}, "
              f"generated {generated.min()}..{generated.max()} tokens/step, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# greedy selection
# ---------------------------------------------------------------------------


def prefix_scan_oracle(lengths, budget):
    """Smallest prefix whose total reaches the budget, and the tokens the
    last member contributes."""
    total = 0
    for n, length in enumerate(lengths, start=1):
        if total + length >= budget:
            return n, budget - total
        total += length
    return len(lengths), None


def test_greedy_selection(criterion):
    rng = np.random.default_rng(2024)
    failures = 0
    for trial in range(10_000):
        K = int(rng.integers(1, 9))
        L = int(rng.integers(1, 9))
        lengths = rng.integers(0, 80, size=L * K)
        if trial % 7 == 0:  # occasional heavy tail
            lengths = np.minimum(rng.pareto(1.1, L * K) * 10, 2000).astype(int)
        budget = int(rng.integers(1, max(2, int(lengths.sum() * 1.2) + 2)))
        order = "natural" if trial % 2 else "seeded_shuffle"
        batch = length_batch(lengths.tolist(), K)
        sel = select_budget(batch, budget, order, seed=trial)
        picked = [e.length for e in sel.entries]
        if order == "natural":
            expected_refs = [r for r in batch.refs() if batch.response(r).length > 0]
            ok = [e.ref for e in sel.entries] == expected_refs[:len(picked)]
            eligible = [batch.response(r).length for r in expected_refs]
        else:
            ok = len({e.ref for e in sel.entries}) == len(picked)
            eligible = picked + [batch.response(r).length for r in batch.refs()
                                 if r not in {e.ref for e in sel.entries} and batch.response(r).length > 0]
        n, last = prefix_scan_oracle(eligible, budget)
        if last is None:  # total below budget: everything, untruncated
            ok &= sel.underbudget and sel.total_tokens == sum(eligible) and len(picked) == len(eligible)
            ok &= all(e.included == e.length for e in sel.entries)
        else:
            cum = np.cumsum(picked)
            ok &= len(picked) == n and sel.entries[-1].included == last
            ok &= (n == 1 or cum[-2] < budget) and budget <= cum[-1]
            ok &= sel.total_tokens == budget and not sel.underbudget
            ok &= all(e.included == e.length for e in sel.entries[:-1])
        failures += not ok
    criterion("greedy selection", failures == 0, f"10000 instances, {failures} disagreements with prefix-scan oracle")


# ---------------------------------------------------------------------------
# GRPO / C3PO equivalence
# ---------------------------------------------------------------------------


def test_grpo_c3po_equivalence(criterion):
    worst_loss = worst_grad = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = small_params(seed)
        ref = small_params(seed + 5000, scale=0.3)
        L, K, ell = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 8))
        batch = fake_batch(params, seed, L, K, lengths=[ell] * (L * K))
        phi = L * K * ell
        cfg = ObjectiveConfig(token_budget=phi, alpha_entropy=0.0, alpha_balance=0.0, alpha_zloss=0.0,
                              kl_beta=0.0)
        g_br, g_grad = grpo_loss(batch, params, ref, cfg)
        c_br, c_grad = c3po_loss(select_budget(batch, phi, seed=seed), batch, params, ref, cfg)
        worst_loss = max(worst_loss, abs(g_br.policy_term - c_br.policy_term))
        worst_grad = max(worst_grad, float(np.max(np.abs(g_grad.flat() - c_grad.flat()))))
    criterion("grpo/c3po equivalence", worst_loss < 1e-12 and worst_grad < 1e-12,
              f"100 equal-length batches, max |dloss|={worst_loss:.2e}, max |dgrad|={worst_grad:.2e}")


# ---------------------------------------------------------------------------
# gradient fidelity
# ---------------------------------------------------------------------------


def _instance(seed):
    rng = np.random.default_rng(seed)
    params = small_params(seed, scale=float(rng.uniform(0.2, 1.0)))
    ref = small_params(seed + 10_000, scale=0.4)
    batch = fake_batch(params, seed, int(rng.integers(1, 4)), int(rng.integers(2, 5)))
    return rng, params, ref, batch


def _grpo_case(seed):
    rng, params, ref, batch = _instance(seed)
    cfg = ObjectiveConfig(kl_beta=0.05, alpha_entropy=0.0, alpha_balance=0.0, alpha_zloss=0.0)
    return rng, params, lambda p: grpo_loss(batch, p, ref, cfg)


def _c3po_case(seed):
    rng, params, ref, batch = _instance(seed)
    phi = max(1, int(batch.total_tokens * rng.uniform(0.3, 1.0)))
    sel = select_budget(batch, phi, seed=seed)
    cfg = ObjectiveConfig(token_budget=phi, kl_beta=0.05, alpha_entropy=0.0, alpha_balance=0.0, alpha_zloss=0.0)
    return rng, params, lambda p: c3po_loss(sel, batch, p, ref, cfg)


def _entropy_case(seed):
    rng, params, _, batch = _instance(seed)
    table = grpo_table(batch, params)
    return rng, params, lambda p: entropy_reg(p, table, with_grad=True)


def _balance_case(seed):
    rng, params, _, batch = _instance(seed)
    table = grpo_table(batch, params)
    variant = "literal" if seed % 2 else "switch"
    return rng, params, lambda p: balance_loss_and_grad(p, table, variant)


def _zloss_case(seed):
    rng, params, _, batch = _instance(seed)
    table = grpo_table(batch, params)
    return rng, params, lambda p: z_loss_and_grad(p, table)


def _total_case(seed):
    rng, params, ref, batch = _instance(seed)
    phi = max(1, batch.total_tokens - int(rng.integers(0, 4)))
    sel = select_budget(batch, phi, seed=seed)
    cfg = ObjectiveConfig(token_budget=phi, kl_beta=0.05, alpha_entropy=0.1, alpha_balance=0.2, alpha_zloss=0.05,
                          balance_variant=["literal", "switch"][seed % 2],
                          entropy_sign=["bonus", "penalty"][(seed // 2) % 2])
    return rng, params, lambda p: c3po_loss(sel, batch, p, ref, cfg)


def _scalar(value):
    return value.total if hasattr(value, "total") else float(value)


# The balance loss is piecewise smooth (top-k routing counts jump), so its
# stencil stays well inside one routing region.
@pytest.mark.parametrize("name, case, h", [("grpo", _grpo_case, 2e-4), ("c3po", _c3po_case, 2e-4),
                                           ("entropy", _entropy_case, 2e-4), ("balance", _balance_case, 1e-5),
                                           ("z_loss", _zloss_case, 2e-4), ("total", _total_case, 2e-4)])
def test_gradient_fidelity(criterion, name, case, h):
    worst = 0.0
    for seed in range(60):
        rng, params, fn = case(seed)
        value, grad = fn(params)

        def f(x):
            return _scalar(fn(params.with_flat(x))[0])

        worst = max(worst, gradient_error(f, params.flat(), grad.flat(), rng, h=h))
    criterion(f"gradient fidelity [{name}]", worst < 1e-5, f"60 instances, max relative error {worst:.2e}")


# ---------------------------------------------------------------------------
# advantage contract
# ---------------------------------------------------------------------------


def test_advantage_contract(criterion):
    rng = np.random.default_rng(7)
    worst_mean = worst_std = 0.0
    for _ in range(1000):
        K = int(rng.integers(2, 33))
        rewards = rng.integers(0, 2, K).astype(float) if rng.random() < 0.5 else rng.normal(0, 3, K)
        if np.all(rewards == rewards[0]):
            rewards[0] = 1.0 - rewards[0]
        A = np.asarray(group_advantages(rewards))
        worst_mean = max(worst_mean, abs(A.mean()))
        worst_std = max(worst_std, abs(A.std() - 1.0))
    equal = [group_advantages(np.full(int(k), v)) for k, v in zip(rng.integers(2, 33, 200), rng.normal(0, 5, 200))]
    zero = all(np.all(np.asarray(a) == 0.0) for a in equal)
    criterion("advantage contract", worst_mean <= 1e-12 and worst_std <= 1e-9 and zero,
              f"1000 groups, max |mean|={worst_mean:.1e}, max |std-1|={worst_std:.1e}, all-equal groups zero={zero}")


# ---------------------------------------------------------------------------
# stability reproduction
# ---------------------------------------------------------------------------


def test_stability_direction(criterion):
    problems = gen_math(HEAVY)
    start = time.perf_counter()
    series = algorithm_comparison(HEAVY_CFG, [Stage("heavy", ("math",), 300)], problems, seeds=range(5))
    elapsed = time.perf_counter() - start
    summary = {algo: [summarize(rows) for rows in runs] for algo, runs in series.items()}
    grad_cv = {a: float(np.mean([s["grad_norm_cv"] for s in summary[a]])) for a in summary}
    tok_cv = {a: float(np.mean([s["tokens_per_step_cv"] for s in summary[a]])) for a in summary}
    ok = (grad_cv["c3po"] < grad_cv["grpo"] and tok_cv["c3po"] == 0.0 and tok_cv["grpo"] > 0.2
          and elapsed < 15 * 60)
    criterion("stability direction", ok,
              f"grad_norm CV c3po={grad_cv['c3po']:.3f} grpo={grad_cv['grpo']:.3f}; "
              f"tokens CV c3po={tok_cv['c3po']:.3f} grpo={tok_cv['grpo']:.3f}; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# learning signal
# ---------------------------------------------------------------------------


def test_learning_signal(criterion):
    problems = gen_math(LEARN_TASK)
    reached = {}
    for seed in range(1, 6):
        cfg = replace(LEARN_CFG, seed=seed)
        _, rows = run_stage(init_state(cfg), Stage("math", ("math",), LEARN_STEPS), problems, cfg)
        r = np.array([m.reward_mean for m in rows])
        assert r[0] < 0.2  # starts from an untrained policy
        window = np.convolve(r, np.ones(LEARN_WINDOW) / LEARN_WINDOW, "valid")
        hits = np.flatnonzero(window >= 0.9)
        reached[seed] = int(hits[0]) + LEARN_WINDOW if hits.size else None
    n = sum(v is not None for v in reached.values())
    criterion("learning signal", n >= 4,
              f"{n}/5 seeds reach a {LEARN_WINDOW}-step mean reward >= 0.9 within {LEARN_STEPS} steps "
              f"(step reached: {reached})")


# ---------------------------------------------------------------------------
# sparse code reward
# ---------------------------------------------------------------------------


def oracle_eval(program: list[str], inputs) -> int | None:
    """Independent postfix interpreter (truncating division)."""
    stack = []
    for tok in program:
        if tok.isdigit():
            stack.append(int(tok))
        elif tok.startswith("x") and tok[1:].isdigit():
            if int(tok[1:]) >= len(inputs):
                return None
            stack.append(int(inputs[int(tok[1:])]))
        else:
            if len(stack) < 2 or tok not in "+-*/":
                return None
            b, a = stack.pop(), stack.pop()
            if tok == "/":
                if b == 0:
                    return None
                stack.append(int(a / b) if abs(a) < 2**52 and abs(b) < 2**52 else None)
            else:
                stack.append({"+": a + b, "-": a - b, "*": a * b}[tok])
    return stack[0] if len(stack) == 1 else None


def test_sparse_code_reward(criterion):
    problems = gen_code(GeneratorSpec("code", 60, seed=11, testcase_count=3, depth=2))
    rng = np.random.default_rng(0)
    checked = mismatches = partial = 0
    for p in problems:
        cases = p.gold
        cands = [p.meta["reference"].split(), ["x0"], ["x1"], ["x0", "x1", "+"], ["x0", "x1", "*"],
                 ["x0", "x1", "-"], ["x0", "x1", "/"], ["+"], []]
        cands += [[str(abs(tc.expected_output))] for tc in cases]
        cands += [list(rng.choice(["x0", "x1", "1", "2", "+", "-", "*", "/"], size=int(rng.integers(1, 6))))
                  for _ in range(6)]
        for prog in cands:
            passes = [oracle_eval(prog, tc.input) == tc.expected_output for tc in cases]
            partial += 0 < sum(passes) < 3
            for k in range(1, 4):
                for subset in itertools.combinations(range(3), k):
                    sub = Problem(p.id, "code", p.prompt, [cases[i] for i in subset])
                    got = reward(f"\\boxed{{ {' '.join(prog)} }}", sub)
                    mismatches += got != float(all(passes[i] for i in subset))
                    checked += 1
    criterion("sparse code reward", mismatches == 0 and partial > 0,
              f"{checked} (program, case-subset) checks over {len(problems)} problems, "
              f"{partial} partially-passing programs, {mismatches} mismatches")


# ---------------------------------------------------------------------------
# curation pipeline
# ---------------------------------------------------------------------------


def _answer_ids(v: Vocabulary, answer: str):
    return v.encode(f"\\boxed{{ {answer} }}") + (v.eos_id,)


def _imprint_rate(params, problem, q):
    """Make the answer digit come out right with probability about ``q``;
    every other slot of the answer is near-deterministic."""
    v = params.vocab
    answer = _answer_ids(v, problem.gold)
    digit_logit = np.log(q * (v.size - 1) / (1 - q))
    logits = [digit_logit if tok == v.id(problem.gold) else 25.0 for tok in answer]
    return imprint(params, v.encode(problem.prompt), answer, logits)


def test_curation_exact_retained_set(criterion):
    v = Vocabulary.default()
    params = PolicyParams.zeros(v, hash_buckets=65536)
    math = gen_math(GeneratorSpec("math", 12, seed=3, operand_max=4))
    easy, hard, mid = math[:4], math[4:8], math[8:]
    for p in easy:
        params = imprint(params, v.encode(p.prompt), _answer_ids(v, p.gold), 25.0)
    for p in hard:
        params = imprint(params, v.encode(p.prompt), _answer_ids(v, str(int(p.gold) + 1)), 25.0)
    for p in mid:
        params = _imprint_rate(params, p, 0.5)
    # fixture precondition: imprints landed without hash collisions between problems
    exact = [_answer_probability(params, v.encode(p.prompt), _answer_ids(v, p.gold)) for p in math]
    assert min(exact[:4]) > 1 - 1e-6 and max(exact[4:8]) < 1e-6 and all(0.3 < q < 0.7 for q in exact[8:])
    junk = [Problem("dup", "math", easy[0].prompt, easy[0].gold), Problem("yn", "math", "Is 9 odd ?", "Yes"),
            Problem("tf", "math", "True or false : 2 > 1", "True"), Problem("empty", "math", "", "3"),
            Problem("dup2", "math", mid[0].prompt + " ?", mid[0].gold)]
    corpus = easy + hard + mid + junk
    kept, report = curate(corpus, params=params, n_samples=32, seed=0, max_len=8)
    expected = [p.id for p in mid]
    removed = report.removed_by_rule
    ok = ([p.id for p in kept] == expected and removed.get("all_correct") == len(easy)
          and removed.get("unsolvable") == len(hard) and removed.get("duplicate") == 2
          and removed.get("binary_answer") == 2 and removed.get("invalid_prompt") == 1
          and report.input_count == report.retained_count + sum(removed.values()))
    criterion("curation retained set", ok, f"retained {[p.id for p in kept]} (expected {expected}); removed {removed}")


def _answer_probability(params, prompt_ids, answer_ids) -> float:
    prob = 1.0
    for t, tok in enumerate(answer_ids):
        prob *= float(forward(params, prompt_ids, answer_ids[:t]).probs[tok])
    return prob


def test_curation_pass_rate_histogram(criterion):
    """Pass rates at n=32 against a Poisson-binomial oracle built from the
    exact per-problem success probability."""
    from scipy.stats import binom

    v = Vocabulary.default()
    params = PolicyParams.zeros(v, hash_buckets=65536)
    problems = gen_math(GeneratorSpec("math", 25, seed=5, operand_max=4))
    rng = np.random.default_rng(1)
    q_target = rng.uniform(0.05, 0.95, len(problems))
    for p, q in zip(problems, q_target):
        params = _imprint_rate(params, p, q)
    exact = np.array([_answer_probability(params, v.encode(p.prompt), _answer_ids(v, p.gold)) for p in problems])
    n = 32
    _, report = curate(problems, params=params, n_samples=n, seed=3, max_len=8, keep_range=(-1.0, 2.0))
    observed = report.pass_rate_histogram
    # distribution of each bucket count: sum of per-problem Bernoullis
    edges = {"0": (0, 0), "(0,0.25]": (1, 8), "(0.25,0.5]": (9, 16), "(0.5,0.75]": (17, 24),
             "(0.75,1)": (25, 31), "1": (32, 32)}
    assert tuple(edges) == HISTOGRAM_BUCKETS
    alpha = 0.05 / len(edges)
    details, ok = [], True
    for bucket, (lo, hi) in edges.items():
        p_in = binom.cdf(hi, n, exact) - binom.cdf(lo - 1, n, exact)
        pmf = np.array([1.0])
        for pi in p_in:
            pmf = np.convolve(pmf, [1 - pi, pi])
        cdf = np.cumsum(pmf)
        low = int(np.searchsorted(cdf, alpha / 2))
        high = int(np.searchsorted(cdf, 1 - alpha / 2))
        count = observed[bucket]
        ok &= low <= count <= high
        details.append(f"{bucket}:{count} in [{low},{high}]")
    # and every per-problem rate lies in its own two-sided 95% binomial band
    rates = [p.meta["pass_rate"] for p in curate(problems, params=params, n_samples=n, seed=3, max_len=8,
                                                 keep_range=(-1.0, 2.0))[0]]
    lo_b = binom.ppf(0.025 / len(exact), n, exact) / n
    hi_b = binom.ppf(1 - 0.025 / len(exact), n, exact) / n
    inside = int(np.sum((np.array(rates) >= lo_b) & (np.array(rates) <= hi_b)))
    ok &= inside == len(rates) and histogram(rates) == observed
    criterion("curation pass-rate histogram", ok,
              f"n={n}, {len(problems)} problems, {'; '.join(details)}; {inside}/{len(rates)} rates in band")


# ---------------------------------------------------------------------------
# two-stage vs mixed curriculum
# ---------------------------------------------------------------------------


def test_two_stage_vs_mixed(criterion):
    # small operands and the arithmetic vocabulary so every domain earns some reward
    # in 200 steps; code answers that need input variables stay out of reach
    pool = (gen_math(GeneratorSpec("math", 16, seed=0, operand_max=3))
            + gen_code(GeneratorSpec("code", 16, seed=0, operand_max=3))
            + gen_science(GeneratorSpec("science", 16, seed=0, operand_max=3)))
    cfg = TrainerConfig(prompts_per_step=2, group_size=64, learning_rate=0.03, max_response_len=5,
                        vocab="arithmetic", hash_buckets=4096, objective=ObjectiveConfig(token_budget=640))
    args = (cfg, pool, pool, ("math",), ("code", "science"), 200, range(5))
    table = curriculum_comparison(*args, eval_samples=8)
    again = curriculum_comparison(*args, eval_samples=8)
    text = format_table(table, ("seed", "plan", "domain", "reward"))
    means = {}
    for plan in ("two_stage", "mixed"):
        for domain in ("math", "code", "science"):
            means[plan, domain] = float(np.mean([r["reward"] for r in table
                                                 if r["plan"] == plan and r["domain"] == domain]))
    print(text)
    direction = ", ".join(f"{d}: two_stage {means['two_stage', d]:.3f} vs mixed {means['mixed', d]:.3f}"
                          for d in ("math", "code", "science"))
    ok = table == again and len(table) == 5 * 2 * 3
    criterion("two-stage vs mixed", ok, f"deterministic table of {len(table)} rows; {direction}")


# ---------------------------------------------------------------------------
# reproducibility
# ---------------------------------------------------------------------------

REPRO_CONFIG = """\
name: repro
seeds: [0, 1]
eval_samples: 2
trainer:
  algorithm: c3po
  prompts_per_step: 4
  group_size: 4
  learning_rate: 0.03
  max_response_len: 24
  vocab: arithmetic
  hash_buckets: 2048
  checkpoint_every: 5
  objective:
    token_budget: 48
    alpha_balance: 1e-5
generators:
  - {domain: math, count: 30, seed: 0, operand_max: 9, length_profile: heavy_tailed, len_min: 2, len_max: 20}
stages:
  - {name: math, domains: [math], steps: 12}
"""


def test_reproducibility(criterion, tmp_path):
    cfg = tmp_path / "repro.yaml"
    cfg.write_text(REPRO_CONFIG)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "first")]) == 0
    assert main(["run", "--config", str(tmp_path / "first" / "manifest.json"), "--out", str(tmp_path / "second")]) == 0
    same = []
    for seed in (0, 1):
        name = f"metrics_seed{seed}.csv"
        same.append((tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes())
    criterion("reproducibility", all(same), f"manifest re-run, byte-identical metrics CSVs per seed: {same}")
