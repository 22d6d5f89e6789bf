from dataclasses import replace

import numpy as np
import pytest

from budgetrl.objective import ObjectiveConfig, token_loss
from budgetrl.policy import ParamGrad, PolicyParams, Vocabulary
from budgetrl.tasks import GeneratorSpec, gen_code, gen_math, gen_science
from budgetrl.trainer import (METRIC_COLUMNS, MetricsWriter, OptimizerError, OptimizerState, Stage, TokenLedger,
                              TrainerConfig, _minibatches, init_state, load_checkpoint, optimizer_step,
                              read_metrics, rollout, run_plan, run_stage, save_checkpoint, token_efficiency,
                              train_step)
from budgetrl.scheduler import select_budget


def tiny_cfg(**kw) -> TrainerConfig:
    base = dict(prompts_per_step=4, group_size=4, learning_rate=0.03, max_response_len=6,
                vocab="arithmetic", hash_buckets=512, objective=ObjectiveConfig(token_budget=48))
    base.update(kw)
    return TrainerConfig(**base)


MATH = gen_math(GeneratorSpec("math", 20, seed=0, operand_max=4))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def _scalar_params(value: float) -> PolicyParams:
    p = PolicyParams.zeros(Vocabulary.arithmetic(), n_experts=1, top_k=1, hash_buckets=1)
    return p.evolve(np.full(p.router.shape, value), np.full(p.experts.shape, value))


def test_zero_gradient_without_decay_leaves_params():
    cfg = tiny_cfg()
    p = _scalar_params(0.5)
    st = OptimizerState.zeros_like(p)
    st = replace(st, m_router=np.ones_like(st.m_router), v_router=np.ones_like(st.v_router))
    new, st2 = optimizer_step(p, ParamGrad.zeros_like(p), st, cfg)
    assert np.array_equal(new.experts, p.experts)
    np.testing.assert_allclose(st2.m_router, 0.9)
    np.testing.assert_allclose(st2.v_router, 0.999)


def test_decoupled_weight_decay_shrinks_params():
    cfg = tiny_cfg(learning_rate=0.01, weight_decay=0.1)
    p = _scalar_params(2.0)
    st = OptimizerState.zeros_like(p)
    for _ in range(5):
        p, st = optimizer_step(p, ParamGrad.zeros_like(p), st, cfg)
    np.testing.assert_allclose(p.router, 2.0 * (1 - 0.01 * 0.1) ** 5, rtol=1e-14)


def test_constant_gradient_gives_lr_sized_steps():
    cfg = tiny_cfg(learning_rate=1e-3)
    p = _scalar_params(0.0)
    st = OptimizerState.zeros_like(p)
    g = ParamGrad(np.full(p.router.shape, 3.7), np.full(p.experts.shape, -0.02))
    prev = p
    for _ in range(50):
        p, st = optimizer_step(p, g, st, cfg)
        step_r = (p.router - prev.router).ravel()[0]
        step_e = (p.experts - prev.experts).ravel()[0]
        prev = p
    assert step_r == pytest.approx(-1e-3, rel=1e-5)
    assert step_e == pytest.approx(1e-3, rel=1e-5)


def test_non_finite_gradient_names_block():
    p = _scalar_params(0.0)
    g = ParamGrad.zeros_like(p)
    g.experts[0, 0, 3] = np.nan
    with pytest.raises(OptimizerError, match="experts"):
        optimizer_step(p, g, OptimizerState.zeros_like(p), tiny_cfg())


# ---------------------------------------------------------------------------
# rollout and steps
# ---------------------------------------------------------------------------


def test_rollout_shape_and_determinism():
    cfg = tiny_cfg(group_size=4)
    params = init_state(cfg).params
    a = rollout(params, MATH[:2], 4, cfg, seed=11)
    b = rollout(params, MATH[:2], 4, cfg, seed=11)
    assert a.prompt_count == 2 and a.group_size == 4
    assert all(r.reward in (0.0, 1.0) for g in a.groups for r in g)
    assert [r.token_ids for g in a.groups for r in g] == [r.token_ids for g in b.groups for r in g]


def test_degenerate_groups_get_zero_advantage_or_are_dropped():
    cfg = tiny_cfg()
    params = init_state(cfg).params
    batch = rollout(params, MATH[:3], 4, cfg, seed=0)       # uniform policy: nobody is correct
    assert all(r.advantage == 0.0 for g in batch.groups for r in g)
    dropped = rollout(params, MATH[:3], 4, replace(cfg, objective=ObjectiveConfig(
        token_budget=48, degenerate_group_mode="drop_group")), seed=0)
    assert dropped.prompt_count == 0


def test_c3po_step_trains_exactly_the_budget():
    cfg = tiny_cfg(objective=ObjectiveConfig(token_budget=20))
    state = init_state(cfg)
    for _ in range(3):
        state, m = train_step(state, MATH[:4], cfg)
        assert m.tokens_selected == 20 and not m.underbudget
        assert m.tokens_selected + m.tokens_discarded == round(m.response_len_mean * 16)


def test_step_is_bit_reproducible_and_does_not_mutate_state():
    cfg = tiny_cfg()
    state = init_state(cfg)
    before = state.params.flat().copy()
    s1, m1 = train_step(state, MATH[:4], cfg)
    s2, m2 = train_step(state, MATH[:4], cfg)
    assert m1 == m2
    assert np.array_equal(s1.params.flat(), s2.params.flat())
    assert np.array_equal(state.params.flat(), before) and state.step == 0


def test_failed_step_leaves_state_unchanged():
    cfg = tiny_cfg()
    state = init_state(cfg)
    bad = replace(MATH[0], domain="poetry")
    with pytest.raises(ValueError):
        train_step(state, [bad], cfg)
    assert state.step == 0 and state.ledger.cumulative_rl_tokens == 0


def test_first_minibatch_ratio_is_one():
    cfg = tiny_cfg(minibatch_count=2, objective=ObjectiveConfig(token_budget=30), init_scale=0.3)
    state = init_state(cfg)
    batch = rollout(state.params, MATH[:4], 4, cfg, seed=3)
    sel = select_budget(batch, 30, seed=0)
    tables = _minibatches(batch, cfg, state.params, sel)
    assert len(tables) == 2 and sum(t.size for t in tables) == 30
    br, _ = token_loss(state.params, state.ref_params, tables[0], cfg.objective)
    np.testing.assert_allclose(br.ratios, 1.0, atol=1e-12)


def test_minibatch_weights_sum_to_minibatch_count():
    cfg = tiny_cfg(minibatch_count=3, objective=ObjectiveConfig(token_budget=30))
    state = init_state(cfg)
    batch = rollout(state.params, MATH[:4], 4, cfg, seed=3)
    tables = _minibatches(batch, cfg, state.params, select_budget(batch, 30, seed=0))
    assert sum(t.weights.sum() for t in tables) == pytest.approx(3.0)
    grpo = _minibatches(batch, replace(cfg, algorithm="grpo"), state.params, None)
    for t in grpo:
        assert t.weights.sum() == pytest.approx(1.0)


def test_grpo_tokens_vary_under_heavy_tails():
    probs = gen_math(GeneratorSpec("math", 30, seed=0, operand_max=9, length_profile="heavy_tailed",
                                   len_min=2, len_max=30))
    cfg = tiny_cfg(algorithm="grpo", max_response_len=34)
    _, rows = run_stage(init_state(cfg), Stage("m", ("math",), 6), probs, cfg)
    assert len({m.tokens_selected for m in rows}) > 1


def test_ledger_and_efficiency():
    assert token_efficiency(TokenLedger(1000, 1000)) == 1.0
    assert token_efficiency(TokenLedger(0, 5)) == 0.0
    assert token_efficiency(TokenLedger(409600 * 10, 2_048_000)) == 2.0
    with pytest.raises(ZeroDivisionError):
        token_efficiency(TokenLedger(1, 0))
    cfg = tiny_cfg()
    _, rows = run_stage(init_state(cfg), Stage("m", ("math",), 4), MATH, cfg)
    state = init_state(cfg)
    seen = [0]
    for _ in range(4):
        state, _ = train_step(state, MATH[:4], cfg)
        seen.append(state.ledger.cumulative_rl_tokens)
    assert all(b > a for a, b in zip(seen, seen[1:]))


# ---------------------------------------------------------------------------
# stages, metrics, checkpoints
# ---------------------------------------------------------------------------


def test_single_stage_rows():
    cfg = tiny_cfg()
    _, rows = run_stage(init_state(cfg), Stage("math", ("math",), 10), MATH, cfg)
    assert len(rows) == 10 and [m.step for m in rows] == list(range(10))
    assert all(m.domain_mix == "math:4" for m in rows)
    assert all(m.tokens_selected <= 48 for m in rows)
    assert all(np.isfinite([getattr(m, c) for c in METRIC_COLUMNS if isinstance(getattr(m, c), float)]).all()
               for m in rows)


def test_two_stage_plan_changes_domain_mix():
    pool = MATH + gen_code(GeneratorSpec("code", 10, seed=0)) + gen_science(GeneratorSpec("science", 10, seed=0))
    cfg = tiny_cfg(vocab="default")
    stages = [Stage("s1", ("math",), 3), Stage("s2", ("code", "science"), 3)]
    _, rows = run_plan(cfg, stages, pool)
    assert [m.stage for m in rows] == ["s1"] * 3 + ["s2"] * 3
    assert all(m.domain_mix == "math:4" for m in rows[:3])
    assert all("math" not in m.domain_mix for m in rows[3:])


def test_stage_without_problems_is_rejected():
    with pytest.raises(ValueError):
        Stage("s", ("code",), 2).select(MATH)


def test_sampler_covers_pool_each_epoch():
    cfg = tiny_cfg(prompts_per_step=5)
    state = init_state(cfg)
    from budgetrl.trainer import sample_problems
    seen = []
    for _ in range(4):
        chosen, sampler = sample_problems(state, 0, MATH, 5, 0)
        state = replace(state, sampler=sampler)
        seen += [p.id for p in chosen]
    assert sorted(seen) == sorted(p.id for p in MATH)


def test_metrics_csv_round_trip(tmp_path):
    cfg = tiny_cfg()
    path = tmp_path / "m.csv"
    with MetricsWriter(path) as w:
        _, rows = run_stage(init_state(cfg), Stage("math", ("math",), 3), MATH, cfg,
                            on_step=lambda st, m: w.write(m))
    back = read_metrics(path)
    assert [r["step"] for r in back] == [0, 1, 2]
    assert back[1]["grad_norm"] == rows[1].grad_norm
    assert back[1]["underbudget"] is rows[1].underbudget
    path.write_text(path.read_text().replace("grad_norm", "gradnorm"))
    with pytest.raises(ValueError, match="columns"):
        read_metrics(path)


def test_checkpoint_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_cfg(init_scale=0.1)
    stages = [Stage("a", ("math",), 3), Stage("b", ("math",), 3)]
    full_state, full_rows = run_plan(cfg, stages, MATH)
    part_state, _ = run_plan(cfg, [Stage("a", ("math",), 3), Stage("b", ("math",), 1)], MATH)
    save_checkpoint(tmp_path / "c.npz", part_state)
    resumed = load_checkpoint(tmp_path / "c.npz")
    assert resumed.step == 4
    end_state, rest = run_plan(cfg, stages, MATH, resumed)
    assert [m.step for m in rest] == [4, 5]
    assert rest == full_rows[4:]
    assert np.array_equal(end_state.params.flat(), full_state.params.flat())


def test_config_validation():
    for bad in (dict(prompts_per_step=0), dict(group_size=1), dict(minibatch_count=0), dict(algorithm="ppo")):
        with pytest.raises(ValueError):
            tiny_cfg(**bad)
