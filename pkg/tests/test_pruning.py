import numpy as np
import pytest
from scipy.stats import spearmanr

from rlrc.env import EnvConfig, generate_demos, make_task_suite
from rlrc.model import ModelConfig, forward, init_model
from rlrc.pruning import (
    KIND_ATTN, KIND_MLP,
    ImportanceTable, PruningError,
    apply_prune, build_dependency_groups, default_exempt_layers,
    magnitude_mask, param_counts, select_prune_groups, taylor_importance,
)
from rlrc.quant import memory_bytes
from rlrc.training import demo_arrays, sft_loss, train_sft
from rlrc.training import SftConfig


def tiny_model(seed=0, n_layers=3, d_ff=8, heads=2, d_model=16):
    cfg = ModelConfig(d_model=d_model, n_layers=n_layers, n_heads_base=heads,
                      d_ff_base=d_ff, observation_vocab=21, action_vocab=6,
                      max_seq_len=20, seed=seed)
    return init_model(cfg)


def calib_batch(n=64, seed=0):
    suite = make_task_suite(0)
    cfg = EnvConfig()
    demos = []
    from rlrc.env import run_expert_episode

    for i, task in enumerate(suite["IND"][:8]):
        demos.append(run_expert_episode(cfg, task, seed + i))
    obs, acts = demo_arrays(demos)
    return obs[:n], acts[:n]


def test_group_count_default_config():
    m = init_model(ModelConfig())
    groups = build_dependency_groups(m)
    assert len(groups) == 6 * 512 + 6 * 4 == 3096


def test_groups_stay_within_their_layer():
    m = tiny_model()
    for g in build_dependency_groups(m):
        for name, *_ in g.members:
            assert name.startswith(f"layers.{g.layer}.")


def test_group_sizes():
    m = tiny_model()
    cfg = m.config
    for g in build_dependency_groups(m):
        if g.kind == KIND_ATTN:
            assert g.size == 4 * cfg.d_model * cfg.head_dim
        else:
            assert g.size == 3 * cfg.d_model


def test_single_group_removal_never_breaks_forward():
    m = tiny_model()
    groups = build_dependency_groups(m)
    ctx = np.array([1, 2, 3, m.config.bos_action_id])
    rng = np.random.default_rng(0)
    for g in rng.choice(len(groups), size=6, replace=False):
        g = groups[int(g)]
        plan = _plan_for(m, [g])
        pruned = apply_prune(m, plan)
        logits, _ = forward(pruned, ctx)
        assert logits.data.shape == (4, m.config.action_vocab)


def _plan_for(model, groups, exempt=()):
    from rlrc.pruning import PrunePlan

    prunable = sum(g.size for g in build_dependency_groups(model)
                   if g.layer not in set(exempt))
    removed = sum(g.size for g in groups)
    return PrunePlan(groups=list(groups), target_ratio=0.0,
                     achieved_ratio=removed / prunable, exempt_layers=sorted(exempt),
                     prunable_params=prunable, removed_params=removed)


def test_taylor_zero_weight_group_scores_zero():
    m = tiny_model()
    groups = build_dependency_groups(m)
    g = next(g for g in groups if g.kind == KIND_MLP and g.layer == 1 and g.index == 2)
    layer = m.layers[1]
    layer.wup.data[:, 2] = 0
    layer.wgate.data[:, 2] = 0
    layer.wdown.data[2, :] = 0
    obs, acts = calib_batch(32)
    table = taylor_importance(m, obs, acts)
    assert table.scores[g.key] == 0.0
    assert all(v >= 0 and np.isfinite(v) for v in table.scores.values())


def test_taylor_two_param_analytic_ranking():
    # |w * dL/dw| for L = w1^2 + w2^2 at w=(1,2) is (2, 8)
    from rlrc import tensor as T

    w = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum_(T.mul(w, w)))
    scores = np.abs(w.data * w.grad)
    np.testing.assert_allclose(scores, [2.0, 8.0])
    assert scores[1] > scores[0]


def test_taylor_duplicated_batch_keeps_ranking():
    m = tiny_model(seed=3)
    obs, acts = calib_batch(32)
    t1 = taylor_importance(m, obs, acts)
    t2 = taylor_importance(m, np.concatenate([obs, obs]), np.concatenate([acts, acts]))
    keys = sorted(t1.scores)
    r1 = np.argsort([t1.scores[k] for k in keys])
    r2 = np.argsort([t2.scores[k] for k in keys])
    np.testing.assert_array_equal(r1, r2)


def test_select_minimum_scores_first():
    m = tiny_model(n_layers=3, d_ff=3, heads=1)
    groups = build_dependency_groups(m)
    scores = {g.key: 100.0 for g in groups}
    mlp1 = [g for g in groups if g.layer == 1 and g.kind == KIND_MLP]
    scores[mlp1[0].key] = 0.1
    scores[mlp1[1].key] = 0.5
    scores[mlp1[2].key] = 0.3
    table = ImportanceTable(scores, 1, 0, 0.0)
    prunable = sum(g.size for g in groups if g.layer == 1)
    plan = select_prune_groups(m, table, mlp1[0].size / prunable, exempt_layers={0, 2})
    assert [g.key for g in plan.groups] == [mlp1[0].key]


def test_select_zero_ratio_empty_plan():
    m = tiny_model()
    table = ImportanceTable({g.key: 1.0 for g in build_dependency_groups(m)}, 1, 0, 0.0)
    plan = select_prune_groups(m, table, 0.0)
    assert plan.groups == []
    assert plan.achieved_ratio == 0.0


def test_select_rejects_bad_ratio():
    m = tiny_model()
    table = ImportanceTable({g.key: 1.0 for g in build_dependency_groups(m)}, 1, 0, 0.0)
    with pytest.raises(PruningError):
        select_prune_groups(m, table, 1.0)
    with pytest.raises(PruningError):
        select_prune_groups(m, table, -0.1)


def test_select_unreachable_ratio():
    m = tiny_model(n_layers=2)
    table = ImportanceTable({g.key: 1.0 for g in build_dependency_groups(m)}, 1, 0, 0.0)
    with pytest.raises(PruningError, match="unreachable|no prunable"):
        select_prune_groups(m, table, 0.5, exempt_layers={0, 1})


def test_select_deterministic_tiebreak():
    m = tiny_model()
    table = ImportanceTable({g.key: 1.0 for g in build_dependency_groups(m)}, 1, 0, 0.0)
    p1 = select_prune_groups(m, table, 0.3)
    p2 = select_prune_groups(m, table, 0.3)
    assert [g.key for g in p1.groups] == [g.key for g in p2.groups]


def test_select_scale_invariance():
    m = tiny_model(seed=5)
    obs, acts = calib_batch(32)
    table = taylor_importance(m, obs, acts)
    scaled = ImportanceTable({k: 7.5 * v for k, v in table.scores.items()},
                             table.batch_size, table.seed, table.loss)
    p1 = select_prune_groups(m, table, 0.4)
    p2 = select_prune_groups(m, scaled, 0.4)
    assert [g.key for g in p1.groups] == [g.key for g in p2.groups]


def test_select_monotone_achieved_ratio():
    m = tiny_model(seed=1, d_ff=32, heads=4)
    obs, acts = calib_batch(32)
    table = taylor_importance(m, obs, acts)
    last = -1.0
    for r in (0.0, 0.2, 0.4, 0.6, 0.8):
        plan = select_prune_groups(m, table, r)
        assert plan.achieved_ratio >= last
        assert plan.achieved_ratio >= r
        last = plan.achieved_ratio


def test_default_config_ninety_percent_plan():
    m = init_model(ModelConfig())
    obs, acts = calib_batch(64)
    table = taylor_importance(m, obs, acts)
    plan = select_prune_groups(m, table, 0.9)
    assert plan.exempt_layers == [0, 5]
    counts = param_counts(m)
    assert plan.prunable_params == counts["prunable"]
    pruned = apply_prune(m, plan)
    before = counts["total"]
    after = pruned.num_params()
    assert before - after == plan.removed_params
    assert plan.achieved_ratio >= 0.9
    # external interface intact
    ctx = np.array([[1, 2, 3, m.config.bos_action_id]])
    logits, hidden = forward(pruned, ctx)
    assert logits.data.shape == (1, 4, 6)
    assert hidden.data.shape == (1, 4, 128)


def test_exempt_layers_never_pruned():
    m = tiny_model(seed=2, d_ff=32, heads=4)
    obs, acts = calib_batch(32)
    table = taylor_importance(m, obs, acts)
    plan = select_prune_groups(m, table, 0.8)
    assert default_exempt_layers(m.config) == {0, 2}
    assert all(g.layer not in (0, 2) for g in plan.groups)


def test_apply_zero_groups_exact_equivalence():
    m = tiny_model(seed=4, n_layers=3, d_ff=8, heads=2)
    groups = build_dependency_groups(m)
    victims = [g for g in groups if g.layer == 1 and
               ((g.kind == KIND_MLP and g.index in (1, 5)) or
                (g.kind == KIND_ATTN and g.index == 0))]
    layer = m.layers[1]
    hd = m.config.head_dim
    layer.wup.data[:, [1, 5]] = 0
    layer.wgate.data[:, [1, 5]] = 0
    layer.wdown.data[[1, 5], :] = 0
    layer.wq.data[:, :hd] = 0
    layer.wk.data[:, :hd] = 0
    layer.wv.data[:, :hd] = 0
    layer.wo.data[:hd, :] = 0
    pruned = apply_prune(m, _plan_for(m, victims, exempt=(0, 2)))
    rng = np.random.default_rng(0)
    for _ in range(5):
        ctx = np.append(rng.integers(0, 21, size=6), m.config.bos_action_id)
        la, _ = forward(m, ctx)
        lb, _ = forward(pruned, ctx)
        assert np.abs(la.data - lb.data).max() <= 1e-6


def test_apply_rejects_emptying_layer():
    m = tiny_model(n_layers=3, d_ff=4, heads=2)
    groups = [g for g in build_dependency_groups(m)
              if g.layer == 1 and g.kind == KIND_MLP]
    with pytest.raises(PruningError, match="empty"):
        apply_prune(m, _plan_for(m, groups, exempt=(0, 2)))


def test_apply_rejects_stale_plan():
    m = tiny_model(n_layers=3)
    groups = [g for g in build_dependency_groups(m)
              if g.layer == 1 and g.kind == KIND_MLP][:2]
    plan = _plan_for(m, groups, exempt=(0, 2))
    smaller = apply_prune(m, plan)
    with pytest.raises(PruningError, match="stale|range"):
        apply_prune(smaller, _plan_for(m, [g for g in build_dependency_groups(m)
                                           if g.kind == KIND_MLP and g.layer == 1
                                           and g.index == m.config.d_ff[1] - 1],
                                       exempt=(0, 2)))


def test_magnitude_mask_zero_sparsity_noop():
    m = tiny_model(seed=6)
    before = {n: p.data.copy() for n, p in m.named_params()}
    magnitude_mask(m, 0.0)
    for n, p in m.named_params():
        np.testing.assert_array_equal(p.data, before[n], err_msg=n)


def test_magnitude_mask_exact_counts_and_memory():
    m = tiny_model(seed=6)
    mem_before = memory_bytes(m)
    count_before = m.num_params()
    _, masks = magnitude_mask(m, 0.2)
    for li, layer in enumerate(m.layers):
        for name in ("wq", "wk", "wv", "wo", "wup", "wgate", "wdown"):
            p = getattr(layer, name)
            k = int(np.floor(0.2 * p.data.size))
            assert int((p.data == 0).sum()) == k
            assert int(masks[f"layers.{li}.{name}"].sum()) == k
    assert m.num_params() == count_before
    assert memory_bytes(m) == mem_before


def test_param_counts_formula_and_embedding_exclusion():
    m = init_model(ModelConfig())
    counts = param_counts(m)
    d = 128
    per_layer_mats = 4 * d * d + 3 * d * 512
    assert counts["prunable"] == 4 * per_layer_mats  # layers 1..4
    assert counts["total"] == m.num_params()
    for row in counts["per_layer"]:
        assert row["prunable"] in (0, per_layer_mats)
    # embeddings live in total only
    emb = m.tok_emb.data.size + m.pos_emb.data.size
    assert counts["total"] - sum(r["total"] for r in counts["per_layer"]) == \
        emb + m.final_gain.data.size + m.w_act.data.size


def test_prunable_drop_after_ninety_percent():
    m = init_model(ModelConfig())
    obs, acts = calib_batch(64)
    table = taylor_importance(m, obs, acts)
    plan = select_prune_groups(m, table, 0.9)
    pruned = apply_prune(m, plan)
    before = param_counts(m)["prunable"]
    after = param_counts(pruned)["prunable"]
    assert after <= 0.1 * before


def test_taylor_brute_force_spearman():
    # tiny 2-layer model, trained briefly so the loss surface is meaningful
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads_base=2, d_ff_base=16,
                      observation_vocab=21, action_vocab=6, max_seq_len=20, seed=0)
    m = init_model(cfg)
    suite = make_task_suite(0)
    env_cfg = EnvConfig()
    demos = generate_demos(env_cfg, suite["IND"], 2, 0, "/tmp/_fid_demos.jsonl")
    m, _ = train_sft(m, demos, SftConfig(max_steps=300, eval_interval=300,
                                         eval_episodes=1, seed=0),
                     env_cfg, suite["IND"][:2])
    obs, acts = demo_arrays(demos)
    obs, acts = obs[:128], acts[:128]
    table = taylor_importance(m, obs, acts)
    base = float(sft_loss(m, obs, acts).data)
    groups = build_dependency_groups(m)
    deltas = []
    scores = []
    params = dict(m.named_params())
    for g in groups:
        saved = []
        for name, axis, start, stop in g.members:
            arr = params[name].data
            sl = [slice(None)] * arr.ndim
            sl[axis] = slice(start, stop)
            saved.append((name, tuple(sl), arr[tuple(sl)].copy()))
            arr[tuple(sl)] = 0.0
        masked = float(sft_loss(m, obs, acts).data)
        for name, sl, val in saved:
            params[name].data[sl] = val
        deltas.append(masked - base)
        scores.append(table.scores[g.key])
    rho = spearmanr(scores, deltas).statistic
    assert rho >= 0.8, f"Taylor fidelity too low: rho={rho:.3f}"
