import json
from types import SimpleNamespace

import numpy as np
import pytest

from embodiff.embodiment import default_registry
from embodiff.mptd import (
    MetaAction,
    MptdConfig,
    MptdError,
    build_meta_actions,
    mptd_sample,
    node_value,
    uct_select,
)
from embodiff.sampler import sample_full
from embodiff.schedule import build_cosine_schedule, build_ebf_covariance

REG = default_registry()
LAYOUT = REG.layout
SCHED = build_cosine_schedule(50)


def _cov(spec, delta=0.5):
    return build_ebf_covariance(spec, LAYOUT, delta)


def _meta(values, window=0, source=1):
    return MetaAction(source_embodiment=source, segment_window=window,
                      values=np.asarray(values, dtype=float), task_key=0)


def _cfg(**kw):
    base = dict(exploration_scale=3.0, m0=1.0, m1=1.1, branching=3, budget=24,
                jumpy_interval=10, guidance_weight=0.3)
    base.update(kw)
    return MptdConfig(**base)


# ---------------------------------------------------------------------------
# Node value (Eq.-level unit suite)
# ---------------------------------------------------------------------------

def test_node_value_zero_distance_equal_dims():
    x = np.array([0.2, -0.4, 0.7])
    assert node_value(x, _meta(x.copy()), _cfg()) == 1.0


def test_node_value_cross_dim_prefix_match():
    v = node_value(np.array([0.3, 0.1, -0.2]), _meta([0.3]), _cfg())
    assert v == 1.1


def test_node_value_arithmetic_example():
    v = node_value(np.array([0.5]), _meta([0.1]), _cfg())
    assert abs(v - 0.84) < 1e-12


def _reference_value(x, yv, m0, m1):
    """Independent re-implementation: plain loops, no shared code."""
    if len(x) == len(yv):
        s = 0.0
        for a, b in zip(x, yv):
            s += (a - b) ** 2
        return -s + m0
    d = min(len(x), len(yv))
    s = 0.0
    for i in range(d):
        s += (x[i] - yv[i]) ** 2
    return -s + m1


def test_node_value_randomized_against_reference():
    rng = np.random.default_rng(0)
    cfg = _cfg()
    for _ in range(100):
        dx = int(rng.integers(1, 7))
        dy = int(rng.integers(1, 7))
        x = rng.uniform(-1, 1, dx)
        y = rng.uniform(-1, 1, dy)
        assert node_value(x, _meta(y), cfg) == _reference_value(x, y, 1.0, 1.1)


def test_node_value_max_at_match_and_m1_cap():
    rng = np.random.default_rng(1)
    cfg = _cfg()
    y = rng.uniform(-1, 1, 3)
    assert node_value(y, _meta(y), cfg) == cfg.m0
    for _ in range(50):
        x = rng.uniform(-1, 1, 3)
        assert node_value(x, _meta(y), cfg) <= cfg.m0
        x5 = rng.uniform(-1, 1, 5)
        assert node_value(x5, _meta(y), cfg) <= cfg.m1


def test_heterogeneity_incentive_exact_gap():
    cfg = _cfg()
    x3 = np.array([0.4, -0.3, 0.2])
    same = node_value(x3, _meta(x3 + 0.1), cfg)
    cross = node_value(np.concatenate([x3, [9.9]]), _meta(x3 + 0.1), cfg)
    assert cross - same == pytest.approx(cfg.m1 - cfg.m0, abs=1e-15)


def test_config_validation():
    with pytest.raises(MptdError):
        _cfg(m1=0.9).validate(4)
    with pytest.raises(MptdError):
        _cfg(budget=3).validate(4)
    with pytest.raises(MptdError):
        _cfg(branching=0).validate(4)


# ---------------------------------------------------------------------------
# Meta-action mining
# ---------------------------------------------------------------------------

def _traj(emb, task, actions):
    return SimpleNamespace(embodiment_id=emb, task_key=task,
                           actions=np.asarray(actions, dtype=float))


def test_meta_actions_singleton_neighbor():
    action = np.arange(12) / 12.0
    dataset = [_traj(1, 0, [action])]  # hand4 trajectory, one step
    target = REG.get(0)  # gripper
    metas = build_meta_actions(dataset, 0, target, REG)
    hand4 = REG.get(1)
    for w, (start, _) in enumerate(LAYOUT.windows):
        if target.active_dims[w] == 0:
            assert w not in metas
            continue
        assert metas[w].source_embodiment == 1
        expected = action[start : start + hand4.active_dims[w]]
        assert np.array_equal(metas[w].values, expected)


def test_meta_actions_empty_without_heterogeneous_data():
    dataset = [_traj(0, 0, np.zeros((5, 12)))]
    assert build_meta_actions(dataset, 0, REG.get(0), REG) == {}
    assert build_meta_actions([], 0, REG.get(0), REG) == {}
    # data for a different task does not count
    dataset = [_traj(1, 3, np.zeros((5, 12)))]
    assert build_meta_actions(dataset, 0, REG.get(0), REG) == {}


def test_meta_actions_match_brute_force_scan():
    rng = np.random.default_rng(2)
    dataset = [
        _traj(int(rng.integers(0, 3)), 0, rng.uniform(-1, 1, (int(rng.integers(3, 9)), 12)))
        for _ in range(20)
    ]
    target = REG.get(2)  # hand5
    metas = build_meta_actions(dataset, 0, target, REG)

    target_rows = np.concatenate(
        [t.actions for t in dataset if t.embodiment_id == 2 and t.task_key == 0]
    )
    for w, (start, _) in enumerate(LAYOUT.windows):
        tn = target.active_dims[w]
        if tn == 0:
            continue
        centroid = target_rows[:, start : start + tn].mean(axis=0)
        best_d, best_seg, best_src = np.inf, None, None
        for t in dataset:
            if t.embodiment_id == 2 or t.task_key != 0:
                continue
            sn = REG.get(t.embodiment_id).active_dims[w]
            if sn == 0:
                continue
            d = min(sn, tn)
            for row in t.actions:
                seg = row[start : start + sn]
                dist = float(np.linalg.norm(seg[:d] - centroid[:d]))
                if dist < best_d:
                    best_d, best_seg, best_src = dist, seg, t.embodiment_id
        if best_seg is None:
            assert w not in metas
        else:
            assert np.array_equal(metas[w].values, best_seg)
            assert metas[w].source_embodiment == best_src


# ---------------------------------------------------------------------------
# Selection rule
# ---------------------------------------------------------------------------

def test_uct_unvisited_first_in_order():
    assert uct_select([0.0, 0.0, 0.0], [1, 0, 0], 1, 3.0) == 1


def test_uct_zero_c_pure_exploitation_with_tie_break():
    assert uct_select([0.5, 0.9, 0.7], [3, 3, 3], 9, 0.0) == 1
    assert uct_select([0.9, 0.9, 0.2], [3, 3, 3], 9, 0.0) == 0


def test_uct_huge_c_round_robin():
    visits = [5, 4, 5]
    assert uct_select([9.0, -9.0, 0.0], visits, 14, 1e9) == 1


# ---------------------------------------------------------------------------
# Search behavior
# ---------------------------------------------------------------------------

def _damped_predictor(gain=0.7):
    return lambda chunk, k: gain * chunk


def test_degenerate_tree_bit_identical_to_full_sampling():
    spec = REG.get(2)
    cov = _cov(spec)
    cfg = _cfg(branching=1, budget=4)
    predict = _damped_predictor()
    chunk, trace = mptd_sample(predict, 4, SCHED, cov, {}, cfg,
                               np.random.default_rng(33), LAYOUT, spec)
    ref = sample_full(predict, (4, 12), SCHED, cov, np.random.default_rng(33))
    assert np.array_equal(chunk, ref)
    assert trace["budget"] == 4


def test_root_visits_equal_budget_and_conservation():
    spec = REG.get(2)
    cov = _cov(spec)
    meta = {0: _meta(np.zeros(4), window=0), 3: _meta([0.5], window=3)}
    cfg = _cfg(branching=2, budget=24)
    _, trace = mptd_sample(_damped_predictor(), 4, SCHED, cov, meta, cfg,
                           np.random.default_rng(34), LAYOUT, spec)
    nodes = {n["id"]: n for n in trace["nodes"]}
    children = {}
    for n in trace["nodes"]:
        if n["parent"] is not None:
            children.setdefault(n["parent"], []).append(n["id"])
    root = nodes[0]
    assert root["visits"] == 24
    for nid, n in nodes.items():
        kid_visits = sum(nodes[c]["visits"] for c in children.get(nid, []))
        assert n["visits"] == kid_visits + n["self_sims"], nid


def test_tree_depth_never_exceeds_window_count():
    spec = REG.get(1)
    cov = _cov(spec)
    meta = {1: _meta([0.1, 0.2], window=1)}
    cfg = _cfg(branching=2, budget=30)
    _, trace = mptd_sample(_damped_predictor(), 4, SCHED, cov, meta, cfg,
                           np.random.default_rng(35), LAYOUT, spec)
    assert max(n["window"] for n in trace["nodes"]) <= LAYOUT.window_count - 1


def test_huge_exploration_balances_sibling_visits():
    spec = REG.get(2)
    cov = _cov(spec)
    meta = {2: _meta([0.3, 0.1, 0.2], window=2)}
    cfg = _cfg(branching=3, budget=30, exploration_scale=1e9)
    _, trace = mptd_sample(_damped_predictor(), 4, SCHED, cov, meta, cfg,
                           np.random.default_rng(36), LAYOUT, spec)
    children = {}
    for n in trace["nodes"]:
        if n["parent"] is not None:
            children.setdefault(n["parent"], []).append(n["visits"])
    for sibs in children.values():
        assert max(sibs) - min(sibs) <= 1


def replay_selections(trace, c):
    """Re-derive every recorded selection and check it followed the UCT rule
    (unvisited children first, then score argmax with low-index ties)."""
    children: dict = {}
    for n in trace["nodes"]:
        if n["parent"] is not None:
            children.setdefault(n["parent"], []).append(n["id"])
    visits = {n["id"]: 0 for n in trace["nodes"]}
    sums = {n["id"]: 0.0 for n in trace["nodes"]}
    for it in trace["iterations"]:
        path, value = it["path"], it["value"]
        for parent, chosen in zip(path, path[1:]):
            sibs = children[parent]
            means = [sums[s] / visits[s] if visits[s] else 0.0 for s in sibs]
            vis = [visits[s] for s in sibs]
            expected = sibs[uct_select(means, vis, max(visits[parent], 1), c)]
            assert chosen == expected, (parent, chosen, expected)
        for nid in path:
            visits[nid] += 1
            sums[nid] += value
    return visits


def test_zero_exploration_is_pure_exploitation():
    spec = REG.get(2)
    cov = _cov(spec)
    meta = {3: _meta([0.4], window=3)}
    cfg = _cfg(branching=2, budget=40, exploration_scale=0.0)
    _, trace = mptd_sample(_damped_predictor(), 4, SCHED, cov, meta, cfg,
                           np.random.default_rng(37), LAYOUT, spec)
    counts = replay_selections(trace, 0.0)
    assert counts[0] == 40


def test_external_guidance_outscores_self_when_meta_matches_target():
    """Meta equals the segment the (damped) model is pulled toward."""
    spec = REG.get(2)
    cov = _cov(spec)
    target_segment = np.array([0.5, -0.4])
    meta = {3: _meta(target_segment, window=3, source=1)}
    cfg = _cfg(branching=1, budget=24, exploration_scale=3.0)
    ext_means, self_means = [], []
    for seed in range(20):
        _, trace = mptd_sample(_damped_predictor(0.6), 4, SCHED, cov, meta, cfg,
                               np.random.default_rng(100 + seed), LAYOUT, spec)
        for n in trace["nodes"]:
            if n["visits"] == 0 or n["window"] != 3:
                continue
            mean = n["value_sum"] / n["visits"]
            (ext_means if n["guidance"] == "external" else self_means).append(mean)
    assert len(ext_means) and len(self_means)
    assert np.mean(ext_means) > np.mean(self_means)


def test_trace_replay_determinism_and_json():
    spec = REG.get(2)
    cov = _cov(spec)
    meta = {0: _meta(np.full(4, 0.2), window=0), 3: _meta([0.5], window=3)}
    cfg = _cfg()
    a_chunk, a_trace = mptd_sample(_damped_predictor(), 4, SCHED, cov, meta, cfg,
                                   np.random.default_rng(55), LAYOUT, spec)
    b_chunk, b_trace = mptd_sample(_damped_predictor(), 4, SCHED, cov, meta, cfg,
                                   np.random.default_rng(55), LAYOUT, spec)
    assert np.array_equal(a_chunk, b_chunk)
    assert a_trace == b_trace
    json.dumps(a_trace)  # serializable for offline inspection
