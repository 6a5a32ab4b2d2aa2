"""Tree search over window-by-window denoising with cross-embodiment guidance.

The schedule's functional windows partition generation into sub-tasks, one
tree level per window (base first, end-effector last). At each level the
search may denoise freely ("self") or blend in a meta-action mined from a
different embodiment performing the same task ("external"). Rollouts are
scored by closeness of the final per-window action segments to those
meta-actions; a bonus makes cross-dimensional (heterogeneous) matches worth
slightly more than same-dimensional ones.

Search follows the four classic phases (selection via UCT, expansion,
jumpy-rollout simulation, backpropagation) and is deterministic for a fixed
seed: every node's noise stream is derived from its parent's by counter
jumps, so traces replay exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embodiment import EmbodimentRegistry, EmbodimentSpec
from .schedule import EbfCovariance, NoiseSchedule

# PCG64 counter offsets carving non-overlapping stream ranges out of a
# parent node's state: simulations sit far above any expansion draws, and
# sibling k starts k * 2**96 further along.
_SIM_ADVANCE = 1 << 80
_CHILD_ADVANCE = 1 << 96


class MptdError(ValueError):
    pass


@dataclass(frozen=True)
class MetaAction:
    """Reference action segment from another embodiment on the same task."""

    source_embodiment: int
    segment_window: int
    values: np.ndarray  # source-native window segment
    task_key: int


@dataclass(frozen=True)
class MptdConfig:
    exploration_scale: float = 3.0
    m0: float = 1.0
    m1: float = 1.1
    branching: int = 3
    budget: int = 24
    jumpy_interval: int = 10
    guidance_weight: float = 0.3

    def validate(self, window_count: int) -> None:
        if self.m1 <= self.m0:
            raise MptdError(f"m1 ({self.m1}) must exceed m0 ({self.m0})")
        if self.budget < window_count:
            raise MptdError(
                f"budget {self.budget} below window count {window_count}"
            )
        if self.branching < 1:
            raise MptdError("branching must be >= 1")
        if self.exploration_scale < 0:
            raise MptdError("exploration scale must be >= 0")


def node_value(x: np.ndarray, y: MetaAction, config: MptdConfig) -> float:
    """Similarity score of a generated segment against a meta-action.

    Equal dimensionality: -||x - y||^2 + m0. Otherwise the segments are
    compared on their shared leading dimensions with base value m1 > m0,
    rewarding guidance taken across heterogeneous morphologies.
    """
    x = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y.values, dtype=np.float64)
    if x.shape[0] == yv.shape[0]:
        return float(-np.sum((x - yv) ** 2) + config.m0)
    d = min(x.shape[0], yv.shape[0])
    return float(-np.sum((x[:d] - yv[:d]) ** 2) + config.m1)


def build_meta_actions(
    dataset,
    task_key: int,
    target_spec: EmbodimentSpec,
    registry: EmbodimentRegistry,
    tail_steps: int = 16,
) -> dict[int, MetaAction]:
    """Mine one meta-action per window from other embodiments' trajectories.

    Candidate segments are window slices of action steps taken by a
    *different* embodiment on `task_key`; the winner per window is the
    candidate nearest (Euclidean, on the shared leading dimensions) to the
    target embodiment's own per-window centroid. Mining looks only at the
    last `tail_steps` of each trajectory: the task-completion chunk is the
    part whose structure transfers across morphologies, whereas whole-episode
    centroids are dominated by transit and carry no grasp signal. Returns {}
    when no heterogeneous data exists, in which case the search degrades to
    pure self-denoising.

    `dataset` is any iterable of objects with embodiment_id, task_key, and
    an (T, D) `actions` array.
    """
    layout = registry.layout
    target_rows = [
        t.actions[-tail_steps:] for t in dataset
        if t.task_key == task_key and t.embodiment_id == target_spec.id
    ]
    out: dict[int, MetaAction] = {}
    for w, (start, _stop) in enumerate(layout.windows):
        tgt_n = target_spec.active_dims[w]
        if tgt_n == 0:
            continue
        centroid = (
            np.concatenate(target_rows)[:, start : start + tgt_n].mean(axis=0)
            if target_rows
            else np.zeros(tgt_n)
        )
        best = None
        for traj in dataset:
            if traj.task_key != task_key or traj.embodiment_id == target_spec.id:
                continue
            src = registry.get(traj.embodiment_id)
            src_n = src.active_dims[w]
            if src_n == 0:
                continue
            segs = np.asarray(traj.actions)[-tail_steps:, start : start + src_n]
            d = min(src_n, tgt_n)
            dists = np.linalg.norm(segs[:, :d] - centroid[:d], axis=1)
            i = int(np.argmin(dists))
            if best is None or dists[i] < best[0]:
                best = (float(dists[i]),
                        MetaAction(traj.embodiment_id, w, segs[i].copy(), task_key))
        if best is not None:
            out[w] = best[1]
    return out


@dataclass
class MptdNode:
    id: int
    parent: int | None
    depth: int           # number of windows fixed; root = 0
    guidance: str        # "root" | "self" | "external"
    child_rank: int
    level: int           # noise level of `chunk` when materialized
    chunk: np.ndarray | None = None
    rng_state: dict | None = None
    visits: int = 0
    value_sum: float = 0.0
    self_sims: int = 0
    terminal_value: float | None = None
    children: list[int] = field(default_factory=list)

    @property
    def mean_value(self) -> float:
        return self.value_sum / self.visits if self.visits else 0.0


def uct_select(means, visits, parent_visits: int, c: float) -> int:
    """Index of the child to descend into.

    Unvisited children first (declaration order); otherwise mean value plus
    c * sqrt(ln(parent) / visits), ties broken by lowest index. With c = 0
    this is pure exploitation.
    """
    best, best_score = -1, -np.inf
    for i, (m, n) in enumerate(zip(means, visits)):
        if n == 0:
            return i
        score = m + c * np.sqrt(np.log(parent_visits) / n)
        if score > best_score:
            best, best_score = i, score
    return best


def _gen_from(state: dict, advance: int = 0) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    if advance:
        bg.advance(advance)
    return np.random.Generator(bg)


class _Search:
    def __init__(self, predict, schedule, cov, meta_actions, config, layout,
                 target_spec, horizon, clip_x0=True):
        config.validate(layout.window_count)
        self.predict = predict
        self.schedule = schedule
        self.cov = cov
        self.meta = meta_actions
        self.cfg = config
        self.layout = layout
        self.spec = target_spec
        self.horizon = horizon
        self.clip_x0 = clip_x0
        self.nodes: list[MptdNode] = []
        w = layout.window_count
        # Noise-level boundary after each fixed window; edges[0]=K, edges[w]=0.
        self.edges = [schedule.steps - (schedule.steps * d) // w for d in range(w + 1)]
        self.evaluations = 0

    # -- diffusion machinery ------------------------------------------------

    def _predict(self, tau, k):
        self.evaluations += 1
        x0 = self.predict(tau, k)
        return np.clip(x0, -1.0, 1.0) if self.clip_x0 else x0

    def _denoise_span(self, chunk, k_from, k_to, rng, blend=None):
        """Posterior-step from level k_from down to k_to (full resolution).

        External guidance blends the meta-action's shared-prefix dims into
        the sample at every level of the span; the per-level factor is set
        so the weights compound to the configured guidance_weight (a raw
        per-level weight would overwrite the window entirely within a span).
        """
        lam_step = 0.0
        if blend is not None:
            start, d, meta_prefix, lam_total = blend
            lam_step = 1.0 - (1.0 - lam_total) ** (1.0 / max(k_from - k_to, 1))
        tau = chunk
        for k in range(k_from, k_to, -1):
            x0hat = self._predict(tau, k)
            abar_km1 = self.schedule.alpha_bar(k - 1)
            beta = self.schedule.beta(k)
            denom = 1.0 - self.schedule.alpha_bar(k)
            tau = (np.sqrt(abar_km1) * beta * x0hat
                   + np.sqrt(1.0 - beta) * (1.0 - abar_km1) * tau) / denom
            if k > 1:
                var = beta * (1.0 - abar_km1) / denom
                tau = tau + np.sqrt(var) * self.cov.scale * rng.standard_normal(tau.shape)
            if blend is not None:
                tau = tau.copy()
                tau[:, start : start + d] = (
                    (1.0 - lam_step) * tau[:, start : start + d]
                    + lam_step * meta_prefix
                )
        return tau

    def _jumpy_to_zero(self, chunk, level, rng):
        j = self.cfg.jumpy_interval
        tau, k = chunk, level
        while k > 0:
            x0hat = self._predict(tau, k)
            k_next = max(k - j, 0)
            if k_next == 0:
                tau = x0hat
            else:
                abar = self.schedule.alpha_bar(k_next)
                tau = (np.sqrt(abar) * x0hat
                       + np.sqrt(1.0 - abar) * self.cov.scale
                       * rng.standard_normal(tau.shape))
            k = k_next
        return tau

    def _score(self, final_chunk) -> float:
        # Segments are horizon means: phase-robust summaries of what the
        # plan does in each functional window.
        mean = final_chunk.mean(axis=0)
        total = 0.0
        for w, meta in self.meta.items():
            start, _ = self.layout.windows[w]
            n = self.spec.active_dims[w]
            total += node_value(mean[start : start + n], meta, self.cfg)
        return total

    # -- tree phases ----------------------------------------------------------

    def expand(self, node: MptdNode) -> None:
        # Interleave flavors so external guidance is tried on a node's second
        # visit, not only after every self candidate.
        flavors = []
        for _ in range(self.cfg.branching):
            flavors.append("self")
            if node.depth in self.meta:
                flavors.append("external")
        for rank, guidance in enumerate(flavors):
            child = MptdNode(
                id=len(self.nodes),
                parent=node.id,
                depth=node.depth + 1,
                guidance=guidance,
                child_rank=rank,
                level=self.edges[node.depth + 1],
            )
            self.nodes.append(child)
            node.children.append(child.id)

    def materialize(self, child: MptdNode) -> None:
        parent = self.nodes[child.parent]
        rng = _gen_from(parent.rng_state, child.child_rank * _CHILD_ADVANCE)
        blend = None
        if child.guidance == "external":
            w = parent.depth
            meta = self.meta[w]
            start, _ = self.layout.windows[w]
            d = min(self.spec.active_dims[w], len(meta.values))
            blend = (start, d, meta.values[:d], self.cfg.guidance_weight)
        child.chunk = self._denoise_span(
            parent.chunk, self.edges[parent.depth], child.level, rng, blend=blend
        )
        child.rng_state = rng.bit_generator.state
        if child.depth == self.layout.window_count:
            child.terminal_value = self._score(child.chunk)

    def simulate(self, node: MptdNode) -> float:
        if node.terminal_value is not None:
            return node.terminal_value
        rng = _gen_from(node.rng_state, _SIM_ADVANCE)
        final = self._jumpy_to_zero(node.chunk, node.level, rng)
        return self._score(final)

    def run(self, rng: np.random.Generator):
        root = MptdNode(id=0, parent=None, depth=0, guidance="root", child_rank=0,
                        level=self.schedule.steps)
        root.chunk = rng.standard_normal((self.horizon, self.cov.dim)) * self.cov.scale
        root.rng_state = rng.bit_generator.state
        self.nodes.append(root)

        iterations = []
        for _ in range(self.cfg.budget):
            node = root
            path = [root.id]
            while True:
                if node.depth == self.layout.window_count:
                    value = self.simulate(node)  # cached terminal value
                    node.self_sims += 1
                    break
                if not node.children:
                    self.expand(node)
                kids = [self.nodes[i] for i in node.children]
                pick = uct_select(
                    [k.mean_value for k in kids],
                    [k.visits for k in kids],
                    max(node.visits, 1),
                    self.cfg.exploration_scale,
                )
                child = kids[pick]
                path.append(child.id)
                if child.chunk is None:
                    self.materialize(child)
                    value = self.simulate(child)
                    child.self_sims += 1
                    node = child
                    break
                node = child
            iterations.append({"path": path, "value": value})
            # backpropagation
            walk = node
            while walk is not None:
                walk.visits += 1
                walk.value_sum += value
                walk = self.nodes[walk.parent] if walk.parent is not None else None

        # Extract the best-mean path and finish it at full resolution.
        path = [root]
        node = root
        while node.children:
            kids = [self.nodes[i] for i in node.children if self.nodes[i].visits > 0]
            node = max(kids, key=lambda n: (n.mean_value, -n.id))
            path.append(node)
        chunk = node.chunk
        if node.level > 0:
            rng_fin = _gen_from(node.rng_state)
            chunk = self._denoise_span(chunk, node.level, 0, rng_fin)
        trace = {
            "budget": self.cfg.budget,
            "level_edges": list(self.edges),
            "evaluations": self.evaluations,
            "iterations": iterations,
            "best_path": [n.id for n in path],
            "nodes": [
                {
                    "id": n.id,
                    "parent": n.parent,
                    "window": n.depth - 1,
                    "guidance": n.guidance,
                    "level": n.level,
                    "visits": n.visits,
                    "value_sum": n.value_sum,
                    "self_sims": n.self_sims,
                }
                for n in self.nodes
            ],
        }
        return np.clip(chunk, -1.0, 1.0), trace


def mptd_sample(
    predict,
    horizon: int,
    schedule: NoiseSchedule,
    cov: EbfCovariance,
    meta_actions: dict[int, MetaAction],
    config: MptdConfig,
    rng: np.random.Generator,
    layout,
    target_spec: EmbodimentSpec,
    clip_x0: bool = True,
):
    """Run the four-phase search and return (chunk, trace).

    With branching 1 and no meta-actions the tree is a single forced path
    whose noise stream continues the caller's generator, so the result is
    bit-identical to `sampler.sample_full` under the same seed.
    """
    search = _Search(predict, schedule, cov, meta_actions, config, layout,
                     target_spec, horizon, clip_x0=clip_x0)
    return search.run(rng)
