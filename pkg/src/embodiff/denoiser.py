"""Clean-chunk prediction network, its gradients, optimizer, and training.

One fully connected network (3 tanh hidden layers) serves three head kinds:

* ``diffusion``  — predicts the clean chunk from a noisy chunk and level k
* ``flow``       — predicts the velocity along a linear noise-to-data path
* ``regression`` — predicts the chunk directly from conditioning (baseline)

Conditioning is the concatenation of the flattened (noisy) chunk, a
sinusoidal timestep embedding, proprioception, a task/object context vector,
a one-hot embodiment id, and that embodiment's learnable soft prompt row.
Gradients are exact reverse-mode, written out by hand so the whole training
loop stays in float64 NumPy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .schedule import EbfCovariance, NoiseSchedule

HEAD_KINDS = ("diffusion", "flow", "regression")


class DenoiserError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelDims:
    """Everything that determines the parameter shapes."""

    horizon: int
    action_dim: int
    proprio_dim: int
    context_dim: int
    n_embodiments: int
    prompt_dim: int = 16
    timestep_dim: int = 32
    hidden: int = 256
    n_hidden: int = 3

    def input_dim(self, kind: str) -> int:
        base = self.proprio_dim + self.context_dim + self.n_embodiments + self.prompt_dim
        if kind == "regression":
            return base
        return self.horizon * self.action_dim + self.timestep_dim + base

    @property
    def output_dim(self) -> int:
        return self.horizon * self.action_dim

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "action_dim": self.action_dim,
            "proprio_dim": self.proprio_dim,
            "context_dim": self.context_dim,
            "n_embodiments": self.n_embodiments,
            "prompt_dim": self.prompt_dim,
            "timestep_dim": self.timestep_dim,
            "hidden": self.hidden,
            "n_hidden": self.n_hidden,
        }


@dataclass
class DenoiserParams:
    dims: ModelDims
    kind: str
    weights: list  # list of (in, out) float64 arrays
    biases: list   # list of (out,) float64 arrays
    soft_prompts: np.ndarray  # (n_embodiments, prompt_dim)

    def flat(self) -> dict:
        """Named views of every parameter tensor (shared memory)."""
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        out["prompts"] = self.soft_prompts
        return out

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            dims=self.dims,
            kind=self.kind,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            soft_prompts=self.soft_prompts.copy(),
        )


def layer_sizes(dims: ModelDims, kind: str) -> list[tuple[int, int]]:
    sizes = []
    fan_in = dims.input_dim(kind)
    for _ in range(dims.n_hidden):
        sizes.append((fan_in, dims.hidden))
        fan_in = dims.hidden
    sizes.append((fan_in, dims.output_dim))
    return sizes


def param_count(dims: ModelDims, kind: str = "diffusion") -> int:
    n = sum((fi + 1) * fo for fi, fo in layer_sizes(dims, kind))
    return n + dims.n_embodiments * dims.prompt_dim


def init_params(dims: ModelDims, rng: np.random.Generator, kind: str = "diffusion") -> DenoiserParams:
    if kind not in HEAD_KINDS:
        raise DenoiserError(f"unknown head kind {kind!r}")
    weights, biases = [], []
    sizes = layer_sizes(dims, kind)
    for i, (fi, fo) in enumerate(sizes):
        std = 0.01 if i == len(sizes) - 1 else 1.0 / np.sqrt(fi)
        weights.append(rng.standard_normal((fi, fo)) * std)
        biases.append(np.zeros(fo))
    prompts = rng.standard_normal((dims.n_embodiments, dims.prompt_dim)) * 0.5
    return DenoiserParams(dims=dims, kind=kind, weights=weights, biases=biases,
                          soft_prompts=prompts)


def timestep_embedding(values: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of (B,) values into (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(values, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(frozen=True)
class ConditioningBundle:
    """Per-sample conditioning: proprioception, context encoding, level, id."""

    proprio: np.ndarray
    context: np.ndarray
    timestep: int
    embodiment_id: int

    def validate(self, dims: ModelDims, max_step: int | None = None) -> None:
        if len(self.proprio) != dims.proprio_dim or len(self.context) != dims.context_dim:
            raise DenoiserError(
                f"conditioning dims ({len(self.proprio)}, {len(self.context)}) do not "
                f"match model ({dims.proprio_dim}, {dims.context_dim})"
            )
        if not (np.all(np.isfinite(self.proprio)) and np.all(np.isfinite(self.context))):
            raise DenoiserError("conditioning contains non-finite entries")
        if not 0 <= self.embodiment_id < dims.n_embodiments:
            raise DenoiserError(f"embodiment id {self.embodiment_id} out of range")
        if max_step is not None and not 1 <= self.timestep <= max_step:
            raise DenoiserError(f"timestep {self.timestep} outside [1, {max_step}]")


def _assemble_features(
    params: DenoiserParams,
    chunks: np.ndarray | None,
    tvals: np.ndarray | None,
    proprio: np.ndarray,
    context: np.ndarray,
    emb_ids: np.ndarray,
) -> np.ndarray:
    dims = params.dims
    n = len(emb_ids)
    onehot = np.zeros((n, dims.n_embodiments))
    onehot[np.arange(n), emb_ids] = 1.0
    parts = []
    if params.kind != "regression":
        parts.append(chunks.reshape(n, dims.output_dim))
        parts.append(timestep_embedding(tvals, dims.timestep_dim))
    parts += [proprio, context, onehot, params.soft_prompts[emb_ids]]
    return np.concatenate(parts, axis=1)


def _prompt_offset(dims: ModelDims, kind: str) -> int:
    return dims.input_dim(kind) - dims.prompt_dim


def predict_x0(params: DenoiserParams, noisy: np.ndarray, cond: ConditioningBundle) -> np.ndarray:
    """Network prediction of the clean chunk for a single noisy chunk."""
    dims = params.dims
    noisy = np.asarray(noisy, dtype=np.float64)
    if noisy.shape != (dims.horizon, dims.action_dim):
        raise DenoiserError(
            f"chunk shape {noisy.shape} != ({dims.horizon}, {dims.action_dim})"
        )
    if not np.all(np.isfinite(noisy)):
        raise DenoiserError("noisy chunk contains non-finite entries")
    cond.validate(dims)
    x = _assemble_features(
        params,
        noisy[None],
        np.array([cond.timestep], dtype=np.float64),
        cond.proprio[None],
        cond.context[None],
        np.array([cond.embodiment_id]),
    )
    y = kernels.mlp_forward(x, params.weights, params.biases)
    return y.reshape(dims.horizon, dims.action_dim)


def make_predictor(
    params: DenoiserParams,
    cond: ConditioningBundle,
    n_steps: int,
):
    """Fast closure (chunk, k) -> prediction bound to fixed conditioning.

    Single (H, D) chunks run through the compiled kernel with a reused
    feature buffer; (B, H, D) batches take the NumPy path. For the flow head
    k is a float in [0, 1] and is mapped onto the timestep embedding grid.
    """
    dims = params.dims
    cond.validate(dims)
    runner = kernels.ForwardRunner(params.weights, params.biases)
    hd = dims.output_dim
    te = dims.timestep_dim
    tail = np.concatenate(
        [
            cond.proprio,
            cond.context,
            np.eye(dims.n_embodiments)[cond.embodiment_id],
            params.soft_prompts[cond.embodiment_id],
        ]
    )
    buf = np.empty(dims.input_dim(params.kind))
    buf[hd + te:] = tail
    scale = float(n_steps) if params.kind == "flow" else 1.0
    # Integer levels hit this table; flow-head floats are embedded on the fly.
    temb_table = timestep_embedding(np.arange(n_steps + 1, dtype=np.float64), te)

    def predict(chunk: np.ndarray, k) -> np.ndarray:
        if chunk.ndim == 2:
            buf[:hd] = chunk.reshape(hd)
            kv = k * scale
            if isinstance(k, (int, np.integer)) and scale == 1.0:
                buf[hd : hd + te] = temb_table[k]
            else:
                buf[hd : hd + te] = timestep_embedding(np.array([kv]), te)[0]
            return runner(buf).reshape(dims.horizon, dims.action_dim)
        n = chunk.shape[0]
        x = np.empty((n, dims.input_dim(params.kind)))
        x[:, :hd] = chunk.reshape(n, hd)
        x[:, hd : hd + te] = timestep_embedding(
            np.full(n, k * scale, dtype=np.float64), te
        )
        x[:, hd + te:] = tail
        y = kernels.mlp_forward(x, params.weights, params.biases)
        return y.reshape(n, dims.horizon, dims.action_dim)

    return predict


# ---------------------------------------------------------------------------
# Training data, loss, gradients
# ---------------------------------------------------------------------------

@dataclass
class TrainBatch:
    """Homogeneous arrays for one batch (or a whole dataset)."""

    clean: np.ndarray     # (B, H, D)
    proprio: np.ndarray   # (B, Dp)
    context: np.ndarray   # (B, Dc)
    emb_ids: np.ndarray   # (B,) int

    def __post_init__(self):
        if len(self.clean) < 1:
            raise DenoiserError("batch must contain at least one sample")

    def __len__(self) -> int:
        return len(self.clean)

    def take(self, idx: np.ndarray) -> "TrainBatch":
        return TrainBatch(self.clean[idx], self.proprio[idx], self.context[idx],
                          self.emb_ids[idx])


def _scales_for(batch: TrainBatch, cov_by_embodiment: dict) -> np.ndarray:
    rows = []
    for e in batch.emb_ids:
        cov = cov_by_embodiment.get(int(e))
        if cov is None:
            raise DenoiserError(f"no covariance registered for embodiment {e}")
        rows.append(cov.scale)
    return np.stack(rows)


def _head_inputs(
    params: DenoiserParams,
    batch: TrainBatch,
    schedule: NoiseSchedule | None,
    cov_by_embodiment: dict | None,
    rng: np.random.Generator,
):
    """Draw noise levels/noise and build (noisy inputs, time values, targets)."""
    n = len(batch)
    if params.kind == "regression":
        return None, None, batch.clean
    scales = _scales_for(batch, cov_by_embodiment)[:, None, :]
    eps = rng.standard_normal(batch.clean.shape)
    if params.kind == "flow":
        t = rng.uniform(0.0, 1.0, n)
        x1 = scales * eps
        xt = (1.0 - t)[:, None, None] * batch.clean + t[:, None, None] * x1
        return xt, t, x1 - batch.clean
    ks = rng.integers(1, schedule.steps + 1, n)
    abar = schedule.alpha_bars[ks - 1][:, None, None]
    noisy = np.sqrt(abar) * batch.clean + np.sqrt(1.0 - abar) * scales * eps
    return noisy, ks.astype(np.float64), batch.clean


def _forward_cached(params, batch, schedule, cov_by_embodiment, rng):
    noisy, tvals, targets = _head_inputs(params, batch, schedule, cov_by_embodiment, rng)
    x = _assemble_features(params, noisy, tvals, batch.proprio, batch.context,
                           batch.emb_ids)
    y, acts = kernels.mlp_forward_cached(x, params.weights, params.biases)
    return x, y, acts, targets.reshape(len(batch), -1)


def loss_mse(
    params: DenoiserParams,
    batch: TrainBatch,
    schedule: NoiseSchedule | None,
    cov_by_embodiment: dict | None,
    seed: int,
    predict=None,
) -> float:
    """Mean squared error of the head on one noise draw (seed-deterministic).

    `predict` overrides the network with an oracle (noisy, tvals, batch) ->
    (B, H, D) for testing.
    """
    rng = np.random.default_rng(seed)
    if predict is not None:
        noisy, tvals, targets = _head_inputs(params, batch, schedule,
                                             cov_by_embodiment, rng)
        pred = predict(noisy, tvals, batch)
        return float(np.mean((pred.reshape(len(batch), -1)
                              - targets.reshape(len(batch), -1)) ** 2))
    _, y, _, targets = _forward_cached(params, batch, schedule, cov_by_embodiment, rng)
    return float(np.mean((y - targets) ** 2))


def loss_and_grad(
    params: DenoiserParams,
    batch: TrainBatch,
    schedule: NoiseSchedule | None,
    cov_by_embodiment: dict | None,
    seed: int,
):
    """Loss plus exact gradients for every parameter tensor, keyed like flat()."""
    rng = np.random.default_rng(seed)
    x, y, acts, targets = _forward_cached(params, batch, schedule,
                                          cov_by_embodiment, rng)
    diff = y - targets
    loss = float(np.mean(diff**2))
    dy = (2.0 / diff.size) * diff
    dws, dbs, dx = kernels.mlp_backward(dy, acts, params.weights)
    grads = {}
    for i, (dW, db) in enumerate(zip(dws, dbs)):
        grads[f"W{i}"] = dW
        grads[f"b{i}"] = db
    dprompts = np.zeros_like(params.soft_prompts)
    off = _prompt_offset(params.dims, params.kind)
    np.add.at(dprompts, batch.emb_ids, dx[:, off:])
    grads["prompts"] = dprompts
    return loss, grads


def grad(params, batch, schedule, cov_by_embodiment, seed):
    return loss_and_grad(params, batch, schedule, cov_by_embodiment, seed)[1]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamHyper:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def optimizer_step(
    params_flat: dict,
    grads: dict,
    state: AdamState,
    hyper: AdamHyper,
    frozen: frozenset = frozenset(),
):
    """Adam with decoupled weight decay; updates arrays in place.

    Raises on non-finite gradients. Keys in `frozen` are left untouched.
    """
    if hyper.lr <= 0:
        raise DenoiserError(f"learning rate must be positive, got {hyper.lr}")
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params_flat.items():
        if name in frozen:
            continue
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DenoiserError(f"non-finite gradient in {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= hyper.lr * ((m / c1) / (np.sqrt(v / c2) + hyper.eps)
                         + hyper.weight_decay * p)
    return params_flat, state


# ---------------------------------------------------------------------------
# Training loop and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    log_every: int = 25
    checkpoint_every: int = 0  # 0 = final checkpoint only


def train(
    data: TrainBatch,
    dims: ModelDims,
    schedule: NoiseSchedule | None,
    cov_by_embodiment: dict | None,
    cfg: TrainConfig,
    seed: int,
    kind: str = "diffusion",
    frozen_prompts: bool = False,
    checkpoint_dir=None,
):
    """Seeded shuffle/batch/step loop; returns (params, loss_curve).

    loss_curve is a list of (iteration, loss) pairs. With frozen_prompts the
    soft prompt table is zeroed and excluded from updates.
    """
    if len(data) < 1:
        raise DenoiserError("empty training dataset")
    rng = np.random.default_rng(seed)
    params = init_params(dims, rng, kind=kind)
    if frozen_prompts:
        params.soft_prompts[:] = 0.0
    flat = params.flat()
    state = AdamState()
    hyper = AdamHyper(lr=cfg.lr, weight_decay=cfg.weight_decay)
    frozen = frozenset(["prompts"]) if frozen_prompts else frozenset()

    n = len(data)
    order = np.arange(n)
    cursor = n  # force a shuffle before the first batch
    curve = []
    for it in range(1, cfg.iterations + 1):
        if cursor + cfg.batch_size > n:
            rng.shuffle(order)
            cursor = 0
        idx = order[cursor : cursor + min(cfg.batch_size, n)]
        cursor += cfg.batch_size
        batch = data.take(idx)
        step_seed = int(rng.integers(0, 2**63 - 1))
        loss, grads = loss_and_grad(params, batch, schedule, cov_by_embodiment,
                                    step_seed)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {it}")
        optimizer_step(flat, grads, state, hyper, frozen=frozen)
        if it % cfg.log_every == 0 or it == cfg.iterations:
            curve.append((it, loss))
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                and it % cfg.checkpoint_every == 0:
            save_checkpoint(params, f"{checkpoint_dir}/ckpt_{it:06d}.bin")
    return params, curve


CKPT_VERSION = "ckpt_v1"


def save_checkpoint(params: DenoiserParams, path) -> None:
    """Write a JSON manifest line followed by little-endian float64 payloads."""
    tensors = []
    payload = bytearray()
    for name, arr in params.flat().items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": len(payload),
            "nbytes": len(raw),
        })
        payload += raw
    manifest = {
        "version": CKPT_VERSION,
        "endianness": "little",
        "dtype": "float64",
        "kind": params.kind,
        "dims": params.dims.to_dict(),
        "tensors": tensors,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        fh.write(bytes(payload))


def load_checkpoint(path) -> DenoiserParams:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode())
        payload = fh.read()
    if manifest.get("version") != CKPT_VERSION:
        raise DenoiserError(f"unsupported checkpoint version {manifest.get('version')!r}")
    dims = ModelDims(**manifest["dims"])
    arrays = {}
    for t in manifest["tensors"]:
        buf = payload[t["offset"] : t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(t["shape"]).copy()
    n_layers = dims.n_hidden + 1
    return DenoiserParams(
        dims=dims,
        kind=manifest["kind"],
        weights=[arrays[f"W{i}"] for i in range(n_layers)],
        biases=[arrays[f"b{i}"] for i in range(n_layers)],
        soft_prompts=arrays["prompts"],
    )
