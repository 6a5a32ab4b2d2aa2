"""Experiment orchestration: stages, ablation matrix, metrics, projection.

Stages compose into out-dir conventions used by the CLI: `gen-data` writes
dataset.jsonl.gz, `train` writes ckpt_final.bin and loss_curve.csv, `eval`
writes metrics.json / metrics.csv / features.csv. The ablation and
head-comparison runners share one dataset and reuse checkpoints between
rows whose training-relevant config agrees.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import denoiser, mptd, sampler, worldsim
from .config import (
    ABLATION_VARIANTS,
    config_hash,
    provenance_string,
    train_relevant_config,
    variant_config,
)
from .embodiment import EmbodimentRegistry, EmbodimentSpec, UnifiedActionLayout
from .schedule import build_cosine_schedule, build_ebf_covariance, unit_covariance
from .util import canonical_hash, stream_rng, stream_seed


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _derive_int(*parts) -> int:
    text = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


# ---------------------------------------------------------------------------
# Config -> objects
# ---------------------------------------------------------------------------

def build_layout(cfg: dict) -> UnifiedActionLayout:
    return UnifiedActionLayout.from_widths(cfg["layout"]["windows"])


def build_registry(cfg: dict) -> EmbodimentRegistry:
    reg = EmbodimentRegistry(layout=build_layout(cfg))
    for e in cfg["embodiments"]:
        reg.register(EmbodimentSpec.from_dict(e))
    return reg


def build_schedule(cfg: dict):
    return build_cosine_schedule(cfg["diffusion"]["steps"])


def build_covariances(cfg: dict, registry: EmbodimentRegistry) -> dict:
    """Per-embodiment noise scales; disabling EBF collapses all to identity."""
    layout = registry.layout
    if not cfg["ablation"]["use_ebf"]:
        return {spec.id: unit_covariance(layout) for spec in registry.specs()}
    delta = cfg["noise"]["delta"]
    stepwise = cfg["noise"]["stepwise_pyramid"]
    return {
        spec.id: build_ebf_covariance(spec, layout, delta, stepwise=stepwise)
        for spec in registry.specs()
    }


def model_dims(cfg: dict, registry: EmbodimentRegistry) -> denoiser.ModelDims:
    return denoiser.ModelDims(
        horizon=cfg["model"]["horizon"],
        action_dim=registry.layout.total_dim,
        proprio_dim=worldsim.PROPRIO_DIM,
        context_dim=worldsim.OBS_DIM,
        n_embodiments=len(registry),
        prompt_dim=cfg["model"]["prompt_dim"],
        timestep_dim=cfg["model"]["timestep_dim"],
        hidden=cfg["model"]["hidden"],
        n_hidden=cfg["model"]["n_hidden"],
    )


def chunks_from_trajectories(trajectories, horizon: int) -> denoiser.TrainBatch:
    """Every length-H action window of every trajectory, with the
    conditioning captured at the window's first step."""
    clean, proprio, context, emb = [], [], [], []
    for traj in trajectories:
        n = len(traj)
        for start in range(0, n - horizon + 1):
            clean.append(traj.actions[start : start + horizon])
            proprio.append(traj.proprios[start])
            context.append(traj.observations[start])
            emb.append(traj.embodiment_id)
    if not clean:
        raise worldsim.WorldError(
            f"no trajectory is long enough for horizon {horizon}"
        )
    return denoiser.TrainBatch(
        clean=np.asarray(clean),
        proprio=np.asarray(proprio),
        context=np.asarray(context),
        emb_ids=np.asarray(emb, dtype=int),
    )


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_gen_data(cfg: dict, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    registry = build_registry(cfg)
    tasks = worldsim.default_tasks()
    data_seed = _derive_int(cfg["seed"], "data")
    trajs = worldsim.generate_dataset(
        tasks, registry, cfg["data"]["trajs_per_pair"], seed=data_seed
    )
    path = os.path.join(out_dir, "dataset.jsonl.gz")
    header = worldsim.dataset_header(registry, tasks, data_seed)
    worldsim.save_dataset(path, header, trajs)
    return path


def head_kind(cfg: dict) -> str:
    return "flow" if cfg["sampler"]["mode"] == "flow_matching" else "diffusion"


def stage_train(cfg: dict, dataset_path, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    _, trajs = worldsim.load_dataset(dataset_path)
    registry = build_registry(cfg)
    data = chunks_from_trajectories(trajs, cfg["model"]["horizon"])
    schedule = build_schedule(cfg)
    covs = build_covariances(cfg, registry)
    tcfg = denoiser.TrainConfig(
        iterations=cfg["train"]["iterations"],
        batch_size=cfg["train"]["batch"],
        lr=cfg["train"]["lr"],
        weight_decay=cfg["train"]["weight_decay"],
        log_every=cfg["train"]["log_every"],
        checkpoint_every=cfg["train"]["checkpoint_every"],
    )
    params, curve = denoiser.train(
        data,
        model_dims(cfg, registry),
        schedule,
        covs,
        tcfg,
        seed=stream_seed(cfg["seed"], "train"),
        kind=head_kind(cfg),
        frozen_prompts=not cfg["ablation"]["use_soft_prompt"],
        checkpoint_dir=out_dir,
    )
    ckpt = os.path.join(out_dir, "ckpt_final.bin")
    denoiser.save_checkpoint(params, ckpt)
    with open(os.path.join(out_dir, "loss_curve.csv"), "w") as fh:
        fh.write("iteration,loss\n")
        for it, loss in curve:
            fh.write(f"{it},{loss!r}\n")
    return ckpt


def _chunk_policy(cfg, params, spec, task, registry, schedule, cov, meta_actions):
    """Closure (obs, proprio, rng) -> (H, D) chunk for one (embodiment, task)."""
    layout = registry.layout
    horizon = cfg["model"]["horizon"]
    mode = cfg["sampler"]["mode"]
    mptd_on = cfg["mptd"]["enabled"] and cfg["ablation"]["use_mptd"]
    mcfg = mptd.MptdConfig(
        exploration_scale=cfg["mptd"]["exploration_scale"],
        m0=cfg["mptd"]["m0"],
        m1=cfg["mptd"]["m1"],
        branching=cfg["mptd"]["branching"],
        budget=cfg["mptd"]["budget"],
        jumpy_interval=cfg["mptd"]["jumpy_interval"],
        guidance_weight=cfg["mptd"]["guidance_weight"],
    )

    def policy(obs, proprio, rng):
        cond = denoiser.ConditioningBundle(
            proprio=proprio, context=obs, timestep=schedule.steps,
            embodiment_id=spec.id,
        )
        predict = denoiser.make_predictor(params, cond, schedule.steps)
        if mode == "flow_matching":
            return sampler.sample_flow_matching(
                predict, (horizon, layout.total_dim), cov, rng,
                n_steps=cfg["sampler"]["flow_steps"],
            )
        if mptd_on:
            chunk, _trace = mptd.mptd_sample(
                predict, horizon, schedule, cov, meta_actions, mcfg, rng,
                layout, spec,
            )
            return chunk
        return sampler.sample_full(predict, (horizon, layout.total_dim),
                                   schedule, cov, rng)

    return policy


def _episode_split(total: int, n_emb: int, n_tasks: int):
    """Round-robin split of the episode budget over embodiments, then tasks."""
    per_emb = [total // n_emb + (1 if i < total % n_emb else 0) for i in range(n_emb)]
    split = []
    for e, count in enumerate(per_emb):
        counts = [count // n_tasks + (1 if t < count % n_tasks else 0)
                  for t in range(n_tasks)]
        split.append(counts)
    return split


def stage_eval(cfg: dict, ckpt_path, dataset_path, out_dir, variant: str = "run") -> dict:
    os.makedirs(out_dir, exist_ok=True)
    params = denoiser.load_checkpoint(ckpt_path)
    registry = build_registry(cfg)
    tasks = worldsim.default_tasks()
    schedule = build_schedule(cfg)
    covs = build_covariances(cfg, registry)
    mptd_on = cfg["mptd"]["enabled"] and cfg["ablation"]["use_mptd"]
    trajs = None
    if mptd_on:
        _, trajs = worldsim.load_dataset(dataset_path)

    split = _episode_split(cfg["eval"]["episodes"], len(registry), len(tasks))
    per_emb = {}
    failures = {"mobility": 0, "interaction": 0}
    total_eps = 0
    total_succ = 0
    feature_rows = []
    for i, spec in enumerate(registry.specs()):
        emb_eps, emb_succ = 0, 0
        for task in tasks:
            episodes = split[i][task.id]
            if episodes == 0:
                continue
            meta = (mptd.build_meta_actions(trajs, task.id, spec, registry)
                    if mptd_on else {})
            policy = _chunk_policy(cfg, params, spec, task, registry, schedule,
                                   covs[spec.id], meta)
            res = worldsim.evaluate(
                policy, spec, task, episodes,
                seed=_derive_int(cfg["seed"], "eval", spec.id, task.id),
                layout=registry.layout,
                horizon=cfg["model"]["horizon"],
                replan_every=cfg["eval"]["replan_every"],
                collect_features=True,
            )
            emb_eps += res["episodes"]
            emb_succ += res["successes"]
            failures["mobility"] += res["failures"]["mobility"]
            failures["interaction"] += res["failures"]["interaction"]
            for row in res["features"]:
                feature_rows.append((spec.name, row))
        per_emb[spec.name] = {"episodes": emb_eps, "successes": emb_succ,
                              "rate": emb_succ / emb_eps if emb_eps else 0.0}
        total_eps += emb_eps
        total_succ += emb_succ

    rates = {name: v["rate"] for name, v in per_emb.items()}
    metrics = {
        "variant": variant,
        "per_embodiment": rates,
        "avg": sum(rates.values()) / len(rates),
        "failures": failures,
        "seeds": [cfg["seed"]],
        "config_hash": config_hash(cfg),
        "counts": {
            "episodes": total_eps,
            "successes": total_succ,
            "per_embodiment": {
                name: {"episodes": v["episodes"], "successes": v["successes"]}
                for name, v in per_emb.items()
            },
        },
        "dataset_hash": file_hash(dataset_path) if dataset_path else None,
        "provenance": provenance_string(cfg),
    }
    write_metrics(metrics, out_dir)
    with open(os.path.join(out_dir, "features.csv"), "w") as fh:
        fh.write("embodiment,f0,f1,f2,f3\n")
        for name, row in feature_rows:
            fh.write(name + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return metrics


def write_metrics(metrics: dict, out_dir) -> None:
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        fh.write(json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    names = sorted(metrics["per_embodiment"])
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write("variant," + ",".join(names) + ",avg,mobility,interaction\n")
        fh.write(
            metrics["variant"] + ","
            + ",".join(repr(metrics["per_embodiment"][n]) for n in names)
            + f",{metrics['avg']!r},{metrics['failures']['mobility']}"
            + f",{metrics['failures']['interaction']}\n"
        )


def stage_sample(cfg: dict, ckpt_path, out_dir, embodiment_id: int = 0,
                 task_id: int = 0, seed: int | None = None) -> dict:
    """Generate one chunk from a fresh episode's initial observation."""
    os.makedirs(out_dir, exist_ok=True)
    params = denoiser.load_checkpoint(ckpt_path)
    registry = build_registry(cfg)
    spec = registry.get(embodiment_id)
    task = worldsim.default_tasks()[task_id]
    schedule = build_schedule(cfg)
    cov = build_covariances(cfg, registry)[spec.id]
    seed = cfg["seed"] if seed is None else seed
    rng = stream_rng(seed, "sample")
    state = worldsim.init_state(spec, task, rng)
    cond = denoiser.ConditioningBundle(
        proprio=worldsim.proprioception(state, spec, registry.layout),
        context=worldsim.observe(state, task),
        timestep=schedule.steps,
        embodiment_id=spec.id,
    )
    predict = sampler.CountingPredictor(
        denoiser.make_predictor(params, cond, schedule.steps)
    )
    horizon = cfg["model"]["horizon"]
    mode = cfg["sampler"]["mode"]
    if mode == "flow_matching":
        chunk = sampler.sample_flow_matching(
            predict, (horizon, registry.layout.total_dim), cov, rng,
            n_steps=cfg["sampler"]["flow_steps"],
        )
    else:
        scfg = sampler.SamplerConfig(steps=schedule.steps,
                                     jumpy_interval=cfg["sampler"]["jumpy_interval"])
        chunk = sampler.sample_jumpy(predict, (horizon, registry.layout.total_dim),
                                     schedule, cov, scfg, rng)
    with open(os.path.join(out_dir, "chunk.csv"), "w") as fh:
        fh.write(",".join(f"a{d}" for d in range(registry.layout.total_dim)) + "\n")
        for row in chunk:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    sidecar = {
        "seed": seed,
        "mode": mode,
        "evaluations": predict.evaluations,
        "embodiment": spec.name,
        "task": task.id,
    }
    with open(os.path.join(out_dir, "sample.json"), "w") as fh:
        fh.write(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return sidecar


# ---------------------------------------------------------------------------
# Ablation matrix and head comparison
# ---------------------------------------------------------------------------

def _train_cached(vcfg, dataset_path, dataset_hash, cache_dir) -> str:
    key = canonical_hash({"train": train_relevant_config(vcfg),
                          "dataset": dataset_hash})
    ckpt = os.path.join(cache_dir, f"{key}.bin")
    if not os.path.exists(ckpt):
        tmp_dir = os.path.join(cache_dir, key)
        stage_train(vcfg, dataset_path, tmp_dir)
        os.replace(os.path.join(tmp_dir, "ckpt_final.bin"), ckpt)
        os.replace(os.path.join(tmp_dir, "loss_curve.csv"),
                   os.path.join(cache_dir, f"{key}_loss.csv"))
    return ckpt


def run_variant(vcfg: dict, dataset_path, out_dir, variant: str,
                cache_dir) -> dict:
    ckpt = _train_cached(vcfg, dataset_path, file_hash(dataset_path), cache_dir)
    return stage_eval(vcfg, ckpt, dataset_path, out_dir, variant=variant)


def run_ablation(cfg: dict, out_dir, seeds=None) -> dict:
    """Train/evaluate the five-row flag matrix with shared data and seeds."""
    seeds = list(seeds) if seeds else [cfg["seed"]]
    os.makedirs(out_dir, exist_ok=True)
    cache_dir = os.path.join(out_dir, "ckpts")
    os.makedirs(cache_dir, exist_ok=True)
    dataset_path = stage_gen_data(cfg, out_dir)
    dataset_hash = file_hash(dataset_path)

    rows = []
    for variant in ABLATION_VARIANTS:
        per_seed = []
        for s in seeds:
            vcfg = variant_config(cfg, variant)
            vcfg["seed"] = s
            row_dir = os.path.join(out_dir, "rows", f"{variant}_seed{s}")
            m = run_variant(vcfg, dataset_path, row_dir, variant, cache_dir)
            assert m["dataset_hash"] == dataset_hash
            per_seed.append(m)
        names = sorted(per_seed[0]["per_embodiment"])
        combined = {
            "variant": variant,
            "per_embodiment": {
                n: float(np.mean([m["per_embodiment"][n] for m in per_seed]))
                for n in names
            },
            "avg": float(np.mean([m["avg"] for m in per_seed])),
            "failures": {
                k: int(sum(m["failures"][k] for m in per_seed))
                for k in ("mobility", "interaction")
            },
            "seeds": seeds,
            "config_hashes": [m["config_hash"] for m in per_seed],
        }
        rows.append(combined)

    table = {
        "rows": rows,
        "seeds": seeds,
        "dataset_hash": dataset_hash,
        "base_config_hash": config_hash(cfg),
    }
    with open(os.path.join(out_dir, "ablation.json"), "w") as fh:
        fh.write(json.dumps(table, sort_keys=True, indent=2) + "\n")
    names = sorted(rows[0]["per_embodiment"])
    with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
        fh.write("variant," + ",".join(names) + ",avg,mobility,interaction\n")
        for r in rows:
            fh.write(
                r["variant"] + ","
                + ",".join(repr(r["per_embodiment"][n]) for n in names)
                + f",{r['avg']!r},{r['failures']['mobility']}"
                + f",{r['failures']['interaction']}\n"
            )
    return table


HEAD_ROWS = (
    ("fh", "flow_matching", False),
    ("fh_ebf", "flow_matching", True),
    ("dh", "diffusion", False),
    ("dh_ebf", "diffusion", True),
)


def run_head_comparison(cfg: dict, out_dir) -> dict:
    """Four-row structured-noise study across head types (tree search off)."""
    os.makedirs(out_dir, exist_ok=True)
    cache_dir = os.path.join(out_dir, "ckpts")
    os.makedirs(cache_dir, exist_ok=True)
    dataset_path = stage_gen_data(cfg, out_dir)

    rows = []
    for name, mode, use_ebf in HEAD_ROWS:
        vcfg = copy.deepcopy(cfg)
        vcfg["sampler"]["mode"] = mode
        vcfg["ablation"]["use_ebf"] = use_ebf
        vcfg["ablation"]["use_mptd"] = False
        row_dir = os.path.join(out_dir, "rows", name)
        m = run_variant(vcfg, dataset_path, row_dir, name, cache_dir)
        rows.append(m)

    table = {"rows": rows, "base_config_hash": config_hash(cfg)}
    with open(os.path.join(out_dir, "head_comparison.json"), "w") as fh:
        fh.write(json.dumps(table, sort_keys=True, indent=2) + "\n")
    names = sorted(rows[0]["per_embodiment"])
    with open(os.path.join(out_dir, "head_comparison.csv"), "w") as fh:
        fh.write("variant," + ",".join(names) + ",avg\n")
        for r in rows:
            fh.write(r["variant"] + ","
                     + ",".join(repr(r["per_embodiment"][n]) for n in names)
                     + f",{r['avg']!r}\n")
    return table


# ---------------------------------------------------------------------------
# Final-action projection (2-D view of effector endpoints)
# ---------------------------------------------------------------------------

def project_actions(features_by_label: dict, dims: int = 2):
    """Exact PCA of fingertip-pair features onto the top principal directions.

    Returns (rows, info): rows are (label, x, y) tuples; info records the
    eigenvalues and a degeneracy flag when the covariance has rank < dims
    (remaining coordinates are emitted as zeros).
    """
    labels, stacks = [], []
    for label in sorted(features_by_label):
        feats = np.atleast_2d(np.asarray(features_by_label[label], dtype=np.float64))
        labels.extend([label] * len(feats))
        stacks.append(feats)
    x = np.concatenate(stacks)
    if x.shape[0] < 3:
        raise ValueError("projection needs at least 3 samples")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(len(x) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    rank = int(np.sum(evals > 1e-12 * max(evals[0], 1e-300)))
    directions = evecs[:, :dims].copy()
    for j in range(dims):
        lead = np.argmax(np.abs(directions[:, j]))
        if directions[lead, j] < 0:
            directions[:, j] = -directions[:, j]
        if j >= rank:
            directions[:, j] = 0.0
    coords = centered @ directions
    rows = [(label, float(c[0]), float(c[1])) for label, c in zip(labels, coords)]
    info = {"eigenvalues": evals.tolist(), "rank": rank, "degenerate": rank < dims}
    return rows, info


def stage_project(features_csv, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    by_label: dict[str, list] = {}
    with open(features_csv) as fh:
        header = fh.readline()
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) < 5:
                continue
            by_label.setdefault(parts[0], []).append([float(v) for v in parts[1:5]])
    rows, info = project_actions(by_label)
    with open(os.path.join(out_dir, "projection.csv"), "w") as fh:
        fh.write("embodiment,x,y\n")
        for label, px, py in rows:
            fh.write(f"{label},{px!r},{py!r}\n")
    with open(os.path.join(out_dir, "projection_info.json"), "w") as fh:
        fh.write(json.dumps(info, sort_keys=True, indent=2) + "\n")
    return info
