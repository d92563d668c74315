"""End-to-end experiment stages driven by one config.

Every stage is deterministic in (config, seed) and idempotent: rerunning with
identical inputs rewrites identical artifacts (atomic temp-then-rename).
Artifacts live under the config's output directory:

    config.json                 copy of the driving config
    clips/                      audited WAV library + split manifest
    scenes/, episodes/          world dumps and frozen evaluation episodes
    checkpoints/                separator front, policies, per-model refiners
    telemetry/                  training curves (CSV)
    results/                    metric tables (CSV) + per-episode records
    curves/                     SVG figures
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, replace

import numpy as np

from .. import tensor as T
from ..acoustics import NoiseModel
from ..control import (
    CompositePolicy,
    PpoConfig,
    TrainContext,
    fit_refiner_for_baseline,
    make_scripted,
    train_policy,
)
from ..control.policy import ActorCritic, PolicyConfig
from ..control.training import EpisodeStream, RefinerReplay, refiner_update
from ..env import Observation
from ..errors import ConfigError
from ..presets import get_preset
from ..separator import (
    PretrainDataset,
    Separator,
    SeparatorConfig,
    collect_pretrain_dataset,
    make_refiner,
    pretrain,
)
from ..signal import write_wav
from ..world import (
    EpisodeConstraints,
    default_sound_classes,
    generate_scene,
    sample_episode,
    save_episodes,
    load_episodes,
    split_clips,
    synthesize_clip,
    WorldParams,
)
from .config import ExperimentConfig, atomic_write_text
from .evaluate import (
    EvalModel,
    aggregate,
    evaluate_navigation,
    evaluate_separation,
    per_step_curves,
)

VARIANTS = ("near", "far")


def _missing(path: str, producer: str) -> None:
    if not os.path.exists(path):
        raise ConfigError(f"missing artifact {path}; run `avsep {producer}` first")


def world_params(cfg: ExperimentConfig) -> WorldParams:
    preset = cfg.preset_obj
    return WorldParams(
        size_range=preset.room_size_range,
        min_source_dist=preset.min_source_dist,
        far_start_range=preset.far_start_range,
    )


def constraints(cfg: ExperimentConfig) -> EpisodeConstraints:
    preset = cfg.preset_obj
    return EpisodeConstraints(
        k=cfg.k_sources,
        min_source_dist=preset.min_source_dist,
        far_start_range=preset.far_start_range,
        t_near=preset.t_near,
        t_far=preset.t_far,
    )


def build_scenes(cfg: ExperimentConfig, split: str) -> dict:
    seeds = {
        "train": cfg.train_scene_seeds,
        "val": cfg.val_scene_seeds,
        "test": cfg.test_scene_seeds,
    }[split]
    params = world_params(cfg)
    return {seed: generate_scene(seed, params) for seed in seeds}


def clip_pool(cfg: ExperimentConfig) -> dict:
    pool = {c.id: list(range(cfg.clips_per_class)) for c in default_sound_classes()}
    return split_clips(pool, cfg.clip_split_seed)


# ---------------------------------------------------------------------------
# stages


def stage_synth_sounds(cfg: ExperimentConfig) -> dict:
    """Materialize the clip library as WAV files plus the split manifest."""
    preset = cfg.preset_obj
    out = cfg.path("clips")
    os.makedirs(out, exist_ok=True)
    classes = default_sound_classes()
    for cls in classes:
        cls_dir = os.path.join(out, cls.name)
        os.makedirs(cls_dir, exist_ok=True)
        for clip_id in range(cfg.clips_per_class):
            clip = synthesize_clip(
                cls, clip_id, duration=preset.clip_seconds,
                sample_rate=preset.sample_rate, power=preset.clip_power,
            )
            write_wav(os.path.join(cls_dir, f"{clip_id:03d}.wav"), clip)
    splits = clip_pool(cfg)
    atomic_write_text(cfg.path("clips", "splits.json"), json.dumps(splits, indent=1))
    cfg.save(cfg.path("config.json"))
    return {"classes": len(classes), "clips_per_class": cfg.clips_per_class}


def stage_gen_episodes(cfg: ExperimentConfig) -> dict:
    """Freeze scenes and the evaluation episode sets."""
    pool = clip_pool(cfg)
    cons = constraints(cfg)
    os.makedirs(cfg.path("scenes"), exist_ok=True)
    os.makedirs(cfg.path("episodes"), exist_ok=True)
    counts = {}
    for split in ("train", "val", "test"):
        for seed, scene in build_scenes(cfg, split).items():
            atomic_write_text(
                cfg.path("scenes", f"{split}_{seed}.json"),
                json.dumps(scene.to_json(), indent=1),
            )
    test_scenes = build_scenes(cfg, "test")
    for variant in VARIANTS:
        for heard in (True, False):
            episodes = []
            scene_list = list(test_scenes.values())
            for i in range(cfg.episodes_per_eval):
                scene = scene_list[i % len(scene_list)]
                episodes.append(
                    sample_episode(
                        scene,
                        variant,
                        cons,
                        seed=cfg.seed * 7_919 + i,
                        clip_pool=pool,
                        split="train" if heard else "test",
                        heard=heard,
                    )
                )
            tag = "heard" if heard else "unheard"
            save_episodes(cfg.path("episodes", f"{variant}_{tag}.json"), episodes)
            counts[f"{variant}_{tag}"] = len(episodes)
    return counts


def stage_pretrain(cfg: ExperimentConfig) -> dict:
    """Collect the supervision dataset and pretrain the separator front."""
    preset = cfg.preset_obj
    scenes = list(build_scenes(cfg, "train").values())
    pool = clip_pool(cfg)
    dataset = collect_pretrain_dataset(
        scenes, cfg.pretrain_samples_per_scene, preset, seed=cfg.seed, clip_pool=pool
    )
    separator = Separator(SeparatorConfig.from_preset(preset), seed=cfg.seed)
    result = pretrain(
        separator,
        dataset,
        lr=cfg.pretrain_lr,
        epochs=cfg.pretrain_epochs,
        batch_size=cfg.pretrain_batch,
        seed=cfg.seed,
    )
    os.makedirs(cfg.path("checkpoints"), exist_ok=True)
    T.save_checkpoint(cfg.path("checkpoints", "separator_front.ckpt"), separator.state_arrays())
    report = {
        "n_samples": len(dataset),
        "skipped": dataset.skipped,
        "mask_val": result.mask_val,
        "identity_val": result.identity_val,
        "mask_vs_identity": result.mask_val / result.identity_val,
        "mono_val": result.mono_val,
        "copy_val": result.copy_val,
        "mask_history": result.mask_history,
        "mono_history": result.mono_history,
    }
    atomic_write_text(cfg.path("pretrain_report.json"), json.dumps(report, indent=1))
    return report


def load_separator(cfg: ExperimentConfig) -> Separator:
    path = cfg.path("checkpoints", "separator_front.ckpt")
    _missing(path, "pretrain")
    separator = Separator(SeparatorConfig.from_preset(cfg.preset_obj), seed=cfg.seed)
    separator.load_state(T.load_checkpoint(path))
    separator.front_frozen = True
    return separator


def make_context(cfg: ExperimentConfig, separator: Separator) -> TrainContext:
    from ..control import RewardConfig

    return TrainContext(
        scenes=list(build_scenes(cfg, "train").values()),
        preset=cfg.preset_obj,
        separator=separator,
        constraints=constraints(cfg),
        rewards=RewardConfig(
            entropy_quality=cfg.entropy_quality, entropy_other=cfg.entropy_other
        ),
    )


def _ppo(cfg: ExperimentConfig) -> PpoConfig:
    return PpoConfig(
        epochs=cfg.ppo_epochs,
        sequences_per_update=cfg.ppo_sequences,
        rollout_steps=cfg.ppo_rollout,
        lr=cfg.ppo_lr,
    )


def save_policy(cfg: ExperimentConfig, name: str, policy: ActorCritic) -> None:
    os.makedirs(cfg.path("checkpoints"), exist_ok=True)
    T.save_checkpoint(cfg.path("checkpoints", f"policy_{name}.ckpt"), policy.state_arrays())
    atomic_write_text(
        cfg.path("checkpoints", f"policy_{name}.json"), json.dumps(asdict(policy.cfg))
    )


def load_policy(cfg: ExperimentConfig, name: str) -> ActorCritic:
    ckpt = cfg.path("checkpoints", f"policy_{name}.ckpt")
    _missing(ckpt, "train")
    with open(cfg.path("checkpoints", f"policy_{name}.json")) as fh:
        pcfg = PolicyConfig(**json.load(fh))
    policy = ActorCritic(pcfg, seed=0)
    policy.load_state(T.load_checkpoint(ckpt))
    return policy


def save_refiner(cfg: ExperimentConfig, name: str, separator: Separator) -> None:
    arrays = {
        k: v.data for k, v in separator.f_refine.named_parameters("f_refine").items()
    }
    arrays.update(separator.f_refine._buffers("f_refine"))
    T.save_checkpoint(cfg.path("checkpoints", f"refiner_{name}.ckpt"), arrays)


def load_refiner_into(cfg: ExperimentConfig, name: str, base: Separator) -> Separator:
    path = cfg.path("checkpoints", f"refiner_{name}.ckpt")
    _missing(path, "train")
    refiner = make_refiner(base.cfg, seed=0)
    refiner.load_state(T.load_checkpoint(path), "f_refine")
    return base.clone_with_refiner(refiner)


def _telemetry_csv(rows: list) -> str:
    keys = sorted({k for row in rows for k in row})
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(str(row.get(k, "")) for k in keys))
    return "\n".join(lines) + "\n"


def fit_composite_refiner(cfg, ctx, nav_policy, quality_policy, seed=0, episodes=40, updates=400):
    """Refiner fit on trajectories of the composite far-target controller."""
    preset = cfg.preset_obj
    refiner = make_refiner(ctx.separator.cfg, seed=seed + 404)
    separator = ctx.separator.clone_with_refiner(refiner)
    train_ctx = TrainContext(ctx.scenes, preset, separator, ctx.constraints)
    stream = EpisodeStream(train_ctx, "far", seed=seed)
    replay = RefinerReplay()
    rng = np.random.default_rng([seed, 63])
    adam = T.AdamState(lr=5e-4)
    composite = CompositePolicy(nav_policy, quality_policy, cfg.t_switch)
    actions = ("MoveForward", "TurnLeft", "TurnRight")
    rounds = 4
    for round_idx in range(rounds):
        for _ in range(max(1, episodes // rounds)):
            runner = stream.next_runner()
            composite.reset()
            while not runner.done:
                replay.add(runner.view.mono, runner.refine_input_prev, runner.mono_gt_sliced)
                idx, _ = composite.act(runner.view, runner.t, rng)
                runner.step(actions[idx])
        for _ in range(max(1, updates // rounds)):
            if len(replay) >= 32:
                refiner_update(separator, replay, adam, rng)
    return separator


def stage_train(cfg: ExperimentConfig) -> dict:
    """Train all policies and every model-specific refiner."""
    separator = load_separator(cfg)
    ctx = make_context(cfg, separator)
    os.makedirs(cfg.path("telemetry"), exist_ok=True)
    summary = {}

    jobs = [
        ("quality", "quality", "near", cfg.quality_steps, {}),
        ("nav", "nav", "far", cfg.nav_steps, {}),
        ("novelty", "novelty", "far", cfg.novelty_steps, {}),
        ("avnav", "avnav", "far", cfg.avnav_steps, {}),
    ]
    results = {}
    for name, kind, variant, steps, overrides in jobs:
        result = train_policy(
            ctx, kind, variant, steps, _ppo(cfg), seed=cfg.seed,
            policy_overrides=overrides, u_cycle=cfg.cycle_updates,
        )
        results[name] = result
        save_policy(cfg, name, result.policy)
        save_refiner(cfg, name, result.separator)
        atomic_write_text(
            cfg.path("telemetry", f"train_{name}.csv"), _telemetry_csv(result.telemetry)
        )
        returns = [t.get("mean_return") for t in result.telemetry if t.get("phase") == "P"]
        summary[name] = {
            "env_steps": result.env_steps,
            "final_return": returns[-1] if returns else None,
        }

    # composite far-target refiner
    composite_sep = fit_composite_refiner(
        cfg, ctx, results["nav"].policy, results["quality"].policy, seed=cfg.seed
    )
    save_refiner(cfg, "composite", composite_sep)

    # per-baseline refiners (scripted baselines share the frozen front)
    for variant in VARIANTS:
        names = cfg.baselines_near if variant == "near" else cfg.baselines_far
        for baseline in names:
            if baseline == "novelty":
                continue  # has its own cyclic-trained refiner
            scripted = make_scripted(baseline)
            fitted = fit_refiner_for_baseline(
                ctx, scripted, variant, seed=cfg.seed, episodes_cap=40
            )
            save_refiner(cfg, f"{baseline}_{variant}", fitted)
    atomic_write_text(cfg.path("train_summary.json"), json.dumps(summary, indent=1))
    return summary


def _eval_models(cfg: ExperimentConfig, separator: Separator, variant: str) -> list:
    models = []
    if variant == "near":
        quality = load_policy(cfg, "quality")
        models.append(
            EvalModel(
                "move2hear", load_refiner_into(cfg, "quality", separator), policy=quality
            )
        )
        for baseline in cfg.baselines_near:
            models.append(
                EvalModel(
                    baseline,
                    load_refiner_into(cfg, f"{baseline}_near", separator),
                    scripted=make_scripted(baseline),
                )
            )
    else:
        nav = load_policy(cfg, "nav")
        quality = load_policy(cfg, "quality")
        models.append(
            EvalModel(
                "move2hear",
                load_refiner_into(cfg, "composite", separator),
                composite=CompositePolicy(nav, quality, cfg.t_switch),
            )
        )
        for baseline in cfg.baselines_far:
            if baseline == "novelty":
                models.append(
                    EvalModel(
                        "novelty",
                        load_refiner_into(cfg, "novelty", separator),
                        policy=load_policy(cfg, "novelty"),
                    )
                )
            else:
                models.append(
                    EvalModel(
                        baseline,
                        load_refiner_into(cfg, f"{baseline}_{variant}", separator),
                        scripted=make_scripted(baseline),
                    )
                )
    return models


def _load_eval_episodes(cfg: ExperimentConfig, variant: str):
    tag = "heard" if cfg.heard else "unheard"
    path = cfg.path("episodes", f"{variant}_{tag}.json")
    _missing(path, "gen-episodes")
    return load_episodes(path)


def stage_eval(cfg: ExperimentConfig) -> dict:
    """Separation quality of every configured model on frozen episodes."""
    separator = load_separator(cfg)
    scenes = build_scenes(cfg, "test")
    os.makedirs(cfg.path("results"), exist_ok=True)
    outputs = {}
    for variant in VARIANTS:
        episodes = _load_eval_episodes(cfg, variant)
        models = _eval_models(cfg, separator, variant)
        table, records = evaluate_separation(
            models,
            scenes,
            episodes,
            cfg.preset_obj,
            seeds=cfg.eval_seeds,
            records_path=cfg.path("results", f"records_{variant}.jsonl"),
            workers=cfg.workers,
        )
        atomic_write_text(cfg.path("results", f"{variant}_results.csv"), table.to_csv())
        curves = per_step_curves(records)
        curve_lines = ["model," + ",".join(f"t{t}" for t in range(len(next(iter(curves.values())))))]
        for model, curve in curves.items():
            curve_lines.append(model + "," + ",".join(f"{v:.6f}" for v in curve))
        atomic_write_text(
            cfg.path("results", f"curves_{variant}.csv"), "\n".join(curve_lines) + "\n"
        )
        outputs[variant] = {r.model + "/" + r.metric: r.mean for r in table.rows}
    return outputs


def stage_nav_eval(cfg: ExperimentConfig) -> dict:
    """Navigation byproduct: SR/SPL of the Stop-augmented navigation policy
    against scripted baselines on far episodes with distractors."""
    separator = load_separator(cfg)
    scenes = build_scenes(cfg, "test")
    episodes = _load_eval_episodes(cfg, "far")
    avnav_sep = load_refiner_into(cfg, "avnav", separator)
    models = [
        EvalModel("nav_stop", avnav_sep, policy=load_policy(cfg, "avnav")),
        EvalModel("random", avnav_sep, scripted=make_scripted("random", with_stop=True)),
        EvalModel("move_forward", avnav_sep, scripted=make_scripted("move_forward")),
    ]
    table, records = evaluate_navigation(
        models, scenes, episodes, cfg.preset_obj, seeds=cfg.eval_seeds
    )
    os.makedirs(cfg.path("results"), exist_ok=True)
    atomic_write_text(cfg.path("results", "nav_results.csv"), table.to_csv())
    atomic_write_text(
        cfg.path("results", "records_nav.jsonl"),
        "\n".join(json.dumps(r.to_json()) for r in records) + "\n",
    )
    return {f"{r.model}/{r.metric}": r.mean for r in table.rows}


def stage_noise_sweep(cfg: ExperimentConfig) -> dict:
    """SI-SDR vs microphone noise level, with and without the refiner."""
    separator = load_separator(cfg)
    scenes = build_scenes(cfg, "test")
    episodes = _load_eval_episodes(cfg, "near")
    quality = load_policy(cfg, "quality")
    rows = []
    for snr in cfg.noise_levels:
        noise = NoiseModel(snr)
        for use_refiner in (True, False):
            models = [
                EvalModel(
                    "move2hear",
                    load_refiner_into(cfg, "quality", separator),
                    policy=quality,
                    uses_refiner=use_refiner,
                ),
                EvalModel(
                    "stand",
                    load_refiner_into(cfg, "stand_near", separator),
                    scripted=make_scripted("stand"),
                    uses_refiner=use_refiner,
                ),
            ]
            table, _ = evaluate_separation(
                models, scenes, episodes, cfg.preset_obj, seeds=cfg.eval_seeds, noise=noise
            )
            for r in table.rows:
                rows.append(
                    {
                        "model": r.model,
                        "metric": r.metric,
                        "snr_db": "clean" if snr is None else snr,
                        "refiner": use_refiner,
                        "mean": r.mean,
                        "ci95": r.ci95,
                        "n": r.n_episodes,
                    }
                )
    os.makedirs(cfg.path("results"), exist_ok=True)
    lines = ["model,metric,snr_db,refiner,mean,ci95,n"]
    for row in rows:
        lines.append(
            f"{row['model']},{row['metric']},{row['snr_db']},{row['refiner']},"
            f"{row['mean']:.6f},{row['ci95']:.6f},{row['n']}"
        )
    atomic_write_text(cfg.path("results", "noise_results.csv"), "\n".join(lines) + "\n")
    return {"rows": len(rows)}


def stage_ablate(cfg: ExperimentConfig) -> dict:
    """Far-target ablations: full, w/o refiner, w/o vision, w/o either policy."""
    separator = load_separator(cfg)
    ctx = make_context(cfg, separator)
    scenes = build_scenes(cfg, "test")
    episodes = _load_eval_episodes(cfg, "far")
    nav = load_policy(cfg, "nav")
    quality = load_policy(cfg, "quality")
    half = max(cfg.ppo_rollout * cfg.ppo_sequences, cfg.quality_steps // 2)

    # retrained variants: without the refiner the policy both trains and
    # acts on the raw per-step monaural estimate
    wo_refiner = train_policy(
        ctx, "quality", "near", half, _ppo(cfg), seed=cfg.seed + 1,
        u_cycle=cfg.cycle_updates, use_refiner=False,
    )
    wo_visual = train_policy(
        ctx, "quality", "near", half, _ppo(cfg), seed=cfg.seed + 2,
        policy_overrides={"use_visual": False}, u_cycle=cfg.cycle_updates,
    )
    save_policy(cfg, "quality_wo_visual", wo_visual.policy)
    save_refiner(cfg, "quality_wo_visual", wo_visual.separator)
    save_policy(cfg, "quality_wo_refiner", wo_refiner.policy)

    composite_sep = load_refiner_into(cfg, "composite", separator)
    models = [
        EvalModel("full", composite_sep, composite=CompositePolicy(nav, quality, cfg.t_switch)),
        EvalModel(
            "wo_refiner",
            separator.clone_with_refiner(make_refiner(separator.cfg, 0)),
            composite=CompositePolicy(nav, wo_refiner.policy, cfg.t_switch),
            uses_refiner=False,
        ),
        EvalModel(
            "wo_visual",
            wo_visual.separator,
            composite=CompositePolicy(nav, wo_visual.policy, cfg.t_switch),
        ),
        EvalModel(
            "wo_nav", composite_sep, composite=CompositePolicy(nav, quality, 0)
        ),
        EvalModel(
            "wo_quality",
            composite_sep,
            composite=CompositePolicy(nav, quality, 10**9),
        ),
    ]
    table, records = evaluate_separation(
        models, scenes, episodes, cfg.preset_obj, seeds=cfg.eval_seeds,
        records_path=cfg.path("results", "records_ablation.jsonl"),
    )
    atomic_write_text(cfg.path("results", "ablation.csv"), table.to_csv())
    return {f"{r.model}/{r.metric}": r.mean for r in table.rows}


STAGES = {
    "synth-sounds": stage_synth_sounds,
    "gen-episodes": stage_gen_episodes,
    "pretrain": stage_pretrain,
    "train": stage_train,
    "eval": stage_eval,
    "nav-eval": stage_nav_eval,
    "noise-sweep": stage_noise_sweep,
    "ablate": stage_ablate,
}
