"""Episode evaluation: separation metrics, navigation metrics, aggregation.

Every aggregate is backed by persisted per-episode records (JSON lines), so
any table cell can be recomputed exactly and any statistical test applied
downstream; a two-sample Kolmogorov-Smirnov convenience is included.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from ..acoustics import NoiseModel, RirCache
from ..env import EpisodeRunner, Observation
from ..errors import ConfigError, InputError
from ..presets import Preset
from ..separator import Separator
from ..signal import (
    ComplexSpectrogram,
    LogMagSpectrogram,
    log_expand,
    reconstruct_with_gt_phase,
    si_sdr_clamped,
    stft_distance,
)
from ..world import ACTIONS, STOP, Episode, Scene, geodesic_distance
from ..control.baselines import ScriptedPolicy
from ..control.composite import CompositePolicy
from ..control.policy import ActorCritic, act
from .config import atomic_write_text

ACTION_NAMES = list(ACTIONS)
ACTION_NAMES_STOP = list(ACTIONS) + [STOP]


@dataclass
class EvalModel:
    """A movement policy plus the separator (with its own refiner) to score."""

    name: str
    separator: Separator
    scripted: ScriptedPolicy | None = None
    policy: ActorCritic | None = None
    composite: CompositePolicy | None = None
    uses_refiner: bool = True

    def check(self, variant: str) -> None:
        if self.scripted is not None:
            self.scripted.check_variant(variant)
        if self.composite is not None and variant == "near":
            raise InputError("composite control applies to far-target episodes only")


@dataclass
class EpisodeRecord:
    model: str
    episode_index: int
    seed: int
    variant: str
    heard: bool
    si_sdr: float
    stft_dist: float
    final_loss: float
    loss_curve: list
    steps: int
    stopped: bool
    success: bool
    shortest_path: float
    path_length: float

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def reconstruct_and_score(runner: EpisodeRunner) -> tuple:
    """Final-step refined estimate -> waveform (reference phase) -> metrics."""
    preset = runner.preset
    # clamp to [0, 32] log-magnitude: negative and astronomically large
    # values can only come from a divergent refiner, never from audio
    grid = np.clip(runner.refined_full_grid(), 0.0, 32.0)
    logmag = LogMagSpectrogram(grid, preset.stft, preset.clip_samples)
    phase = np.angle(runner.mono_gt_complex.values)
    pred_complex = log_expand(grid) * np.exp(1j * phase)
    dist = stft_distance(
        ComplexSpectrogram(pred_complex, preset.stft, preset.clip_samples),
        runner.mono_gt_complex,
    )
    waveform = reconstruct_with_gt_phase(logmag, phase)
    sdr = si_sdr_clamped(waveform.samples[0], runner.target_clip.samples[0])
    return sdr, dist


def run_episode(
    scene: Scene,
    episode: Episode,
    model: EvalModel,
    preset: Preset,
    episode_index: int,
    seed: int,
    noise: NoiseModel = NoiseModel(None),
    rir_cache: RirCache | None = None,
    deterministic: bool = True,
) -> EpisodeRecord:
    model.check(episode.variant)
    runner = EpisodeRunner(
        scene,
        episode,
        model.separator,
        preset,
        episode_id=episode_index,
        noise=noise,
        noise_seed=seed,
        rir_cache=rir_cache,
        use_refiner=model.uses_refiner,
    )
    rng = np.random.default_rng([seed, episode_index, 17])
    if model.scripted is not None:
        model.scripted.reset(scene, episode, rng)
    if model.composite is not None:
        model.composite.reset()
    hidden = model.policy.initial_state() if model.policy is not None else None

    start = episode.start.node
    target = episode.target.location
    shortest = geodesic_distance(scene, start, target)
    path_length = 0.0
    curve = [runner.truth().refined_loss]
    while not runner.done:
        if model.scripted is not None:
            action_name = model.scripted.act(runner.pose, runner.view.collided)
        elif model.composite is not None:
            idx, _ = model.composite.act(runner.view, runner.t, rng, deterministic)
            action_name = ACTION_NAMES[idx]
        else:
            obs = Observation.build(
                runner.view, model.policy.cfg.n_classes, model.policy.cfg.audio_source
            )
            result = act(model.policy, obs, hidden, rng, deterministic)
            hidden = result.hidden
            names = ACTION_NAMES_STOP if model.policy.cfg.n_actions == 4 else ACTION_NAMES
            action_name = names[result.action]
        before = runner.pose.node
        runner.step(action_name)
        if runner.pose.node != before:
            path_length += 1.0
        curve.append(runner.truth().refined_loss)

    success = runner.stopped and runner.pose.node == target
    sdr, dist = reconstruct_and_score(runner)
    return EpisodeRecord(
        model=model.name,
        episode_index=episode_index,
        seed=seed,
        variant=episode.variant,
        heard=episode.heard,
        si_sdr=sdr,
        stft_dist=dist,
        final_loss=curve[-1],
        loss_curve=[float(x) for x in curve],
        steps=runner.t,
        stopped=runner.stopped,
        success=bool(success),
        shortest_path=float(shortest),
        path_length=float(path_length),
    )


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class ResultRow:
    model: str
    variant: str
    metric: str
    mean: float
    ci95: float
    n_episodes: int
    n_seeds: int


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def add(self, row: ResultRow):
        self.rows.append(row)

    def value(self, model: str, metric: str) -> float:
        for row in self.rows:
            if row.model == model and row.metric == metric:
                return row.mean
        raise KeyError(f"no row for {model}/{metric}")

    def to_csv(self) -> str:
        lines = ["model,variant,metric,mean,ci95,n_episodes,n_seeds"]
        for r in self.rows:
            lines.append(
                f"{r.model},{r.variant},{r.metric},{r.mean:.6f},{r.ci95:.6f},"
                f"{r.n_episodes},{r.n_seeds}"
            )
        return "\n".join(lines) + "\n"


def _ci95(values: np.ndarray) -> float:
    if values.size <= 1:
        return 0.0
    return 1.96 * float(values.std(ddof=1)) / math.sqrt(values.size)


def aggregate(records: list, metrics=("si_sdr", "stft_dist")) -> ResultTable:
    table = ResultTable()
    models = sorted({r.model for r in records})
    for model in models:
        subset = [r for r in records if r.model == model]
        variant = subset[0].variant
        seeds = {r.seed for r in subset}
        for metric in metrics:
            values = np.asarray([getattr(r, metric) for r in subset])
            table.add(
                ResultRow(
                    model, variant, metric, float(values.mean()), _ci95(values),
                    len(subset), len(seeds),
                )
            )
    return table


_POOL_STATE: dict = {}


def _pool_init(models, scenes, episodes, preset, noise):
    _POOL_STATE.update(
        models=models, scenes=scenes, episodes=episodes, preset=preset, noise=noise,
        caches={seed: RirCache() for seed in scenes},
    )


def _pool_job(job):
    model_idx, seed, ep_idx = job
    s = _POOL_STATE
    episode = s["episodes"][ep_idx]
    return run_episode(
        s["scenes"][episode.scene_seed],
        episode,
        s["models"][model_idx],
        s["preset"],
        episode_index=ep_idx,
        seed=seed,
        noise=s["noise"],
        rir_cache=s["caches"][episode.scene_seed],
    )


def evaluate_separation(
    models: list,
    scenes: dict,
    episodes: list,
    preset: Preset,
    seeds=(0,),
    noise: NoiseModel = NoiseModel(None),
    records_path: str | None = None,
    workers: int = 1,
) -> tuple:
    """Score every model on every episode under every seed.

    All models must share the same frozen separator front; each carries its
    own refiner.  Records are deterministic in (model, episode, seed), so the
    worker count cannot change results.  Returns (ResultTable, records).
    """
    fronts = {id(m.separator.f_mask) for m in models}
    if len(fronts) != 1:
        raise ConfigError("all evaluated models must share one frozen separator front")
    jobs = [
        (mi, seed, ei)
        for mi in range(len(models))
        for seed in seeds
        for ei in range(len(episodes))
    ]
    if workers > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(
            workers, initializer=_pool_init, initargs=(models, scenes, episodes, preset, noise)
        ) as pool:
            records = pool.map(_pool_job, jobs, chunksize=8)
    else:
        _pool_init(models, scenes, episodes, preset, noise)
        records = [_pool_job(job) for job in jobs]
        _POOL_STATE.clear()
    if records_path:
        atomic_write_text(
            records_path, "\n".join(json.dumps(r.to_json()) for r in records) + "\n"
        )
    return aggregate(records), records


# ---------------------------------------------------------------------------
# navigation metrics


def spl(success: bool, shortest: float, taken: float) -> float:
    """Success weighted by path length: success * l* / max(l, l*)."""
    if not success:
        return 0.0
    if shortest <= 0.0:
        return 1.0
    return shortest / max(taken, shortest)


def evaluate_navigation(models, scenes, episodes, preset, seeds=(0,)) -> tuple:
    """SR and SPL for Stop-capable models on far episodes."""
    records = []
    caches = {seed: RirCache() for seed in scenes}
    for model in models:
        for seed in seeds:
            for idx, episode in enumerate(episodes):
                scene = scenes[episode.scene_seed]
                records.append(
                    run_episode(
                        scene, episode, model, preset,
                        episode_index=idx, seed=seed, rir_cache=caches[episode.scene_seed],
                    )
                )
    table = ResultTable()
    for model in models:
        subset = [r for r in records if r.model == model.name]
        seeds_seen = {r.seed for r in subset}
        sr = float(np.mean([r.success for r in subset]))
        spl_mean = float(
            np.mean([spl(r.success, r.shortest_path, r.path_length) for r in subset])
        )
        table.add(ResultRow(model.name, "far", "SR", sr, 0.0, len(subset), len(seeds_seen)))
        table.add(ResultRow(model.name, "far", "SPL", spl_mean, 0.0, len(subset), len(seeds_seen)))
    return table, records


def ks_two_sample(a, b) -> tuple:
    """Two-sample Kolmogorov-Smirnov statistic and p-value."""
    result = ks_2samp(np.asarray(a), np.asarray(b))
    return float(result.statistic), float(result.pvalue)


def per_step_curves(records: list) -> dict:
    """Mean refined-loss curve per model, truncated to the shortest episode."""
    out = {}
    for model in sorted({r.model for r in records}):
        curves = [r.loss_curve for r in records if r.model == model]
        n = min(len(c) for c in curves)
        out[model] = np.mean([c[:n] for c in curves], axis=0).tolist()
    return out
