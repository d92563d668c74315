from .config import ExperimentConfig
from .evaluate import (
    EvalModel,
    EpisodeRecord,
    ResultRow,
    ResultTable,
    evaluate_navigation,
    evaluate_separation,
    ks_two_sample,
    per_step_curves,
    run_episode,
    spl,
)
from .pipeline import STAGES
from .report import stage_report
