"""Metrics, evaluation protocols and report emission."""
from .analysis import (
    EvalTasks,
    SweepResult,
    compare_strategies,
    context_entropies,
    entropy_heatmap,
    entropy_histogram_for,
    eval_tasks,
    evaluate,
    ntw_sweep,
    pass_at_k_counts,
    q_threshold_sweep,
    robustness_curve,
)
from .metrics import (
    Bucket,
    EntropyHistogram,
    TokenSummary,
    difficulty_bucket,
    difficulty_stratify,
    discounted_return,
    entropy_histogram,
    pass_at_k,
    pass_at_k_task,
    q_estimate,
    sel,
    success_rate,
    token_summary,
)
from .report import emit_report
