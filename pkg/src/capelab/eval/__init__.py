from .embedding import cohort_probe, pca2d
from .metrics import BinTable, MetricResult, auroc, binned_mae, ci95, format_mean_se, mae, metrics_csv
from .stats import DegenerateVarianceError, delong_test, kruskal_wallis, wilcoxon_signed_rank

__all__ = [
    "BinTable", "DegenerateVarianceError", "MetricResult", "auroc", "binned_mae", "ci95", "cohort_probe",
    "delong_test", "format_mean_se", "kruskal_wallis", "mae", "metrics_csv", "pca2d", "wilcoxon_signed_rank",
]
