from .metrics import (MetricRecord, UndefinedMetricError, auc, aucpr, macro_f1, mean_ci)

__all__ = ["MetricRecord", "UndefinedMetricError", "auc", "aucpr", "macro_f1", "mean_ci"]
