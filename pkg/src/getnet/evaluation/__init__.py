from .bench import BenchResult, efficiency_bench
from .folds import FoldPlan, SiteYearBlock, plan_folds, split_site_years, stratified_k_fold
from .metrics import METRICS, MetricSet, aggregate, average_precision, compute_metrics, population_std
from .nested import NestedCvConfig, NestedCvReport, nested_cv

__all__ = ["BenchResult", "efficiency_bench", "FoldPlan", "SiteYearBlock", "plan_folds",
           "split_site_years", "stratified_k_fold", "METRICS", "MetricSet", "aggregate",
           "average_precision", "compute_metrics", "population_std", "NestedCvConfig",
           "NestedCvReport", "nested_cv"]
