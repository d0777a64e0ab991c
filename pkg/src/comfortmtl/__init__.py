"""Hard-parameter-sharing multi-task network for thermal comfort votes.

The package covers the whole offline/online loop: survey schema and CSV
ingestion, a small float64 neural-network kernel, the shared-trunk model,
six single-task comparison models, k-fold evaluation and grid search, and a
command line plus HTTP prediction endpoint.
"""

from .schema import (
    ComfortScale,
    Dataset,
    DatasetSchema,
    FeatureSpec,
    SchemaError,
    SurveyRecord,
    TaskSpec,
    default_schema,
    load_schema,
    validate_record,
)
from .ingest import (
    EncodedDataset,
    Encoder,
    FoldPlan,
    encode,
    fit_encoder,
    generate_synthetic,
    impute,
    kfold_split,
    load_csv,
    write_csv,
)
from .nn import DivergenceError, finite_diff_check
from .mtl import (
    Hyperparams,
    MtlNetwork,
    fit_mtl,
    init_network,
    load_model,
    predict,
    save_model,
    train,
)
from .baselines import fit_single_task
from .metrics import confusion, macro_metrics
from .evaluation import cross_validate, dataset_summary, feature_ablation, grid_search, make_spec, slice_report

__version__ = "0.1.0"

__all__ = [
    "ComfortScale", "Dataset", "DatasetSchema", "FeatureSpec", "SchemaError", "SurveyRecord", "TaskSpec",
    "default_schema", "load_schema", "validate_record",
    "EncodedDataset", "Encoder", "FoldPlan", "encode", "fit_encoder", "generate_synthetic", "impute",
    "kfold_split", "load_csv", "write_csv",
    "DivergenceError", "finite_diff_check",
    "Hyperparams", "MtlNetwork", "fit_mtl", "init_network", "load_model", "predict", "save_model", "train",
    "fit_single_task", "confusion", "macro_metrics",
    "cross_validate", "dataset_summary", "feature_ablation", "grid_search", "make_spec", "slice_report",
]
