"""Class-incremental learning with merged task adapters and self-refined retrieval."""

from .adapters import AdapterRegistry, ema_merge, freeze_and_register, init_adapter
from .backbone import (AdapterSet, BackboneConfig, FrozenBackbone, TaskHead, backward,
                       build_backbone, forward, forward_logits)
from .harness import (ExperimentConfig, MetricsReport, VariantFlags, emit_report, run_ablation,
                      run_experiment, run_naive_baseline, standard_benchmark)
from .inference import ensemble_predict, infer_task_id, predict_with_adapter, self_refine
from .numerics import cholesky, cosine_similarity, make_rng, sample_gaussian
from .stream import ClassTaskMap, Dataset, StreamSpec, load_dataset, make_splits, synthetic_cil_dataset
from .training import (GaussianStats, PrototypeBank, TrainConfig, align_classifier,
                       compute_gaussian_stats, cosine_lr, extract_prototypes, train_task)

__version__ = "0.1.0"
