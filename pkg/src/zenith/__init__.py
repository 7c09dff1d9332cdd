"""Tokenwise ranking models (Zenith / Zenith++) on a small numpy autodiff core."""

from .errors import ConfigError, InputError, UndefinedMetricError, UsageError, ZenithError
from .features import (Dataset, ExampleBatch, FeatureSchema, FeatureSpec, GroundTruthSpec, TokenPlan,
                       default_schema, generate_dataset, plan_from_schema, planted_ground_truth,
                       validate_token_plan, zero_interaction_truth)
from .metrics import EvalReport, auc, evaluate, logloss, token_similarity_probe, uauc
from .model import (CostReport, ModelConfig, ZenithModel, build_model, cost_report, count_flops,
                    count_params)
from .tensor import Tensor, backward, grouped_matmul
from .train import TrainConfig, train, warmup_lr

__version__ = "0.1.0"
