"""Baseline behaviour on the synthetic generator, over five seeds each."""

import pytest

from zenith.features import default_schema, generate_dataset, planted_ground_truth, zero_interaction_truth
from zenith.metrics import baseline_models
from zenith.train import TrainConfig

N_TRAIN, N_TEST, BATCH = 100_000, 20_000, 32
# Both baselines share one config. At 0.01 the un-normalised MLP's small
# embeddings move too slowly to pick up the planted pairs on some seeds.
BASE_LR = 0.03


def run_baselines(truth, seed):
    schema = default_schema()
    tr = generate_dataset(schema, truth, N_TRAIN, seed=seed, bayes_samples=200_000)
    te = generate_dataset(schema, truth, N_TEST, seed=seed + 1000, bayes_samples=0)
    cfg = TrainConfig(total_steps=N_TRAIN // BATCH, batch_size=BATCH, warmup_steps=100, seed=seed,
                      base_lr=BASE_LR)
    return tr.meta["bayes_auc"], baseline_models(tr, te, cfg, seed=seed)


@pytest.mark.slow
def test_logistic_reaches_bayes_without_interactions():
    schema = default_schema()
    gaps = []
    for seed in range(5):
        bayes, reps = run_baselines(zero_interaction_truth(schema, seed=seed), seed)
        gaps.append(bayes - reps["logistic"].auc)
    assert max(abs(g) for g in gaps) <= 0.02, gaps


@pytest.mark.slow
def test_planted_interactions_beat_logistic_and_mlp_does_not_lose():
    schema = default_schema()
    gaps, mlp_minus_logistic = [], []
    for seed in range(5):
        bayes, reps = run_baselines(planted_ground_truth(schema, seed=seed), seed)
        gaps.append(bayes - reps["logistic"].auc)
        mlp_minus_logistic.append(reps["mlp"].auc - reps["logistic"].auc)
    assert min(gaps) >= 0.05, gaps
    assert min(mlp_minus_logistic) >= 0.0, mlp_minus_logistic
