# coding: utf-8
"""Synthetic CTR data with planted interactions, and Prime Tokenization.

Run with ``python3 demos/02_synthetic_data_and_prime_tokens.py``.
"""

# # The feature schema
#
# The desk schema has 24 raw features: two id features, 18 categorical
# features in five semantic groups and four dense features.

import numpy as np

from zenith import (ModelConfig, build_model, default_schema, generate_dataset, plan_from_schema,
                    planted_ground_truth, validate_token_plan, zero_interaction_truth)
from zenith.features import TokenPlan

schema = default_schema()
for f in schema.features[:4]:
    print(f"{f.name:16s} kind={f.kind:12s} group={f.group:13s} vocab={f.vocab}")
print("...", schema.K, "features in total")

# # Planting interactions
#
# Labels come from a factorization-machine style logit: a first-order term
# per feature plus a few planted pairwise products of latent vectors. A
# linear model can only see the first-order part, so the gap between its
# AUC and the Bayes AUC measures how much interaction signal is planted.

truth = planted_ground_truth(schema, seed=0)
pairs = np.argwhere(np.triu(truth.interactions))
for a, b in pairs:
    print("planted:", schema.features[a].name, "x", schema.features[b].name,
          "coefficient", truth.interactions[a, b])

data = generate_dataset(schema, truth, 5000, seed=0, bayes_samples=100_000)
print("positive rate:", data.labels.mean().round(3))
print("Monte-Carlo Bayes AUC:", round(data.meta["bayes_auc"], 4))

flat = generate_dataset(schema, zero_interaction_truth(schema, seed=0), 5000, seed=0,
                        bayes_samples=100_000)
print("Bayes AUC with no interactions:", round(flat.meta["bayes_auc"], 4))

# # Prime Tokenization
#
# Features are grouped into tokens: every id feature gets its own token,
# a feature embedding is never split, and the tokens cut from one semantic
# group differ in size by at most one feature.

plan = plan_from_schema(schema, D=16, max_token_size=3)
for t, members in enumerate(plan.tokens):
    print(f"token {t}:", [schema.features[j].name for j in members])

# A plan that breaks the rules is reported rule by rule.

bad = TokenPlan(16, ((0, 1),) + plan.tokens[2:])
for v in validate_token_plan(schema, bad):
    print("rule", v.rule, "->", v.message)

# # From raw features to a token matrix
#
# Each token's embeddings are concatenated and projected to D dimensions,
# giving one (T, D) matrix per example.

model = build_model(ModelConfig(T=plan.T, D=16, k=16, layers=1), schema, plan)
tokens = model.tokens(data.batch(slice(0, 4)))
print("token matrix batch shape:", tokens.shape)
