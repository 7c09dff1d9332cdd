import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from zenith.features import CATEGORICAL, DENSE, ID, FeatureSchema, FeatureSpec

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_schema():
    """Four tokens: two ids, a categorical pair and a dense feature."""
    return FeatureSchema((
        FeatureSpec("user_id", ID, "user_id", 3, 7),
        FeatureSpec("item_id", ID, "item_id", 3, 5),
        FeatureSpec("cat_0", CATEGORICAL, "profile", 2, 4),
        FeatureSpec("cat_1", CATEGORICAL, "profile", 2, 3),
        FeatureSpec("dense_0", DENSE, "dense", 2),
    ))


def random_batch(schema, b, rng):
    from zenith.features import ExampleBatch

    cols = []
    for f in schema.features:
        cols.append(rng.integers(0, f.vocab, b).astype(float) if f.sparse else rng.normal(size=b))
    values = np.column_stack(cols)
    uf = schema.user_feature
    return ExampleBatch(values, values[:, uf].astype(np.int64), rng.integers(0, 2, b))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def schema():
    return tiny_schema()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
