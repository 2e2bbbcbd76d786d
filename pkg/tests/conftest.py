import numpy as np
import pytest

from cascadecl.cascade import PropagationGraph
from cascadecl.records import TweetRecord, UserProfile
from cascadecl.synth import RegimeConfig, default_regimes, generate


def tweet(tid, t, root=None, user=None, mentions=(), public=True, news="n1"):
    return TweetRecord(tid, news, user or f"u{tid}", t, root, frozenset(mentions), public)


def random_graph(rng, n=None, d=8, label=None, p=0.3):
    """Random news-node-rooted graph with a zero news row, for model-level tests."""
    n = int(n or rng.integers(3, 15))
    edges = {(0, 1)}
    for j in range(2, n):
        edges.add((int(rng.integers(0, j)), j))
        for i in range(1, j):
            if rng.random() < p / j:
                edges.add((i, j))
    feats = rng.normal(size=(n, d))
    feats[0] = 0.0
    y = int(rng.integers(0, 2)) if label is None else label
    return PropagationGraph(f"g{rng.integers(1 << 30)}", n, tuple(sorted(edges)), feats, y)


def random_cascade_records(rng, n, news="n1", n_users=None):
    """One root plus n-1 retweets with random times, mentions and visibility."""
    n_users = n_users or n
    users = [f"u{k}" for k in range(n_users)]
    times = np.sort(rng.integers(0, 8 * 3600, size=n))
    tweets = []
    for k in range(n):
        mentions = frozenset(u for u in users if rng.random() < 0.1)
        tweets.append(TweetRecord(f"t{k:02d}", news, users[int(rng.integers(n_users))], int(times[k]),
                                  None if k == 0 else "t00", mentions, bool(rng.random() < 0.7)))
    profiles = {u: UserProfile(u, follows=frozenset(v for v in users if rng.random() < 0.2)) for u in users}
    return tweets, profiles


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_regimes():
    """Scaled-down copies of the default regimes for quick integration tests."""
    a, b = default_regimes()
    from dataclasses import replace
    return replace(a, n_news=60), replace(b, n_news=60)


@pytest.fixture(scope="session")
def regime_datasets():
    a, b = default_regimes()
    dsa, ma, _ = generate(a)
    dsb, mb, _ = generate(b)
    return dsa, dsb, ma, mb
