import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadecl.cascade import ClipSpec, assemble_graph, clip_graph, group_cascades, infer_edges
from cascadecl.errors import ConfigError, DimensionMismatch, EmptyResult, MixedNews, OrphanRetweet, UnknownUser
from cascadecl.records import TweetRecord, UserProfile

from conftest import random_cascade_records, tweet


def users_for(tweets, **kw):
    return {t.user_id: UserProfile(t.user_id, **kw) for t in tweets}


def figure_one():
    """Two cascades: A with retweets B..E (E really reposted C, which mentions E's author), and F."""
    a = tweet("A", 0)
    b = tweet("B", 60, "A", public=False)
    c = tweet("C", 120, "A", mentions={"uE"}, public=False)
    d = tweet("D", 180, "A", public=False)
    e = tweet("E", 240, "A", public=False)
    f = tweet("F", 30)
    return [a, b, c, d, e, f]


def brute_force_edges(cascade, users, window_h, use_follow):
    out = set()
    for ti, tj in itertools.combinations(cascade.tweets, 2):
        if ti.sort_key > tj.sort_key:
            ti, tj = tj, ti
        a = tj.user_id in ti.mentioned_user_ids
        b = ti.is_public and tj.timestamp_s - ti.timestamp_s <= window_h * 3600
        c = use_follow and ti.user_id in users[tj.user_id].follows
        if a or b or c:
            out.add((ti.tweet_id, tj.tweet_id))
    return out


def test_single_root_is_one_cascade():
    cs = group_cascades([tweet("r", 5)])
    assert len(cs) == 1 and len(cs[0]) == 1


def test_figure_one_cascades():
    cs = group_cascades(figure_one())
    assert [[t.tweet_id for t in c.tweets] for c in cs] == [["A", "B", "C", "D", "E"], ["F"]]


def test_shuffled_timestamps_sorted_like_full_sort(rng):
    times = [50, 10, 10, 30, 20]
    ids = ["e", "d", "c", "b", "a"]
    root = tweet("root", 0)
    rts = [tweet(i, t, "root") for i, t in zip(ids, times)]
    order = rng.permutation(len(rts))
    (c,) = group_cascades([root] + [rts[k] for k in order])
    expected = sorted(rts, key=lambda t: (t.timestamp_s, t.tweet_id))
    assert list(c.tweets[1:]) == expected


def test_group_errors():
    with pytest.raises(OrphanRetweet):
        group_cascades([tweet("a", 0), tweet("b", 1, "zz")])
    with pytest.raises(MixedNews):
        group_cascades([tweet("a", 0), tweet("b", 1, news="other")])


def test_window_edge():
    c = group_cascades([tweet("A", 0), tweet("E", 100, "A")])[0]
    assert infer_edges(c, users_for(c.tweets), 1.0, False) == {("A", "E")}


def test_figure_one_mention_edge():
    cs = group_cascades(figure_one())
    edges = infer_edges(cs[0], users_for(figure_one()), 1.0, False)
    assert ("C", "E") in edges
    # A is public: every retweet within an hour gets an edge from it
    assert {("A", x) for x in "BCDE"} <= edges
    assert not any(d == "A" for _, d in edges)


def test_window_bounds_and_unknown_user():
    c = group_cascades([tweet("A", 0)])[0]
    with pytest.raises(ConfigError):
        infer_edges(c, users_for(c.tweets), 0.5, False)
    with pytest.raises(UnknownUser):
        infer_edges(c, {}, 1.0, False)


def test_random_eight_tweet_cascade_window_two_hours(rng):
    tweets, users = random_cascade_records(rng, 8)
    (c,) = group_cascades(tweets)
    assert infer_edges(c, users, 2.0, False) == brute_force_edges(c, users, 2.0, False)


@pytest.mark.parametrize("use_follow", [False, True])
def test_edge_oracle_many_cascades(use_follow):
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 21))
        tweets, users = random_cascade_records(rng, n, n_users=max(1, n // 2))
        (c,) = group_cascades(tweets)
        w = float(rng.uniform(1, 10))
        assert infer_edges(c, users, w, use_follow) == brute_force_edges(c, users, w, use_follow)


def test_follow_rule():
    a, b = tweet("A", 0, public=False), tweet("B", 10 * 3600, "A")
    users = {"uA": UserProfile("uA"), "uB": UserProfile("uB", follows=frozenset({"uA"}))}
    (c,) = group_cascades([a, b])
    assert infer_edges(c, users, 1.0, False) == set()
    assert infer_edges(c, users, 1.0, True) == {("A", "B")}


def _assemble(tweets, d=3):
    cs = group_cascades(tweets)
    users = users_for(tweets)
    es = [infer_edges(c, users, 1.0, False) for c in cs]
    rows = {t.tweet_id: np.ones(d) for t in tweets}
    return cs, es, assemble_graph("n1", 1, cs, es, rows)


def test_assemble_single_tweet():
    _, _, g = _assemble([tweet("A", 0)])
    assert g.n == 2 and g.edges == ((0, 1),)
    assert np.all(g.features[0] == 0)


def test_assemble_figure_one():
    cs, es, g = _assemble(figure_one())
    assert g.n == 7
    assert sum(1 for s, _ in g.edges if s == 0) == 2
    # global order: A(0) F(30) B C D E
    assert [m[0] for m in g.node_meta[1:]] == ["A", "F", "B", "C", "D", "E"]


def test_assemble_three_cascades_recount(rng):
    tweets = [tweet("r1", 0), tweet("r2", 5), tweet("r3", 7)]
    roots = ["r1", "r2", "r3"]
    for k in range(7):
        tweets.append(tweet(f"x{k}", int(rng.integers(10, 5000)), roots[k % 3], public=bool(k % 2)))
    cs, es, g = _assemble(tweets)
    assert g.n == 11
    assert len(g.edges) == sum(len(e) for e in es) + 3
    assert all(d != 0 for _, d in g.edges)
    assert all(s != d for s, d in g.edges)
    cascade_of = {t.tweet_id: c.root_tweet_id for c in cs for t in c.tweets}
    for s, d in g.edges:
        if s:
            assert cascade_of[g.node_meta[s][0]] == cascade_of[g.node_meta[d][0]]


def test_assemble_dimension_mismatch():
    tweets = [tweet("A", 0), tweet("B", 1, "A")]
    cs = group_cascades(tweets)
    with pytest.raises(DimensionMismatch):
        assemble_graph("n", 0, cs, [set()], {"A": np.ones(2), "B": np.ones(3)})


def _timeline(n, span_s):
    times = np.linspace(0, span_s, n).astype(int)
    return [tweet("r", 0)] + [tweet(f"t{k:04d}", int(times[k]), "r") for k in range(1, n)]


def test_clip_keeps_short_item():
    assert len(clip_graph(_timeline(50, 3600), ClipSpec(max_tweets=100))) == 50


def test_clip_first_hundred():
    kept = clip_graph(_timeline(300, 7200), ClipSpec(100, 5.0))
    assert len(kept) == 100


def test_clip_hours_filter_oracle():
    ts = _timeline(120, 3 * 3600) + [tweet(f"z{k}", 3 * 3600 + 60 * (k + 1), "r") for k in range(30)]
    ts.sort(key=lambda t: t.sort_key)
    kept = clip_graph(ts, ClipSpec(200, 3.0))
    assert kept == [t for t in ts if t.timestamp_s <= 3 * 3600][:200]
    assert len(kept) == 120


def test_clip_spec_validation_and_empty():
    with pytest.raises(ConfigError):
        ClipSpec()
    with pytest.raises(EmptyResult):
        clip_graph([], ClipSpec(10))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 20 * 3600), min_size=1, max_size=40), st.integers(1, 40), st.integers(1, 40),
       st.floats(0.5, 10), st.floats(0.5, 10))
def test_clip_monotone(times, k1, k2, h1, h2):
    ts = sorted([tweet("r", 0)] + [tweet(f"t{i:03d}", t, "r") for i, t in enumerate(times)],
                key=lambda t: t.sort_key)
    loose = clip_graph(ts, ClipSpec(max(k1, k2), max(h1, h2)))
    tight = clip_graph(ts, ClipSpec(min(k1, k2), min(h1, h2)))
    assert len(tight) <= len(loose)
    assert tight == loose[:len(tight)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
def test_news_node_topology(seed, n_roots):
    rng = np.random.default_rng(seed)
    tweets = [tweet(f"r{k}", int(rng.integers(0, 100)), public=bool(rng.random() < .5)) for k in range(n_roots)]
    for k in range(int(rng.integers(0, 10))):
        root = tweets[int(rng.integers(n_roots))]
        tweets.append(tweet(f"x{k}", root.timestamp_s + int(rng.integers(0, 9000)), root.tweet_id))
    cs, _, g = _assemble(tweets)
    assert sum(1 for _, d in g.edges if d == 0) == 0
    assert sum(1 for s, _ in g.edges if s == 0) == len(cs)


def test_build_is_deterministic(rng):
    tweets, users = random_cascade_records(rng, 15)
    from cascadecl.dataset import build_graph, encode_graphs
    g1, _ = build_graph("n1", 1, tweets, users)
    g2, _ = build_graph("n1", 1, list(reversed(tweets)), users)
    assert encode_graphs([g1], 8) == encode_graphs([g2], 8)
