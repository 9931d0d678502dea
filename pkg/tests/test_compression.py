import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage as scipy_linkage
from scipy.spatial.distance import squareform

from vadprompt.client import HashEmbedder
from vadprompt.compression import (
    ClassSimilarityMatrix,
    CompactPromptSet,
    QuestionGroup,
    agglomerative_cluster,
    average_class_embedding,
    clusters_from_assignment,
    compress_by_embedding,
    compress_with_vlm,
    cosine_similarity_matrix,
    dumps_compact_set,
    loads_compact_set,
    parse_compact_set,
    render_compression_metaprompt,
    select_random_subset,
    without_normal,
)
from vadprompt.errors import (
    BudgetOutOfRange,
    DimensionMismatch,
    GroupSizeViolation,
    InvalidStop,
    MissingEmbedding,
    NoGroupsFound,
)
from vadprompt.prompt_pool import GuidingQuestion, PromptPool, load_preset_pool, preset_text

UCF_GROUPS = ["Violence or Harm to People", "Crimes Against Property", "Public Safety Incidents"]


def _pool(mapping):
    return PromptPool.from_dict(mapping)


def _matrix(names, sim):
    return ClassSimilarityMatrix(list(names), np.asarray(sim, dtype=float))


def _partition(assignment):
    groups = {}
    for name, cid in assignment.items():
        groups.setdefault(cid, set()).add(name)
    return {frozenset(g) for g in groups.values()}


# --- class embeddings ------------------------------------------------------------------


def test_average_embedding_single_question():
    pool = _pool({"A": ["q1?"], "B": ["q2?"]})
    out = average_class_embedding(pool, {"q1?": [1.0, 2.0], "q2?": [0.0, 1.0]})
    assert out["A"].tolist() == [1.0, 2.0]


def test_average_embedding_opposite_vectors_cancel():
    pool = _pool({"A": ["q1?", "q2?"]})
    out = average_class_embedding(pool, {"q1?": [0.5, -2.0], "q2?": [-0.5, 2.0]})
    assert out["A"].tolist() == [0.0, 0.0]


def test_average_embedding_matches_component_sum():
    gen = np.random.default_rng(5)
    vecs = {f"q{i}?": gen.normal(size=7) for i in range(3)}
    pool = _pool({"A": list(vecs)})
    got = average_class_embedding(pool, vecs)["A"]
    for d in range(7):
        total = 0.0
        for v in vecs.values():
            total += v[d]
        assert got[d] == pytest.approx(total / 3, abs=1e-15)


def test_average_embedding_errors():
    pool = _pool({"A": ["q1?", "q2?"]})
    with pytest.raises(MissingEmbedding):
        average_class_embedding(pool, {"q1?": [1.0]})
    with pytest.raises(DimensionMismatch):
        average_class_embedding(pool, {"q1?": [1.0], "q2?": [1.0, 2.0]})


# --- similarity matrix -------------------------------------------------------------------


def test_cosine_identity_and_orthogonality():
    m = cosine_similarity_matrix({"A": [1.0, 0.0], "B": [3.0, 0.0], "C": [0.0, 2.0]})
    assert m.values[0, 1] == pytest.approx(1.0)
    assert m.values[0, 2] == 0.0
    assert np.array_equal(m.values, m.values.T)
    assert np.all(np.diag(m.values) == 1.0)


def test_cosine_zero_norm_sentinel():
    m = cosine_similarity_matrix({"A": [0.0, 0.0], "B": [1.0, 1.0]})
    assert m.values.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    assert m.zero_norm == ["A"]


def test_cosine_needs_two_classes():
    with pytest.raises(ValueError):
        cosine_similarity_matrix({"A": [1.0]})


def test_planted_near_duplicate_pair_is_argmax():
    gen = np.random.default_rng(11)
    dim = 32
    base = gen.normal(size=dim)
    base /= np.linalg.norm(base)
    other = gen.normal(size=dim)
    other -= other.dot(base) * base
    other /= np.linalg.norm(other)
    angle = math.radians(10)
    vectors = {"Arson": base, "Explosion": math.cos(angle) * base + math.sin(angle) * other}
    for name in ["Abuse", "Robbery", "Stealing", "Shooting"]:
        vectors[name] = gen.normal(size=dim)
    m = cosine_similarity_matrix(vectors)
    best, best_pair = -2.0, None
    for i in range(len(m.class_names)):
        for j in range(len(m.class_names)):
            if i != j and m.values[i, j] > best:
                best, best_pair = m.values[i, j], {m.class_names[i], m.class_names[j]}
    assert best_pair == {"Arson", "Explosion"}
    assert best == pytest.approx(math.cos(angle), abs=1e-12)


def test_similarity_permutation_equivariance():
    gen = np.random.default_rng(2)
    vectors = {c: gen.normal(size=5) for c in "ABCDE"}
    m = cosine_similarity_matrix(vectors)
    order = ["D", "A", "E", "C", "B"]
    p = cosine_similarity_matrix({c: vectors[c] for c in order})
    idx = [m.class_names.index(c) for c in order]
    assert np.array_equal(p.values, m.values[np.ix_(idx, idx)])


def test_heatmap_csv_shape():
    m = cosine_similarity_matrix({"A": [1.0, 0.0], "B C": [0.0, 1.0]})
    lines = m.to_csv().splitlines()
    assert lines[0] == "class,A,B C"
    assert lines[1] == "A,1.000000,0.000000"


# --- clustering ----------------------------------------------------------------------


def test_k_equals_n_gives_singletons():
    m = _matrix("ABC", [[1, 0.5, 0.2], [0.5, 1, 0.1], [0.2, 0.1, 1]])
    assignment, dendro = agglomerative_cluster(m, k=3)
    assert _partition(assignment) == {frozenset("A"), frozenset("B"), frozenset("C")}
    assert len(dendro.merges) == 2


def test_k_one_gives_single_cluster():
    m = _matrix("ABC", [[1, 0.5, 0.2], [0.5, 1, 0.1], [0.2, 0.1, 1]])
    assignment, _ = agglomerative_cluster(m, k=1)
    assert _partition(assignment) == {frozenset("ABC")}


@pytest.mark.parametrize("kwargs", [{"k": 0}, {"k": 4}, {}, {"k": 2, "threshold": 0.5}])
def test_invalid_stop(kwargs):
    m = _matrix("ABC", np.eye(3))
    with pytest.raises(InvalidStop):
        agglomerative_cluster(m, **kwargs)


def test_threshold_stop():
    m = _matrix("ABCD", [[1, 0.9, 0.1, 0.1], [0.9, 1, 0.1, 0.1], [0.1, 0.1, 1, 0.8], [0.1, 0.1, 0.8, 1]])
    assignment, _ = agglomerative_cluster(m, threshold=0.25)
    assert _partition(assignment) == {frozenset("AB"), frozenset("CD")}


def test_tie_break_prefers_smallest_names():
    # every pair equidistant: merges go (A,B), then (AB,C)
    m = _matrix("CBA", np.full((3, 3), 0.5) + 0.5 * np.eye(3))
    assignment, dendro = agglomerative_cluster(m, k=2)
    assert _partition(assignment) == {frozenset("AB"), frozenset("C")}
    first = dendro.merges[0]
    assert {dendro.labels[first.left], dendro.labels[first.right]} == {"A", "B"}


def _random_similarity(seed, n):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, 6))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    sim = x @ x.T
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, 1.0)
    return sim


@pytest.mark.parametrize("method", ["average", "complete", "single"])
@pytest.mark.parametrize("seed", range(15))
def test_matches_scipy_linkage(method, seed):
    n = 3 + seed % 8
    sim = _random_similarity(seed, n)
    names = [f"c{i:02d}" for i in range(n)]
    dist = 1.0 - sim
    np.fill_diagonal(dist, 0.0)
    z = scipy_linkage(squareform(dist, checks=False), method=method)
    for k in range(1, n + 1):
        assignment, dendro = agglomerative_cluster(_matrix(names, sim), linkage=method, k=k)
        heights = [m.height for m in dendro.merges]
        assert heights == pytest.approx(sorted(z[:, 2]), abs=1e-12)
        expected = fcluster(z, t=k, criterion="maxclust")
        want = {frozenset(names[i] for i in range(n) if expected[i] == c) for c in set(expected)}
        assert _partition(assignment) == want


@pytest.mark.parametrize("method", ["average", "complete"])
@pytest.mark.parametrize("seed", range(10))
def test_heights_monotone(method, seed):
    sim = _random_similarity(100 + seed, 9)
    _, dendro = agglomerative_cluster(_matrix([f"x{i}" for i in range(9)], sim), linkage=method, k=1)
    heights = [m.height for m in dendro.merges]
    assert heights == sorted(heights)
    assert [m.size for m in dendro.merges][-1] == 9


def _random_ultrametric(gen, n):
    """Distances from a random binary tree: d(i, j) = height of their lowest common ancestor."""
    nodes = [([i], 0.0) for i in range(n)]
    d = np.zeros((n, n))
    while len(nodes) > 1:
        a, b = sorted(gen.choice(len(nodes), size=2, replace=False), reverse=True)
        (ma, ha), (mb, hb) = nodes.pop(a), nodes.pop(b)
        h = max(ha, hb) + float(gen.uniform(0.01, 0.3))
        for i in ma:
            for j in mb:
                d[i, j] = d[j, i] = h
        nodes.append((ma + mb, h))
    return d


@pytest.mark.parametrize("seed", range(40))
def test_ultrametric_heights_reproduced_exactly(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(2, 7))
    d = _random_ultrametric(gen, n)
    sim = 1.0 - d
    names = [f"u{i}" for i in range(n)]
    _, dendro = agglomerative_cluster(_matrix(names, sim), linkage="average", k=1)
    observed = 1.0 - sim  # the distances the clusterer actually sees
    coph = dendro.cophenetic()
    for i in range(n):
        for j in range(i + 1, n):
            assert coph[i, j] == observed[i, j]


def _planted(seed, sizes=(3, 3, 3), dim=24):
    gen = np.random.default_rng(seed)
    centers = np.linalg.qr(gen.normal(size=(dim, len(sizes))))[0].T  # orthonormal rows
    vectors, truth = {}, []
    for c, size in enumerate(sizes):
        members = []
        for i in range(size):
            name = f"k{c}_{i}"
            noise = gen.normal(size=dim)
            noise -= noise @ centers[c] * centers[c]
            v = centers[c] + 0.05 * noise / np.linalg.norm(noise)
            vectors[name] = v
            members.append(name)
        truth.append(frozenset(members))
    return vectors, set(truth)


def _three_way_partitions(items):
    items = list(items)
    for labels in itertools.product(range(3), repeat=len(items) - 1):
        labels = (0, *labels)
        if len(set(labels)) != 3 or labels.index(1) > labels.index(2) if 2 in labels and 1 in labels else True:
            continue
        yield {frozenset(x for x, l in zip(items, labels) if l == g) for g in range(3)}


@pytest.mark.parametrize("seed", range(5))
def test_planted_clusters_recovered(seed):
    vectors, truth = _planted(seed)
    m = cosine_similarity_matrix(vectors)
    idx = {n: i for i, n in enumerate(m.class_names)}
    for block in truth:
        for a in block:
            for b in block:
                if a != b:
                    assert m.values[idx[a], idx[b]] >= 0.95
    for a in vectors:
        for b in vectors:
            if not any(a in blk and b in blk for blk in truth):
                assert m.values[idx[a], idx[b]] <= 0.1
    # exhaustive check: the planted split is the unique best 3-way partition by intra similarity
    def intra(partition):
        return sum(m.values[idx[a], idx[b]] for blk in partition for a in blk for b in blk if a < b)

    scored = sorted(((intra(p), sorted(map(sorted, p))) for p in _three_way_partitions(m.class_names)), reverse=True)
    assert len(scored) == 3025  # Stirling S(9, 3)
    assert scored[0][1] == sorted(map(sorted, truth))
    assert scored[0][0] > scored[1][0]
    assignment, _ = agglomerative_cluster(m, linkage="average", k=3)
    assert _partition(assignment) == truth


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.permutations(list(range(9))))
def test_clustering_invariant_under_input_order(seed, perm):
    vectors, truth = _planted(seed % 7)
    names = list(vectors)
    sim = cosine_similarity_matrix(vectors)
    shuffled = cosine_similarity_matrix({names[i]: vectors[names[i]] for i in perm})
    for k in (1, 2, 3, 5, 9):
        a, da = agglomerative_cluster(sim, k=k)
        b, db = agglomerative_cluster(shuffled, k=k)
        assert _partition(a) == _partition(b)
        assert [m.height for m in da.merges] == [m.height for m in db.merges]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.permutations(list(range(7))))
def test_random_matrix_partition_invariant_under_order(seed, perm):
    sim = _random_similarity(seed, 7)
    names = [f"n{i}" for i in range(7)]
    a, _ = agglomerative_cluster(_matrix(names, sim), k=3)
    p_names = [names[i] for i in perm]
    p_sim = sim[np.ix_(perm, perm)]
    b, _ = agglomerative_cluster(_matrix(p_names, p_sim), k=3)
    assert _partition(a) == _partition(b)


def test_dendrogram_exports():
    m = _matrix(["Road Accidents", "Arson", "Explosion"], [[1, 0.1, 0.2], [0.1, 1, 0.9], [0.2, 0.9, 1]])
    _, dendro = agglomerative_cluster(m, k=1)
    newick = dendro.to_newick()
    assert newick.endswith(";")
    assert "'Road Accidents'" in newick
    assert "(Arson:0.100000,Explosion:0.100000)" in newick
    d = dendro.to_dict()
    assert len(d["merges"]) == 2
    assert d["merges"][0]["height"] == pytest.approx(0.1)


# --- embedding compression -------------------------------------------------------------------


def test_compress_by_embedding_three_groups_on_ucf():
    pool = without_normal(load_preset_pool("ucf_crime_q"))
    qset, matrix, dendro = compress_by_embedding(pool, HashEmbedder(), k=3)
    assert len(qset.groups) == 3
    assert qset.origin == "embedding_selected"
    assert all(len(g.questions) == 2 for g in qset.groups)
    members = [c for g in qset.groups for c in g.classes]
    assert sorted(members) == sorted(pool.classes)
    assert len(dendro.merges) == len(pool.classes) - 1
    assert matrix.class_names == pool.classes


def test_compress_by_embedding_k1_single_group():
    pool = without_normal(load_preset_pool("ucf_crime_q"))
    qset, _, _ = compress_by_embedding(pool, HashEmbedder(), k=1)
    assert len(qset.groups) == 1


def test_without_normal_drops_normal_block():
    pool = load_preset_pool("ucf_crime_q")
    assert "Normal Event" not in without_normal(pool).classes
    assert len(without_normal(pool).classes) == 13


# --- VLM compression --------------------------------------------------------------------------


def test_compression_metaprompt_contents():
    pool = without_normal(load_preset_pool("ucf_crime_q"))
    text = render_compression_metaprompt(pool)
    for q in pool.flat():
        assert q.text in text
    for i in (1, 2, 3):
        assert f"Group {i}:" in text
    assert "Grouped Guiding Questions:" in text
    assert text == render_compression_metaprompt(pool)


def test_compression_metaprompt_single_class_and_budget():
    pool = _pool({"Arson": ["Is there fire?"]})
    text = render_compression_metaprompt(pool, total_questions=6)
    assert "Arson:\n1. Is there fire?" in text
    assert "exactly 6 generalized guiding questions" in text


def test_parse_ucf_preset():
    qset = parse_compact_set(preset_text("ucf_crime_qstar"))
    assert qset.origin == "preset"
    assert qset.group_names == UCF_GROUPS
    assert [len(g.questions) for g in qset.groups] == [2, 2, 2]


def test_parse_model_style_transcript():
    text = (
        "Sure! Here is the compact set.\n\n"
        "**Grouped Guiding Questions:**\n\n"
        "**Group 1: Violence or Harm to People**\n"
        "1. Do you see people confronting each other\n"
        "2. Is there a weapon?\n\n"
        "Group 2 - Crimes Against Property\n"
        "- Is property taken?\n"
        "- Is property destroyed?\n"
        "- Is a door forced?\n\n"
        "Summary: These questions cover harm and property.\n"
    )
    qset = parse_compact_set(text)
    assert qset.origin == "vlm_summarized"
    assert qset.group_names == UCF_GROUPS[:2]
    assert qset.groups[0].questions[0].text == "Do you see people confronting each other?"
    assert qset.summary == "These questions cover harm and property."


def test_parse_strict_rejects_oversized_group():
    text = "Group 1: Big\n" + "\n".join(f"{i}. Question {i}?" for i in range(1, 6))
    with pytest.raises(GroupSizeViolation) as info:
        parse_compact_set(text)
    assert info.value.size == 5
    lenient = parse_compact_set(text, strict=False)
    assert len(lenient.groups[0].questions) == 3


def test_parse_without_groups():
    with pytest.raises(NoGroupsFound):
        parse_compact_set("1. Is there fire?\n2. Is there smoke?")
    with pytest.raises(NoGroupsFound):
        parse_compact_set("   ")


@pytest.mark.parametrize("preset", ["ucf_crime_qstar", "xd_violence_qstar"])
def test_compact_set_round_trip(preset):
    qset = loads_compact_set(preset_text(preset))
    assert loads_compact_set(dumps_compact_set(qset)).to_dict() == qset.to_dict()


def test_round_trip_keeps_classes_and_origin():
    qset = CompactPromptSet(
        [QuestionGroup("Fire", [GuidingQuestion("Is there fire?"), GuidingQuestion("Is there smoke?")], ["Arson"])],
        origin="vlm_summarized",
        summary="fire cues",
    )
    again = loads_compact_set(dumps_compact_set(qset))
    assert again.to_dict() == qset.to_dict()


def test_vlm_summarized_contract_enforced_on_construction():
    with pytest.raises(GroupSizeViolation):
        CompactPromptSet([QuestionGroup("G", [GuidingQuestion("a?")])], origin="vlm_summarized")


def test_compress_with_vlm_uses_transcript():
    pool = _pool({"Arson": ["Is there fire?"], "Robbery": ["Is a weapon shown?"]})
    prompts = []

    def ask(prompt):
        prompts.append(prompt)
        return preset_text("ucf_crime_qstar").replace("Origin: preset\n", "")

    qset, transcript = compress_with_vlm(pool, ask)
    assert prompts == [render_compression_metaprompt(pool)]
    assert qset.group_names == UCF_GROUPS
    assert qset.origin == "vlm_summarized"
    assert "Group 3" in transcript


# --- random subset -----------------------------------------------------------------------------


def test_random_subset_budget_equal_to_pool():
    pool = load_preset_pool("ucf_crime_q")
    for seed in (0, 1, 99):
        qset = select_random_subset(pool, len(pool), seed)
        assert [q.text for q in qset.questions] == [q.text for q in pool.flat()]


def test_random_subset_reproducible_and_distinct():
    pool = load_preset_pool("ucf_crime_q")
    a = select_random_subset(pool, 6, 7)
    b = select_random_subset(pool, 6, 7)
    assert a.to_dict() == b.to_dict()
    assert len({q.text for q in a.questions}) == 6
    assert a.origin == "random_subset"
    assert a.group_names == ["random"]
    assert select_random_subset(pool, 6, 8).to_dict() != a.to_dict()


@pytest.mark.parametrize("budget", [0, 43])
def test_random_subset_out_of_range(budget):
    with pytest.raises(BudgetOutOfRange):
        select_random_subset(load_preset_pool("ucf_crime_q"), budget, 0)


def test_clusters_from_assignment_order():
    assert clusters_from_assignment({"b": 1, "a": 0, "c": 1}, ["c", "b", "a"]) == [["a"], ["c", "b"]]
