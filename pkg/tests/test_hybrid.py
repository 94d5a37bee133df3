import random

import pytest
from pydantic import ValidationError

from docprep.chunk import chunk_corpus
from docprep.dense import HashingEmbedder
from docprep.errors import MalformedRecord, QidMismatch, UnresolvableChunk
from docprep.hybrid import (
    FusionParams, RankedItem, RankedList, Strategy, aggregate_to_documents, build_retrieval_indexes, fuse,
    load_runs, retrieve, retrieve_text, save_runs,
)
from docprep.sparse import Lexicon
from tests.conftest import make_query


def ranked(qid, strategy, pairs):
    return RankedList(qid=qid, strategy=strategy, items=tuple(RankedItem(pid=p, score=s) for p, s in pairs))


def random_list(rng, qid, strategy, n, scale=1.0):
    pids = rng.sample([f"P{i:03d}" for i in range(200)], n)
    scores = sorted(rng.sample(range(1, 10_000), n), reverse=True)
    return ranked(qid, strategy, [(pid, s * scale) for pid, s in zip(pids, scores)])


@pytest.fixture
def indexes():
    enhanced = {
        ("A", 1): "信用卡遺失請立即掛失，掛失後可申請補發。",
        ("A", 2): "補發手續費免收。",
        ("B", 1): "外幣匯款需提供收款人帳號。",
        ("C", 1): "信用卡年費說明。",
    }
    lexicon = Lexicon(["信用卡", "遺失", "掛失", "補發", "外幣", "匯款", "年費"])
    return build_retrieval_indexes(chunk_corpus(enhanced), lexicon, HashingEmbedder(), progress=False)


class TestRankedList:
    def test_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            ranked("q", Strategy.SPARSE, [("A", 2.0), ("A", 1.0)])

    def test_rejects_increasing_scores(self):
        with pytest.raises(ValidationError):
            ranked("q", Strategy.SPARSE, [("A", 1.0), ("B", 2.0)])

    def test_ties_must_be_pid_ordered(self):
        ranked("q", Strategy.SPARSE, [("A", 1.0), ("B", 1.0)])
        with pytest.raises(ValidationError):
            ranked("q", Strategy.SPARSE, [("B", 1.0), ("A", 1.0)])


class TestAggregate:
    def test_max_score_per_document(self):
        mapping = {"A#1": "A", "A#2": "A", "B#1": "B"}
        items = aggregate_to_documents([("A#1", 0.2), ("B#1", 0.5), ("A#2", 0.9)], mapping)
        assert [(i.pid, i.score) for i in items] == [("A", 0.9), ("B", 0.5)]

    def test_unknown_chunk(self):
        with pytest.raises(UnresolvableChunk):
            aggregate_to_documents([("Z#1", 1.0)], {})


class TestFuse:
    def test_worked_example(self):
        sparse = ranked("q", Strategy.SPARSE, [("X", 9.0), ("Y", 5.0), ("Z", 1.0)])
        dense = ranked("q", Strategy.DENSE, [("Z", 0.9), ("Y", 0.8), ("X", 0.7)])
        fused = {item.pid: item.score for item in fuse(sparse, dense).items}
        assert abs(fused["X"] - (1 / 61 + 1 / 63)) < 1e-12
        assert abs(fused["Y"] - (2 / 62)) < 1e-12

    def test_item_in_one_list_only(self):
        fused = fuse(ranked("q", Strategy.SPARSE, [("A", 1.0)]), ranked("q", Strategy.DENSE, [("B", 1.0)]))
        assert [(i.pid, i.score) for i in fused.items] == [("A", 1 / 61), ("B", 1 / 61)]
        assert fused.strategy == Strategy.HYBRID

    def test_invariant_under_positive_scaling(self):
        rng = random.Random(11)
        for _ in range(100):
            sparse = random_list(rng, "q", Strategy.SPARSE, rng.randint(1, 30))
            dense = random_list(rng, "q", Strategy.DENSE, rng.randint(1, 30))
            factor = rng.uniform(0.01, 100.0)
            scaled = RankedList(qid="q", strategy=Strategy.SPARSE,
                                items=tuple(RankedItem(pid=i.pid, score=i.score * factor) for i in sparse.items))
            assert fuse(sparse, dense) == fuse(scaled, dense)

    def test_identical_lists_keep_order(self):
        rng = random.Random(3)
        for _ in range(100):
            base = random_list(rng, "q", Strategy.SPARSE, rng.randint(1, 50))
            copy = RankedList(qid="q", strategy=Strategy.DENSE, items=base.items)
            assert fuse(base, copy).pids == base.pids

    def test_custom_rrf_k(self):
        fused = fuse(ranked("q", Strategy.SPARSE, [("A", 1.0)]), ranked("q", Strategy.DENSE, []),
                     FusionParams(rrf_k=10))
        assert fused.items[0].score == pytest.approx(1 / 11)

    def test_qid_mismatch(self):
        with pytest.raises(QidMismatch):
            fuse(ranked("q1", Strategy.SPARSE, []), ranked("q2", Strategy.DENSE, []))

    def test_params_validated(self):
        with pytest.raises(ValidationError):
            FusionParams(rrf_k=0)
        with pytest.raises(ValidationError):
            FusionParams(per_list_depth=0)


class TestRetrieve:
    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_results_restricted_to_source(self, indexes, strategy):
        query = make_query("q", "信用卡遺失", source=("B", "C"), ground_truth=("C",))
        run = retrieve(query, strategy, indexes)
        assert set(run.pids) <= {"B", "C"}
        assert run.strategy == strategy

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_gold_document_first(self, indexes, strategy):
        query = make_query("q", "信用卡遺失掛失", source=("A", "B", "C"), ground_truth=("A",))
        assert retrieve(query, strategy, indexes).pids[0] == "A"

    def test_document_level_unique(self, indexes):
        run = retrieve_text("q", "補發", None, Strategy.SPARSE, indexes)
        assert run.pids == ["A"]

    def test_unknown_source_gives_empty_run(self, indexes):
        assert retrieve_text("q", "信用卡", ["ZZZ"], Strategy.HYBRID, indexes).items == ()

    def test_k_truncates(self, indexes):
        assert len(retrieve_text("q", "信用卡 外幣", None, Strategy.DENSE, indexes, k=1).items) == 1

    def test_per_list_depth_applied_before_fusion(self, indexes):
        params = FusionParams(per_list_depth=1)
        run = retrieve_text("q", "信用卡遺失", None, Strategy.HYBRID, indexes, params)
        assert len(run.items) <= 2


class TestRunsPersistence:
    def test_round_trip_with_empty_run(self, tmp_path):
        runs = [ranked("q1", Strategy.SPARSE, [("A", 2.5), ("B", 1.0)]),
                ranked("q2", Strategy.SPARSE, []),
                ranked("q1", Strategy.HYBRID, [("B", 0.03)])]
        save_runs(runs, tmp_path / "runs.jsonl")
        loaded = load_runs(tmp_path / "runs.jsonl")
        assert loaded[("q1", Strategy.SPARSE)] == runs[0]
        assert loaded[("q2", Strategy.SPARSE)].items == ()
        assert loaded[("q1", Strategy.HYBRID)] == runs[2]

    def test_gap_in_ranks(self, tmp_path):
        path = tmp_path / "runs.jsonl"
        path.write_text('{"qid": "q", "strategy": "dense", "rank": 2, "pid": "A", "score": 1.0}\n', encoding="utf-8")
        with pytest.raises(MalformedRecord):
            load_runs(path)

    def test_unknown_strategy(self, tmp_path):
        path = tmp_path / "runs.jsonl"
        path.write_text('{"qid": "q", "strategy": "magic", "rank": 1, "pid": "A", "score": 1.0}\n', encoding="utf-8")
        with pytest.raises(MalformedRecord):
            load_runs(path)
