"""
混合检索：chunk 级结果聚合到文档级，BM25 与向量结果做倒数排名融合（RRF）
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .cache import ReplayCache
from .chunk import Chunk
from .dense import DenseIndex, Embedder, build_dense_index, search_dense
from .errors import MalformedRecord, QidMismatch, UnresolvableChunk
from .ingest import Query
from .sparse import DEFAULT_B, DEFAULT_K1, Lexicon, SparseIndex, build_sparse_index, search_sparse
from .utils import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    SPARSE = "sparse"
    DENSE = "dense"
    HYBRID = "hybrid"


STRATEGIES = (Strategy.SPARSE, Strategy.DENSE, Strategy.HYBRID)


class RankedItem(BaseModel):
    model_config = ConfigDict(frozen=True)

    pid: str
    score: float


class RankedList(BaseModel):
    """
    一个查询在某个策略下的文档级排序

    pid 唯一，分数不增，同分按 pid 升序
    """
    model_config = ConfigDict(frozen=True)

    qid: str
    strategy: Strategy
    items: Tuple[RankedItem, ...] = ()

    @model_validator(mode="after")
    def _check_order(self):
        pids = [item.pid for item in self.items]
        if len(set(pids)) != len(pids):
            raise ValueError(f"qid={self.qid}: pid 重复")
        for a, b in zip(self.items, self.items[1:]):
            if a.score < b.score or (a.score == b.score and a.pid >= b.pid):
                raise ValueError(f"qid={self.qid}: 排序不合法 ({a.pid}:{a.score} 在 {b.pid}:{b.score} 之前)")
        return self

    @property
    def pids(self) -> List[str]:
        return [item.pid for item in self.items]


class FusionParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Literal["rrf"] = "rrf"
    rrf_k: float = Field(default=60.0, gt=0)
    per_list_depth: int = Field(default=100, ge=1)


def _sorted_items(scores: Dict[str, float]) -> Tuple[RankedItem, ...]:
    return tuple(RankedItem(pid=pid, score=s) for pid, s in sorted(scores.items(), key=lambda x: (-x[1], x[0])))


def aggregate_to_documents(chunk_results: Iterable[Tuple[str, float]],
                           chunk_to_pid: Dict[str, str]) -> Tuple[RankedItem, ...]:
    """
    文档得分 = 其所有 chunk 得分的最大值

    Raises:
        UnresolvableChunk: chunk_id 找不到对应 pid
    """
    best: Dict[str, float] = {}
    for chunk_id, score in chunk_results:
        pid = chunk_to_pid.get(chunk_id)
        if pid is None:
            raise UnresolvableChunk(chunk_id)
        if pid not in best or score > best[pid]:
            best[pid] = score
    return _sorted_items(best)


def fuse(sparse: RankedList, dense: RankedList, params: FusionParams = FusionParams()) -> RankedList:
    """
    倒数排名融合：fused(pid) = Σ 1/(rrf_k + rank)，rank 从 1 开始，
    只依赖名次，与原始分数尺度无关

    Raises:
        QidMismatch: 两个列表不属于同一个查询
    """
    if sparse.qid != dense.qid:
        raise QidMismatch(sparse.qid, dense.qid)
    fused: Dict[str, float] = {}
    for ranked in (sparse, dense):
        for rank, item in enumerate(ranked.items, 1):
            fused[item.pid] = fused.get(item.pid, 0.0) + 1.0 / (params.rrf_k + rank)
    return RankedList(qid=sparse.qid, strategy=Strategy.HYBRID, items=_sorted_items(fused))


class RetrievalIndexes:
    """同一批 chunk 上构建的两个索引，以及 chunk 与文档的映射"""

    def __init__(self, sparse: SparseIndex, lexicon: Lexicon, dense: DenseIndex, embedder: Embedder,
                 chunk_to_pid: Dict[str, str], embedding_cache: Optional[ReplayCache] = None):
        self.sparse = sparse
        self.lexicon = lexicon
        self.dense = dense
        self.embedder = embedder
        self.embedding_cache = embedding_cache
        self.chunk_to_pid = dict(chunk_to_pid)
        self.pid_to_chunks: Dict[str, List[str]] = {}
        for chunk_id, pid in sorted(self.chunk_to_pid.items()):
            self.pid_to_chunks.setdefault(pid, []).append(chunk_id)

    def candidate_chunks(self, pids: Iterable[str]) -> List[str]:
        return [cid for pid in sorted(set(pids)) for cid in self.pid_to_chunks.get(pid, [])]


def build_retrieval_indexes(chunks: Sequence[Chunk], lexicon: Lexicon, embedder: Embedder,
                            k1: float = DEFAULT_K1, b: float = DEFAULT_B,
                            embedding_cache: Optional[ReplayCache] = None, workers: int = 4,
                            progress: bool = True) -> RetrievalIndexes:
    sparse = build_sparse_index(chunks, lexicon, k1=k1, b=b)
    dense = build_dense_index(chunks, embedder, cache=embedding_cache, workers=workers, progress=progress)
    return RetrievalIndexes(sparse, lexicon, dense, embedder, {c.chunk_id: c.pid for c in chunks}, embedding_cache)


def _document_run(qid: str, text: str, strategy: Strategy, indexes: RetrievalIndexes,
                  candidates: List[str]) -> RankedList:
    # 候选池内穷尽检索，再按文档取最高分
    if not candidates:
        return RankedList(qid=qid, strategy=strategy)
    depth = len(candidates)
    if strategy == Strategy.SPARSE:
        hits = search_sparse(indexes.sparse, text, indexes.lexicon, depth, candidates)
    else:
        hits = search_dense(indexes.dense, text, indexes.embedder, depth, candidates,
                            cache=indexes.embedding_cache)
    return RankedList(qid=qid, strategy=strategy, items=aggregate_to_documents(hits, indexes.chunk_to_pid))


def retrieve_text(qid: str, text: str, source: Optional[Iterable[str]], strategy: Strategy,
                  indexes: RetrievalIndexes, params: FusionParams = FusionParams(), k: int = 10) -> RankedList:
    """source 为 None 时在全部文档中检索（命令行临时查询用）"""
    if k < 1:
        raise ValueError("k 必须 >= 1")
    strategy = Strategy(strategy)
    pids = indexes.pid_to_chunks.keys() if source is None else source
    candidates = indexes.candidate_chunks(pids)

    if strategy != Strategy.HYBRID:
        run = _document_run(qid, text, strategy, indexes, candidates)
        return RankedList(qid=qid, strategy=strategy, items=run.items[:k])

    depth = params.per_list_depth
    sparse = _document_run(qid, text, Strategy.SPARSE, indexes, candidates)
    dense = _document_run(qid, text, Strategy.DENSE, indexes, candidates)
    sparse = RankedList(qid=qid, strategy=Strategy.SPARSE, items=sparse.items[:depth])
    dense = RankedList(qid=qid, strategy=Strategy.DENSE, items=dense.items[:depth])
    fused = fuse(sparse, dense, params)
    return RankedList(qid=qid, strategy=Strategy.HYBRID, items=fused.items[:k])


def retrieve(query: Query, strategy: Strategy, indexes: RetrievalIndexes,
             params: FusionParams = FusionParams(), k: int = 10) -> RankedList:
    """
    检索单个查询，结果只包含 query.source 中的文档

    sparse / dense 在候选池内检索 chunk 后按文档取最大分；
    hybrid 两路各取前 per_list_depth 个文档再做 RRF 融合。

    Args:
        query: 查询
        strategy: sparse / dense / hybrid
        indexes: 检索索引
        params: 融合参数（hybrid 时生效）
        k: 返回的文档数

    Returns:
        文档级 RankedList，至多 k 条
    """
    return retrieve_text(query.qid, query.query, query.source, strategy, indexes, params, k)


# 空结果写成一行 rank=0, pid=null
def save_runs(runs: Iterable[RankedList], path) -> None:
    records = []
    for run in runs:
        base = {"qid": run.qid, "strategy": run.strategy.value}
        if not run.items:
            records.append(dict(base, rank=0, pid=None, score=None))
        for rank, item in enumerate(run.items, 1):
            records.append(dict(base, rank=rank, pid=item.pid, score=item.score))
    write_jsonl(Path(path), records)


def load_runs(path) -> Dict[Tuple[str, Strategy], RankedList]:
    """
    Returns:
        (qid, strategy) -> RankedList
    """
    grouped: Dict[Tuple[str, Strategy], List[Tuple[int, RankedItem]]] = {}
    for line_no, record in read_jsonl(Path(path)):
        try:
            key = (str(record["qid"]), Strategy(record["strategy"]))
            rank = int(record["rank"])
            items = grouped.setdefault(key, [])
            if rank > 0:
                items.append((rank, RankedItem(pid=record["pid"], score=record["score"])))
        except (KeyError, ValueError, TypeError) as e:
            raise MalformedRecord(path, line_no, f"检索结果记录不合法: {e}")

    runs = {}
    for (qid, strategy), items in grouped.items():
        items.sort(key=lambda x: x[0])
        if [r for r, _ in items] != list(range(1, len(items) + 1)):
            raise MalformedRecord(path, None, f"qid={qid} strategy={strategy.value} 的 rank 不连续")
        try:
            runs[(qid, strategy)] = RankedList(qid=qid, strategy=strategy, items=tuple(i for _, i in items))
        except ValueError as e:
            raise MalformedRecord(path, None, str(e))
    return runs
