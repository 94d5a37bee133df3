"""
评测：MRR / Precision@1、消融矩阵、九种问题增广
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from .cache import ReplayCache, make_cache_key
from .chunk import DEFAULT_COUNTER, ChunkParams, TokenCounter, chunk_corpus, save_chunks
from .dense import Embedder
from .enhance import (DEFAULT_MODEL_ID, OCR_BEGIN, EnhanceConfig, clean_response, echo_ocr_responder,
                      enhance_corpus, enhanced_texts, save_enhanced)
from .errors import (CacheMiss, DocprepError, DuplicateQid, EmptyAugmentation,
                     InvariantViolation, MalformedRecord, MissingRun, NotOriginalQuestion)
from .hybrid import (STRATEGIES, FusionParams, RankedList, RetrievalIndexes, Strategy,
                     build_retrieval_indexes, retrieve, save_runs)
from .ingest import CorpusStore, Origin, Query
from .providers import PromptRequest, ProviderClient
from .sparse import DEFAULT_B, DEFAULT_K1, Lexicon
from .utils import atomic_write_text, nfc, progress_enabled, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_DEPTH = 10
AUGMENT_PROMPT_VERSION = "aug-v1"
METRIC_TOLERANCE = 1e-12


# ===== 指标 =====

def first_hit_rank(pids: Sequence[str], ground_truth: Iterable[str]) -> Optional[int]:
    gold = set(ground_truth)
    for rank, pid in enumerate(pids, 1):
        if pid in gold:
            return rank
    return None


def reciprocal_rank(results, ground_truth: Iterable[str], depth: Optional[int] = None) -> float:
    """
    Args:
        results: RankedList 或 pid 序列
        ground_truth: 正确答案 pid 集合
        depth: 只看前 depth 条，超出视为未命中

    Returns:
        1/r，r 为第一个正确 pid 的名次（从 1 开始）；未命中为 0
    """
    pids = results.pids if isinstance(results, RankedList) else list(results)
    if depth is not None:
        pids = pids[:depth]
    rank = first_hit_rank(pids, ground_truth)
    return 1.0 / rank if rank is not None else 0.0


class QueryDiagnostic(BaseModel):
    model_config = ConfigDict(frozen=True)

    qid: str
    rank: Optional[int] = None
    top1: Optional[str] = None
    rr: float = 0.0


class EvalRow(BaseModel):
    """报告中的一行：一个配置在一个检索策略下的结果"""
    model_config = ConfigDict(frozen=True)

    config: str
    strategy: Strategy
    mrr: Optional[float] = None
    precision_at_1: Optional[float] = None
    n_queries: int = 0
    n_original: int = 0
    n_augmented: int = 0
    depth: int = DEFAULT_DEPTH
    repeats: int = 1
    mrr_max_dev: float = 0.0
    p_at_1_max_dev: float = 0.0
    error: Optional[str] = None
    per_query: Tuple[QueryDiagnostic, ...] = ()

    @property
    def failed(self) -> bool:
        return self.error is not None


class EvalReport(BaseModel):
    """一个检索策略的报告，行对应各个配置"""
    model_config = ConfigDict(frozen=True)

    strategy: Strategy
    depth: int
    counter: str
    embedder: str
    fusion: FusionParams
    rows: Tuple[EvalRow, ...] = ()

    def verify(self) -> None:
        """
        Raises:
            InvariantViolation: P@1 > MRR，或 MRR 与逐查询倒数排名的均值不一致
        """
        for row in self.rows:
            if row.failed:
                continue
            if row.precision_at_1 > row.mrr + METRIC_TOLERANCE:
                raise InvariantViolation(f"{row.config}/{row.strategy.value}: P@1={row.precision_at_1} > MRR={row.mrr}")
            if row.mrr_max_dev == 0.0 and row.per_query:
                recomputed = math.fsum(d.rr for d in row.per_query) / len(row.per_query)
                if abs(recomputed - row.mrr) > METRIC_TOLERANCE:
                    raise InvariantViolation(f"{row.config}/{row.strategy.value}: MRR={row.mrr} != {recomputed}")


def evaluate(runs: Dict[str, RankedList], queries: Sequence[Query], config: str = "",
             strategy: Strategy = Strategy.HYBRID, depth: int = DEFAULT_DEPTH) -> EvalRow:
    """
    计算一组查询的 MRR 与 P@1；空结果算未命中，不跳过

    Args:
        runs: qid -> RankedList
        queries: 参与评测的查询
        config: 配置名（写入报告）
        strategy: 检索策略（写入报告）
        depth: 评测深度

    Raises:
        MissingRun: 某个查询没有检索结果
    """
    diagnostics = []
    hits = 0
    for query in queries:
        run = runs.get(query.qid)
        if run is None:
            raise MissingRun(query.qid)
        pids = run.pids[:depth]
        rank = first_hit_rank(pids, query.ground_truth)
        rr = 1.0 / rank if rank is not None else 0.0
        if rank == 1:
            hits += 1
        diagnostics.append(QueryDiagnostic(qid=query.qid, rank=rank, top1=pids[0] if pids else None, rr=rr))

    n = len(diagnostics)
    n_augmented = sum(1 for q in queries if q.origin is not None)
    return EvalRow(
        config=config,
        strategy=strategy,
        mrr=math.fsum(d.rr for d in diagnostics) / n if n else 0.0,
        precision_at_1=hits / n if n else 0.0,
        n_queries=n,
        n_original=n - n_augmented,
        n_augmented=n_augmented,
        depth=depth,
        per_query=tuple(diagnostics),
    )


# ===== 问题增广 =====

class AugmentationStrategy(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=1, le=9)
    name: str
    instruction: str


AUGMENTATION_STRATEGIES: Tuple[AugmentationStrategy, ...] = (
    AugmentationStrategy(id=1, name="synonym_all",
                         instruction="將問題中所有關鍵詞都替換為同義詞（例如「修改」→「變更」），保持原意。"),
    AugmentationStrategy(id=2, name="synonym_half",
                         instruction="只將問題中一半的關鍵詞替換為同義詞，另一半保持不變。"),
    AugmentationStrategy(id=3, name="keywords",
                         instruction="抽取問題的核心關鍵詞，以空格分隔輸出。"),
    AugmentationStrategy(id=4, name="keywords_synonym_all",
                         instruction="抽取問題的核心關鍵詞，並把全部關鍵詞替換為同義詞，以空格分隔輸出。"),
    AugmentationStrategy(id=5, name="keywords_synonym_half",
                         instruction="抽取問題的核心關鍵詞，只把其中一半替換為同義詞，其餘保持原樣，以空格分隔輸出。"),
    AugmentationStrategy(id=6, name="reorder",
                         instruction="改變句子結構與語序（例如對調主詞與動詞的位置），保持原意。"),
    AugmentationStrategy(id=7, name="condense",
                         instruction="將問題濃縮成最精簡的形式，保留核心意思。"),
    AugmentationStrategy(id=8, name="condense_reorder",
                         instruction="先將問題濃縮成最精簡的形式，再改變其語序（例如對調主詞與動詞）。"),
    AugmentationStrategy(id=9, name="informal",
                         instruction="將問題改寫成較口語、輕鬆的說法。"),
)

AUGMENT_SYSTEM_TEXT = "你是一個問題改寫助手。你只輸出改寫後的問題本身，不要加任何解釋、編號或引號。"
QUESTION_PREFIX = "原始問題："


def build_augment_prompt(question: Query, strategy: AugmentationStrategy) -> PromptRequest:
    user_text = (
        f"改寫規則：{strategy.instruction}\n\n"
        f"{QUESTION_PREFIX}{question.query}\n\n"
        "請只輸出改寫結果。"
    )
    return PromptRequest(system_text=AUGMENT_SYSTEM_TEXT, user_text=user_text, sections=(strategy.name,))


def echo_responder(request: PromptRequest) -> str:
    """mock 模式的响应：后处理提示词回显 OCR 原文，增广提示词回显原始问题"""
    if OCR_BEGIN not in request.user_text:
        for line in request.user_text.splitlines():
            if line.startswith(QUESTION_PREFIX):
                return line[len(QUESTION_PREFIX):]
    return echo_ocr_responder(request)


def augment_cache_key(question: Query, strategy: AugmentationStrategy, model_id: str = DEFAULT_MODEL_ID,
                      prompt_version: str = AUGMENT_PROMPT_VERSION) -> str:
    request = build_augment_prompt(question, strategy)
    return make_cache_key(request.prompt_bytes(), b"", model_id, prompt_version)


def variant_qid(parent_qid: str, strategy_id: int) -> str:
    return f"{parent_qid}-s{strategy_id}"


def generate_variants(question: Query, client: ProviderClient, cache: ReplayCache,
                      strategies: Sequence[AugmentationStrategy] = AUGMENTATION_STRATEGIES,
                      model_id: str = DEFAULT_MODEL_ID, prompt_version: str = AUGMENT_PROMPT_VERSION,
                      max_retries: int = 3) -> List[Query]:
    """
    为一个原始问题生成改写变体，每个策略一次调用，响应走回放缓存

    变体继承 source / ground_truth / category，qid 加 "-s<策略编号>" 后缀。

    Raises:
        NotOriginalQuestion: 输入本身就是增广问题
        EmptyAugmentation: 模型返回空结果
        CacheMiss: 回放模式下缓存未命中
    """
    if question.origin is not None:
        raise NotOriginalQuestion(question.qid)

    variants = []
    for strategy in strategies:
        request = build_augment_prompt(question, strategy)
        key = make_cache_key(request.prompt_bytes(), b"", model_id, prompt_version)
        text = cache.get(key)
        if text is None:
            if cache.replay_only:
                raise CacheMiss(key)
            text = nfc(clean_response(client.complete(request, model_id, max_retries=max_retries)))
            if not text:
                raise EmptyAugmentation(question.qid, strategy.id)
            cache.put(key, text, {"qid": question.qid, "strategy": strategy.id})
        variants.append(Query(
            qid=variant_qid(question.qid, strategy.id),
            query=text.strip(),
            source=question.source,
            ground_truth=question.ground_truth,
            category=question.category,
            origin=Origin(parent_qid=question.qid, strategy=strategy.id),
        ))
    return variants


def augment_questions(questions: Sequence[Query], client: ProviderClient, cache: ReplayCache,
                      model_id: str = DEFAULT_MODEL_ID, prompt_version: str = AUGMENT_PROMPT_VERSION,
                      max_retries: int = 3, workers: int = 4, progress: bool = True) -> List[Query]:
    """
    对整个问题集做增广

    Returns:
        每个原始问题后面紧跟它的九个变体；50 个原始问题得到 500 个查询
    """
    for question in questions:
        if question.origin is not None:
            raise NotOriginalQuestion(question.qid)

    def _one(question):
        return generate_variants(question, client, cache, model_id=model_id,
                                 prompt_version=prompt_version, max_retries=max_retries)

    out: List[Query] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for question, variants in zip(questions, tqdm(pool.map(_one, questions), total=len(questions),
                                                      desc="增广", unit="题", disable=not progress_enabled(progress))):
            out.append(question)
            out.extend(variants)

    seen = set()
    for query in out:
        if query.qid in seen:
            raise DuplicateQid(query.qid)
        seen.add(query.qid)
    logger.info(f"✓ 增广完成: 原始 {len(questions)} 题 -> 共 {len(out)} 题")
    return out


class AugmentationSeed(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    qid: str
    strategy: int = Field(ge=1, le=9)
    text: str


def load_augmentation_seeds(path) -> List[AugmentationSeed]:
    seeds = []
    for line_no, record in read_jsonl(Path(path)):
        try:
            seeds.append(AugmentationSeed(**record))
        except Exception as e:
            raise MalformedRecord(path, line_no, str(e))
    return seeds


def seed_augmentation_cache(questions: Sequence[Query], seeds: Iterable[AugmentationSeed], cache: ReplayCache,
                            model_id: str = DEFAULT_MODEL_ID,
                            prompt_version: str = AUGMENT_PROMPT_VERSION) -> int:
    """用预置的改写结果填充缓存，返回写入条数"""
    by_qid = {q.qid: q for q in questions}
    strategies = {s.id: s for s in AUGMENTATION_STRATEGIES}
    written = 0
    for seed in seeds:
        question = by_qid.get(seed.qid)
        if question is None:
            logger.warning(f"⚠ 预置改写对应的问题不存在: qid={seed.qid}")
            continue
        key = augment_cache_key(question, strategies[seed.strategy], model_id, prompt_version)
        if not cache.contains(key):
            cache.put(key, nfc(seed.text), {"qid": seed.qid, "strategy": seed.strategy, "seeded": True})
            written += 1
    logger.info(f"✓ 增广缓存预置: 写入 {written} 条")
    return written


# ===== 消融矩阵 =====

class MatrixSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    chunk: ChunkParams = ChunkParams()
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    fusion: FusionParams = FusionParams()
    depth: int = Field(default=DEFAULT_DEPTH, ge=1)
    workers: int = Field(default=4, ge=1)
    provider_workers: Optional[int] = Field(default=None, ge=1)
    repeats: int = Field(default=1, ge=1)
    seed: Optional[int] = None


class MatrixResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    reports: Dict[Strategy, EvalReport]
    config_names: Tuple[str, ...]

    def rows(self) -> List[EvalRow]:
        return [row for strategy in STRATEGIES for row in self.reports[strategy].rows]


def _retrieve_all(queries: Sequence[Query], strategy: Strategy, indexes: RetrievalIndexes,
                  fusion: FusionParams, depth: int, workers: int) -> Dict[str, RankedList]:
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        runs = list(pool.map(lambda q: retrieve(q, strategy, indexes, fusion, depth), queries))
    return {run.qid: run for run in runs}


def _run_config_once(name: str, config: Optional[EnhanceConfig], store: CorpusStore, queries: Sequence[Query],
                     client: ProviderClient, cache: ReplayCache, lexicon: Lexicon, embedder: Embedder,
                     counter: TokenCounter, settings: MatrixSettings, embedding_cache: Optional[ReplayCache],
                     image_root, out_dir: Optional[Path], progress: bool) -> Dict[Strategy, EvalRow]:
    provider_workers = settings.provider_workers or settings.workers
    enhanced = enhance_corpus(store, config, client, cache, image_root=image_root,
                              workers=provider_workers, progress=progress)
    chunks = chunk_corpus(enhanced_texts(enhanced), settings.chunk, counter)
    indexes = build_retrieval_indexes(chunks, lexicon, embedder, k1=settings.k1, b=settings.b,
                                      embedding_cache=embedding_cache, workers=provider_workers, progress=progress)
    rows: Dict[Strategy, EvalRow] = {}
    all_runs: List[RankedList] = []
    for strategy in STRATEGIES:
        runs = _retrieve_all(queries, strategy, indexes, settings.fusion, settings.depth, settings.workers)
        rows[strategy] = evaluate(runs, queries, config=name, strategy=strategy, depth=settings.depth)
        all_runs.extend(runs[q.qid] for q in queries)

    if out_dir is not None:
        stage_dir = out_dir / name
        stage_dir.mkdir(parents=True, exist_ok=True)
        save_enhanced(enhanced, stage_dir / "enhanced.jsonl")
        save_chunks(chunks, stage_dir / "chunks.jsonl", settings.chunk, counter)
        save_runs(all_runs, stage_dir / "runs.jsonl")
    return rows


def _combine_repeats(rows: List[EvalRow]) -> EvalRow:
    """多次重复取均值，记录与均值的最大偏差；逐查询诊断取第一次"""
    if len(rows) == 1:
        return rows[0]
    mrrs = [r.mrr for r in rows]
    p1s = [r.precision_at_1 for r in rows]
    mean_mrr = math.fsum(mrrs) / len(mrrs)
    mean_p1 = math.fsum(p1s) / len(p1s)
    first = rows[0]
    return first.model_copy(update={
        "mrr": mean_mrr,
        "precision_at_1": mean_p1,
        "repeats": len(rows),
        "mrr_max_dev": max(abs(m - mean_mrr) for m in mrrs),
        "p_at_1_max_dev": max(abs(p - mean_p1) for p in p1s),
    })


def run_matrix(store: CorpusStore, questions: Sequence[Query], configs: Dict[str, Optional[EnhanceConfig]],
               client: ProviderClient, cache: ReplayCache, lexicon: Lexicon, embedder: Embedder,
               settings: MatrixSettings = MatrixSettings(), counter: TokenCounter = DEFAULT_COUNTER,
               embedding_cache: Optional[ReplayCache] = None, image_root=None, out_dir=None,
               progress: bool = True) -> MatrixResult:
    """
    消融矩阵：每个配置依次 增强 -> 切块 -> 建索引 -> 三种策略检索 -> 评测

    配置之间顺序执行（共享缓存目录）。某个配置任一阶段失败时，该配置的三行记为失败并附诊断，
    其余配置照常进行。

    Args:
        store: 语料库
        questions: 评测问题（可含增广问题）
        configs: 配置名 -> EnhanceConfig，BASELINE 对应 None
        client: 模型客户端
        cache: 增强回放缓存
        lexicon: 分词词典
        embedder: embedding 后端
        settings: 切块 / BM25 / 融合 / 深度 / 并发 / 重复次数
        out_dir: 中间产物目录（每个配置一个子目录），None 表示不落盘

    Returns:
        MatrixResult，每个策略一份报告
    """
    queries = list(questions)
    out_dir = Path(out_dir) if out_dir is not None else None
    rows: Dict[Strategy, List[EvalRow]] = {s: [] for s in STRATEGIES}

    for name, config in configs.items():
        logger.info(f"===== 配置 {name} =====")
        try:
            repeat_rows: Dict[Strategy, List[EvalRow]] = {s: [] for s in STRATEGIES}
            for repeat in range(settings.repeats):
                if settings.seed is not None and hasattr(client, "seed"):
                    client.seed = settings.seed + repeat
                once = _run_config_once(name, config, store, queries, client, cache, lexicon, embedder, counter,
                                        settings, embedding_cache, image_root,
                                        out_dir if repeat == 0 else None, progress)
                for strategy, row in once.items():
                    repeat_rows[strategy].append(row)
            for strategy in STRATEGIES:
                row = _combine_repeats(repeat_rows[strategy])
                rows[strategy].append(row)
                logger.info(f"  {strategy.value:<6} MRR={row.mrr * 100:.2f}% P@1={row.precision_at_1 * 100:.2f}%")
        except DocprepError as err:
            logger.error(f"✗ 配置 {name} 失败: {err}")
            for strategy in STRATEGIES:
                rows[strategy].append(EvalRow(config=name, strategy=strategy, depth=settings.depth,
                                              repeats=settings.repeats, error=f"{type(err).__name__}: {err}"))

    reports = {}
    for strategy in STRATEGIES:
        report = EvalReport(strategy=strategy, depth=settings.depth, counter=counter.label,
                            embedder=embedder.fingerprint, fusion=settings.fusion, rows=tuple(rows[strategy]))
        report.verify()
        reports[strategy] = report
    return MatrixResult(reports=reports, config_names=tuple(configs))


# ===== 报告输出 =====

STRATEGY_TITLES = {
    Strategy.SPARSE: "Sparse Retrieval (BM25)",
    Strategy.DENSE: "Dense Retrieval",
    Strategy.HYBRID: "Hybrid Retrieval",
}


def _pct(value: Optional[float]) -> str:
    return f"{value * 100:.2f}"


def render_table(report: EvalReport) -> str:
    """渲染为文本表格：Method | MRR (%) | Precision@1 (%)，两位小数"""
    name_width = max([len("Method")] + [len(r.config) for r in report.rows])
    header = f"{'Method'.ljust(name_width)} | {'MRR (%)':>8} | {'Precision@1 (%)':>15}"
    lines = [
        f"{STRATEGY_TITLES[report.strategy]} (depth={report.depth})",
        header,
        "-" * len(header),
    ]
    for row in report.rows:
        if row.failed:
            lines.append(f"{row.config.ljust(name_width)} | {'FAILED':>8} | {'FAILED':>15}")
            continue
        mrr, p1 = _pct(row.mrr), _pct(row.precision_at_1)
        if row.repeats > 1:
            mrr += f" ±{_pct(row.mrr_max_dev)}"
            p1 += f" ±{_pct(row.p_at_1_max_dev)}"
        lines.append(f"{row.config.ljust(name_width)} | {mrr:>8} | {p1:>15}")
    counts = next((r for r in report.rows if not r.failed), None)
    if counts is not None:
        lines.append(f"queries: {counts.n_queries} (原始 {counts.n_original} + 增广 {counts.n_augmented})")
    return "\n".join(lines) + "\n"


def report_records(report: EvalReport) -> List[dict]:
    records = []
    for row in report.rows:
        records.append({
            "config": row.config,
            "strategy": row.strategy.value,
            "mrr": row.mrr,
            "p_at_1": row.precision_at_1,
            "n": row.n_queries,
            "n_original": row.n_original,
            "n_augmented": row.n_augmented,
            "depth": report.depth,
            "counter": report.counter,
            "embedder": report.embedder,
            "fusion": report.fusion.model_dump(),
            "repeats": row.repeats,
            "mrr_max_dev": row.mrr_max_dev,
            "p_at_1_max_dev": row.p_at_1_max_dev,
            "error": row.error,
        })
    return records


def write_reports(result: MatrixResult, out_dir, resolved_config: Optional[dict] = None) -> Dict[str, Path]:
    """
    写出报告文件（内容只由输入决定，不含时间戳，两次运行逐字节一致）

    Returns:
        文件名 -> 路径
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = [result.reports[s] for s in STRATEGIES]

    paths = {
        "report.jsonl": out_dir / "report.jsonl",
        "report.txt": out_dir / "report.txt",
        "per_query.jsonl": out_dir / "per_query.jsonl",
    }
    write_jsonl(paths["report.jsonl"], [rec for report in reports for rec in report_records(report)])
    atomic_write_text(paths["report.txt"], "\n".join(render_table(report) for report in reports))
    write_jsonl(paths["per_query.jsonl"], [
        dict(diag.model_dump(), config=row.config, strategy=row.strategy.value)
        for report in reports for row in report.rows for diag in row.per_query
    ])
    if resolved_config is not None:
        paths["resolved_config.json"] = out_dir / "resolved_config.json"
        atomic_write_text(paths["resolved_config.json"],
                          json.dumps(resolved_config, ensure_ascii=False, sort_keys=True, indent=2) + "\n")
    logger.info(f"✓ 报告已写入 {out_dir}")
    return paths
