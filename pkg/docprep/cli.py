"""
命令行入口

    python -m docprep <子命令> [选项]

子命令对应流水线各阶段: ingest | ocr | enhance | augment | chunk | index | search | eval | matrix
退出码: 0 成功, 1 配置错误, 2 数据校验错误, 3 外部服务错误, 4 内部错误
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .chunk import DEFAULT_COUNTER, chunk_corpus, load_chunks, save_chunks
from .config import (RunConfig, build_caches, build_embedder, build_limiter, build_provider_client,
                     embedding_cache_for, load_run_config)
from .dense import load_dense_index, save_dense_index
from .enhance import (BASELINE, enhance_corpus, enhanced_texts, load_enhanced, load_seed_responses,
                      save_enhanced, seed_replay_cache)
from .errors import ConfigError, DocprepError
from .evalkit import (EvalReport, augment_questions, evaluate, load_augmentation_seeds, render_table,
                      run_matrix, seed_augmentation_cache, write_reports)
from .hybrid import (STRATEGIES, RetrievalIndexes, Strategy, build_retrieval_indexes, load_runs, retrieve,
                     retrieve_text, save_runs)
from .ingest import build_corpus_from_raw, load_corpus, load_questions, ocr_corpus, save_corpus, save_questions
from .sparse import Lexicon, load_sparse_index, save_sparse_index
from .utils import progress_enabled, setup_logging

logger = logging.getLogger("docprep.cli")

SEPARATOR = "=" * 60


class _Parser(argparse.ArgumentParser):
    """参数错误按配置错误处理（退出码 1）"""

    def error(self, message):
        raise ConfigError([message])


# ===== 各阶段 =====

def _stage_dir(cfg: RunConfig, name: str) -> Path:
    return cfg.paths.output / name


def _preset_name(cfg: RunConfig, args) -> str:
    return (args.preset or cfg.enhance_config_name).upper()


def _seed_enhance_cache(cfg: RunConfig, store, cache, seed_file: Optional[Path]) -> None:
    if seed_file is None:
        return
    configs = {name: c for name, c in cfg.enhance_configs().items() if c is not None}
    if cfg.enhance.flags is not None:
        configs["CUSTOM"] = cfg.enhance_config()
    seed_replay_cache(store, configs, load_seed_responses(seed_file), cache, image_root=cfg.paths.image_root)


def cmd_ingest(cfg: RunConfig, args) -> int:
    if args.raw:
        store = build_corpus_from_raw(args.raw, cfg.paths.corpus)
    else:
        store = load_corpus(cfg.paths.corpus)
    print(f"语料库: {cfg.paths.corpus}")
    print(f"  文档 {len(store.documents)} 个, 页面 {store.page_count} 页, 分类 {store.manifest.category_counts}")
    if cfg.paths.questions.is_file():
        questions = load_questions(cfg.paths.questions, strict=args.strict)
        missing = sorted({pid for q in questions for pid in q.source} - set(store.documents))
        if missing:
            logger.warning(f"⚠ 问题的候选文档不在语料库中: {missing[:10]}")
        print(f"  问题 {len(questions)} 个")
    return 0


def cmd_ocr(cfg: RunConfig, args) -> int:
    engine = args.engine or cfg.ocr.engine_cmd
    if not engine:
        raise ConfigError(["ocr 需要 --engine 或 ocr.engine_cmd"])
    store = load_corpus(cfg.paths.corpus)
    store = ocr_corpus(store, engine, image_root=cfg.paths.image_root, workers=cfg.run.workers,
                       force=args.force or cfg.ocr.force, progress=not args.no_progress)
    save_corpus(store, cfg.paths.corpus)
    print(f"✓ OCR 完成: {store.page_count} 页")
    return 0


def cmd_enhance(cfg: RunConfig, args) -> int:
    name = _preset_name(cfg, args)
    config = cfg.enhance_config(None if args.preset is None else name)
    store = load_corpus(cfg.paths.corpus)
    cache, _, _ = build_caches(cfg)
    _seed_enhance_cache(cfg, store, cache, args.seed_responses or cfg.paths.seed_responses)

    client = build_provider_client(cfg)
    pages = enhance_corpus(store, config, client, cache, image_root=cfg.paths.image_root,
                           workers=cfg.provider_workers, progress=not args.no_progress)
    out = args.out or _stage_dir(cfg, name) / "enhanced.jsonl"
    save_enhanced(pages, out)
    print(f"✓ 增强完成 [{name}]: {len(pages)} 页 -> {out}")
    return 0


def cmd_augment(cfg: RunConfig, args) -> int:
    questions = [q for q in load_questions(cfg.paths.questions) if q.origin is None]
    _, cache, _ = build_caches(cfg)
    seed_file = args.augment_seeds or cfg.paths.augment_seeds
    if seed_file is not None:
        seed_augmentation_cache(questions, load_augmentation_seeds(seed_file), cache,
                                cfg.enhance.model_id, cfg.enhance.augment_prompt_version)
    client = build_provider_client(cfg)
    augmented = augment_questions(questions, client, cache, model_id=cfg.enhance.model_id,
                                  prompt_version=cfg.enhance.augment_prompt_version,
                                  max_retries=cfg.enhance.max_retries, workers=cfg.provider_workers,
                                  progress=not args.no_progress)
    out = args.out or cfg.paths.output / "questions_augmented.jsonl"
    save_questions(augmented, out)
    print(f"✓ 增广完成: 原始 {len(questions)} + 变体 {len(augmented) - len(questions)} = {len(augmented)} -> {out}")
    return 0


def cmd_chunk(cfg: RunConfig, args) -> int:
    name = _preset_name(cfg, args)
    src = args.input or _stage_dir(cfg, name) / "enhanced.jsonl"
    chunks = chunk_corpus(enhanced_texts(load_enhanced(src)), cfg.chunk, DEFAULT_COUNTER)
    out = args.out or _stage_dir(cfg, name) / "chunks.jsonl"
    save_chunks(chunks, out, cfg.chunk, DEFAULT_COUNTER)
    print(f"✓ 切块完成 [{name}]: {len(chunks)} 块 -> {out}")
    return 0


def _load_chunks_for(cfg: RunConfig, name: str):
    chunks, _ = load_chunks(_stage_dir(cfg, name) / "chunks.jsonl", DEFAULT_COUNTER)
    return chunks


def cmd_index(cfg: RunConfig, args) -> int:
    name = _preset_name(cfg, args)
    chunks = _load_chunks_for(cfg, name)
    _, _, emb_cache = build_caches(cfg)
    embedder = build_embedder(cfg, build_limiter(cfg))
    indexes = build_retrieval_indexes(chunks, Lexicon.from_file(cfg.paths.lexicon), embedder,
                                      k1=cfg.bm25.k1, b=cfg.bm25.b,
                                      embedding_cache=embedding_cache_for(cfg, emb_cache),
                                      workers=cfg.provider_workers, progress=not args.no_progress)
    stage = _stage_dir(cfg, name)
    save_sparse_index(indexes.sparse, stage / "sparse_index.jsonl")
    save_dense_index(indexes.dense, stage / "dense_index.jsonl")
    print(f"✓ 索引完成 [{name}]: {len(chunks)} 块 -> {stage}")
    return 0


def _open_indexes(cfg: RunConfig, name: str, progress: bool) -> RetrievalIndexes:
    """优先读取 index 阶段的产物，没有则从 chunks 现建"""
    chunks = _load_chunks_for(cfg, name)
    lexicon = Lexicon.from_file(cfg.paths.lexicon)
    _, _, emb_cache = build_caches(cfg)
    embedder = build_embedder(cfg, build_limiter(cfg))
    stage = _stage_dir(cfg, name)
    sparse_path, dense_path = stage / "sparse_index.jsonl", stage / "dense_index.jsonl"
    if sparse_path.is_file() and dense_path.is_file():
        return RetrievalIndexes(load_sparse_index(sparse_path, lexicon), lexicon, load_dense_index(dense_path),
                                embedder, {c.chunk_id: c.pid for c in chunks}, embedding_cache_for(cfg, emb_cache))
    return build_retrieval_indexes(chunks, lexicon, embedder, k1=cfg.bm25.k1, b=cfg.bm25.b,
                                   embedding_cache=embedding_cache_for(cfg, emb_cache),
                                   workers=cfg.provider_workers, progress=progress)


def cmd_search(cfg: RunConfig, args) -> int:
    name = _preset_name(cfg, args)
    indexes = _open_indexes(cfg, name, not args.no_progress)
    run = retrieve_text("adhoc", args.query, args.source, Strategy(args.strategy), indexes, cfg.fusion,
                        args.k or cfg.retrieval.depth)
    print(f"[{name}] {run.strategy.value}: {args.query}")
    if not run.items:
        print("  (无结果)")
    for rank, item in enumerate(run.items, 1):
        print(f"  {rank:>3}. {item.pid:<20} {item.score:.6f}")
    return 0


def _single_reports(rows_by_strategy: Dict[Strategy, list], cfg: RunConfig, embedder_name: str) -> List[EvalReport]:
    return [EvalReport(strategy=s, depth=cfg.retrieval.depth, counter=DEFAULT_COUNTER.label, embedder=embedder_name,
                       fusion=cfg.fusion, rows=tuple(rows_by_strategy[s])) for s in STRATEGIES if rows_by_strategy[s]]


def cmd_eval(cfg: RunConfig, args) -> int:
    name = _preset_name(cfg, args)
    queries = load_questions(args.questions or cfg.paths.questions)
    runs_path = args.runs or _stage_dir(cfg, name) / "runs.jsonl"

    if args.runs is None:
        indexes = _open_indexes(cfg, name, not args.no_progress)
        all_runs = []
        for strategy in STRATEGIES:
            all_runs.extend(retrieve(q, strategy, indexes, cfg.fusion, cfg.retrieval.depth) for q in queries)
        save_runs(all_runs, runs_path)
        embedder_name = indexes.embedder.fingerprint
    else:
        embedder_name = build_embedder(cfg).fingerprint

    loaded = load_runs(runs_path)
    rows = {s: [] for s in STRATEGIES}
    for strategy in sorted({s for _, s in loaded}, key=STRATEGIES.index):
        runs = {qid: run for (qid, s), run in loaded.items() if s == strategy}
        rows[strategy].append(evaluate(runs, queries, config=name, strategy=strategy, depth=cfg.retrieval.depth))

    print(SEPARATOR)
    for report in _single_reports(rows, cfg, embedder_name):
        report.verify()
        print(render_table(report))
    return 0


def cmd_matrix(cfg: RunConfig, args) -> int:
    store = load_corpus(cfg.paths.corpus)
    questions = load_questions(cfg.paths.questions)
    enhance_cache, _, emb_cache = build_caches(cfg)
    _seed_enhance_cache(cfg, store, enhance_cache, args.seed_responses or cfg.paths.seed_responses)

    limiter = build_limiter(cfg)
    client = build_provider_client(cfg, limiter)
    embedder = build_embedder(cfg, limiter)
    result = run_matrix(store, questions, cfg.enhance_configs(), client, enhance_cache,
                        Lexicon.from_file(cfg.paths.lexicon), embedder, cfg.matrix_settings(),
                        counter=DEFAULT_COUNTER, embedding_cache=embedding_cache_for(cfg, emb_cache),
                        image_root=cfg.paths.image_root, out_dir=cfg.paths.output,
                        progress=not args.no_progress)
    write_reports(result, cfg.paths.output, cfg.resolved())

    print(SEPARATOR)
    for strategy in STRATEGIES:
        print(render_table(result.reports[strategy]))
    failed = [row for row in result.rows() if row.failed]
    print(f"共 {len(result.rows())} 行, 失败 {len(failed)} 行; 报告目录: {cfg.paths.output}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "ocr": cmd_ocr,
    "enhance": cmd_enhance,
    "augment": cmd_augment,
    "chunk": cmd_chunk,
    "index": cmd_index,
    "search": cmd_search,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
}


# ===== 参数解析 =====

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML 运行配置文件")
    common.add_argument("--provider", choices=["live", "replay_only", "mock"], help="模型服务模式")
    common.add_argument("--workers", type=int, help="全局并发数")
    common.add_argument("--output", type=Path, help="输出目录")
    common.add_argument("--no-progress", action="store_true", help="不显示进度条")
    common.add_argument("--log-level", default="INFO", help="日志级别 (默认 INFO)")
    common.add_argument("--log-file", help="额外写入的日志文件")

    preset = argparse.ArgumentParser(add_help=False)
    preset.add_argument("--preset", help=f"增强配置: {BASELINE} / FULL / NO_VISION / NO_OCR_TEXT / NO_REWRITE")

    parser = _Parser(prog="docprep", description="非叙事文档 OCR 后处理与检索评测流水线")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", parents=[common], help="构建或校验语料库")
    p.add_argument("--raw", type=Path, help="原始目录 raw/<category>/<pid>/<page_no>.txt|png|jpg")
    p.add_argument("--strict", action="store_true", help="问题文件出现未知字段时报错")

    p = sub.add_parser("ocr", parents=[common], help="调用外部 OCR 引擎")
    p.add_argument("--engine", help="命令模板，含 {input} {output} 占位符")
    p.add_argument("--force", action="store_true", help="已有 OCR 文本的页面也重新识别")

    p = sub.add_parser("enhance", parents=[common, preset], help="MLLM 后处理")
    p.add_argument("--seed-responses", type=Path, help="预置响应文件，写入回放缓存")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("augment", parents=[common], help="九种策略改写问题")
    p.add_argument("--augment-seeds", type=Path, help="预置改写结果，写入回放缓存")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("chunk", parents=[common, preset], help="切块")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--input", type=Path, help="增强结果文件")
    p.add_argument("--out", type=Path)

    sub.add_parser("index", parents=[common, preset], help="构建 BM25 与向量索引")

    p = sub.add_parser("search", parents=[common, preset], help="临时查询")
    p.add_argument("--query", required=True)
    p.add_argument("--strategy", choices=[s.value for s in STRATEGIES], default=Strategy.HYBRID.value)
    p.add_argument("--source", nargs="+", help="只在这些 pid 中检索")
    p.add_argument("-k", type=int, help="返回条数（默认 retrieval.depth）")

    p = sub.add_parser("eval", parents=[common, preset], help="评测 MRR / P@1")
    p.add_argument("--runs", type=Path, help="已有的检索结果文件")
    p.add_argument("--questions", type=Path)

    p = sub.add_parser("matrix", parents=[common], help="完整消融矩阵 (5 配置 × 3 策略)")
    p.add_argument("--seed-responses", type=Path, help="预置响应文件，写入回放缓存")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--repeats", type=int, help="重复次数")
    return parser


def _overrides(args) -> Dict[str, object]:
    return {
        "provider.mode": getattr(args, "provider", None),
        "run.workers": getattr(args, "workers", None),
        "run.repeats": getattr(args, "repeats", None),
        "paths.output": str(args.output) if getattr(args, "output", None) else None,
        "chunk.chunk_size": getattr(args, "chunk_size", None),
        "chunk.overlap": getattr(args, "overlap", None),
    }


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as err:
        print(f"✗ {err}", file=sys.stderr)
        return err.exit_code

    setup_logging(args.log_level, args.log_file)
    args.no_progress = not progress_enabled(not args.no_progress)

    try:
        cfg = load_run_config(args.config, _overrides(args))
        logger.info(f"{args.command}: provider={cfg.provider.mode.value}, workers={cfg.run.workers}")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        for message in err.messages:
            logger.error(f"✗ 配置错误: {message}")
        return err.exit_code
    except DocprepError as err:
        logger.error(f"✗ [{err.category}] {err}")
        return err.exit_code
    except Exception:
        logger.exception("✗ 内部错误")
        return 4
