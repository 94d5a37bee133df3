"""
语料与问题集加载

语料库目录结构:
    manifest.json                  {schema_version, category_counts, documents: [{pid, category, file}]}
    documents/<pid>.jsonl          每行一个页面 {page_no, ocr_text?, image_ref?}
    images/<pid>/<page_no>.png     页面图片（可选，image_ref 相对语料库根目录）

问题集: 每行一个 Query 记录 {qid, query, source, ground_truth, category, origin?}
"""
import json
import logging
import os
import shlex
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from tqdm import tqdm

from .errors import (
    DuplicatePid, DuplicateQid, EmptyPage, GroundTruthNotCandidate, MalformedRecord,
    ManifestMismatch, MissingManifest, NoImage, OcrEngineFailed, OcrOutputMissing,
    OcrOutputNotUtf8, UnknownCategory, UnknownField,
)
from .utils import atomic_write_text, nfc, progress_enabled, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
TEXT_SUFFIXES = {".txt"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
PAGE_FIELDS = {"page_no", "ocr_text", "image_ref"}
QUERY_FIELDS = {"qid", "query", "source", "ground_truth", "category", "origin"}


class Category(str, Enum):
    FAQ = "faq"
    INSURANCE = "insurance"
    FINANCE = "finance"


class Page(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    page_no: int = Field(gt=0)
    ocr_text: str = ""
    image_ref: Optional[str] = None

    def is_empty(self) -> bool:
        return not self.ocr_text.strip() and self.image_ref is None


class Document(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pid: str
    category: Category
    pages: Tuple[Page, ...]


class Origin(BaseModel):
    """增广问题的来源：父问题 qid + 增广策略编号"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    parent_qid: str
    strategy: int = Field(ge=1, le=9)


class Query(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    qid: str
    query: str
    source: Tuple[str, ...]
    ground_truth: Tuple[str, ...]
    category: Category
    origin: Optional[Origin] = None

    @model_validator(mode="after")
    def _check_labels(self):
        if not self.source or not self.ground_truth:
            raise ValueError(f"qid={self.qid}: source 与 ground_truth 都不能为空")
        if not set(self.ground_truth) <= set(self.source):
            raise ValueError(f"qid={self.qid}: ground_truth 必须是 source 的子集")
        return self


class Manifest(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: int = SCHEMA_VERSION
    category_counts: Dict[str, int] = Field(default_factory=dict)


class CorpusStore(BaseModel):
    """加载后不可变，可以在线程间只读共享"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    documents: Dict[str, Document]
    manifest: Manifest

    @classmethod
    def from_documents(cls, documents: List[Document]) -> "CorpusStore":
        docs: Dict[str, Document] = {}
        for doc in documents:
            if doc.pid in docs:
                raise DuplicatePid(doc.pid)
            docs[doc.pid] = doc
        return cls(documents=docs, manifest=Manifest(category_counts=_count_categories(docs)))

    def iter_pages(self):
        for doc in self.documents.values():
            for page in doc.pages:
                yield doc.pid, page

    @property
    def page_count(self) -> int:
        return sum(len(doc.pages) for doc in self.documents.values())


def _count_categories(docs: Dict[str, Document]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for doc in docs.values():
        counts[doc.category.value] = counts.get(doc.category.value, 0) + 1
    return dict(sorted(counts.items()))


def _parse_category(value, locus: str) -> Category:
    try:
        return Category(value)
    except ValueError:
        raise UnknownCategory(str(value), locus)


def _check_pid(pid, path, line_no=None) -> str:
    if not isinstance(pid, str) or not pid.strip():
        raise MalformedRecord(path, line_no, "pid 必须是非空字符串")
    # chunk_id 以 '#' 分隔
    if "#" in pid or pid != pid.strip():
        raise MalformedRecord(path, line_no, f"pid 不能包含 '#' 或首尾空白: {pid!r}")
    return pid


def _load_pages(pid: str, path: Path) -> Tuple[Page, ...]:
    if not path.is_file():
        raise MalformedRecord(path, None, f"文档 {pid} 的页面文件不存在")

    pages: List[Page] = []
    for line_no, record in read_jsonl(path):
        extra = set(record) - PAGE_FIELDS
        if extra:
            raise MalformedRecord(path, line_no, f"未知字段 {sorted(extra)}")
        page_no = record.get("page_no")
        if not isinstance(page_no, int) or isinstance(page_no, bool) or page_no < 1:
            raise MalformedRecord(path, line_no, f"page_no 必须是正整数: {page_no!r}")
        ocr_text = record.get("ocr_text") or ""
        image_ref = record.get("image_ref")
        if not isinstance(ocr_text, str) or (image_ref is not None and not isinstance(image_ref, str)):
            raise MalformedRecord(path, line_no, "ocr_text / image_ref 必须是字符串")
        page = Page(page_no=page_no, ocr_text=nfc(ocr_text), image_ref=image_ref or None)
        if page.is_empty():
            raise EmptyPage(pid, page_no, path, line_no)
        expected = len(pages) + 1
        if page_no != expected:
            raise MalformedRecord(path, line_no, f"页码必须从 1 开始连续递增: 期望 {expected}, 实际 {page_no}")
        pages.append(page)

    if not pages:
        raise MalformedRecord(path, None, f"文档 {pid} 没有任何页面")
    return tuple(pages)


def load_corpus(root_path) -> CorpusStore:
    """
    加载并校验语料库

    Args:
        root_path: 语料库根目录

    Returns:
        校验通过的 CorpusStore，文档顺序与 manifest 一致
    """
    root = Path(root_path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingManifest(manifest_path)

    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedRecord(manifest_path, None, f"manifest 无法解析: {e}")
    if not isinstance(raw, dict) or not isinstance(raw.get("documents"), list):
        raise MalformedRecord(manifest_path, None, "manifest 必须包含 documents 列表")

    docs: Dict[str, Document] = {}
    for idx, entry in enumerate(raw["documents"], 1):
        if not isinstance(entry, dict):
            raise MalformedRecord(manifest_path, None, f"documents[{idx}] 必须是对象")
        pid = _check_pid(entry.get("pid"), manifest_path)
        if pid in docs:
            raise DuplicatePid(pid, manifest_path)
        category = _parse_category(entry.get("category"), f"{manifest_path} pid={pid}")
        file_name = entry.get("file") or f"documents/{pid}.jsonl"
        pages = _load_pages(pid, root / file_name)
        docs[pid] = Document(pid=pid, category=category, pages=pages)

    actual = _count_categories(docs)
    declared = {k: v for k, v in (raw.get("category_counts") or {}).items() if v}
    if declared != actual:
        raise ManifestMismatch(declared, actual)

    schema_version = raw.get("schema_version", SCHEMA_VERSION)
    if schema_version != SCHEMA_VERSION:
        raise MalformedRecord(manifest_path, None, f"不支持的 schema_version: {schema_version}")

    store = CorpusStore(documents=docs, manifest=Manifest(schema_version=schema_version, category_counts=actual))
    logger.info(f"✓ 语料加载完成: {len(docs)} 个文档, {store.page_count} 页, 分类 {actual}")
    return store


def save_corpus(store: CorpusStore, root_path) -> None:
    """把语料写成规范格式，load_corpus(save_corpus(x)) == x"""
    root = Path(root_path)
    entries = []
    for pid, doc in store.documents.items():
        rel = f"documents/{pid}.jsonl"
        records = []
        for page in doc.pages:
            record = {"page_no": page.page_no, "ocr_text": page.ocr_text}
            if page.image_ref is not None:
                record["image_ref"] = page.image_ref
            records.append(record)
        write_jsonl(root / rel, records)
        entries.append({"pid": pid, "category": doc.category.value, "file": rel})

    manifest = {
        "schema_version": store.manifest.schema_version,
        "category_counts": store.manifest.category_counts,
        "documents": entries,
    }
    atomic_write_text(root / MANIFEST_NAME, json.dumps(manifest, ensure_ascii=False, indent=2) + "\n")


def build_corpus_from_raw(raw_root, out_root) -> CorpusStore:
    """
    从原始目录构建语料库：raw/<category>/<pid>/<page_no>.txt|.png|.jpg

    预先抽取好的文本和页面图片都接受；图片复制到语料库 images/ 下。

    Args:
        raw_root: 原始目录
        out_root: 输出语料库目录

    Returns:
        写盘后的 CorpusStore
    """
    raw_root, out_root = Path(raw_root), Path(out_root)
    documents: List[Document] = []
    seen = set()

    for cat_dir in sorted(p for p in raw_root.iterdir() if p.is_dir()):
        category = _parse_category(cat_dir.name, str(cat_dir))
        for doc_dir in sorted(p for p in cat_dir.iterdir() if p.is_dir()):
            pid = _check_pid(doc_dir.name, doc_dir)
            if pid in seen:
                raise DuplicatePid(pid, doc_dir)
            seen.add(pid)

            texts: Dict[int, str] = {}
            images: Dict[int, Path] = {}
            for f in sorted(doc_dir.iterdir()):
                suffix = f.suffix.lower()
                if suffix not in TEXT_SUFFIXES | IMAGE_SUFFIXES:
                    logger.warning(f"⚠ 跳过无法识别的文件: {f}")
                    continue
                if not f.stem.isdigit():
                    raise MalformedRecord(f, None, "页面文件名必须是页码数字")
                page_no = int(f.stem)
                if suffix in TEXT_SUFFIXES:
                    try:
                        texts[page_no] = nfc(f.read_bytes().decode("utf-8"))
                    except UnicodeDecodeError:
                        raise MalformedRecord(f, None, "文本文件不是合法 UTF-8")
                else:
                    images[page_no] = f

            page_numbers = sorted(set(texts) | set(images))
            if page_numbers != list(range(1, len(page_numbers) + 1)):
                raise MalformedRecord(doc_dir, None, f"页码必须从 1 开始连续: {page_numbers}")

            pages = []
            for page_no in page_numbers:
                image_ref = None
                if page_no in images:
                    src = images[page_no]
                    image_ref = f"images/{pid}/{page_no}{src.suffix.lower()}"
                    dst = out_root / image_ref
                    dst.parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(src, dst)
                page = Page(page_no=page_no, ocr_text=texts.get(page_no, ""), image_ref=image_ref)
                if page.is_empty():
                    raise EmptyPage(pid, page_no, doc_dir)
                pages.append(page)
            documents.append(Document(pid=pid, category=category, pages=tuple(pages)))

    store = CorpusStore.from_documents(documents)
    save_corpus(store, out_root)
    logger.info(f"✓ 已从 {raw_root} 构建语料库: {len(documents)} 个文档 -> {out_root}")
    return store


def run_external_ocr(page: Page, engine_cmd: str, *, pid: str = "", image_root=None,
                     force: bool = False, timeout: float = 300) -> Page:
    """
    调用外部 OCR 引擎识别单页图片

    engine_cmd 是带 {input}/{output} 占位符的命令模板，例如
    "tesseract {input} {output} -l chi_tra" 需要包一层 sh -c 让 tesseract 写到 {output}。
    命令按 shlex 拆分后逐参数替换，不经过 shell；环境变量原样传递。

    Args:
        page: 待识别页面
        engine_cmd: 命令模板
        pid: 文档 id（报错定位用）
        image_root: image_ref 的相对根目录
        force: 已有文本的页面是否重新识别

    Returns:
        ocr_text 被替换的新 Page
    """
    if page.image_ref is None:
        raise NoImage(pid, page.page_no)
    if page.ocr_text.strip() and not force:
        logger.debug(f"已有文本，跳过 OCR: pid={pid} page={page.page_no}")
        return page

    image_path = Path(page.image_ref)
    if not image_path.is_absolute() and image_root is not None:
        image_path = Path(image_root) / image_path

    with tempfile.TemporaryDirectory(prefix="docprep-ocr-") as tmp:
        output_path = Path(tmp) / "ocr_output.txt"
        args = [
            part.replace("{input}", str(image_path)).replace("{output}", str(output_path))
            for part in shlex.split(engine_cmd)
        ]
        try:
            proc = subprocess.run(args, capture_output=True, env=os.environ.copy(), timeout=timeout)
        except subprocess.TimeoutExpired:
            raise OcrEngineFailed(-1, f"超时 ({timeout}s): {args[0]}")
        except OSError as err:
            raise OcrEngineFailed(-1, f"无法启动 OCR 引擎: {err}")
        if proc.returncode != 0:
            raise OcrEngineFailed(proc.returncode, proc.stderr.decode("utf-8", errors="replace"))
        if not output_path.is_file():
            raise OcrOutputMissing(output_path)
        try:
            text = output_path.read_bytes().decode("utf-8")
        except UnicodeDecodeError:
            raise OcrOutputNotUtf8(output_path)

    text = text.rstrip()
    text = nfc(text + "\n") if text else ""
    return page.model_copy(update={"ocr_text": text})


def ocr_corpus(store: CorpusStore, engine_cmd: str, image_root=None, workers: int = 4,
               force: bool = False, progress: bool = True) -> CorpusStore:
    """对语料库所有带图片的页面并行执行 OCR，返回新的 CorpusStore"""
    jobs = [(pid, page) for pid, page in store.iter_pages() if page.image_ref is not None]
    logger.info(f"OCR 任务: {len(jobs)} 页 (workers={workers}, force={force})")

    def _one(job):
        pid, page = job
        return pid, run_external_ocr(page, engine_cmd, pid=pid, image_root=image_root, force=force)

    updated: Dict[Tuple[str, int], Page] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(_one, jobs)
        for pid, page in tqdm(results, total=len(jobs), desc="OCR", unit="页",
                              disable=not progress_enabled(progress)):
            updated[(pid, page.page_no)] = page

    documents = []
    for pid, doc in store.documents.items():
        pages = tuple(updated.get((pid, p.page_no), p) for p in doc.pages)
        documents.append(doc.model_copy(update={"pages": pages}))
    return CorpusStore.from_documents(documents)


def load_questions(path, strict: bool = False) -> List[Query]:
    """
    加载问题集

    Args:
        path: JSONL 问题文件
        strict: 严格模式下未知字段报错，否则只告警

    Returns:
        按文件顺序排列的 Query 列表
    """
    path = Path(path)
    queries: List[Query] = []
    seen = set()

    for line_no, record in read_jsonl(path):
        locus = f"{path}:{line_no}"
        extra = set(record) - QUERY_FIELDS
        if extra:
            if strict:
                raise UnknownField(extra, locus)
            logger.warning(f"⚠ 忽略未知字段 {sorted(extra)} ({locus})")

        qid = record.get("qid")
        if isinstance(qid, int) and not isinstance(qid, bool):
            qid = str(qid)
        if not isinstance(qid, str) or not qid:
            raise MalformedRecord(path, line_no, "qid 必须是非空字符串")
        if qid in seen:
            raise DuplicateQid(qid)
        seen.add(qid)

        source = record.get("source")
        ground_truth = record.get("ground_truth")
        for name, value in (("source", source), ("ground_truth", ground_truth)):
            if not isinstance(value, list) or not value or not all(isinstance(v, str) for v in value):
                raise MalformedRecord(path, line_no, f"{name} 必须是非空字符串列表")
        if not set(ground_truth) <= set(source):
            raise GroundTruthNotCandidate(qid)

        category = _parse_category(record.get("category"), locus)
        if not isinstance(record.get("query"), str):
            raise MalformedRecord(path, line_no, "query 必须是字符串")

        try:
            queries.append(Query(
                qid=qid,
                query=nfc(record["query"]),
                source=tuple(source),
                ground_truth=tuple(ground_truth),
                category=category,
                origin=record.get("origin"),
            ))
        except ValidationError as e:
            raise MalformedRecord(path, line_no, str(e.errors()[0].get("msg", e)))

    logger.info(f"✓ 问题集加载完成: {len(queries)} 条 ({path})")
    return queries


def query_to_record(query: Query) -> dict:
    record = {
        "qid": query.qid,
        "query": query.query,
        "source": list(query.source),
        "ground_truth": list(query.ground_truth),
        "category": query.category.value,
    }
    if query.origin is not None:
        record["origin"] = {"parent_qid": query.origin.parent_qid, "strategy": query.origin.strategy}
    return record


def save_questions(queries: List[Query], path) -> None:
    write_jsonl(Path(path), (query_to_record(q) for q in queries))
