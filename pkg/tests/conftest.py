from pathlib import Path
from typing import Dict, Optional, Sequence

import pytest

from docprep.chunk import Chunk
from docprep.ingest import Category, CorpusStore, Document, Page, Query

FIXTURE_ROOT = Path(__file__).resolve().parent.parent / "fixtures" / "demo"


# -----------------------------------------------------------------------
# Helpers
# -----------------------------------------------------------------------


def make_page(page_no: int = 1, ocr_text: str = "營業收入 1,204,331", image_ref: Optional[str] = None) -> Page:
    return Page(page_no=page_no, ocr_text=ocr_text, image_ref=image_ref)


def make_store(texts: Dict[str, Sequence[str]], category: Category = Category.FINANCE) -> CorpusStore:
    """pid -> 每页文本"""
    documents = [
        Document(pid=pid, category=category,
                 pages=tuple(make_page(i, text) for i, text in enumerate(pages, 1)))
        for pid, pages in texts.items()
    ]
    return CorpusStore.from_documents(documents)


def make_query(qid: str = "q1", query: str = "營業收入", source: Sequence[str] = ("A", "B"),
               ground_truth: Sequence[str] = ("A",), category: Category = Category.FINANCE,
               origin: Optional[dict] = None) -> Query:
    return Query(qid=qid, query=query, source=tuple(source), ground_truth=tuple(ground_truth),
                 category=category, origin=origin)


def make_chunk(chunk_id: str, text: str, pid: Optional[str] = None) -> Chunk:
    return Chunk(chunk_id=chunk_id, pid=pid or chunk_id.split("#")[0], page_start=1, page_end=1,
                 token_start=0, token_end=len(text), char_start=0, char_end=len(text), text=text)


# -----------------------------------------------------------------------
# Fixtures
# -----------------------------------------------------------------------


@pytest.fixture
def fixture_root() -> Path:
    return FIXTURE_ROOT


@pytest.fixture
def no_network(monkeypatch):
    """任何 HTTP 调用都直接失败，并记录调用次数"""
    calls = []

    def _fail(*args, **kwargs):
        calls.append((args, kwargs))
        raise AssertionError("测试中不允许网络访问")

    monkeypatch.setattr("requests.post", _fail)
    monkeypatch.setattr("requests.get", _fail)
    return calls


@pytest.fixture(autouse=True)
def _isolated_cache_env(monkeypatch):
    monkeypatch.delenv("DOCPREP_CACHE_DIR", raising=False)
