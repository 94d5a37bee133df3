import random

import pytest

from docprep.chunk import (
    DEFAULT_COUNTER, ChunkParams, chunk_corpus, chunk_page, load_chunks, make_chunk_id, reconstruct_text,
    save_chunks,
)
from docprep.errors import InvalidChunkParams, MalformedRecord

ALPHABET = ["營", "業", "收", "入", "，", "。", " ", "\n", "\n\n", "abc", "2023", "A1", "：", "  "]


def random_text(rng: random.Random, n: int) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(n))


def token_windows(bodies):
    return [(b.token_start, b.token_end) for b in bodies]


class TestTokenCounter:
    def test_cjk_chars_and_words(self):
        text = "營收 Revenue 2023年，"
        spans = DEFAULT_COUNTER.spans(text)
        assert [text[a:b] for a, b in spans] == ["營", "收", "Revenue", "2023", "年", "，"]

    def test_prefix_monotone(self):
        text = "營業收入 abc 123。"
        full = DEFAULT_COUNTER.spans(text)
        for cut in (4, 5, 8, 9, 12):
            prefix = DEFAULT_COUNTER.spans(text[:cut])
            assert prefix == full[:len(prefix)]


class TestChunkPage:
    def test_reference_parameters_on_long_page(self):
        text = "字" * 16000
        bodies = chunk_page(text, 8000, 500)
        assert token_windows(bodies) == [(0, 8000), (7500, 15500), (15000, 16000)]

    def test_short_page_single_chunk(self):
        bodies = chunk_page("營業收入\n稅後淨利", 100, 10)
        assert len(bodies) == 1
        assert bodies[0].text == "營業收入\n稅後淨利"

    def test_empty_page(self):
        assert chunk_page("   \n ", 10, 2) == []

    @pytest.mark.parametrize("size,overlap", [(0, 0), (5, 5), (5, -1), (5, 9)])
    def test_invalid_params(self, size, overlap):
        with pytest.raises(InvalidChunkParams):
            chunk_page("abc", size, overlap)

    def test_prefers_paragraph_break(self):
        text = "一二三四五六\n\n七八九十"
        bodies = chunk_page(text, 8, 1)
        assert bodies[0].text == "一二三四五六\n\n"
        assert bodies[1].token_start == 5

    def test_without_boundaries_uses_plain_stride(self):
        text = "一二三四五六\n\n七八九十"
        bodies = chunk_page(text, 8, 1, respect_boundaries=False)
        assert token_windows(bodies) == [(0, 8), (7, 10)]

    def test_random_coverage_overlap_reconstruction(self):
        rng = random.Random(20240601)
        for _ in range(500):
            text = random_text(rng, rng.randint(0, 120))
            size = rng.randint(1, 40)
            overlap = rng.randint(0, size - 1)
            respect = rng.random() < 0.5
            bodies = chunk_page(text, size, overlap, respect_boundaries=respect)
            total = len(DEFAULT_COUNTER.spans(text))
            if total == 0:
                assert bodies == []
                continue

            assert bodies[0].token_start == 0
            assert bodies[-1].token_end == total
            for body in bodies:
                assert 0 < body.token_end - body.token_start <= size
                assert text[body.char_start:body.char_end] == body.text
            for prev, cur in zip(bodies, bodies[1:]):
                assert cur.token_start == prev.token_end - overlap
                assert cur.token_end > prev.token_end
            if not respect:
                for body in bodies[:-1]:
                    assert body.token_end - body.token_start == size
            assert reconstruct_text(bodies) == text


class TestChunkCorpus:
    def test_ids_and_order(self):
        enhanced = {("B", 1): "乙", ("A", 2): "甲二", ("A", 1): "甲一"}
        chunks = chunk_corpus(enhanced, ChunkParams(chunk_size=1, overlap=0))
        assert [c.chunk_id for c in chunks] == [
            "A#p0001-0001#000", "A#p0001-0001#001",
            "A#p0002-0002#000", "A#p0002-0002#001",
            "B#p0001-0001#000",
        ]
        assert chunks[1].text == "一"

    def test_chunks_never_span_pages(self):
        chunks = chunk_corpus({("A", 1): "一二三", ("A", 2): "四五六"}, ChunkParams(chunk_size=100, overlap=10))
        assert [(c.page_start, c.page_end, c.text) for c in chunks] == [(1, 1, "一二三"), (2, 2, "四五六")]

    def test_chunk_id_format(self):
        assert make_chunk_id("F001", 3, 3, 12) == "F001#p0003-0003#012"

    def test_save_load(self, tmp_path):
        params = ChunkParams(chunk_size=2, overlap=1)
        chunks = chunk_corpus({("A", 1): "營業收入"}, params)
        save_chunks(chunks, tmp_path / "chunks.jsonl", params)
        loaded, header = load_chunks(tmp_path / "chunks.jsonl")
        assert loaded == chunks
        assert header["chunk_size"] == 2 and header["counter"] == DEFAULT_COUNTER.name

    def test_counter_mismatch_rejected(self, tmp_path):
        path = tmp_path / "chunks.jsonl"
        path.write_text('{"kind": "header", "counter": "tiktoken", "counter_version": "1"}\n', encoding="utf-8")
        with pytest.raises(MalformedRecord):
            load_chunks(path)
