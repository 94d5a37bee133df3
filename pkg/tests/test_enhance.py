import itertools

import pytest

from docprep.cache import ReplayCache
from docprep.enhance import (
    BASELINE, OCR_BEGIN, PRESETS, EnhanceConfig, Provenance, SeedResponse, build_prompt, cache_key_for,
    clean_response, echo_ocr_responder, enhance_corpus, enhance_page, load_enhanced, resolve_preset,
    save_enhanced, seed_replay_cache, trim_repetition,
)
from docprep.errors import CacheMiss, DataValidationError, EmptyEnhancement, EnhancementFailed
from docprep.ingest import Category, CorpusStore, Document
from docprep.providers import MockProviderClient, OfflineProviderClient
from tests.conftest import make_page, make_store

PNG = b"\x89PNG\r\n\x1a\nfake-image"


@pytest.fixture
def image_page(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "images" / "1.png").write_bytes(PNG)
    return make_page(ocr_text="營業收入 1,2O4,331", image_ref="images/1.png")


class TestPresets:
    def test_resolve(self):
        assert resolve_preset(BASELINE) is None
        assert resolve_preset("no_vision") == EnhanceConfig(use_vision=False)
        assert resolve_preset("FULL", model_id="other").model_id == "other"
        with pytest.raises(ValueError):
            resolve_preset("NO_EVERYTHING")

    def test_at_least_one_modality(self):
        with pytest.raises(ValueError):
            EnhanceConfig(use_vision=False, use_ocr_text=False)

    def test_fingerprints_distinct(self):
        prints = {config.fingerprint() for config in PRESETS.values()}
        assert len(prints) == 4


class TestBuildPrompt:
    def test_four_presets_give_distinct_prompts(self, image_page, tmp_path):
        prompts = {name: build_prompt(image_page, image_page.ocr_text, config, tmp_path)
                   for name, config in PRESETS.items()}
        for a, b in itertools.combinations(prompts.values(), 2):
            assert (a.user_text, a.image_bytes()) != (b.user_text, b.image_bytes())

    def test_section_presence_follows_flags(self, image_page, tmp_path):
        sections = {name: build_prompt(image_page, image_page.ocr_text, config, tmp_path).sections
                    for name, config in PRESETS.items()}
        assert sections["FULL"] == ("preamble", "correction", "layout", "rewrite", "ocr_block", "output_format")
        assert "layout" not in sections["NO_VISION"]
        assert "ocr_block" not in sections["NO_OCR_TEXT"]
        assert "layout" in sections["NO_OCR_TEXT"]
        assert "rewrite" not in sections["NO_REWRITE"]
        for names in sections.values():
            assert names[:2] == ("preamble", "correction")
            assert names[-1] == "output_format"

    def test_image_attached_only_with_vision(self, image_page, tmp_path):
        assert build_prompt(image_page, image_page.ocr_text, PRESETS["FULL"], tmp_path).image.data == PNG
        assert build_prompt(image_page, image_page.ocr_text, PRESETS["NO_VISION"], tmp_path).image is None

    def test_ocr_text_embedded_verbatim(self, image_page, tmp_path):
        request = build_prompt(image_page, image_page.ocr_text, PRESETS["FULL"], tmp_path)
        assert f"{OCR_BEGIN}\n營業收入 1,2O4,331\n" in request.user_text
        no_ocr = build_prompt(image_page, image_page.ocr_text, PRESETS["NO_OCR_TEXT"], tmp_path)
        assert "1,2O4,331" not in no_ocr.user_text

    def test_deterministic(self, image_page, tmp_path):
        a = build_prompt(image_page, image_page.ocr_text, PRESETS["FULL"], tmp_path)
        b = build_prompt(image_page, image_page.ocr_text, PRESETS["FULL"], tmp_path)
        assert a.prompt_bytes() == b.prompt_bytes()

    def test_no_image_falls_back_to_text(self):
        page = make_page(ocr_text="文字頁")
        request = build_prompt(page, page.ocr_text, PRESETS["NO_OCR_TEXT"])
        assert "ocr_block" in request.sections
        assert request.image is None

    def test_missing_image_file(self, tmp_path):
        page = make_page(image_ref="images/none.png")
        with pytest.raises(DataValidationError):
            build_prompt(page, page.ocr_text, PRESETS["FULL"], tmp_path)


class TestCleanResponse:
    def test_strips_fence(self):
        assert clean_response("```text\n校正後內容\n```") == "校正後內容"

    def test_strips_wrapper_tag(self):
        assert clean_response("好的<enhanced_text>\n正文\n</enhanced_text>") == "正文"

    def test_drops_preamble_line(self):
        assert clean_response("以下是處理後的內容：\n營業收入：100") == "營業收入：100"

    def test_plain_text_untouched(self):
        assert clean_response("  營業收入：100\n稅後淨利：20 ") == "營業收入：100\n稅後淨利：20"

    def test_trims_runaway_repetition(self):
        loop = "營業收入為一百萬元，" * 40
        text = "開頭說明。" + loop
        assert trim_repetition(text, window_size=20) == "開頭說明。營業收入為一百萬元，"

    def test_short_text_not_trimmed(self):
        assert trim_repetition("哈哈哈", window_size=20) == "哈哈哈"


class TestEnhancePage:
    def test_provider_then_cache(self, tmp_path):
        page = make_page(ocr_text="稅後浄利 8O")
        cache = ReplayCache(tmp_path / "cache")
        client = MockProviderClient(lambda r: "```\n稅後淨利 80\n```")

        first = enhance_page(page, PRESETS["NO_VISION"], client, cache, pid="A")
        assert first.text == "稅後淨利 80"
        assert first.provenance == Provenance.PROVIDER

        second = enhance_page(page, PRESETS["NO_VISION"], client, cache, pid="A")
        assert second.provenance == Provenance.CACHE
        assert second.text == first.text
        assert client.calls == 1

    def test_replay_miss(self, tmp_path):
        client = OfflineProviderClient()
        with pytest.raises(CacheMiss):
            enhance_page(make_page(), PRESETS["FULL"], client, ReplayCache(tmp_path, replay_only=True), pid="A")
        assert client.attempts == 0

    def test_empty_response(self, tmp_path):
        client = MockProviderClient(lambda r: "```\n```")
        with pytest.raises(EmptyEnhancement):
            enhance_page(make_page(), PRESETS["FULL"], client, ReplayCache(tmp_path), pid="A")

    def test_vision_degraded_note(self, tmp_path):
        client = MockProviderClient(echo_ocr_responder)
        enhanced = enhance_page(make_page(ocr_text="純文字"), PRESETS["FULL"], client, ReplayCache(tmp_path), pid="A")
        assert enhanced.note == "vision_degraded"
        assert enhanced.text == "純文字"


class TestEnhanceCorpus:
    def test_baseline_passthrough(self, tmp_path):
        store = make_store({"B": ["二"], "A": ["一", "三"]})
        client = MockProviderClient(echo_ocr_responder)
        pages = enhance_corpus(store, None, client, ReplayCache(tmp_path), progress=False)
        assert list(pages) == [("A", 1), ("A", 2), ("B", 1)]
        assert all(p.provenance == Provenance.PASSTHROUGH for p in pages.values())
        assert pages[("A", 2)].text == "三"
        assert client.calls == 0

    def test_rerun_hits_cache(self, tmp_path):
        store = make_store({"A": ["一", "二"], "B": ["三"]})
        cache = ReplayCache(tmp_path)
        client = MockProviderClient(lambda r: "改寫：" + echo_ocr_responder(r))
        first = enhance_corpus(store, PRESETS["NO_VISION"], client, cache, workers=2, progress=False)
        second = enhance_corpus(store, PRESETS["NO_VISION"], client, cache, workers=2, progress=False)
        assert client.calls == 3
        assert {k: v.text for k, v in first.items()} == {k: v.text for k, v in second.items()}

    def test_primed_page_skips_provider(self, tmp_path):
        (tmp_path / "images").mkdir()
        pages = []
        for page_no, text in enumerate(["第一頁", "第二頁", "第三頁"], 1):
            (tmp_path / "images" / f"{page_no}.png").write_bytes(PNG + bytes([page_no]))
            pages.append(make_page(page_no, text, image_ref=f"images/{page_no}.png"))
        store = CorpusStore.from_documents([Document(pid="A", category=Category.FINANCE, pages=tuple(pages))])

        config = PRESETS["FULL"]
        cache = ReplayCache(tmp_path / "cache")
        cache.put(cache_key_for(build_prompt(pages[1], pages[1].ocr_text, config, tmp_path), config), "預存結果")

        client = MockProviderClient(echo_ocr_responder)
        result = enhance_corpus(store, config, client, cache, image_root=tmp_path, workers=2, progress=False)
        assert client.calls == 2
        assert cache.hits == 1
        assert result[("A", 2)].text == "預存結果"
        assert result[("A", 2)].provenance == Provenance.CACHE
        assert {result[("A", n)].provenance for n in (1, 3)} == {Provenance.PROVIDER}

    def test_failures_collected(self, tmp_path):
        store = make_store({"A": ["ok", "bad"], "B": ["bad"]})
        client = MockProviderClient(lambda r: "" if "bad" in r.user_text else "fine")
        with pytest.raises(EnhancementFailed) as exc:
            enhance_corpus(store, PRESETS["NO_VISION"], client, ReplayCache(tmp_path), progress=False)
        assert [(pid, page_no) for pid, page_no, _ in exc.value.failures] == [("A", 2), ("B", 1)]

    def test_save_load(self, tmp_path):
        store = make_store({"A": ["一"]})
        pages = enhance_corpus(store, None, None, ReplayCache(tmp_path), progress=False)
        save_enhanced(pages, tmp_path / "enhanced.jsonl")
        assert load_enhanced(tmp_path / "enhanced.jsonl") == pages


class TestSeedReplayCache:
    def test_seeded_cache_replays_offline(self, tmp_path):
        store = make_store({"A": ["稅後浄利"]})
        cache = ReplayCache(tmp_path, replay_only=True)
        seeds = [SeedResponse(pid="A", page_no=1, presets=("FULL", "NO_REWRITE"), text="稅後淨利")]
        assert seed_replay_cache(store, dict(PRESETS), seeds, cache) == 2

        pages = enhance_corpus(store, PRESETS["FULL"], OfflineProviderClient(), cache, progress=False)
        assert pages[("A", 1)].text == "稅後淨利"
        assert pages[("A", 1)].provenance == Provenance.CACHE

    def test_existing_entries_kept(self, tmp_path):
        store = make_store({"A": ["x"]})
        cache = ReplayCache(tmp_path)
        seeds = [SeedResponse(pid="A", page_no=1, presets=("FULL",), text="first")]
        seed_replay_cache(store, dict(PRESETS), seeds, cache)
        again = [SeedResponse(pid="A", page_no=1, presets=("FULL",), text="second")]
        assert seed_replay_cache(store, dict(PRESETS), again, cache) == 0
        request = build_prompt(store.documents["A"].pages[0], "x", PRESETS["FULL"])
        assert cache.get(cache_key_for(request, PRESETS["FULL"])) == "first"

    def test_unknown_page_skipped(self, tmp_path):
        store = make_store({"A": ["x"]})
        seeds = [SeedResponse(pid="Z", page_no=1, presets=("FULL",), text="t")]
        assert seed_replay_cache(store, dict(PRESETS), seeds, ReplayCache(tmp_path)) == 0
