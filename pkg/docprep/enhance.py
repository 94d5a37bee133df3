"""
多模态模型 OCR 后处理

按页组装提示词（错误校正 + 版面重建 + 检索导向改写），附带页面图片调用模型，
结果按消融配置存储，并通过内容寻址缓存支持离线确定性回放。
"""
import hashlib
import json
import logging
import mimetypes
import re
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from .cache import ReplayCache, make_cache_key
from .errors import (
    CacheMiss, DataValidationError, DocprepError, EmptyEnhancement, EnhancementFailed,
    MalformedRecord,
)
from .ingest import CorpusStore, Page
from .providers import PromptImage, PromptRequest, ProviderClient
from .utils import nfc, progress_enabled, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

BASELINE = "BASELINE"
BASELINE_FINGERPRINT = "baseline"
DEFAULT_MODEL_ID = "qwen2.5-vl-7b-instruct"
DEFAULT_PROMPT_VERSION = "v1"

OCR_BEGIN = "<<<OCR_TEXT"
OCR_END = "OCR_TEXT>>>"


class EnhanceConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    use_vision: bool = True
    use_ocr_text: bool = True
    use_rewrite: bool = True
    model_id: str = DEFAULT_MODEL_ID
    max_retries: int = Field(default=3, ge=1, le=10)
    prompt_version: str = DEFAULT_PROMPT_VERSION

    @model_validator(mode="after")
    def _check_modality(self):
        if not (self.use_vision or self.use_ocr_text):
            raise ValueError("use_vision 与 use_ocr_text 至少开启一个")
        return self

    def fingerprint(self) -> str:
        payload = json.dumps(self.model_dump(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# 四个消融配置；BASELINE 不经过本模块
PRESET_FLAGS = {
    "FULL": (True, True, True),
    "NO_VISION": (False, True, True),
    "NO_OCR_TEXT": (True, False, True),
    "NO_REWRITE": (True, True, False),
}
PRESET_NAMES = [BASELINE] + list(PRESET_FLAGS)
PRESETS = {
    name: EnhanceConfig(use_vision=v, use_ocr_text=o, use_rewrite=r)
    for name, (v, o, r) in PRESET_FLAGS.items()
}


def resolve_preset(name: str, **overrides) -> Optional[EnhanceConfig]:
    """
    按名称取消融配置

    Returns:
        EnhanceConfig；BASELINE 返回 None
    """
    key = name.upper()
    if key == BASELINE:
        return None
    if key not in PRESETS:
        raise ValueError(f"未知的增强配置: {name}（可选: {', '.join(PRESET_NAMES)}）")
    if overrides:
        return EnhanceConfig(**{**PRESETS[key].model_dump(), **overrides})
    return PRESETS[key]


class Provenance(str, Enum):
    PROVIDER = "provider"
    CACHE = "cache"
    PASSTHROUGH = "passthrough"


class EnhancedPage(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pid: str
    page_no: int
    config_fingerprint: str
    text: str
    provenance: Provenance
    note: Optional[str] = None


# ===== 提示词 =====

SYSTEM_TEXT = (
    "你是一位專精繁體中文非敘述性文件（財務報表、保險條款、契約）的 OCR 後處理編輯。"
    "你的輸出會直接進入檢索系統的索引，因此只能輸出處理後的正文。"
)

SECTION_TEXTS = {
    "preamble": """Role / 角色
你負責把單一 PDF 頁面的 OCR 結果整理成可供檢索使用的高品質文字。

Task / 任務
請依照下列各項指示處理本頁內容。""",

    "correction": """【錯誤校正】
- 修正 OCR 常見的字元誤判，例如數字 0 被辨識成英文字母 O、數字 1 被辨識成小寫 l、形近字錯置
- 修正錯誤的數值、千分位與小數點，以及錯置或遺漏的標點
- 保持原有語意，不得增刪事實、不得改動任何數據""",

    "layout": """【版面重建】
- 參照附上的頁面圖片判讀原始版面：標題層級、段落、欄位對齊與表格
- 依圖片逐列還原表格，每一列寫成「欄位名稱：數值」的形式，保留表頭、單位與期間
- 以圖片內容為準補回 OCR 遺漏的文字""",

    "rewrite": """【檢索導向改寫】
- 稀疏檢索（關鍵詞比對）：保留所有原始關鍵詞，並在其後補充常見同義詞或全稱／簡稱
  例：「本期營收成長」→「本期營收（營業收入、銷貨收入）成長」
- 稠密檢索（語意向量）：把表格中的每一筆資料改寫成完整的自然語句，交代主體、期間、項目與數值
  例：表格列「2023 | 研發費用 | 5,200 萬元」→「該公司 2023 年度的研發費用為新台幣 5,200 萬元。」
- 改寫後的敘述放在對應的原始內容之後，不要刪除原始內容""",

    "output_format": """【輸出要求】
- 只輸出處理後的純文字，不要加標題、說明、前言或結語
- 不要使用 Markdown 程式碼區塊，不要說明你做了哪些修改""",
}


def ocr_block(ocr_text: str) -> str:
    return f"【OCR 原文】\n{OCR_BEGIN}\n{ocr_text.strip()}\n{OCR_END}"


def load_page_image(page: Page, image_root=None) -> Optional[PromptImage]:
    if page.image_ref is None:
        return None
    path = Path(page.image_ref)
    if not path.is_absolute() and image_root is not None:
        path = Path(image_root) / path
    if not path.is_file():
        raise DataValidationError(f"页面图片不存在: {path}")
    media_type = mimetypes.guess_type(path.name)[0] or "image/png"
    return PromptImage(data=path.read_bytes(), media_type=media_type)


def build_prompt(page: Page, ocr_text: str, config: EnhanceConfig, image_root=None) -> PromptRequest:
    """
    组装后处理提示词（纯函数：相同输入得到逐字节相同的提示词）

    段落固定顺序: preamble, correction, layout, rewrite, ocr_block, output_format
    - layout 与图片只在启用视觉且页面有图片时出现
    - rewrite 只在 use_rewrite 时出现
    - ocr_block 在 use_ocr_text 时出现；视觉不可用时退化为纯文本输入，也会出现

    Args:
        page: 页面
        ocr_text: 该页 OCR 文本
        config: 增强配置
        image_root: image_ref 的相对根目录

    Returns:
        PromptRequest
    """
    image = load_page_image(page, image_root) if config.use_vision else None
    include_ocr = config.use_ocr_text or image is None

    sections: List[str] = ["preamble", "correction"]
    if image is not None:
        sections.append("layout")
    if config.use_rewrite:
        sections.append("rewrite")
    if include_ocr:
        sections.append("ocr_block")
    sections.append("output_format")

    parts = [ocr_block(ocr_text) if name == "ocr_block" else SECTION_TEXTS[name] for name in sections]
    return PromptRequest(
        system_text=SYSTEM_TEXT,
        user_text="\n\n".join(parts),
        image=image,
        sections=tuple(sections),
    )


def cache_key_for(request: PromptRequest, config: EnhanceConfig) -> str:
    return make_cache_key(request.prompt_bytes(), request.image_bytes(), config.model_id, config.prompt_version)


def echo_ocr_responder(request: PromptRequest) -> str:
    """mock 模式的响应：原样返回提示词中的 OCR 原文"""
    text = request.user_text
    start = text.find(OCR_BEGIN)
    end = text.find(OCR_END)
    if start < 0 or end < 0:
        return "（模擬輸出：本頁僅提供影像）"
    return text[start + len(OCR_BEGIN):end].strip() or "（模擬輸出：空白頁）"


# ===== 响应清理 =====

_WRAPPER_TAG = re.compile(r"<enhanced_text>(.*?)</enhanced_text>", re.S)
_FENCE = re.compile(r"^```[^\n]*\n(.*?)\n?```$", re.S)
_PREAMBLE_LINE = re.compile(r"^(以下是|以下為|以下为|Here is|Here's)[^\n]{0,40}[:：]\s*\n")


def detect_repetition(text: str, window_size: int = 100) -> int:
    """
    检测文本末尾是否陷入重复循环

    Returns:
        重复周期长度，没有重复返回 0
    """
    if len(text) < window_size * 2:
        return 0
    tail = text[-window_size:]
    # 离末尾最近的一次出现给出最小周期
    pos = text.rfind(tail, 0, len(text) - 1)
    if pos < 0:
        return 0
    return len(text) - window_size - pos


def trim_repetition(text: str, window_size: int = 100) -> str:
    """截掉末尾失控的重复段落，只保留一份"""
    period = detect_repetition(text, window_size)
    if not period:
        return text
    while len(text) >= 2 * period and text[-period:] == text[-2 * period:-period]:
        text = text[:-period]
    return text


def clean_response(text: str) -> str:
    """
    去掉模型输出外层的包装（代码块、标签、前言行），截断重复循环

    Returns:
        清理后的正文（可能为空字符串）
    """
    text = text.strip()
    tagged = _WRAPPER_TAG.search(text)
    if tagged:
        text = tagged.group(1).strip()
    fenced = _FENCE.match(text)
    if fenced:
        text = fenced.group(1).strip()
    text = _PREAMBLE_LINE.sub("", text, count=1)
    return trim_repetition(text).strip()


# ===== 增强 =====

def enhance_page(page: Page, config: EnhanceConfig, client: ProviderClient, cache: ReplayCache,
                 *, pid: str = "", image_root=None) -> EnhancedPage:
    """
    增强单页

    缓存命中直接返回缓存原文；回放模式下未命中报 CacheMiss；
    否则调用模型，清理响应后写入缓存。

    Returns:
        EnhancedPage
    """
    note = None
    if config.use_vision and page.image_ref is None:
        note = "vision_degraded"
        logger.warning(f"⚠ 页面没有图片，退化为纯文本输入: pid={pid} page={page.page_no}")

    request = build_prompt(page, page.ocr_text, config, image_root)
    key = cache_key_for(request, config)
    fingerprint = config.fingerprint()

    cached = cache.get(key)
    if cached is not None:
        return EnhancedPage(pid=pid, page_no=page.page_no, config_fingerprint=fingerprint,
                            text=cached, provenance=Provenance.CACHE, note=note)
    if cache.replay_only:
        raise CacheMiss(key)

    response = client.complete(request, config.model_id, max_retries=config.max_retries)
    text = clean_response(response)
    if not text:
        raise EmptyEnhancement(pid, page.page_no)

    cache.put(key, text, {"pid": pid, "page_no": page.page_no, "config_fingerprint": fingerprint})
    return EnhancedPage(pid=pid, page_no=page.page_no, config_fingerprint=fingerprint,
                        text=text, provenance=Provenance.PROVIDER, note=note)


def enhance_corpus(store: CorpusStore, config: Optional[EnhanceConfig], client: ProviderClient,
                   cache: ReplayCache, *, image_root=None, workers: int = 4,
                   progress: bool = True) -> Dict[Tuple[str, int], EnhancedPage]:
    """
    增强整个语料库

    config 为 None（BASELINE）时直接透传 OCR 文本，不调用模型。
    已缓存的页面直接命中，因此中断后重跑即可续上。
    任一页面最终失败则在全部页面跑完后报 EnhancementFailed，列出所有失败。

    Returns:
        (pid, page_no) -> EnhancedPage，按 (pid, page_no) 排序
    """
    pages = list(store.iter_pages())

    if config is None:
        logger.info(f"BASELINE: 透传 {len(pages)} 页 OCR 文本")
        return {
            (pid, page.page_no): EnhancedPage(
                pid=pid, page_no=page.page_no, config_fingerprint=BASELINE_FINGERPRINT,
                text=page.ocr_text, provenance=Provenance.PASSTHROUGH)
            for pid, page in sorted(pages, key=lambda x: (x[0], x[1].page_no))
        }

    logger.info(f"开始增强 {len(pages)} 页 (config={config.fingerprint()}, workers={workers})")

    def _one(item):
        pid, page = item
        try:
            return pid, page, enhance_page(page, config, client, cache, pid=pid, image_root=image_root), None
        except DocprepError as err:
            return pid, page, None, err

    results: Dict[Tuple[str, int], EnhancedPage] = {}
    failures = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for pid, page, enhanced, err in tqdm(pool.map(_one, pages), total=len(pages), desc="增强",
                                             unit="页", disable=not progress_enabled(progress)):
            if err is not None:
                logger.error(f"✗ 增强失败 pid={pid} page={page.page_no}: {err}")
                failures.append((pid, page.page_no, err))
            else:
                results[(pid, page.page_no)] = enhanced

    by_source = {p: 0 for p in Provenance}
    for enhanced in results.values():
        by_source[enhanced.provenance] += 1
    logger.info(f"✓ 增强完成: 模型 {by_source[Provenance.PROVIDER]} 页, "
                f"缓存 {by_source[Provenance.CACHE]} 页, 失败 {len(failures)} 页")

    if failures:
        raise EnhancementFailed(sorted(failures, key=lambda f: (f[0], f[1])))
    return dict(sorted(results.items()))


def enhanced_texts(pages: Dict[Tuple[str, int], EnhancedPage]) -> Dict[Tuple[str, int], str]:
    return {key: page.text for key, page in pages.items()}


def save_enhanced(pages: Dict[Tuple[str, int], EnhancedPage], path) -> None:
    write_jsonl(Path(path), (p.model_dump(mode="json", exclude_none=True) for p in pages.values()))


def load_enhanced(path) -> Dict[Tuple[str, int], EnhancedPage]:
    pages = {}
    for line_no, record in read_jsonl(Path(path)):
        try:
            page = EnhancedPage(**record)
        except Exception as e:
            raise MalformedRecord(path, line_no, str(e))
        pages[(page.pid, page.page_no)] = page
    return dict(sorted(pages.items()))


# ===== 缓存预置 =====

class SeedResponse(BaseModel):
    """人工可读的预置响应：某页在若干配置下的模型输出"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    pid: str
    page_no: int
    presets: Tuple[str, ...]
    text: str


def load_seed_responses(path) -> List[SeedResponse]:
    seeds = []
    for line_no, record in read_jsonl(Path(path)):
        try:
            seeds.append(SeedResponse(**record))
        except Exception as e:
            raise MalformedRecord(path, line_no, str(e))
    return seeds


def seed_replay_cache(store: CorpusStore, configs: Dict[str, EnhanceConfig], seeds: Iterable[SeedResponse],
                      cache: ReplayCache, image_root=None) -> int:
    """
    用预置响应填充回放缓存：对每个配置构建与正式运行完全相同的提示词并计算 key

    Args:
        store: 语料库
        configs: 配置名 -> EnhanceConfig（不含 BASELINE）
        seeds: 预置响应
        cache: 回放缓存

    Returns:
        写入的条目数
    """
    pages = {(pid, page.page_no): page for pid, page in store.iter_pages()}
    written = 0
    for seed in seeds:
        page = pages.get((seed.pid, seed.page_no))
        if page is None:
            logger.warning(f"⚠ 预置响应对应的页面不存在: pid={seed.pid} page={seed.page_no}")
            continue
        for name in seed.presets:
            config = configs.get(name.upper())
            if config is None:
                continue
            request = build_prompt(page, page.ocr_text, config, image_root)
            key = cache_key_for(request, config)
            if cache.contains(key):
                continue
            cache.put(key, nfc(seed.text),
                      {"pid": seed.pid, "page_no": seed.page_no,
                       "config_fingerprint": config.fingerprint(), "seeded": True})
            written += 1
    logger.info(f"✓ 预置回放缓存 {written} 条")
    return written
