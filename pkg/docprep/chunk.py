"""
两步切块：先按页切分，再在页内做带重叠的递归切块
"""
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .errors import InvalidChunkParams, MalformedRecord
from .utils import is_word_char, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 8000
DEFAULT_OVERLAP = 500

# 切分点优先级：空行 > 换行 > 任意 token 边界
SEP_TOKEN, SEP_LINE, SEP_PARAGRAPH = 0, 1, 2
_BLANK_LINE = re.compile(r"\n[^\S\n]*\n")


class TokenCounter:
    """text -> token 字符区间，必须确定且单调（文本前缀得到 token 序列前缀）"""

    name = "abstract"
    version = "0"

    def spans(self, text: str) -> List[Tuple[int, int]]:
        raise NotImplementedError

    @property
    def label(self) -> str:
        return f"{self.name}/{self.version}"


class CjkTokenCounter(TokenCounter):
    """
    每个 CJK 字符算 1 个 token；连续的非 CJK 字母数字算 1 个 token；
    标点各算 1 个 token；空白只做分隔
    """

    name = "cjk-char-word"
    version = "1"

    def spans(self, text: str) -> List[Tuple[int, int]]:
        spans = []
        i, n = 0, len(text)
        while i < n:
            ch = text[i]
            if ch.isspace():
                i += 1
            elif is_word_char(ch):
                j = i + 1
                while j < n and is_word_char(text[j]):
                    j += 1
                spans.append((i, j))
                i = j
            else:
                # CJK 字符或标点
                spans.append((i, i + 1))
                i += 1
        return spans


DEFAULT_COUNTER = CjkTokenCounter()


class ChunkParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    chunk_size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_OVERLAP
    respect_boundaries: bool = True


class Chunk(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    chunk_id: str
    pid: str
    page_start: int = Field(gt=0)
    page_end: int = Field(gt=0)
    token_start: int = Field(ge=0)
    token_end: int = Field(ge=0)
    char_start: int = Field(ge=0)
    char_end: int = Field(ge=0)
    text: str


class ChunkBody(BaseModel):
    """页内切块结果，尚未绑定文档"""
    model_config = ConfigDict(frozen=True)

    token_start: int
    token_end: int
    char_start: int
    char_end: int
    text: str


def validate_chunk_params(chunk_size: int, overlap: int) -> None:
    if chunk_size < 1 or overlap < 0 or overlap >= chunk_size:
        raise InvalidChunkParams(chunk_size, overlap)


def _gap_levels(text: str, spans: List[Tuple[int, int]]) -> List[int]:
    """levels[j] = token j 之前那段空白的切分等级（j 从 1 开始有意义）"""
    levels = [SEP_TOKEN] * (len(spans) + 1)
    for j in range(1, len(spans)):
        gap = text[spans[j - 1][1]:spans[j][0]]
        if _BLANK_LINE.search(gap):
            levels[j] = SEP_PARAGRAPH
        elif "\n" in gap:
            levels[j] = SEP_LINE
    return levels


def _pick_end(start: int, end: int, overlap: int, levels: Optional[List[int]]) -> int:
    """
    窗口需要截断时，在 (start + overlap, end] 内从后往前找最高等级的切分点；
    找不到段落或换行时就在 end 处切
    """
    if levels is None:
        return end
    for level in (SEP_PARAGRAPH, SEP_LINE):
        for j in range(end, start + overlap, -1):
            if levels[j] >= level:
                return j
    return end


def chunk_page(text: str, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP,
               counter: TokenCounter = DEFAULT_COUNTER, respect_boundaries: bool = True) -> List[ChunkBody]:
    """
    页内切块

    贪心窗口：每块至多 chunk_size 个 token，下一块从上一块结尾回退 overlap 个 token 开始。
    respect_boundaries 时，窗口尾部若有空行/换行，则在最后一个这样的位置截断。
    每个 token 拥有其后的空白（第一块还包含页首空白），因此块文本是原文的精确子串，
    去掉重叠后拼接即还原整页。

    Args:
        text: 页面文本
        chunk_size: 每块最大 token 数
        overlap: 相邻块重叠 token 数
        counter: token 计数器

    Returns:
        ChunkBody 列表；空文本返回空列表
    """
    validate_chunk_params(chunk_size, overlap)
    spans = counter.spans(text)
    total = len(spans)
    if total == 0:
        return []

    levels = _gap_levels(text, spans) if respect_boundaries else None

    def char_at(token_index: int) -> int:
        if token_index == 0:
            return 0
        if token_index >= total:
            return len(text)
        return spans[token_index][0]

    bodies: List[ChunkBody] = []
    start = 0
    while True:
        end = min(start + chunk_size, total)
        if end < total:
            end = _pick_end(start, end, overlap, levels)
        c0, c1 = char_at(start), char_at(end)
        bodies.append(ChunkBody(token_start=start, token_end=end, char_start=c0, char_end=c1, text=text[c0:c1]))
        if end >= total:
            break
        start = end - overlap
    return bodies


def make_chunk_id(pid: str, page_start: int, page_end: int, ordinal: int) -> str:
    return f"{pid}#p{page_start:04d}-{page_end:04d}#{ordinal:03d}"


def chunk_corpus(enhanced: Dict[Tuple[str, int], str], params: ChunkParams = ChunkParams(),
                 counter: TokenCounter = DEFAULT_COUNTER) -> List[Chunk]:
    """
    按页独立切块，输出按 (pid, page_no, ordinal) 排序

    Args:
        enhanced: (pid, page_no) -> 页面文本
        params: 切块参数
        counter: token 计数器
    """
    validate_chunk_params(params.chunk_size, params.overlap)
    chunks: List[Chunk] = []
    for (pid, page_no), text in sorted(enhanced.items()):
        bodies = chunk_page(text, params.chunk_size, params.overlap, counter, params.respect_boundaries)
        for ordinal, body in enumerate(bodies):
            chunks.append(Chunk(
                chunk_id=make_chunk_id(pid, page_no, page_no, ordinal),
                pid=pid,
                page_start=page_no,
                page_end=page_no,
                **body.model_dump(),
            ))
    logger.info(f"✓ 切块完成: {len(enhanced)} 页 -> {len(chunks)} 块 "
                f"(size={params.chunk_size}, overlap={params.overlap}, counter={counter.label})")
    return chunks


def reconstruct_text(bodies) -> str:
    """去掉每块与前一块重叠的部分后拼接"""
    out = []
    prev_char_end = 0
    for i, body in enumerate(bodies):
        if i == 0:
            out.append(body.text)
        else:
            out.append(body.text[prev_char_end - body.char_start:])
        prev_char_end = body.char_end
    return "".join(out)


def save_chunks(chunks: List[Chunk], path, params: ChunkParams, counter: TokenCounter = DEFAULT_COUNTER) -> None:
    header = {
        "kind": "header",
        "counter": counter.name,
        "counter_version": counter.version,
        "chunk_size": params.chunk_size,
        "overlap": params.overlap,
        "respect_boundaries": params.respect_boundaries,
    }
    records = [header] + [dict(kind="chunk", **c.model_dump()) for c in chunks]
    write_jsonl(Path(path), records)


def load_chunks(path, counter: TokenCounter = DEFAULT_COUNTER) -> Tuple[List[Chunk], dict]:
    """
    Returns:
        (chunks, header)；header 中的计数器与当前不一致时报错
    """
    header = None
    chunks = []
    for line_no, record in read_jsonl(Path(path)):
        kind = record.pop("kind", None)
        if kind == "header":
            header = record
            if (record.get("counter"), record.get("counter_version")) != (counter.name, counter.version):
                raise MalformedRecord(path, line_no, f"token 计数器不一致: {record.get('counter')} != {counter.name}")
        elif kind == "chunk":
            try:
                chunks.append(Chunk(**record))
            except Exception as e:
                raise MalformedRecord(path, line_no, str(e))
        else:
            raise MalformedRecord(path, line_no, f"未知记录类型: {kind!r}")
    if header is None:
        raise MalformedRecord(path, None, "缺少 header 记录")
    return chunks, header
