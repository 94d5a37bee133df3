"""
基于词典的中文分词 + BM25 倒排索引

分词：正向最大匹配，词典里没有的 CJK 字单字成词；
连续的非 CJK 字母数字作为一个小写词；空白与标点丢弃。
"""
import hashlib
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict

from .chunk import Chunk
from .errors import DuplicateChunkId, LexiconMismatch, MalformedRecord
from .utils import is_cjk, is_word_char, nfc, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_K1 = 1.5
DEFAULT_B = 0.75
INDEX_FORMAT = "docprep-sparse"
INDEX_VERSION = 1


class Lexicon:
    """分词词典：一组 NFC 规范化、不含空白的词"""

    def __init__(self, entries: Iterable[str] = ()):
        cleaned = set()
        for word in entries:
            word = nfc(word.strip())
            if not word:
                continue
            if any(ch.isspace() for ch in word):
                raise ValueError(f"词典条目不能包含空白: {word!r}")
            cleaned.add(word)
        self.entries = frozenset(cleaned)
        self.max_entry_len = max((len(w) for w in self.entries), default=1)

    @classmethod
    def from_file(cls, path) -> "Lexicon":
        """一行一个词，UTF-8，'#' 开头为注释"""
        path = Path(path)
        try:
            lines = path.read_bytes().decode("utf-8").splitlines()
        except UnicodeDecodeError:
            raise MalformedRecord(path, None, "词典不是合法 UTF-8")
        words = []
        for line_no, line in enumerate(lines, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if any(ch.isspace() for ch in line):
                raise MalformedRecord(path, line_no, f"词典条目不能包含空白: {line!r}")
            words.append(line)
        lexicon = cls(words)
        logger.info(f"✓ 词典加载完成: {len(lexicon)} 个词 ({path})")
        return lexicon

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(sorted(self.entries)).encode("utf-8")).hexdigest()


def _lexicon_match(text: str, i: int, lexicon: Lexicon) -> int:
    """从 i 开始的最长词典匹配，返回结束位置；没有长度 >= 2 的匹配时返回 i"""
    n = len(text)
    for length in range(min(lexicon.max_entry_len, n - i), 1, -1):
        end = i + length
        if text[i:end] not in lexicon:
            continue
        # 以字母数字开头的词条不能把一个连续的字母数字串从中间切开
        if not is_cjk(text[i]) and end < n and is_word_char(text[end - 1]) and is_word_char(text[end]):
            continue
        return end
    return i


def segment_spans(text: str, lexicon: Lexicon) -> List[Tuple[int, int, str]]:
    """
    分词并返回每个词在原文中的位置

    词典匹配可以从 CJK 字符或字母数字开始（如 "A股"、"EPS值"）；
    没有匹配时 CJK 单字成词，连续字母数字合成一个小写词。

    Returns:
        [(start, end, term)]，未返回的位置都是空白或标点
    """
    out = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if not (is_cjk(ch) or is_word_char(ch)):
            i += 1
            continue
        end = _lexicon_match(text, i, lexicon)
        if end == i:
            end = i + 1
            if not is_cjk(ch):
                while end < n and is_word_char(text[end]):
                    end += 1
        out.append((i, end, text[i:end].lower()))
        i = end
    return out


def segment(text: str, lexicon: Lexicon) -> List[str]:
    return [term for _, _, term in segment_spans(text, lexicon)]


class SparseIndex(BaseModel):
    model_config = ConfigDict(frozen=True)

    postings: Dict[str, Tuple[Tuple[str, int], ...]]
    doc_lengths: Dict[str, int]
    avgdl: float
    N: int
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    lexicon_hash: str

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1 + (self.N - df + 0.5) / (df + 0.5))


def build_sparse_index(chunks: Sequence[Chunk], lexicon: Lexicon, k1: float = DEFAULT_K1,
                       b: float = DEFAULT_B) -> SparseIndex:
    """
    构建 BM25 倒排索引，倒排表按 chunk_id 排序

    Raises:
        DuplicateChunkId: chunk_id 重复
    """
    if k1 < 0 or b < 0:
        raise ValueError(f"BM25 参数必须非负: k1={k1}, b={b}")

    doc_lengths: Dict[str, int] = {}
    postings: Dict[str, List[Tuple[str, int]]] = {}
    for chunk in sorted(chunks, key=lambda c: c.chunk_id):
        if chunk.chunk_id in doc_lengths:
            raise DuplicateChunkId(chunk.chunk_id)
        terms = segment(chunk.text, lexicon)
        doc_lengths[chunk.chunk_id] = len(terms)
        for term, tf in Counter(terms).items():
            postings.setdefault(term, []).append((chunk.chunk_id, tf))

    n = len(doc_lengths)
    avgdl = sum(doc_lengths.values()) / n if n else 0.0
    index = SparseIndex(
        postings={t: tuple(p) for t, p in sorted(postings.items())},
        doc_lengths=doc_lengths,
        avgdl=avgdl,
        N=n,
        k1=k1,
        b=b,
        lexicon_hash=lexicon.fingerprint(),
    )
    logger.info(f"✓ BM25 索引: {n} 块, {len(postings)} 个词, avgdl={avgdl:.1f}")
    return index


def search_sparse(index: SparseIndex, query: str, lexicon: Lexicon, k: int,
                  candidates: Optional[Iterable[str]] = None) -> List[Tuple[str, float]]:
    """
    BM25 检索

    score = Σ idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·dl/avgdl))，
    idf(t) = ln(1 + (N − df + 0.5)/(df + 0.5))；查询词去重后按字典序累加。

    Args:
        index: 索引
        query: 查询文本
        lexicon: 与建索引时相同的词典
        k: 最多返回条数
        candidates: 只在这些 chunk_id 中打分

    Returns:
        [(chunk_id, score)]，分数降序，同分按 chunk_id 升序，零分不返回
    """
    if k < 1:
        raise ValueError("k 必须 >= 1")
    if lexicon.fingerprint() != index.lexicon_hash:
        raise LexiconMismatch(index.lexicon_hash, lexicon.fingerprint())

    allowed = set(candidates) if candidates is not None else None
    scores: Dict[str, float] = {}
    k1, b = index.k1, index.b
    for term in sorted(set(segment(query, lexicon))):
        postings = index.postings.get(term)
        if not postings:
            continue
        idf = index.idf(term)
        for chunk_id, tf in postings:
            if allowed is not None and chunk_id not in allowed:
                continue
            dl = index.doc_lengths[chunk_id]
            norm = tf + k1 * (1 - b + b * dl / index.avgdl)
            scores[chunk_id] = scores.get(chunk_id, 0.0) + idf * (tf * (k1 + 1)) / norm

    ranked = sorted(((cid, s) for cid, s in scores.items() if s > 0), key=lambda x: (-x[1], x[0]))
    return ranked[:k]


def save_sparse_index(index: SparseIndex, path) -> None:
    header = {
        "kind": "header", "format": INDEX_FORMAT, "version": INDEX_VERSION,
        "N": index.N, "avgdl": index.avgdl, "k1": index.k1, "b": index.b,
        "lexicon_hash": index.lexicon_hash,
    }
    records = [header]
    records += [{"kind": "doc", "chunk_id": cid, "length": dl} for cid, dl in sorted(index.doc_lengths.items())]
    records += [{"kind": "term", "term": t, "postings": [list(p) for p in ps]} for t, ps in index.postings.items()]
    write_jsonl(Path(path), records)


def load_sparse_index(path, lexicon: Lexicon) -> SparseIndex:
    """加载序列化索引；词典哈希不一致时拒绝"""
    header = None
    doc_lengths: Dict[str, int] = {}
    postings: Dict[str, Tuple[Tuple[str, int], ...]] = {}
    for line_no, record in read_jsonl(Path(path)):
        kind = record.get("kind")
        if kind == "header":
            if record.get("format") != INDEX_FORMAT or record.get("version") != INDEX_VERSION:
                raise MalformedRecord(path, line_no, "不支持的索引格式或版本")
            header = record
        elif kind == "doc":
            doc_lengths[record["chunk_id"]] = int(record["length"])
        elif kind == "term":
            postings[record["term"]] = tuple((cid, int(tf)) for cid, tf in record["postings"])
        else:
            raise MalformedRecord(path, line_no, f"未知记录类型: {kind!r}")
    if header is None:
        raise MalformedRecord(path, None, "缺少 header 记录")
    if header["lexicon_hash"] != lexicon.fingerprint():
        raise LexiconMismatch(header["lexicon_hash"], lexicon.fingerprint())
    return SparseIndex(postings=postings, doc_lengths=doc_lengths, avgdl=header["avgdl"], N=header["N"],
                       k1=header["k1"], b=header["b"], lexicon_hash=header["lexicon_hash"])
