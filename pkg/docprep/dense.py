"""
向量检索：可插拔的 embedding 后端 + 精确余弦 top-k

- HashingEmbedder: 本地确定性后端，字符 3-gram 带符号哈希到 dim 个桶
- RemoteEmbedder: OpenAI 兼容 /v1/embeddings
"""
import hashlib
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .cache import ReplayCache
from .chunk import Chunk
from .errors import (CacheMiss, DimensionMismatch, DuplicateChunkId, FingerprintMismatch, MalformedRecord,
                     ProviderError)
from .providers import HttpEmbeddingClient
from .utils import progress_enabled, read_jsonl, sha256_parts, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256
NORM_TOLERANCE = 1e-6
INDEX_FORMAT = "docprep-dense"
INDEX_VERSION = 1

_WHITESPACE = re.compile(r"\s+")


class Embedder:
    """text -> dim 维向量（未归一化），归一化统一由 embed_text 完成"""

    name = "abstract"
    version = "0"
    dim = DEFAULT_DIM

    def raw_vector(self, text: str) -> np.ndarray:
        raise NotImplementedError

    @property
    def fingerprint(self) -> str:
        return f"{self.name}/{self.version}/dim{self.dim}"


class HashingEmbedder(Embedder):
    """
    字符 3-gram 带符号哈希

    文本先转小写并把连续空白压成一个空格；不足 3 个字符的文本整体作为一个 gram。
    每个 gram 用 blake2b(8 字节) 取桶号 h % dim，最高位决定正负号。
    """

    name = "hashing-char3"
    version = "1"

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 1:
            raise ValueError("dim 必须 >= 1")
        self.dim = dim

    @staticmethod
    def grams(text: str) -> List[str]:
        text = _WHITESPACE.sub(" ", text.lower()).strip()
        if not text:
            return []
        if len(text) < 3:
            return [text]
        return [text[i:i + 3] for i in range(len(text) - 2)]

    def raw_vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for gram in self.grams(text):
            h = int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "big")
            sign = -1.0 if h >> 63 else 1.0
            vec[h % self.dim] += sign
        return vec


class RemoteEmbedder(Embedder):
    """远程 embedding 服务，返回维度必须与 dim 一致"""

    version = "remote"

    def __init__(self, client: HttpEmbeddingClient, dim: int):
        self.client = client
        self.dim = dim
        self.name = f"remote:{client.model}"

    def raw_vector(self, text: str) -> np.ndarray:
        vector = self.client.embed([text])[0]
        if len(vector) != self.dim:
            raise DimensionMismatch(self.dim, len(vector))
        return np.asarray(vector, dtype=np.float64)


def normalize(vec: np.ndarray) -> np.ndarray:
    """L2 归一化；零向量原样返回"""
    vec = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        return np.zeros_like(vec)
    return vec / norm


def embed_text(embedder: Embedder, text: str) -> np.ndarray:
    """
    Returns:
        长度为 dim 的单位向量；空文本返回零向量
    """
    if not text.strip():
        return np.zeros(embedder.dim, dtype=np.float64)
    vec = embedder.raw_vector(text)
    if vec.shape != (embedder.dim,):
        raise DimensionMismatch(embedder.dim, int(vec.size))
    return normalize(vec)


class DenseIndex:
    """chunk_id -> 单位向量（或零向量），构建后只读"""

    def __init__(self, chunk_ids: Sequence[str], matrix: np.ndarray, fingerprint: str, dim: int):
        self.chunk_ids = list(chunk_ids)
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(len(self.chunk_ids), dim)
        self.fingerprint = fingerprint
        self.dim = dim
        self._nonzero = np.linalg.norm(self.matrix, axis=1) > 0 if len(self.chunk_ids) else np.zeros(0, bool)

    @classmethod
    def from_vectors(cls, vectors: Dict[str, Sequence[float]], fingerprint: str = "manual") -> "DenseIndex":
        """直接从向量构建（会做归一化），测试和外部向量导入用"""
        ids = sorted(vectors)
        if not ids:
            return cls([], np.zeros((0, 0)), fingerprint, 0)
        rows = [normalize(np.asarray(vectors[cid], dtype=np.float64)) for cid in ids]
        dim = rows[0].shape[0]
        if any(r.shape != (dim,) for r in rows):
            raise DimensionMismatch(dim, -1)
        return cls(ids, np.vstack(rows), fingerprint, dim)

    def __len__(self) -> int:
        return len(self.chunk_ids)


def embedding_key(fingerprint: str, text: str) -> str:
    return sha256_parts(fingerprint.encode("utf-8"), text.encode("utf-8"))


def embed_cached(embedder: Embedder, text: str, cache: Optional[ReplayCache] = None) -> np.ndarray:
    """
    带缓存的 embed_text，key = hash(后端指纹, 文本)

    Raises:
        CacheMiss: 回放模式下未命中
    """
    if cache is None:
        return embed_text(embedder, text)
    key = embedding_key(embedder.fingerprint, text)
    cached = cache.get(key)
    if cached is not None:
        return np.asarray(json.loads(cached), dtype=np.float64)
    if cache.replay_only:
        raise CacheMiss(key)
    vec = embed_text(embedder, text)
    cache.put(key, json.dumps(vec.tolist()), {"embedder": embedder.fingerprint})
    return vec


def build_dense_index(chunks: Sequence[Chunk], embedder: Embedder, cache: Optional[ReplayCache] = None,
                      workers: int = 4, progress: bool = True) -> DenseIndex:
    """
    为每个 chunk 计算向量

    Args:
        chunks: 切块结果，chunk_id 唯一
        embedder: embedding 后端
        cache: embedding 缓存，key = hash(后端指纹, 文本)
        workers: 并发数（远程后端时生效）

    Raises:
        DuplicateChunkId: chunk_id 重复
    """
    seen = set()
    for chunk in chunks:
        if chunk.chunk_id in seen:
            raise DuplicateChunkId(chunk.chunk_id)
        seen.add(chunk.chunk_id)

    ordered = sorted(chunks, key=lambda c: c.chunk_id)
    fingerprint = embedder.fingerprint

    def _one(chunk: Chunk) -> np.ndarray:
        try:
            return embed_cached(embedder, chunk.text, cache)
        except ProviderError as err:
            logger.error(f"✗ embedding 失败 chunk={chunk.chunk_id}: {err}")
            raise

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(tqdm(pool.map(_one, ordered), total=len(ordered), desc="向量化", unit="块",
                         disable=not progress_enabled(progress)))

    matrix = np.vstack(rows) if rows else np.zeros((0, embedder.dim))
    logger.info(f"✓ 向量索引: {len(rows)} 块, dim={embedder.dim}, embedder={fingerprint}")
    return DenseIndex([c.chunk_id for c in ordered], matrix, fingerprint, embedder.dim)


def search_vectors(index: DenseIndex, query_vector, k: int,
                   candidates: Optional[Iterable[str]] = None) -> List[Tuple[str, float]]:
    """
    精确余弦检索

    Returns:
        [(chunk_id, score)]，分数降序，同分按 chunk_id 升序；零向量既不检索也不被检索
    """
    if k < 1:
        raise ValueError("k 必须 >= 1")
    if len(index) == 0:
        return []
    q = normalize(np.asarray(query_vector, dtype=np.float64))
    if not q.any():
        return []
    if q.shape != (index.dim,):
        raise DimensionMismatch(index.dim, int(q.size))

    scores = np.clip(index.matrix @ q, -1.0, 1.0)
    allowed = set(candidates) if candidates is not None else None
    results = [
        (cid, float(scores[i]))
        for i, cid in enumerate(index.chunk_ids)
        if index._nonzero[i] and (allowed is None or cid in allowed)
    ]
    results.sort(key=lambda x: (-x[1], x[0]))
    return results[:k]


def search_dense(index: DenseIndex, query: str, embedder: Embedder, k: int,
                 candidates: Optional[Iterable[str]] = None,
                 cache: Optional[ReplayCache] = None) -> List[Tuple[str, float]]:
    if embedder.fingerprint != index.fingerprint:
        raise FingerprintMismatch(index.fingerprint, embedder.fingerprint)
    return search_vectors(index, embed_cached(embedder, query, cache), k, candidates)


def save_dense_index(index: DenseIndex, path) -> None:
    """十进制文本 JSONL：header + 每块一行；repr 精度保证读回后逐位一致"""
    records = [{"kind": "header", "format": INDEX_FORMAT, "version": INDEX_VERSION,
                "dim": index.dim, "fingerprint": index.fingerprint}]
    records += [{"kind": "vector", "chunk_id": cid, "vector": index.matrix[i].tolist()}
                for i, cid in enumerate(index.chunk_ids)]
    write_jsonl(Path(path), records)


def load_dense_index(path) -> DenseIndex:
    header = None
    ids: List[str] = []
    rows: List[List[float]] = []
    for line_no, record in read_jsonl(Path(path)):
        kind = record.get("kind")
        if kind == "header":
            if record.get("format") != INDEX_FORMAT or record.get("version") != INDEX_VERSION:
                raise MalformedRecord(path, line_no, "不支持的索引格式或版本")
            header = record
        elif kind == "vector":
            if header is None:
                raise MalformedRecord(path, line_no, "vector 记录出现在 header 之前")
            vec = record["vector"]
            if len(vec) != header["dim"]:
                raise MalformedRecord(path, line_no, f"向量维度 {len(vec)} != {header['dim']}")
            norm = float(np.linalg.norm(vec))
            if norm != 0.0 and abs(norm - 1.0) > NORM_TOLERANCE:
                raise MalformedRecord(path, line_no, f"向量未归一化: |v|={norm}")
            ids.append(record["chunk_id"])
            rows.append(vec)
        else:
            raise MalformedRecord(path, line_no, f"未知记录类型: {kind!r}")
    if header is None:
        raise MalformedRecord(path, None, "缺少 header 记录")
    matrix = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, header["dim"]))
    return DenseIndex(ids, matrix, header["fingerprint"], header["dim"])
