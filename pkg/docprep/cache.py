"""
内容寻址的回放缓存

目录结构:
    <root>/<key 的十六进制>     响应原文（UTF-8）
    <root>/index.jsonl          key -> 元数据（审计用，只追加）

写入先落临时文件再 rename；读不加锁，写串行化；命中计数加锁。
"""
import json
import logging
import threading
from pathlib import Path
from typing import Optional

from .errors import CacheCorruption
from .utils import atomic_write_text, sha256_parts

logger = logging.getLogger(__name__)

INDEX_NAME = "index.jsonl"


def make_cache_key(prompt: bytes, image: bytes, model_id: str, prompt_version: str) -> str:
    """key = hash(prompt ‖ image ‖ model_id ‖ prompt_version)"""
    return sha256_parts(prompt, image, model_id.encode("utf-8"), prompt_version.encode("utf-8"))


class ReplayCache:
    """
    Args:
        root: 缓存目录
        replay_only: 只读回放模式，未命中时由调用方报 CacheMiss
    """

    def __init__(self, root, replay_only: bool = False):
        self.root = Path(root)
        self.replay_only = replay_only
        self._write_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def path_for(self, key: str) -> Path:
        if not key or any(c not in "0123456789abcdef" for c in key):
            raise ValueError(f"非法缓存 key: {key!r}")
        return self.root / key

    def contains(self, key: str) -> bool:
        return self.path_for(key).is_file()

    def get(self, key: str) -> Optional[str]:
        """
        读取缓存

        Returns:
            命中返回原文，未命中返回 None

        Raises:
            CacheCorruption: 文件存在但不是合法 UTF-8 或内容为空
        """
        path = self.path_for(key)
        if not path.is_file():
            with self._stats_lock:
                self.misses += 1
            return None
        try:
            text = path.read_bytes().decode("utf-8")
        except UnicodeDecodeError:
            raise CacheCorruption(key, "不是合法 UTF-8")
        if not text.strip():
            raise CacheCorruption(key, "内容为空")
        with self._stats_lock:
            self.hits += 1
        return text

    def put(self, key: str, text: str, meta: Optional[dict] = None) -> None:
        if not text.strip():
            raise ValueError("不缓存空响应")
        path = self.path_for(key)
        with self._write_lock:
            atomic_write_text(path, text)
            record = {"key": key}
            record.update(meta or {})
            with open(self.root / INDEX_NAME, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
        logger.debug(f"缓存写入 {key[:12]} {meta or {}}")
