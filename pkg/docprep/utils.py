"""
通用工具：日志、JSONL 读写、原子写、哈希、CJK 判定
"""
import hashlib
import json
import logging
import os
import sys
import tempfile
import unicodedata
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Optional, Tuple

from .errors import MalformedRecord

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'
LOG_DATEFMT = '%Y-%m-%d %H:%M:%S'


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    配置日志（只输出到 stderr，stdout 留给结果）

    Args:
        level: 日志级别
        log_file: 额外写入的日志文件
    """
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATEFMT,
        handlers=handlers,
        force=True,
    )


def progress_enabled(requested: bool = True) -> bool:
    """进度条只在 stderr 是终端时显示"""
    return requested and sys.stderr.isatty()


def nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def is_cjk(ch: str) -> bool:
    """判断单个码位是否属于中日韩文字（汉字、假名、谚文）"""
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2FA1F
        or 0xF900 <= cp <= 0xFAFF
        or 0x3040 <= cp <= 0x30FF
        or 0xAC00 <= cp <= 0xD7AF
    )


def is_word_char(ch: str) -> bool:
    """非 CJK 的字母数字字符"""
    return ch.isalnum() and not is_cjk(ch)


def sha256_parts(*parts: bytes) -> str:
    """
    对多段字节做带长度前缀的 sha256，避免拼接歧义

    Returns:
        64 位十六进制摘要
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(8, "big"))
        h.update(part)
    return h.hexdigest()


def dump_json_line(record: Dict[str, Any]) -> str:
    # sort_keys 保证重建结果逐字节一致
    return json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """先写临时文件再 rename，读者不会看到半截文件"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> None:
    atomic_write_text(path, "".join(dump_json_line(r) for r in records))


def read_jsonl(path: Path) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """
    逐行读取 JSONL，空行跳过

    Yields:
        (行号, 记录)

    Raises:
        MalformedRecord: 非 UTF-8、非法 JSON 或不是对象
    """
    path = Path(path)
    try:
        content = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedRecord(path, None, f"不是合法 UTF-8: {e}")
    for line_no, line in enumerate(content.splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedRecord(path, line_no, f"JSON 解析失败: {e.msg}")
        if not isinstance(record, dict):
            raise MalformedRecord(path, line_no, "每行必须是一个 JSON 对象")
        yield line_no, record
