"""
异常定义

每个异常携带 exit_code，CLI 据此返回退出码：
    0 成功, 1 配置错误, 2 数据校验错误, 3 外部服务错误, 4 内部不变量失败
"""
from typing import List, Optional, Sequence


class DocprepError(Exception):
    """所有流水线异常的基类"""

    exit_code = 4
    category = "internal"


# ===== 配置错误 =====

class ConfigError(DocprepError):
    """配置校验失败，messages 列出全部违规项"""

    exit_code = 1
    category = "config"

    def __init__(self, messages: Sequence[str]):
        self.messages = list(messages)
        super().__init__("配置错误: " + "; ".join(self.messages))


class InvalidChunkParams(ConfigError):
    def __init__(self, chunk_size: int, overlap: int):
        self.chunk_size = chunk_size
        self.overlap = overlap
        super().__init__([
            f"chunk 参数非法: 需要 chunk_size >= 1 且 0 <= overlap < chunk_size "
            f"(chunk_size={chunk_size}, overlap={overlap})"
        ])


# ===== 数据校验错误 =====

class DataValidationError(DocprepError):
    exit_code = 2
    category = "data"


class MissingManifest(DataValidationError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"缺少 manifest 文件: {self.path}")


class DuplicatePid(DataValidationError):
    def __init__(self, pid: str, path=None):
        self.pid = pid
        super().__init__(f"重复的 pid: {pid}" + (f" ({path})" if path else ""))


class EmptyPage(DataValidationError):
    def __init__(self, pid: str, page_no: int, path=None, line_no: Optional[int] = None):
        self.pid = pid
        self.page_no = page_no
        locus = f" ({path}:{line_no})" if path else ""
        super().__init__(f"页面既无 ocr_text 也无 image_ref: pid={pid} page={page_no}{locus}")


class MalformedRecord(DataValidationError):
    def __init__(self, path, line_no: Optional[int], reason: str):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        locus = f"{self.path}:{line_no}" if line_no is not None else self.path
        super().__init__(f"记录格式错误 {locus}: {reason}")


class ManifestMismatch(DataValidationError):
    def __init__(self, expected: dict, actual: dict):
        self.expected = expected
        self.actual = actual
        super().__init__(f"manifest 分类计数与文档不一致: manifest={expected}, 实际={actual}")


class NoImage(DataValidationError):
    def __init__(self, pid: str, page_no: int):
        self.pid = pid
        self.page_no = page_no
        super().__init__(f"页面没有 image_ref: pid={pid} page={page_no}")


class GroundTruthNotCandidate(DataValidationError):
    def __init__(self, qid: str):
        self.qid = qid
        super().__init__(f"ground_truth 不是 source 的子集: qid={qid}")


class UnknownCategory(DataValidationError):
    def __init__(self, value: str, locus: str = ""):
        self.value = value
        super().__init__(f"未知分类 {value!r}" + (f" ({locus})" if locus else ""))


class DuplicateQid(DataValidationError):
    def __init__(self, qid: str):
        self.qid = qid
        super().__init__(f"重复的 qid: {qid}")


class UnknownField(DataValidationError):
    def __init__(self, fields: Sequence[str], locus: str = ""):
        self.fields = sorted(fields)
        super().__init__(f"未知字段 {self.fields}" + (f" ({locus})" if locus else ""))


class NotOriginalQuestion(DataValidationError):
    def __init__(self, qid: str):
        self.qid = qid
        super().__init__(f"只能对原始问题做增广（origin 必须为空）: qid={qid}")


class DuplicateChunkId(DataValidationError):
    def __init__(self, chunk_id: str):
        self.chunk_id = chunk_id
        super().__init__(f"重复的 chunk_id: {chunk_id}")


class LexiconMismatch(DataValidationError):
    def __init__(self, expected: str, actual: str):
        super().__init__(f"词典哈希不匹配: 索引={expected[:12]}, 当前={actual[:12]}")


class FingerprintMismatch(DataValidationError):
    def __init__(self, expected: str, actual: str):
        super().__init__(f"embedder 指纹不匹配: 索引={expected}, 当前={actual}")


class UnresolvableChunk(DataValidationError):
    def __init__(self, chunk_id: str):
        self.chunk_id = chunk_id
        super().__init__(f"无法解析 chunk 对应的 pid: {chunk_id}")


class QidMismatch(DataValidationError):
    def __init__(self, left: str, right: str):
        super().__init__(f"融合的两个列表 qid 不一致: {left} != {right}")


class MissingRun(DataValidationError):
    def __init__(self, qid: str):
        self.qid = qid
        super().__init__(f"缺少 qid={qid} 的检索结果")


# ===== 外部服务错误（MLLM / embedding / OCR 引擎） =====

class ProviderError(DocprepError):
    exit_code = 3
    category = "provider"


class ProviderTransportError(ProviderError):
    def __init__(self, message: str, status_code: Optional[int] = None):
        self.status_code = status_code
        super().__init__(message)


class NetworkForbidden(ProviderError):
    def __init__(self):
        super().__init__("replay_only 模式禁止任何网络访问")


class EmptyEnhancement(ProviderError):
    def __init__(self, pid: str, page_no: int):
        self.pid = pid
        self.page_no = page_no
        super().__init__(f"模型返回空结果: pid={pid} page={page_no}")


class EmptyAugmentation(ProviderError):
    def __init__(self, qid: str, strategy_id: int):
        self.qid = qid
        self.strategy_id = strategy_id
        super().__init__(f"增广返回空结果: qid={qid} strategy={strategy_id}")


class CacheMiss(ProviderError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"回放缓存未命中: {key}")


class CacheCorruption(ProviderError):
    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(f"回放缓存损坏 {key}: {reason}")


class DimensionMismatch(ProviderError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"embedding 维度不匹配: 期望 {expected}, 实际 {actual}")


class EnhancementFailed(ProviderError):
    """整批增强结束后仍有页面失败，failures 为 (pid, page_no, 错误) 列表"""

    def __init__(self, failures: List[tuple]):
        self.failures = failures
        lines = [f"pid={pid} page={page_no}: {err}" for pid, page_no, err in failures]
        super().__init__(f"{len(failures)} 个页面增强失败:\n  " + "\n  ".join(lines))


class OcrEngineFailed(ProviderError):
    def __init__(self, code: int, stderr: str):
        self.code = code
        self.stderr = stderr
        super().__init__(f"OCR 引擎退出码 {code}: {stderr.strip()}")


class OcrOutputMissing(ProviderError):
    def __init__(self, path):
        super().__init__(f"OCR 引擎没有生成输出文件: {path}")


class OcrOutputNotUtf8(ProviderError):
    def __init__(self, path):
        super().__init__(f"OCR 输出不是合法 UTF-8: {path}")


# ===== 内部不变量 =====

class InvariantViolation(DocprepError):
    exit_code = 4
    category = "invariant"
