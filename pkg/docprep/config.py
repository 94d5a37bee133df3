"""
运行配置

YAML 文件 + 命令行覆盖，pydantic 校验。优先级：默认值 < 配置文件 < 命令行 < 环境变量（缓存目录）。
校验会收集全部违规项后一次性报 ConfigError。

示例见 fixtures/demo/run_config.yaml。
"""
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .cache import ReplayCache
from .chunk import ChunkParams
from .dense import DEFAULT_DIM, Embedder, HashingEmbedder, RemoteEmbedder
from .enhance import DEFAULT_MODEL_ID, DEFAULT_PROMPT_VERSION, PRESET_NAMES, EnhanceConfig, resolve_preset
from .errors import ConfigError
from .evalkit import AUGMENT_PROMPT_VERSION, DEFAULT_DEPTH, MatrixSettings, echo_responder
from .hybrid import FusionParams
from .providers import (HttpEmbeddingClient, HttpProviderClient, MockProviderClient, OfflineProviderClient,
                        ProviderClient, RateLimiter)
from .sparse import DEFAULT_B, DEFAULT_K1

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
CACHE_DIR_ENV = "DOCPREP_CACHE_DIR"
DEFAULT_API_KEY_ENV = "DOCPREP_API_KEY"


class ProviderMode(str, Enum):
    LIVE = "live"
    REPLAY_ONLY = "replay_only"
    MOCK = "mock"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsSection(_Section):
    """相对路径都相对于配置文件所在目录解析"""

    corpus: Path = Path("corpus")
    questions: Path = Path("questions.jsonl")
    lexicon: Path = Path("lexicon.txt")
    images: Optional[Path] = None
    seed_responses: Optional[Path] = None
    augment_seeds: Optional[Path] = None
    cache: Path = Path("cache")
    output: Path = Path("out")

    @property
    def enhance_cache(self) -> Path:
        return self.cache / "enhance"

    @property
    def augment_cache(self) -> Path:
        return self.cache / "augment"

    @property
    def embedding_cache(self) -> Path:
        return self.cache / "embeddings"

    @property
    def image_root(self) -> Path:
        return self.images if self.images is not None else self.corpus


class EnhanceFlags(_Section):
    use_vision: bool = True
    use_ocr_text: bool = True
    use_rewrite: bool = True


class EnhanceSection(_Section):
    preset: str = "FULL"
    presets: List[str] = Field(default_factory=lambda: list(PRESET_NAMES))
    # 显式开关，设置后覆盖 preset（配置名记为 CUSTOM）
    flags: Optional[EnhanceFlags] = None
    model_id: str = DEFAULT_MODEL_ID
    prompt_version: str = DEFAULT_PROMPT_VERSION
    augment_prompt_version: str = AUGMENT_PROMPT_VERSION
    max_retries: int = Field(default=3, ge=1, le=10)


class Bm25Section(_Section):
    k1: float = Field(default=DEFAULT_K1, ge=0)
    b: float = Field(default=DEFAULT_B, ge=0)


class EmbedderSection(_Section):
    backend: Literal["hashing", "remote"] = "hashing"
    dim: int = Field(default=DEFAULT_DIM, ge=1)
    model: str = "text-embedding-3-small"
    base_url: Optional[str] = None


class RetrievalSection(_Section):
    depth: int = Field(default=DEFAULT_DEPTH, ge=1)


class ProviderSection(_Section):
    mode: ProviderMode = ProviderMode.LIVE
    api_style: Literal["openai", "ollama"] = "openai"
    base_url: str = "http://localhost:8000"
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = Field(default=300, gt=0)
    temperature: float = Field(default=0.2, ge=0)
    top_p: float = Field(default=0.85, gt=0, le=1)
    max_tokens: int = Field(default=8192, ge=1)
    max_in_flight: int = Field(default=4, ge=1)
    min_interval: float = Field(default=0.0, ge=0)
    backoff_base: float = Field(default=1.0, ge=0)
    seed: Optional[int] = None


class OcrSection(_Section):
    engine_cmd: Optional[str] = None
    timeout: float = Field(default=300, gt=0)
    force: bool = False


class RunSection(_Section):
    # live 模式下调用模型的阶段（增强、增广、远程 embedding）实际并发为 min(workers, provider.max_in_flight)
    workers: int = Field(default=4, ge=1)
    repeats: int = Field(default=1, ge=1)


class RunConfig(_Section):
    schema_version: int = CONFIG_SCHEMA_VERSION
    paths: PathsSection = PathsSection()
    enhance: EnhanceSection = EnhanceSection()
    chunk: ChunkParams = ChunkParams()
    bm25: Bm25Section = Bm25Section()
    embedder: EmbedderSection = EmbedderSection()
    fusion: FusionParams = FusionParams()
    retrieval: RetrievalSection = RetrievalSection()
    provider: ProviderSection = ProviderSection()
    ocr: OcrSection = OcrSection()
    run: RunSection = RunSection()

    def enhance_configs(self) -> Dict[str, Optional[EnhanceConfig]]:
        """矩阵里要跑的配置，名称 -> EnhanceConfig（BASELINE 为 None）"""
        return {name.upper(): self.enhance_config(name) for name in self.enhance.presets}

    def enhance_config(self, name: Optional[str] = None) -> Optional[EnhanceConfig]:
        """name 为空时取单次增强用的配置：flags 优先，否则 preset"""
        common = dict(model_id=self.enhance.model_id, prompt_version=self.enhance.prompt_version,
                      max_retries=self.enhance.max_retries)
        if name is None and self.enhance.flags is not None:
            return EnhanceConfig(**self.enhance.flags.model_dump(), **common)
        return resolve_preset(name or self.enhance.preset, **common)

    @property
    def enhance_config_name(self) -> str:
        return "CUSTOM" if self.enhance.flags is not None else self.enhance.preset.upper()

    @property
    def provider_workers(self) -> int:
        """调用模型服务的阶段使用的线程数，live 模式下不超过 max_in_flight"""
        if self.provider.mode == ProviderMode.LIVE:
            return min(self.run.workers, self.provider.max_in_flight)
        return self.run.workers

    def matrix_settings(self) -> MatrixSettings:
        return MatrixSettings(chunk=self.chunk, k1=self.bm25.k1, b=self.bm25.b, fusion=self.fusion,
                              depth=self.retrieval.depth, workers=self.run.workers, repeats=self.run.repeats,
                              provider_workers=self.provider_workers, seed=self.provider.seed)

    def resolved(self) -> Dict[str, Any]:
        """写入报告的完整配置；只记录密钥环境变量名，不记录密钥"""
        return self.model_dump(mode="json")


# ===== 加载与校验 =====

def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def _as_number(value) -> Optional[float]:
    if isinstance(value, bool):
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


def _section(data: Dict[str, Any], name: str) -> Dict[str, Any]:
    value = data.get(name)
    return value if isinstance(value, dict) else {}


def _cross_field_violations(data: Dict[str, Any]) -> List[str]:
    """字段之间的约束；原始值无法转成数字时交给 pydantic 报错"""
    violations = []

    chunk = _section(data, "chunk")
    size = _as_number(chunk.get("chunk_size", ChunkParams().chunk_size))
    overlap = _as_number(chunk.get("overlap", ChunkParams().overlap))
    if size is not None and overlap is not None:
        if size < 1:
            violations.append(f"chunk.chunk_size 必须 >= 1 (当前 {chunk.get('chunk_size')})")
        if overlap < 0:
            violations.append(f"chunk.overlap 必须 >= 0 (当前 {chunk.get('overlap')})")
        elif overlap >= size:
            violations.append(f"chunk.overlap 必须小于 chunk.chunk_size (overlap={chunk.get('overlap')}, "
                              f"chunk_size={chunk.get('chunk_size', ChunkParams().chunk_size)})")

    enhance = _section(data, "enhance")
    flags = enhance.get("flags")
    if isinstance(flags, dict) and not (flags.get("use_vision", True) or flags.get("use_ocr_text", True)):
        violations.append("enhance.flags: use_vision 与 use_ocr_text 至少开启一个")
    names = enhance.get("presets", PRESET_NAMES)
    if isinstance(names, list):
        for name in names:
            if str(name).upper() not in PRESET_NAMES:
                violations.append(f"enhance.presets: 未知配置 {name!r}（可选: {', '.join(PRESET_NAMES)}）")
        if len({str(n).upper() for n in names}) != len(names):
            violations.append("enhance.presets: 配置名重复")
    preset = enhance.get("preset", "FULL")
    if str(preset).upper() not in PRESET_NAMES:
        violations.append(f"enhance.preset: 未知配置 {preset!r}")

    embedder = _section(data, "embedder")
    provider = _section(data, "provider")
    if embedder.get("backend") == "remote" and provider.get("mode") == ProviderMode.MOCK.value:
        violations.append("embedder.backend=remote 不能与 provider.mode=mock 同时使用")

    schema_version = data.get("schema_version", CONFIG_SCHEMA_VERSION)
    if schema_version != CONFIG_SCHEMA_VERSION:
        violations.append(f"schema_version 只支持 {CONFIG_SCHEMA_VERSION} (当前 {schema_version})")
    return violations


def _format_validation_error(err: ValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in err.errors()]


def _resolve_paths(paths: PathsSection, base_dir: Path) -> PathsSection:
    def resolve(p: Optional[Path]) -> Optional[Path]:
        if p is None:
            return None
        p = Path(os.path.expanduser(str(p)))
        return p if p.is_absolute() else base_dir / p

    return paths.model_copy(update={name: resolve(getattr(paths, name)) for name in PathsSection.model_fields})


def load_run_config(path=None, overrides: Optional[Dict[str, Any]] = None,
                    environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    加载运行配置

    Args:
        path: YAML 配置文件；None 表示全部用默认值（相对路径按当前目录解析）
        overrides: 命令行覆盖项，键为点分路径（如 "chunk.overlap"），值为 None 的项忽略
        environ: 环境变量（测试用，默认 os.environ）

    Returns:
        RunConfig，路径已解析为绝对路径

    Raises:
        ConfigError: 列出全部违规项
    """
    environ = os.environ if environ is None else environ
    data: Dict[str, Any] = {}
    base_dir = Path.cwd()

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"配置文件不存在: {path}"])
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError([f"配置文件解析失败 {path}: {e}"])
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError([f"配置文件顶层必须是映射: {path}"])
        data = loaded
        base_dir = path.resolve().parent

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)

    cache_override = environ.get(CACHE_DIR_ENV)
    if cache_override:
        _set_dotted(data, "paths.cache", cache_override)

    violations = _cross_field_violations(data)
    config = None
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as err:
        violations = _format_validation_error(err) + violations

    if violations:
        raise ConfigError(violations)

    config = config.model_copy(update={"paths": _resolve_paths(config.paths, base_dir)})
    logger.debug(f"配置加载完成: mode={config.provider.mode.value}, presets={config.enhance.presets}")
    return config


# ===== 组装 =====

def build_limiter(config: RunConfig) -> RateLimiter:
    return RateLimiter(config.provider.max_in_flight, config.provider.min_interval)


def build_provider_client(config: RunConfig, limiter: Optional[RateLimiter] = None) -> ProviderClient:
    """
    按 provider.mode 构建客户端

    - live: HTTP 客户端
    - replay_only: 离线客户端，任何调用都报 NetworkForbidden
    - mock: 回显 OCR 文本（增广时回显原始问题）的确定性客户端
    """
    provider = config.provider
    if provider.mode == ProviderMode.REPLAY_ONLY:
        return OfflineProviderClient()
    if provider.mode == ProviderMode.MOCK:
        return MockProviderClient(echo_responder)
    return HttpProviderClient(
        base_url=provider.base_url,
        api_style=provider.api_style,
        api_key_env=provider.api_key_env,
        timeout=provider.timeout,
        options={"temperature": provider.temperature, "top_p": provider.top_p, "max_tokens": provider.max_tokens},
        limiter=limiter or build_limiter(config),
        backoff_base=provider.backoff_base,
        seed=provider.seed,
    )


def build_caches(config: RunConfig) -> Tuple[ReplayCache, ReplayCache, ReplayCache]:
    """(增强缓存, 增广缓存, embedding 缓存)"""
    replay_only = config.provider.mode == ProviderMode.REPLAY_ONLY
    paths = config.paths
    return (ReplayCache(paths.enhance_cache, replay_only),
            ReplayCache(paths.augment_cache, replay_only),
            ReplayCache(paths.embedding_cache, replay_only))


def build_embedder(config: RunConfig, limiter: Optional[RateLimiter] = None) -> Embedder:
    section = config.embedder
    if section.backend == "hashing":
        return HashingEmbedder(section.dim)
    client = HttpEmbeddingClient(
        base_url=section.base_url or config.provider.base_url,
        model=section.model,
        api_key_env=config.provider.api_key_env,
        timeout=config.provider.timeout,
        limiter=limiter or build_limiter(config),
        max_retries=config.enhance.max_retries,
        backoff_base=config.provider.backoff_base,
    )
    return RemoteEmbedder(client, section.dim)


def embedding_cache_for(config: RunConfig, cache: ReplayCache) -> Optional[ReplayCache]:
    """本地哈希后端不需要缓存"""
    return cache if config.embedder.backend == "remote" else None

