"""
模型服务客户端

- HttpProviderClient: 调用 OpenAI 兼容接口 (/v1/chat/completions, vLLM / llama.cpp server 等)
  或 Ollama 接口 (/api/generate)，支持附带页面图片
- MockProviderClient: 确定性模拟客户端，单元测试用，记录调用次数
- OfflineProviderClient: replay_only 模式使用，任何调用都直接报错
- HttpEmbeddingClient: OpenAI 兼容 /v1/embeddings

所有 HTTP 请求共享同一个重试约定：最多 max_retries 次尝试，
429/5xx/超时/连接错误及其他传输异常指数退避（full jitter）后重试，其他 4xx 直接失败。
"""
import base64
import logging
import os
import random
import threading
import time
from typing import Callable, Dict, List, Optional, Protocol, Tuple

import requests
from pydantic import BaseModel, ConfigDict

from .errors import NetworkForbidden, ProviderTransportError

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {429}
_jitter = random.Random()


class PromptImage(BaseModel):
    model_config = ConfigDict(frozen=True)

    data: bytes
    media_type: str


class PromptRequest(BaseModel):
    """发送给模型的一次请求：system + user 文本，可选一张图片"""
    model_config = ConfigDict(frozen=True)

    system_text: str
    user_text: str
    image: Optional[PromptImage] = None
    sections: Tuple[str, ...] = ()

    def prompt_bytes(self) -> bytes:
        return (self.system_text + "\n\x00\n" + self.user_text).encode("utf-8")

    def image_bytes(self) -> bytes:
        return self.image.data if self.image is not None else b""


class ProviderClient(Protocol):
    def complete(self, request: PromptRequest, model_id: str, max_retries: int = 3) -> str:
        ...


class RateLimiter:
    """
    限制同时在途的请求数，并保证相邻两次请求的启动间隔不小于 min_interval 秒

    同一个服务的所有调用（增强、增广、embedding）应共享同一个实例。
    """

    def __init__(self, max_in_flight: int = 4, min_interval: float = 0.0):
        self.max_in_flight = max(1, max_in_flight)
        self.min_interval = min_interval
        self._sem = threading.BoundedSemaphore(self.max_in_flight)
        self._lock = threading.Lock()
        self._next_start = 0.0

    def __enter__(self):
        self._sem.acquire()
        if self.min_interval > 0:
            with self._lock:
                now = time.monotonic()
                wait = self._next_start - now
                self._next_start = max(now, self._next_start) + self.min_interval
            if wait > 0:
                time.sleep(wait)
        return self

    def __exit__(self, *exc):
        self._sem.release()
        return False


def _auth_headers(api_key_env: Optional[str]) -> Dict[str, str]:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(api_key_env) if api_key_env else None
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


def post_with_retries(url: str, payload: dict, *, headers: Dict[str, str], timeout: float,
                      max_retries: int = 3, backoff_base: float = 1.0,
                      limiter: Optional[RateLimiter] = None,
                      sleep: Callable[[float], None] = None) -> dict:
    """
    带重试的 POST 请求

    Args:
        url: 接口地址
        payload: JSON 请求体
        headers: 请求头（密钥只存在于这里，不写日志）
        timeout: 单次请求超时（秒）
        max_retries: 总尝试次数
        backoff_base: 第一次退避的上限秒数，之后每次翻倍
        limiter: 共享限流器

    Returns:
        解析后的 JSON 响应
    """
    sleep = sleep or time.sleep
    attempts = max(1, max_retries)
    last_error = "unknown"

    for attempt in range(attempts):
        try:
            if limiter is not None:
                with limiter:
                    response = requests.post(url, json=payload, headers=headers, timeout=timeout)
            else:
                response = requests.post(url, json=payload, headers=headers, timeout=timeout)
        except requests.exceptions.Timeout as err:
            last_error = f"超时: {err}"
        except requests.exceptions.ConnectionError as err:
            last_error = f"连接错误: {err}"
        except requests.exceptions.RequestException as err:
            last_error = f"请求错误: {err}"
        else:
            status = response.status_code
            if status in RETRYABLE_STATUS or status >= 500:
                last_error = f"HTTP {status}"
            elif status >= 400:
                raise ProviderTransportError(f"HTTP {status}（不重试）: {response.text[:200]}", status)
            else:
                try:
                    result = response.json()
                except ValueError:
                    raise ProviderTransportError(f"响应不是合法 JSON: {response.text[:200]}", status)
                if not isinstance(result, dict):
                    raise ProviderTransportError(f"响应不是 JSON 对象: {response.text[:200]}", status)
                return result

        if attempt < attempts - 1:
            delay = _jitter.uniform(0, backoff_base * (2 ** attempt))
            logger.warning(f"⚠ 第{attempt + 1}次请求失败 ({last_error})，{delay:.1f}秒后重试...")
            sleep(delay)

    raise ProviderTransportError(f"{attempts} 次尝试后仍失败: {last_error}")


class HttpProviderClient:
    """调用 HTTP 模型服务完成一次 prompt"""

    def __init__(self, base_url: str = "http://localhost:8000", api_style: str = "openai",
                 api_key_env: Optional[str] = "DOCPREP_API_KEY", timeout: float = 300,
                 options: Optional[dict] = None, limiter: Optional[RateLimiter] = None,
                 backoff_base: float = 1.0, seed: Optional[int] = None):
        if api_style not in ("openai", "ollama"):
            raise ValueError(f"不支持的 api_style: {api_style}")
        self.base_url = base_url.rstrip("/")
        self.api_style = api_style
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.limiter = limiter
        self.backoff_base = backoff_base
        self.seed = seed

        # 采样参数：低温度，输出更稳定
        self.options = {
            "temperature": 0.2,
            "top_p": 0.85,
            "max_tokens": 8192,
            "stop": [],
        }
        self.options.update(options or {})

    def _openai_payload(self, request: PromptRequest, model_id: str) -> Tuple[str, dict]:
        content = [{"type": "text", "text": request.user_text}]
        if request.image is not None:
            b64 = base64.b64encode(request.image.data).decode("ascii")
            content.append({
                "type": "image_url",
                "image_url": {"url": f"data:{request.image.media_type};base64,{b64}"},
            })
        payload = {
            "model": model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": content},
            ],
            "temperature": self.options["temperature"],
            "top_p": self.options["top_p"],
            "max_tokens": self.options["max_tokens"],
            "stream": False,
        }
        if self.options.get("stop"):
            payload["stop"] = self.options["stop"]
        if self.seed is not None:
            payload["seed"] = self.seed
        return f"{self.base_url}/v1/chat/completions", payload

    def _ollama_payload(self, request: PromptRequest, model_id: str) -> Tuple[str, dict]:
        options = {
            "temperature": self.options["temperature"],
            "top_p": self.options["top_p"],
            "num_predict": self.options["max_tokens"],
        }
        if self.options.get("stop"):
            options["stop"] = self.options["stop"]
        if self.seed is not None:
            options["seed"] = self.seed
        payload = {
            "model": model_id,
            "system": request.system_text,
            "prompt": request.user_text,
            "stream": False,
            "options": options,
        }
        if request.image is not None:
            payload["images"] = [base64.b64encode(request.image.data).decode("ascii")]
        return f"{self.base_url}/api/generate", payload

    def complete(self, request: PromptRequest, model_id: str, max_retries: int = 3) -> str:
        if self.api_style == "openai":
            url, payload = self._openai_payload(request, model_id)
        else:
            url, payload = self._ollama_payload(request, model_id)

        result = post_with_retries(
            url, payload,
            headers=_auth_headers(self.api_key_env),
            timeout=self.timeout,
            max_retries=max_retries,
            backoff_base=self.backoff_base,
            limiter=self.limiter,
        )

        if self.api_style == "ollama":
            return result.get("response", "") or ""

        choices = result.get("choices") or []
        if not choices:
            return ""
        content = (choices[0].get("message") or {}).get("content") or ""
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        return content


class MockProviderClient:
    """
    确定性模拟客户端

    Args:
        responder: PromptRequest -> 响应文本
    """

    def __init__(self, responder: Callable[[PromptRequest], str]):
        self.responder = responder
        self.requests: List[PromptRequest] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.requests)

    def complete(self, request: PromptRequest, model_id: str, max_retries: int = 3) -> str:
        with self._lock:
            self.requests.append(request)
        return self.responder(request)


class OfflineProviderClient:
    """replay_only 模式：只允许读缓存，调用即失败"""

    def __init__(self):
        self.attempts = 0

    def complete(self, request: PromptRequest, model_id: str, max_retries: int = 3) -> str:
        self.attempts += 1
        raise NetworkForbidden()


class HttpEmbeddingClient:
    """OpenAI 兼容 /v1/embeddings 客户端"""

    def __init__(self, base_url: str = "http://localhost:8000", model: str = "text-embedding-3-small",
                 api_key_env: Optional[str] = "DOCPREP_API_KEY", timeout: float = 120,
                 limiter: Optional[RateLimiter] = None, max_retries: int = 3, backoff_base: float = 1.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.limiter = limiter
        self.max_retries = max_retries
        self.backoff_base = backoff_base

    def embed(self, texts: List[str]) -> List[List[float]]:
        result = post_with_retries(
            f"{self.base_url}/v1/embeddings",
            {"model": self.model, "input": texts},
            headers=_auth_headers(self.api_key_env),
            timeout=self.timeout,
            max_retries=self.max_retries,
            backoff_base=self.backoff_base,
            limiter=self.limiter,
        )
        data = sorted(result.get("data") or [], key=lambda d: d.get("index", 0))
        if len(data) != len(texts):
            raise ProviderTransportError(f"embedding 返回 {len(data)} 条，期望 {len(texts)} 条")
        return [list(map(float, d["embedding"])) for d in data]
