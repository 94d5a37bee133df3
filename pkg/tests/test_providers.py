import pytest
import requests

from docprep.errors import NetworkForbidden, ProviderTransportError
from docprep.providers import (
    HttpEmbeddingClient, HttpProviderClient, MockProviderClient, OfflineProviderClient, PromptImage,
    PromptRequest, RateLimiter, post_with_retries,
)


class FakeResponse:
    def __init__(self, status_code=200, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text or str(payload)

    def json(self):
        if self._payload is None:
            raise ValueError("no json")
        return self._payload


def scripted_post(monkeypatch, outcomes):
    """按顺序返回 outcomes 中的响应或抛出其中的异常"""
    calls = []

    def _post(url, json=None, headers=None, timeout=None):
        calls.append({"url": url, "json": json, "headers": headers})
        outcome = outcomes[min(len(calls), len(outcomes)) - 1]
        if isinstance(outcome, Exception):
            raise outcome
        return outcome

    monkeypatch.setattr(requests, "post", _post)
    return calls


def make_request(image=False):
    return PromptRequest(system_text="sys", user_text="user",
                         image=PromptImage(data=b"\x89PNG", media_type="image/png") if image else None)


class TestPostWithRetries:
    def test_retries_then_succeeds(self, monkeypatch):
        calls = scripted_post(monkeypatch, [FakeResponse(503), FakeResponse(429), FakeResponse(200, {"ok": 1})])
        sleeps = []
        result = post_with_retries("http://x", {}, headers={}, timeout=1, max_retries=3, sleep=sleeps.append)
        assert result == {"ok": 1}
        assert len(calls) == 3
        assert len(sleeps) == 2
        assert 0 <= sleeps[0] <= 1.0 and 0 <= sleeps[1] <= 2.0

    def test_gives_up_after_max_attempts(self, monkeypatch):
        calls = scripted_post(monkeypatch, [requests.exceptions.Timeout("slow")])
        with pytest.raises(ProviderTransportError) as exc:
            post_with_retries("http://x", {}, headers={}, timeout=1, max_retries=3, sleep=lambda s: None)
        assert len(calls) == 3
        assert "超时" in str(exc.value)

    def test_client_error_is_not_retried(self, monkeypatch):
        calls = scripted_post(monkeypatch, [FakeResponse(401, text="unauthorized")])
        with pytest.raises(ProviderTransportError) as exc:
            post_with_retries("http://x", {}, headers={}, timeout=1, max_retries=5, sleep=lambda s: None)
        assert exc.value.status_code == 401
        assert len(calls) == 1

    def test_connection_error_retried(self, monkeypatch):
        calls = scripted_post(monkeypatch, [requests.exceptions.ConnectionError("down"), FakeResponse(200, {})])
        assert post_with_retries("http://x", {}, headers={}, timeout=1, sleep=lambda s: None) == {}
        assert len(calls) == 2

    def test_broken_body_is_wrapped(self, monkeypatch):
        calls = scripted_post(monkeypatch, [requests.exceptions.ChunkedEncodingError("connection broken mid-body")])
        with pytest.raises(ProviderTransportError) as exc:
            post_with_retries("http://x", {}, headers={}, timeout=1, max_retries=2, sleep=lambda s: None)
        assert len(calls) == 2
        assert "请求错误" in str(exc.value)

    def test_non_object_json_rejected(self, monkeypatch):
        scripted_post(monkeypatch, [FakeResponse(200, ["not", "a", "dict"])])
        with pytest.raises(ProviderTransportError) as exc:
            post_with_retries("http://x", {}, headers={}, timeout=1, sleep=lambda s: None)
        assert exc.value.status_code == 200


class TestHttpProviderClient:
    def test_openai_payload_with_image_and_seed(self, monkeypatch):
        calls = scripted_post(monkeypatch, [FakeResponse(200, {"choices": [{"message": {"content": "結果"}}]})])
        monkeypatch.setenv("TEST_KEY", "secret")
        client = HttpProviderClient(base_url="http://llm/", api_key_env="TEST_KEY", seed=7)
        assert client.complete(make_request(image=True), "m") == "結果"

        call = calls[0]
        assert call["url"] == "http://llm/v1/chat/completions"
        assert call["headers"]["Authorization"] == "Bearer secret"
        payload = call["json"]
        assert payload["model"] == "m"
        assert payload["seed"] == 7
        content = payload["messages"][1]["content"]
        assert content[0] == {"type": "text", "text": "user"}
        assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")

    def test_ollama_payload(self, monkeypatch):
        calls = scripted_post(monkeypatch, [FakeResponse(200, {"response": "好"})])
        client = HttpProviderClient(base_url="http://ollama", api_style="ollama", api_key_env=None)
        assert client.complete(make_request(image=True), "m") == "好"
        payload = calls[0]["json"]
        assert calls[0]["url"] == "http://ollama/api/generate"
        assert payload["system"] == "sys" and payload["prompt"] == "user"
        assert len(payload["images"]) == 1
        assert "Authorization" not in calls[0]["headers"]

    def test_empty_choices_yield_empty_text(self, monkeypatch):
        scripted_post(monkeypatch, [FakeResponse(200, {"choices": []})])
        assert HttpProviderClient().complete(make_request(), "m") == ""

    def test_unknown_api_style(self):
        with pytest.raises(ValueError):
            HttpProviderClient(api_style="grpc")


class TestOfflineAndMock:
    def test_offline_client_refuses(self):
        client = OfflineProviderClient()
        with pytest.raises(NetworkForbidden):
            client.complete(make_request(), "m")
        assert client.attempts == 1

    def test_mock_records_requests(self):
        client = MockProviderClient(lambda r: r.user_text.upper())
        assert client.complete(make_request(), "m") == "USER"
        assert client.calls == 1
        assert client.requests[0].system_text == "sys"


class TestEmbeddingClient:
    def test_orders_by_index(self, monkeypatch):
        data = [{"index": 1, "embedding": [0, 1]}, {"index": 0, "embedding": [1, 0]}]
        scripted_post(monkeypatch, [FakeResponse(200, {"data": data})])
        client = HttpEmbeddingClient(api_key_env=None)
        assert client.embed(["a", "b"]) == [[1.0, 0.0], [0.0, 1.0]]

    def test_count_mismatch(self, monkeypatch):
        scripted_post(monkeypatch, [FakeResponse(200, {"data": []})])
        with pytest.raises(ProviderTransportError):
            HttpEmbeddingClient(api_key_env=None).embed(["a"])


class TestRateLimiter:
    def test_bounds_concurrency(self):
        limiter = RateLimiter(max_in_flight=1)
        with limiter:
            assert not limiter._sem.acquire(blocking=False)
        assert limiter._sem.acquire(blocking=False)
        limiter._sem.release()
