import time

import numpy as np
import pytest
import requests

from config.settings import VLMConfig, VLMProvider
from models.base import PromptStyle
from utils.exceptions import ValidationError, VLMProtocolError, VLMTransportError
from utils.helpers import png_bytes
from utils.validators import validate_description
from utils.vlm_client import (
    AnthropicMessagesAdapter,
    HTTPVLMClient,
    OpenAIChatAdapter,
    PromptPayload,
    RateLimiter,
    StubVLMClient,
    VLMClient,
    build_prompt,
    is_refusal,
    make_client,
    request_batch,
    request_description,
)


def spot_png(row=5, col=5, size=64) -> bytes:
    pixels = np.full((size, size), 0.2)
    pixels[row - 1:row + 2, col - 1:col + 2] = 1.0
    return png_bytes(pixels)


@pytest.fixture
def payload():
    return build_prompt(spot_png(), PromptStyle.SYSTEM)


@pytest.fixture
def http_client(vlm_config):
    session = requests.Session()
    session.trust_env = False
    return HTTPVLMClient(vlm_config, session=session)


class TestHTTPClient:
    def test_success(self, http_client, payload, mock_vlm):
        response = request_description(http_client, payload)
        assert response.text == mock_vlm.DEFAULT_TEXT
        assert response.attempts == 1
        assert response.model_id == "mock-vision"
        assert not response.refused
        assert response.latency_ms >= 0

    def test_request_body(self, http_client, payload, mock_vlm):
        request_description(http_client, payload)
        body = mock_vlm.requests[0]['body']
        assert body['model'] == "mock-vision"
        system, user = body['messages']
        assert system['content'][0]['text'] == payload.system_role
        assert user['content'][0]['text'] == payload.task_text
        assert user['content'][1]['image_url']['url'] == f"data:image/png;base64,{payload.image_b64}"

    def test_retries_transient_errors(self, http_client, payload, mock_vlm):
        mock_vlm.push(503, {'error': 'busy'})
        mock_vlm.push(502, {'error': 'bad gateway'})
        response = request_description(http_client, payload)
        assert response.attempts == 3
        assert len(mock_vlm.requests) == 3

    def test_rate_limited_then_success(self, http_client, payload, mock_vlm):
        mock_vlm.push(429, {'error': 'slow down'})
        assert request_description(http_client, payload).attempts == 2

    def test_exhausted_retries(self, http_client, payload, mock_vlm):
        for _ in range(3):
            mock_vlm.push(500, {'error': 'down'})
        with pytest.raises(VLMTransportError, match="after 3 attempts"):
            request_description(http_client, payload)
        assert len(mock_vlm.requests) == 3

    def test_client_error_is_not_retried(self, http_client, payload, mock_vlm):
        mock_vlm.push(400, {'error': 'bad request'})
        with pytest.raises(VLMTransportError, match="HTTP 400"):
            request_description(http_client, payload)
        assert len(mock_vlm.requests) == 1

    def test_malformed_response(self, http_client, payload, mock_vlm):
        mock_vlm.push(200, {'unexpected': True})
        with pytest.raises(VLMProtocolError, match="malformed"):
            request_description(http_client, payload)

    def test_non_json_response(self, http_client, payload, mock_vlm):
        mock_vlm.push(200, "<html>gateway</html>")
        with pytest.raises(VLMProtocolError, match="not JSON"):
            request_description(http_client, payload)

    def test_refusal_is_flagged(self, http_client, payload, mock_vlm):
        mock_vlm.push_text("I am unable to do this task.")
        response = request_description(http_client, payload)
        assert response.refused
        assert response.text == "I am unable to do this task."

    def test_api_key_from_environment(self, vlm_config, payload, mock_vlm, monkeypatch):
        monkeypatch.setenv("LGNET_TEST_VLM_KEY", "secret-123")
        config = vlm_config.model_copy(update={'api_key_env': "LGNET_TEST_VLM_KEY"})
        session = requests.Session()
        session.trust_env = False
        request_description(HTTPVLMClient(config, session=session), payload)
        assert mock_vlm.requests[0]['headers']['Authorization'] == "Bearer secret-123"

    def test_invalid_payload_is_rejected(self, http_client, mock_vlm):
        broken = PromptPayload(style=PromptStyle.SYSTEM, system_role="", task_text="x", image_b64="###")
        with pytest.raises(ValidationError, match="invalid payload"):
            request_description(http_client, broken)
        assert mock_vlm.requests == []


class TestAnthropicAdapter:
    def test_body_layout(self, payload):
        body = AnthropicMessagesAdapter().body(payload, "claude-vision", 200)
        assert body['system'] == payload.system_role
        assert body['max_tokens'] == 200
        image, text = body['messages'][0]['content']
        assert image['source'] == {'type': 'base64', 'media_type': 'image/png', 'data': payload.image_b64}
        assert text['text'] == payload.task_text

    def test_few_shot_turns(self):
        payload = build_prompt(spot_png(), PromptStyle.FEW_SHOT,
                               few_shot_examples=[(spot_png(50, 50), "target in the lower right")])
        body = AnthropicMessagesAdapter().body(payload, "m", 100)
        assert 'system' not in body
        assert [m['role'] for m in body['messages']] == ['user', 'assistant', 'user']

    def test_parse(self):
        data = {'content': [{'type': 'text', 'text': ' upper left '}], 'usage': {'output_tokens': 2}}
        assert AnthropicMessagesAdapter().parse(data) == ("upper left", 2)

    def test_parse_malformed(self):
        with pytest.raises(VLMProtocolError):
            AnthropicMessagesAdapter().parse({'id': 'x'})

    def test_headers(self):
        headers = AnthropicMessagesAdapter().headers("k")
        assert headers['x-api-key'] == "k"
        assert 'anthropic-version' in headers

    def test_through_server(self, vlm_config, payload, mock_vlm):
        mock_vlm.push(200, {'content': [{'type': 'text', 'text': "Target in the lower right."}]})
        config = vlm_config.model_copy(update={'provider': VLMProvider.ANTHROPIC})
        session = requests.Session()
        session.trust_env = False
        response = request_description(HTTPVLMClient(config, session=session), payload)
        assert response.text == "Target in the lower right."
        assert 'system' in mock_vlm.requests[0]['body']


class TestOpenAIAdapter:
    def test_content_parts(self):
        data = {'choices': [{'message': {'content': [{'type': 'text', 'text': 'lower'}, {'type': 'text', 'text': 'left'}]}}]}
        assert OpenAIChatAdapter().parse(data)[0] == "lower left"

    def test_zero_shot_has_no_system_message(self):
        body = OpenAIChatAdapter().body(build_prompt(b"img", PromptStyle.ZERO_SHOT), "m", 10)
        assert [m['role'] for m in body['messages']] == ['user']


class TestStubClient:
    def test_deterministic(self, payload):
        a = request_description(StubVLMClient(VLMConfig(seed=1)), payload)
        b = request_description(StubVLMClient(VLMConfig(seed=1)), payload)
        assert a.text == b.text

    def test_describes_bright_region(self, payload):
        response = request_description(StubVLMClient(), payload)
        assert "upper left" in response.text
        assert validate_description(response.text).is_valid
        assert not response.refused

    def test_center(self):
        response = request_description(StubVLMClient(), build_prompt(spot_png(32, 32)))
        assert "the center region" in response.text

    def test_not_rate_limited(self):
        assert StubVLMClient().config.rate_limit_per_minute is None

    def test_make_client(self, vlm_config):
        assert isinstance(make_client(VLMConfig()), StubVLMClient)
        assert isinstance(make_client(vlm_config), HTTPVLMClient)


class TestRefusal:
    @pytest.mark.parametrize("text", [
        "I am unable to do this task.",
        "Sorry, I'm unable to identify objects.",
        "I AM UNABLE TO\nhelp",
    ])
    def test_refusals(self, text):
        assert is_refusal(text)

    def test_regular_answer(self):
        assert not is_refusal("The target is in the upper left region.")


class TestBatch:
    def test_in_flight_cap(self, http_client, mock_vlm):
        mock_vlm.delay = 0.1
        payloads = [(str(i), build_prompt(spot_png(5 + i, 5))) for i in range(8)]
        stats = request_batch(http_client, payloads, max_in_flight=2)
        assert len(stats.results) == 8
        assert all(r.response is not None for r in stats.results)
        assert stats.peak_in_flight <= 2
        assert mock_vlm.peak_in_flight <= 2

    def test_results_keep_input_order(self, http_client):
        payloads = [(f"id{i}", build_prompt(spot_png())) for i in range(5)]
        stats = request_batch(http_client, payloads, max_in_flight=3)
        assert [r.key for r in stats.results] == [f"id{i}" for i in range(5)]

    def test_failures_are_collected(self, http_client, mock_vlm):
        mock_vlm.push(400, {'error': 'bad'})
        seen = []
        payloads = [(str(i), build_prompt(spot_png())) for i in range(3)]
        stats = request_batch(http_client, payloads, max_in_flight=1, on_result=seen.append)
        assert stats.results[0].error is not None and "HTTP 400" in stats.results[0].error
        assert all(r.response is not None for r in stats.results[1:])
        assert len(seen) == 3


def test_rate_limiter_spacing():
    limiter = RateLimiter(per_minute=600)
    started = time.monotonic()
    for _ in range(4):
        limiter.wait()
    assert time.monotonic() - started >= 0.29


def test_rate_limiter_disabled():
    limiter = RateLimiter(None)
    started = time.monotonic()
    for _ in range(100):
        limiter.wait()
    assert time.monotonic() - started < 0.5


class _EchoClient(VLMClient):
    def complete(self, payload):
        return "The target is in the upper left region.", 8, 1


def test_batch_uses_client_rate_limit():
    client = _EchoClient(VLMConfig(rate_limit_per_minute=600))
    payloads = [(str(i), build_prompt(spot_png())) for i in range(4)]
    started = time.monotonic()
    stats = request_batch(client, payloads, max_in_flight=4)
    assert time.monotonic() - started >= 0.29
    assert all(r.response is not None for r in stats.results)
