"""
Клиент VLM: построение запросов, отправка с повторами, пакетный режим
"""

import logging
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import requests
from skimage import filters
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from config.settings import PROMPT_TEMPLATES, VLMConfig, VLMProvider, get_settings
from models.base import PromptStyle
from utils.exceptions import ValidationError, VLMProtocolError, VLMTransportError
from utils.helpers import decode_image_base64, encode_image_base64, is_valid_base64, read_png, truncate_text

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptPayload:
    """Запрос к VLM"""

    style: PromptStyle
    system_role: str
    task_text: str
    image_b64: str
    few_shot_examples: Tuple[Tuple[str, str], ...] = ()
    max_words: Optional[int] = 50
    media_type: str = "image/png"


@dataclass
class VLMResponse:
    """Ответ VLM"""

    text: str
    token_count: int
    latency_ms: float
    model_id: str
    refused: bool
    attempts: int = 1


class _TransientError(Exception):
    """Ошибка, после которой имеет смысл повторить запрос"""


def build_prompt(
    image_bytes: bytes,
    style: PromptStyle = PromptStyle.SYSTEM,
    max_words: Optional[int] = 50,
    few_shot_examples: Optional[Sequence[Tuple[bytes, str]]] = None,
    plural_targets: bool = False
) -> PromptPayload:
    """
    Сборка запроса по шаблонам

    Args:
        image_bytes: Байты изображения (PNG)
        style: system, few_shot или zero_shot
        max_words: Лимит слов в ответе; None - вариант без ограничения
        few_shot_examples: Пары (байты изображения, описание) для few_shot
        plural_targets: Форма "targets" (только для абляции, вызывает галлюцинации)

    Returns:
        PromptPayload
    """
    style = PromptStyle(style)
    target = "targets" if plural_targets else "target"
    image_b64 = encode_image_base64(image_bytes)

    if style == PromptStyle.ZERO_SHOT:
        return PromptPayload(
            style=style,
            system_role="",
            task_text=PROMPT_TEMPLATES['zero_shot'].format(target=target),
            image_b64=image_b64,
            max_words=max_words,
        )

    if max_words is None:
        task_text = PROMPT_TEMPLATES['task_unlimited'].format(target=target)
    else:
        task_text = PROMPT_TEMPLATES['task'].format(target=target, max_words=max_words)

    examples: Tuple[Tuple[str, str], ...] = ()
    system_role = PROMPT_TEMPLATES['system_role'].format(target=target)
    if style == PromptStyle.FEW_SHOT:
        if not few_shot_examples:
            raise ValidationError("few_shot: нужен хотя бы один пример")
        examples = tuple((encode_image_base64(img), text) for img, text in few_shot_examples)
        system_role = ""

    return PromptPayload(
        style=style,
        system_role=system_role,
        task_text=task_text,
        image_b64=image_b64,
        few_shot_examples=examples,
        max_words=max_words,
    )


def validate_payload(payload: PromptPayload) -> List[str]:
    """Проверка инвариантов запроса"""
    errors = []
    if not is_valid_base64(payload.image_b64):
        errors.append("image_b64 is not valid base64")
    if payload.style == PromptStyle.SYSTEM and not payload.system_role:
        errors.append("system_role required for system style")
    if (payload.style == PromptStyle.FEW_SHOT) != bool(payload.few_shot_examples):
        errors.append("few_shot_examples must be non-empty iff style is few_shot")
    return errors


def is_refusal(text: str, phrases: Optional[Sequence[str]] = None) -> bool:
    """Ответ является отказом, если содержит одну из фраз"""
    phrases = phrases if phrases is not None else get_settings().REFUSAL_PHRASES
    lowered = " ".join(text.lower().split())
    return any(phrase.lower() in lowered for phrase in phrases)


# ============== АДАПТЕРЫ ПРОТОКОЛОВ ==============

class ChatAdapter(ABC):
    """Преобразование запроса в тело HTTP и разбор ответа"""

    @abstractmethod
    def headers(self, api_key: Optional[str]) -> Dict[str, str]:
        raise NotImplementedError

    @abstractmethod
    def body(self, payload: PromptPayload, model_id: str, max_tokens: int) -> Dict[str, Any]:
        raise NotImplementedError

    @abstractmethod
    def parse(self, data: Dict[str, Any]) -> Tuple[str, int]:
        raise NotImplementedError


class OpenAIChatAdapter(ChatAdapter):
    """Формат chat-completion: {model, messages: [{role, content: [...]}]}"""

    def headers(self, api_key: Optional[str]) -> Dict[str, str]:
        headers = {'Content-Type': 'application/json'}
        if api_key:
            headers['Authorization'] = f"Bearer {api_key}"
        return headers

    def _image(self, b64: str, media_type: str) -> Dict[str, Any]:
        return {'type': 'image_url', 'image_url': {'url': f"data:{media_type};base64,{b64}"}}

    def body(self, payload: PromptPayload, model_id: str, max_tokens: int) -> Dict[str, Any]:
        messages = []
        if payload.system_role:
            messages.append({'role': 'system', 'content': [{'type': 'text', 'text': payload.system_role}]})
        for example_b64, description in payload.few_shot_examples:
            messages.append({'role': 'user', 'content': [
                {'type': 'text', 'text': payload.task_text},
                self._image(example_b64, payload.media_type),
            ]})
            messages.append({'role': 'assistant', 'content': [{'type': 'text', 'text': description}]})
        messages.append({'role': 'user', 'content': [
            {'type': 'text', 'text': payload.task_text},
            self._image(payload.image_b64, payload.media_type),
        ]})
        return {'model': model_id, 'messages': messages, 'max_tokens': max_tokens}

    def parse(self, data: Dict[str, Any]) -> Tuple[str, int]:
        try:
            content = data['choices'][0]['message']['content']
        except (KeyError, IndexError, TypeError) as e:
            raise VLMProtocolError(f"malformed chat-completion response: {e!r}") from e
        if isinstance(content, list):
            content = " ".join(part.get('text', '') for part in content if isinstance(part, dict))
        if not isinstance(content, str):
            raise VLMProtocolError("malformed chat-completion response: content is not text")
        usage = data.get('usage') or {}
        tokens = usage.get('completion_tokens', len(content.split()))
        return content.strip(), int(tokens)


class AnthropicMessagesAdapter(ChatAdapter):
    """Формат messages: system отдельно, изображения как base64 source"""

    def headers(self, api_key: Optional[str]) -> Dict[str, str]:
        headers = {'Content-Type': 'application/json', 'anthropic-version': '2023-06-01'}
        if api_key:
            headers['x-api-key'] = api_key
        return headers

    def _image(self, b64: str, media_type: str) -> Dict[str, Any]:
        return {'type': 'image', 'source': {'type': 'base64', 'media_type': media_type, 'data': b64}}

    def body(self, payload: PromptPayload, model_id: str, max_tokens: int) -> Dict[str, Any]:
        messages = []
        for example_b64, description in payload.few_shot_examples:
            messages.append({'role': 'user', 'content': [
                self._image(example_b64, payload.media_type),
                {'type': 'text', 'text': payload.task_text},
            ]})
            messages.append({'role': 'assistant', 'content': [{'type': 'text', 'text': description}]})
        messages.append({'role': 'user', 'content': [
            self._image(payload.image_b64, payload.media_type),
            {'type': 'text', 'text': payload.task_text},
        ]})
        body = {'model': model_id, 'messages': messages, 'max_tokens': max_tokens}
        if payload.system_role:
            body['system'] = payload.system_role
        return body

    def parse(self, data: Dict[str, Any]) -> Tuple[str, int]:
        try:
            parts = data['content']
            text = " ".join(part['text'] for part in parts if part.get('type') == 'text')
        except (KeyError, TypeError) as e:
            raise VLMProtocolError(f"malformed messages response: {e!r}") from e
        usage = data.get('usage') or {}
        return text.strip(), int(usage.get('output_tokens', len(text.split())))


ADAPTERS = {
    VLMProvider.OPENAI: OpenAIChatAdapter,
    VLMProvider.ANTHROPIC: AnthropicMessagesAdapter,
}


# ============== КЛИЕНТЫ ==============

class VLMClient(ABC):
    """Базовый клиент VLM"""

    def __init__(self, config: VLMConfig):
        self.config = config

    @property
    def model_id(self) -> str:
        return self.config.model_id

    @abstractmethod
    def complete(self, payload: PromptPayload) -> Tuple[str, int, int]:
        """
        Выполнение запроса

        Returns:
            (текст, число токенов, число попыток)
        """
        raise NotImplementedError


class HTTPVLMClient(VLMClient):
    """HTTP клиент с экспоненциальными повторами при временных ошибках"""

    RETRY_STATUSES = {408, 409, 425, 429, 500, 502, 503, 504}

    def __init__(self, config: VLMConfig, adapter: Optional[ChatAdapter] = None,
                 session: Optional[requests.Session] = None):
        super().__init__(config)
        self.adapter = adapter or ADAPTERS[config.provider]()
        self.session = session or requests.Session()

    def _post(self, body: Dict[str, Any]) -> Dict[str, Any]:
        try:
            response = self.session.post(
                self.config.endpoint,
                json=body,
                headers=self.adapter.headers(self.config.get_api_key()),
                timeout=self.config.timeout_seconds,
            )
        except (requests.ConnectionError, requests.Timeout) as e:
            raise _TransientError(f"{type(e).__name__}: {e}") from e

        if response.status_code in self.RETRY_STATUSES:
            raise _TransientError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise VLMTransportError(f"HTTP {response.status_code}: {response.text[:200]}")

        try:
            return response.json()
        except ValueError as e:
            raise VLMProtocolError(f"response is not JSON: {response.text[:200]!r}") from e

    def complete(self, payload: PromptPayload) -> Tuple[str, int, int]:
        body = self.adapter.body(payload, self.config.model_id, self.config.max_tokens)
        retrying = Retrying(
            stop=stop_after_attempt(self.config.max_attempts),
            wait=wait_exponential(multiplier=self.config.backoff_seconds, max=self.config.backoff_max_seconds),
            retry=retry_if_exception_type(_TransientError),
            reraise=False,
        )

        attempts = 0
        try:
            for attempt in retrying:
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    if attempts > 1:
                        logger.warning(f"Повтор запроса к VLM, попытка {attempts}")
                    data = self._post(body)
        except RetryError as e:
            cause = e.last_attempt.exception()
            raise VLMTransportError(
                f"VLM unavailable after {attempts} attempts: {cause}"
            ) from cause

        text, tokens = self.adapter.parse(data)
        return text, tokens, attempts


class StubVLMClient(VLMClient):
    """
    Офлайн-клиент: находит самую яркую область изображения и возвращает
    шаблонное описание; детерминирован по seed и изображению
    """

    OPENINGS = (
        "The small target is located in",
        "A faint small target appears in",
        "The small target can be seen in",
    )

    def __init__(self, config: Optional[VLMConfig] = None):
        config = config or VLMConfig(provider=VLMProvider.STUB, model_id="stub")
        # Офлайн-клиент не ограничивается по частоте
        super().__init__(config.model_copy(update={'rate_limit_per_minute': None}))

    def complete(self, payload: PromptPayload) -> Tuple[str, int, int]:
        pixels = read_png(decode_image_base64(payload.image_b64))
        smooth = filters.gaussian(pixels.astype(np.float64), sigma=1.5)
        row, col = np.unravel_index(int(np.argmax(smooth)), smooth.shape)
        h, w = smooth.shape

        vertical = 'upper' if row < h / 3 else ('lower' if row >= 2 * h / 3 else 'center')
        horizontal = 'left' if col < w / 3 else ('right' if col >= 2 * w / 3 else 'center')
        region = " ".join(dict.fromkeys((vertical, horizontal)))

        digest = int(np.frombuffer(pixels.tobytes()[:8].ljust(8, b'\0'), dtype=np.uint64)[0] % 997)
        rng = np.random.default_rng(self.config.seed * 1000003 + digest)
        opening = self.OPENINGS[int(rng.integers(len(self.OPENINGS)))]

        text = f"{opening} the {region} region of the infrared image, appearing as a small bright spot."
        return text, len(text.split()), 1


def make_client(config: VLMConfig) -> VLMClient:
    """Клиент по конфигурации"""
    if config.provider == VLMProvider.STUB:
        return StubVLMClient(config)
    return HTTPVLMClient(config)


def request_description(client: VLMClient, payload: PromptPayload) -> VLMResponse:
    """
    Получение описания цели от VLM

    Args:
        client: Клиент
        payload: Запрос

    Returns:
        VLMResponse с отметкой об отказе
    """
    errors = validate_payload(payload)
    if errors:
        raise ValidationError("invalid payload: " + "; ".join(errors))

    started = time.perf_counter()
    text, tokens, attempts = client.complete(payload)
    latency_ms = (time.perf_counter() - started) * 1000.0

    refused = is_refusal(text, client.config.refusal_phrases)
    if refused:
        logger.warning(f"VLM отказался отвечать: {truncate_text(text, 80)!r}")

    return VLMResponse(
        text=text,
        token_count=tokens,
        latency_ms=latency_ms,
        model_id=client.model_id,
        refused=refused,
        attempts=attempts,
    )


class RateLimiter:
    """Минимальный интервал между запусками запросов"""

    def __init__(self, per_minute: Optional[int]):
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.interval
        delay = start - now
        if delay > 0:
            time.sleep(delay)


@dataclass
class BatchResult:
    """Результат одного запроса пакета"""

    key: str
    response: Optional[VLMResponse] = None
    error: Optional[str] = None


@dataclass
class BatchStats:
    peak_in_flight: int = 0
    results: List[BatchResult] = field(default_factory=list)


def request_batch(
    client: VLMClient,
    payloads: Sequence[Tuple[str, PromptPayload]],
    max_in_flight: Optional[int] = None,
    rate_limit_per_minute: Optional[int] = None,
    on_result: Optional[Callable[[BatchResult], None]] = None
) -> BatchStats:
    """
    Пакетная генерация с ограничением числа одновременных запросов

    Args:
        client: Клиент
        payloads: Пары (ключ, запрос)
        max_in_flight: Максимум одновременных запросов
        rate_limit_per_minute: Ограничение частоты (по умолчанию из конфигурации клиента)
        on_result: Обработчик каждого результата

    Returns:
        BatchStats с результатами в порядке входа
    """
    max_in_flight = max_in_flight or client.config.max_in_flight
    if rate_limit_per_minute is None:
        rate_limit_per_minute = client.config.rate_limit_per_minute
    limiter = RateLimiter(rate_limit_per_minute)
    stats = BatchStats()
    lock = threading.Lock()
    in_flight = 0

    def run(item: Tuple[str, PromptPayload]) -> BatchResult:
        nonlocal in_flight
        key, payload = item
        limiter.wait()
        with lock:
            in_flight += 1
            stats.peak_in_flight = max(stats.peak_in_flight, in_flight)
        try:
            result = BatchResult(key=key, response=request_description(client, payload))
        except (VLMTransportError, VLMProtocolError, ValidationError) as e:
            logger.error(f"Ошибка генерации описания для {key}: {e}")
            result = BatchResult(key=key, error=str(e))
        finally:
            with lock:
                in_flight -= 1
        if on_result is not None:
            on_result(result)
        return result

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        stats.results = list(pool.map(run, payloads))

    return stats
