"""
Общие фикстуры тестов
"""

import json
import threading
import time
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import List, Optional, Tuple

import numpy as np
import pytest

from config.settings import TrainConfig, VLMConfig, VLMProvider
from models.base import IRImage, Sample, Split, TargetMask
from models.embeddings import stub_provider
from models.lgnet import LGNetConfig
from utils.synthetic import SceneParams, synth_description, synth_scene

# Миниатюрные сети: высоты U-блоков подобраны под разрешение стадий
TINY_STAGES = [8, 8, 16, 16, 16]
TINY_HEIGHTS = [4, 3, 3, 2, 2]
TINY_DIM = 16
TINY_SIZE = (32, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config() -> LGNetConfig:
    return LGNetConfig(
        stage_channels=TINY_STAGES,
        ublock_heights=TINY_HEIGHTS,
        descriptor_dim=TINY_DIM,
        input_size=TINY_SIZE,
        seed=0,
    )


@pytest.fixture
def grad_config() -> LGNetConfig:
    return LGNetConfig(
        stage_channels=[4, 4, 8, 8, 8],
        ublock_heights=[4, 3, 2, 1, 1],
        descriptor_dim=8,
        input_size=(16, 16),
        seed=0,
    )


@pytest.fixture
def tiny_provider():
    return stub_provider(seed=0, dim=TINY_DIM)


@pytest.fixture
def train_config(tmp_path) -> TrainConfig:
    return TrainConfig(
        epochs=2,
        batch_size=2,
        warmup_epochs=1,
        input_size=TINY_SIZE,
        stage_channels=TINY_STAGES,
        ublock_heights=TINY_HEIGHTS,
        descriptor_dim=TINY_DIM,
        checkpoint_dir=tmp_path / "checkpoints",
        seed=0,
    )


def make_samples(n: int, size: Tuple[int, int] = TINY_SIZE, split: Split = Split.TRAIN,
                 seed: int = 0) -> List[Sample]:
    samples = []
    for i in range(n):
        image, mask = synth_scene(SceneParams(image_size=size, rng_seed=seed * 1000 + i), image_id=str(i))
        samples.append(Sample(image=image, mask=mask, prior=synth_description(mask), split=split))
    return samples


@pytest.fixture
def synth_samples():
    return make_samples


def blob_mask(shape: Tuple[int, int], center: Tuple[int, int], radius: int = 1) -> TargetMask:
    """Квадратное пятно (2r+1)x(2r+1) с центром center"""
    pixels = np.zeros(shape, dtype=np.uint8)
    r, c = center
    pixels[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1] = 1
    return TargetMask(pixels)


@pytest.fixture
def blob():
    return blob_mask


@pytest.fixture
def flat_image():
    def make(shape=(64, 64), value=0.5, image_id="img"):
        return IRImage(np.full(shape, value, dtype=np.float32), image_id)
    return make


@pytest.fixture
def dataset_root(tmp_path):
    """Синтетический набор LangIR 32x32: 4 train, 2 test"""
    from pipeline.cli import synth_dataset

    root = tmp_path / "langir"
    synth_dataset(root, n=6, seed=3, size=TINY_SIZE, test_fraction=1 / 3)
    return root


# ============== MOCK VLM SERVER ==============

def chat_body(text: str) -> dict:
    return {
        'choices': [{'message': {'role': 'assistant', 'content': text}}],
        'usage': {'completion_tokens': len(text.split())},
    }


class MockVLMServer:
    """Локальный HTTP сервер с очередью заготовленных ответов"""

    DEFAULT_TEXT = "The small target is located in the upper left region of the infrared image."

    def __init__(self):
        self.responses = deque()
        self.requests: List[dict] = []
        self.delay = 0.0
        self.in_flight = 0
        self.peak_in_flight = 0
        self._lock = threading.Lock()
        self._server: Optional[ThreadingHTTPServer] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1/chat/completions"

    def push(self, status: int, body):
        self.responses.append((status, body))

    def push_text(self, text: str):
        self.push(200, chat_body(text))

    def _next(self):
        with self._lock:
            if self.responses:
                return self.responses.popleft()
        return 200, chat_body(self.DEFAULT_TEXT)

    def start(self):
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get('Content-Length', 0))
                payload = json.loads(self.rfile.read(length) or b'{}')
                with mock._lock:
                    mock.requests.append({'headers': dict(self.headers), 'body': payload})
                    mock.in_flight += 1
                    mock.peak_in_flight = max(mock.peak_in_flight, mock.in_flight)
                try:
                    if mock.delay:
                        time.sleep(mock.delay)
                    status, body = mock._next()
                    raw = body.encode('utf-8') if isinstance(body, str) else json.dumps(body).encode('utf-8')
                    self.send_response(status)
                    self.send_header('Content-Type', 'application/json')
                    self.send_header('Content-Length', str(len(raw)))
                    self.end_headers()
                    self.wfile.write(raw)
                finally:
                    with mock._lock:
                        mock.in_flight -= 1

            def log_message(self, format, *args):
                pass

        self._server = ThreadingHTTPServer(('127.0.0.1', 0), Handler)
        self._server.daemon_threads = True
        threading.Thread(target=self._server.serve_forever, daemon=True).start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def mock_vlm():
    server = MockVLMServer().start()
    yield server
    server.stop()


@pytest.fixture
def vlm_config(mock_vlm) -> VLMConfig:
    return VLMConfig(
        provider=VLMProvider.OPENAI,
        endpoint=mock_vlm.url,
        model_id="mock-vision",
        max_attempts=3,
        backoff_seconds=0.0,
        backoff_max_seconds=0.0,
        timeout_seconds=5.0,
        rate_limit_per_minute=None,
    )
