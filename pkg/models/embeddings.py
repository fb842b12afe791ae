"""
Эмбеддинги текста и изображения и дескриптор цели TD = T_e + I_e
"""

import hashlib
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from config.settings import get_settings
from models.base import IRImage, LanguagePrior
from utils.exceptions import EmbeddingError, ShapeError

logger = logging.getLogger(__name__)


def _as_vector(values) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float32).reshape(-1)
    vector.setflags(write=False)
    return vector


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'vector', _as_vector(self.vector))

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True, eq=False)
class ImageEmbedding:
    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'vector', _as_vector(self.vector))

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True, eq=False)
class TargetDescriptor:
    """Дескриптор цели; has_language отмечает, вошел ли текстовый эмбеддинг"""

    vector: np.ndarray
    has_language: bool

    def __post_init__(self):
        object.__setattr__(self, 'vector', _as_vector(self.vector))

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def build_target_descriptor(
    image_emb: ImageEmbedding,
    text_emb: Optional[TextEmbedding] = None
) -> TargetDescriptor:
    """
    Поэлементное сложение эмбеддингов изображения и текста.
    Без текста дескриптор совпадает с эмбеддингом изображения, размерность сохраняется.

    Args:
        image_emb: Эмбеддинг изображения I_e
        text_emb: Эмбеддинг текста T_e или None

    Returns:
        TargetDescriptor
    """
    if text_emb is None:
        return TargetDescriptor(vector=image_emb.vector.copy(), has_language=False)

    if text_emb.dim != image_emb.dim:
        raise ShapeError(f"dimension mismatch: I_e {image_emb.dim}, T_e {text_emb.dim}")

    return TargetDescriptor(vector=image_emb.vector + text_emb.vector, has_language=True)


class EmbeddingProvider(ABC):
    """Интерфейс провайдера эмбеддингов f(T), g(I) в общем пространстве"""

    dim: int

    @abstractmethod
    def encode_text(self, prior: Union[LanguagePrior, str]) -> TextEmbedding:
        raise NotImplementedError

    @abstractmethod
    def encode_image(self, image: IRImage) -> ImageEmbedding:
        raise NotImplementedError

    def describe(self, image: IRImage, prior: Optional[LanguagePrior]) -> TargetDescriptor:
        """Дескриптор образца; prior=None дает дескриптор только по изображению"""
        text_emb = self.encode_text(prior) if prior is not None else None
        return build_target_descriptor(self.encode_image(image), text_emb)


class StubEmbeddingProvider(EmbeddingProvider):
    """
    Детерминированный провайдер без весов: хэш входа задает
    псевдослучайный единичный вектор
    """

    def __init__(self, seed: int = 0, dim: int = 512):
        if dim <= 0:
            raise EmbeddingError(f"dim должно быть положительным, получено {dim}")
        self.seed = seed
        self.dim = dim

    def _unit_vector(self, kind: bytes, payload: bytes) -> np.ndarray:
        digest = hashlib.sha256(
            self.seed.to_bytes(8, 'little', signed=True) + kind + b'\x00' + payload
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest, 'little'))
        vector = rng.standard_normal(self.dim)
        vector /= np.linalg.norm(vector)
        return vector.astype(np.float32)

    def encode_text(self, prior: Union[LanguagePrior, str]) -> TextEmbedding:
        text = prior.text if isinstance(prior, LanguagePrior) else str(prior)
        payload = " ".join(text.split()).encode('utf-8')
        return TextEmbedding(self._unit_vector(b'text', payload))

    def encode_image(self, image: IRImage) -> ImageEmbedding:
        pixels = np.ascontiguousarray(image.pixels, dtype=np.float32)
        payload = np.asarray(pixels.shape, dtype=np.int64).tobytes() + pixels.tobytes()
        return ImageEmbedding(self._unit_vector(b'image', payload))


def stub_provider(seed: int = 0, dim: int = 512) -> StubEmbeddingProvider:
    """Провайдер-заглушка для офлайн-тестов"""
    return StubEmbeddingProvider(seed=seed, dim=dim)


class ClipEmbeddingProvider(EmbeddingProvider):
    """
    Замороженный предобученный CLIP (transformers).
    Доступ к модели сериализуется блокировкой.
    """

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise EmbeddingError(f"transformers недоступен для модели {model_id}: {e}") from e

        try:
            self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self.processor = CLIPProcessor.from_pretrained(model_id)
        except (OSError, ValueError) as e:
            raise EmbeddingError(f"missing weights for model '{model_id}': {e}") from e

        self._torch = torch
        self._lock = threading.Lock()
        self.model_id = model_id
        self.device = device
        self.dim = int(self.model.config.projection_dim)
        logger.info(f"Загружена модель эмбеддингов {model_id} (dim={self.dim}, device={device})")

    def _finite(self, vector: np.ndarray, what: str) -> np.ndarray:
        if not np.all(np.isfinite(vector)):
            raise EmbeddingError(f"{self.model_id}: нечисловой {what} эмбеддинг")
        return vector

    def encode_text(self, prior: Union[LanguagePrior, str]) -> TextEmbedding:
        text = prior.text if isinstance(prior, LanguagePrior) else str(prior)
        with self._lock, self._torch.no_grad():
            inputs = self.processor(text=[text], return_tensors="pt", padding=True, truncation=True)
            inputs = {key: value.to(self.device) for key, value in inputs.items()}
            features = self.model.get_text_features(**inputs)
        return TextEmbedding(self._finite(features[0].float().cpu().numpy(), "текстовый"))

    def encode_image(self, image: IRImage) -> ImageEmbedding:
        from PIL import Image

        from utils.helpers import to_uint8

        try:
            rgb = Image.fromarray(to_uint8(image.pixels)).convert('RGB')
            with self._lock, self._torch.no_grad():
                inputs = self.processor(images=rgb, return_tensors="pt")
                features = self.model.get_image_features(pixel_values=inputs['pixel_values'].to(self.device))
        except (ValueError, TypeError) as e:
            raise EmbeddingError(f"image preprocessing failed for '{image.id}': {e}") from e
        return ImageEmbedding(self._finite(features[0].float().cpu().numpy(), "image"))


def pretrained_provider(model_id: Optional[str] = None, device: str = "cpu") -> ClipEmbeddingProvider:
    """
    Провайдер на основе предобученного CLIP

    Args:
        model_id: Идентификатор модели или локальный путь
        device: Устройство

    Returns:
        ClipEmbeddingProvider
    """
    return ClipEmbeddingProvider(model_id or get_settings().PRETRAINED_MODEL_ID, device)


def make_provider(name: str, seed: int = 0, dim: int = 512, model_id: Optional[str] = None,
                  device: str = "cpu") -> EmbeddingProvider:
    """Выбор провайдера по имени (stub или clip)"""
    if name == "stub":
        return stub_provider(seed=seed, dim=dim)
    if name == "clip":
        return pretrained_provider(model_id, device)
    raise EmbeddingError(f"unknown embedding provider: {name}")
