"""
Вспомогательные функции: base64, PNG, статистика слов, форматирование
"""

import base64
import binascii
import io
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Union

import numpy as np
from PIL import Image

from config.settings import get_settings
from models.base import LanguagePrior
from utils.exceptions import ValidationError
from utils.validators import tokenize

logger = logging.getLogger(__name__)

# ============== BASE64 ==============

def encode_image_base64(image_bytes: bytes) -> str:
    """
    Кодирование байтов изображения в стандартный base64 с выравниванием

    Args:
        image_bytes: Байты изображения

    Returns:
        Строка base64
    """
    if not image_bytes:
        raise ValidationError("empty input: нечего кодировать")
    return base64.b64encode(bytes(image_bytes)).decode('ascii')


def decode_image_base64(encoded: str) -> bytes:
    """Обратное преобразование base64 с проверкой корректности"""
    try:
        return base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError) as e:
        raise ValidationError(f"invalid base64: {e}") from e


def is_valid_base64(encoded: str) -> bool:
    try:
        decode_image_base64(encoded)
        return bool(encoded)
    except ValidationError:
        return False


# ============== PNG ==============

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Квантование интенсивностей [0, 1] в 8 бит"""
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Привязка интенсивностей к 8-битной сетке (то, что переживает запись в PNG)"""
    return (to_uint8(pixels).astype(np.float32) / 255.0).astype(np.float32)


def png_bytes(pixels: np.ndarray, binary: bool = False) -> bytes:
    """
    Кодирование одноканального массива в PNG

    Args:
        pixels: Интенсивности [0, 1] или бинарная маска
        binary: Маска записывается как 0/255

    Returns:
        Байты PNG
    """
    if binary:
        data = (np.asarray(pixels) > 0).astype(np.uint8) * 255
    else:
        data = to_uint8(pixels)
    buffer = io.BytesIO()
    Image.fromarray(data).save(buffer, format="PNG")
    return buffer.getvalue()


def read_png(data: Union[bytes, str], binary: bool = False) -> np.ndarray:
    """
    Чтение одноканального PNG

    Args:
        data: Байты PNG или путь к файлу
        binary: Вернуть бинарную маску

    Returns:
        float32 [0, 1] или uint8 {0, 1}
    """
    source = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    with Image.open(source) as img:
        if img.mode in ('I;16', 'I;16B', 'I'):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
            arr = np.rint(arr * 255.0)
        else:
            arr = np.asarray(img.convert('L'), dtype=np.float64)
    if binary:
        return (arr > 127).astype(np.uint8)
    return (arr / 255.0).astype(np.float32)


# ============== СТАТИСТИКА СЛОВ ==============

@dataclass(frozen=True)
class CountTable:
    """Частоты позиционных слов"""

    left: int = 0
    right: int = 0
    center: int = 0
    lower: int = 0
    upper: int = 0

    def __add__(self, other: 'CountTable') -> 'CountTable':
        return CountTable(**{key: value + getattr(other, key) for key, value in asdict(self).items()})

    def as_dict(self) -> Dict[str, int]:
        return asdict(self)


def word_count_stats(descriptions: Iterable[Union[LanguagePrior, str]]) -> CountTable:
    """
    Подсчет позиционных слов (left, right, center, lower, upper) по корпусу.
    Регистр не учитывается, считается каждое вхождение токена.

    Args:
        descriptions: Описания

    Returns:
        CountTable
    """
    keywords = get_settings().POSITIONAL_KEYWORDS
    counts = dict.fromkeys(keywords, 0)

    for item in descriptions:
        if item is None:
            continue
        text = item.text if isinstance(item, LanguagePrior) else str(item)
        for token in tokenize(text):
            if token in counts:
                counts[token] += 1

    return CountTable(**counts)


# ============== ФОРМАТИРОВАНИЕ ==============

def format_metric(value: float, scale: float = 1.0, digits: int = 2) -> str:
    """
    Форматирование значения метрики

    Args:
        value: Значение
        scale: Масштаб (например, 1e-6 для Fa, 0.01 для процентов)
        digits: Знаков после запятой

    Returns:
        Строка
    """
    if value is None or not np.isfinite(value):
        return "n/a"
    return f"{value / scale:.{digits}f}"


def format_duration(seconds: float) -> str:
    """Форматирование длительности"""
    if seconds < 60:
        return f"{seconds:.1f} с"
    minutes, sec = divmod(int(seconds), 60)
    hours, minutes = divmod(minutes, 60)
    if hours:
        return f"{hours} ч {minutes} мин"
    return f"{minutes} мин {sec} с"


def truncate_text(text: str, max_length: int = 100, suffix: str = "...") -> str:
    """
    Обрезка текста до указанной длины

    Args:
        text: Исходный текст
        max_length: Максимальная длина
        suffix: Суффикс для обрезанного текста

    Returns:
        Обрезанный текст
    """
    if not text or len(text) <= max_length:
        return text or ""
    return text[:max_length - len(suffix)] + suffix
