"""
Валидаторы для проверки данных
"""

import logging
import re
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence

import numpy as np

from config.settings import get_settings
from models.base import IRImage, PriorSource, Sample, Split, TargetMask, ValidationReport, count_words
from utils.exceptions import ValidationError

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z]+")


def _format_shape(shape: Sequence[int]) -> str:
    return "x".join(str(side) for side in shape) or "scalar"


class BaseValidator:
    """Базовый класс для валидаторов"""

    def __init__(self, required: bool = False):
        self.required = required
        self.errors = []

    def validate(self, value: Any) -> bool:
        """
        Метод валидации (переопределяется в дочерних классах)

        Args:
            value: Значение для проверки

        Returns:
            True если значение валидно
        """
        raise NotImplementedError("Метод validate должен быть переопределен в дочернем классе")

    def is_valid(self, value: Any) -> bool:
        """
        Проверка валидности значения

        Args:
            value: Значение для проверки

        Returns:
            True если значение валидно
        """
        self.errors = []

        if value is None:
            if self.required:
                self.add_error("value missing")
                return False
            return True

        self.validate(value)
        return not self.errors

    def add_error(self, message: str):
        """Добавление ошибки валидации"""
        self.errors.append(message)

    def get_errors(self) -> List[str]:
        """Получение списка ошибок"""
        return self.errors.copy()


class ImageValidator(BaseValidator):
    """Валидатор ИК-изображения"""

    def __init__(self, min_side: Optional[int] = None):
        super().__init__(required=True)
        self.min_side = min_side or get_settings().MIN_IMAGE_SIDE

    def validate(self, image: IRImage) -> bool:
        if not image.id:
            self.add_error("empty id: идентификатор образца не задан")

        pixels = image.pixels
        if pixels.ndim != 2:
            self.add_error(f"not 2-D: ожидается двумерный массив, получено {pixels.ndim} измерений")
            return False

        if image.height < self.min_side or image.width < self.min_side:
            self.add_error(
                f"image too small: {image.height}x{image.width}, минимум {self.min_side}x{self.min_side}"
            )

        if not np.all(np.isfinite(pixels)):
            self.add_error("non-finite pixel: изображение содержит NaN или бесконечность")
        elif pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            self.add_error(
                f"pixel out of range: значения в [{pixels.min():.4g}, {pixels.max():.4g}], ожидается [0, 1]"
            )

        return not self.errors


class MaskValidator(BaseValidator):
    """Валидатор бинарной маски"""

    def __init__(self, expected_shape: Optional[Sequence[int]] = None, required: bool = False):
        super().__init__(required)
        self.expected_shape = tuple(expected_shape) if expected_shape is not None else None

    def validate(self, mask: TargetMask) -> bool:
        pixels = mask.pixels
        if pixels.ndim != 2:
            self.add_error(f"not 2-D: маска имеет {pixels.ndim} измерений")
            return False

        if not np.isin(pixels, (0, 1)).all():
            self.add_error("non-binary mask: значения маски должны быть 0 или 1")

        if self.expected_shape is not None and tuple(pixels.shape) != self.expected_shape:
            self.add_error(
                f"shape mismatch: маска {_format_shape(pixels.shape)}, "
                f"изображение {_format_shape(self.expected_shape)}"
            )

        return not self.errors


class PriorValidator(BaseValidator):
    """Валидатор языкового описания"""

    def validate(self, prior) -> bool:
        if prior.word_count != count_words(prior.text):
            self.add_error(
                f"word count mismatch: указано {prior.word_count}, в тексте {count_words(prior.text)}"
            )

        if prior.source != PriorSource.VLM_FAILED and not prior.text.strip():
            self.add_error("empty description: текст описания пуст")

        return not self.errors


def validate_sample(sample: Sample) -> ValidationReport:
    """
    Проверка всех инвариантов образца. Никогда не бросает исключений.

    Args:
        sample: Образец

    Returns:
        Отчет с перечнем нарушений (пустой для валидного образца)
    """
    report = ValidationReport()

    image_validator = ImageValidator()
    image_validator.is_valid(sample.image)
    report.extend(image_validator.get_errors())

    if sample.mask is None and sample.split == Split.TRAIN:
        report.add("mask missing: маска обязательна для обучающей выборки")

    # Сверка размеров имеет смысл только для двумерного изображения
    image_shape = sample.image.pixels.shape
    mask_validator = MaskValidator(expected_shape=image_shape if len(image_shape) == 2 else None)
    mask_validator.is_valid(sample.mask)
    report.extend(mask_validator.get_errors())

    prior_validator = PriorValidator()
    prior_validator.is_valid(sample.prior)
    report.extend(prior_validator.get_errors())

    return report


def tokenize(text: str) -> List[str]:
    """Токенизация по пробелам и пунктуации в нижнем регистре"""
    return _TOKEN_RE.findall(text.lower())


def validate_description(text: str, max_words: Optional[int] = None) -> ValidationReport:
    """
    Проверка описания цели: ограничение по словам и позиционная лексика.
    Только сообщает о нарушениях, ничего не отклоняет.

    Args:
        text: Текст описания
        max_words: Лимит слов (по умолчанию из настроек)

    Returns:
        Отчет валидации
    """
    settings = get_settings()
    if max_words is None:
        max_words = settings.MAX_DESCRIPTION_WORDS
    report = ValidationReport()

    word_count = count_words(text)
    if word_count > max_words:
        report.add(f"word limit exceeded: {word_count} > {max_words}")

    tokens = set(tokenize(text))
    if not tokens.intersection(settings.POSITIONAL_KEYWORDS):
        report.add(
            "missing positional keyword: нет ни одного из "
            + ", ".join(settings.POSITIONAL_KEYWORDS)
        )

    return report


@dataclass(frozen=True)
class SpieReport:
    """Результат проверки критериев SPIE"""

    area_ratio: float
    contrast_ratio: float
    snr: float
    is_small_target: bool


def spie_check(mask: TargetMask, image: IRImage) -> SpieReport:
    """
    Проверка критериев малой цели SPIE: площадь < 0.15%, контраст < 15%, SNR < 1.5.
    Фон - дополнение маски на всем изображении.

    Args:
        mask: Маска цели
        image: Изображение

    Returns:
        SpieReport
    """
    settings = get_settings()
    fg = mask.as_bool()
    if fg.shape != image.pixels.shape:
        raise ValidationError(f"shape mismatch: маска {fg.shape}, изображение {image.pixels.shape}")

    n_fg = int(fg.sum())
    if n_fg == 0:
        raise ValidationError("no target: маска не содержит пикселей цели")

    pixels = image.pixels.astype(np.float64)
    target = pixels[fg]
    background = pixels[~fg]

    area_ratio = n_fg / fg.size
    if background.size == 0:
        # Цель занимает все изображение
        return SpieReport(area_ratio, float('inf'), float('inf'), False)

    diff = abs(target.mean() - background.mean())
    bg_mean = background.mean()
    bg_std = background.std()
    contrast_ratio = diff / bg_mean if bg_mean > 0 else (0.0 if diff == 0 else float('inf'))
    snr = diff / bg_std if bg_std > 0 else (0.0 if diff == 0 else float('inf'))

    is_small = (
        area_ratio < settings.SPIE_MAX_AREA_RATIO
        and contrast_ratio < settings.SPIE_MAX_CONTRAST_RATIO
        and snr < settings.SPIE_MAX_SNR
    )

    return SpieReport(
        area_ratio=float(area_ratio),
        contrast_ratio=float(contrast_ratio),
        snr=float(snr),
        is_small_target=bool(is_small),
    )
