"""
Генератор синтетических ИК-сцен с малыми целями и шаблонных описаний
"""

import logging
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from skimage import filters, measure

from config.settings import QUADRANT_SENTENCES, get_settings
from models.base import IRImage, LanguagePrior, PriorSource, PromptStyle, TargetMask, count_words
from utils.exceptions import InfeasibleSceneError, ValidationError
from utils.helpers import quantize
from utils.validators import spie_check

logger = logging.getLogger(__name__)

# Попыток подобрать положение целей, удовлетворяющее SPIE
MAX_SCENE_ATTEMPTS = 64


class Background(str, Enum):
    FLAT = "flat"
    GRADIENT = "gradient"
    CLUTTER = "clutter"


class DescriptionMode(str, Enum):
    QUADRANT = "quadrant"
    POSITIONAL = "positional"


class SceneParams(BaseModel):
    """Параметры синтетической сцены"""

    model_config = ConfigDict(extra='forbid')

    image_size: Tuple[int, int] = (256, 256)
    num_targets: int = Field(1, ge=1)
    target_area_ratio: float = Field(0.0008, gt=0)
    contrast: float = Field(0.06, gt=0)
    noise_sigma: float = Field(0.05, ge=0)
    background_level: float = Field(0.5, gt=0, lt=1)
    background: Background = Background.FLAT
    rng_seed: int = 0
    enforce_spie: bool = True

    @field_validator('image_size')
    @classmethod
    def _check_size(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if min(value) < get_settings().MIN_IMAGE_SIDE:
            raise ValueError(f"image_size должен быть не меньше {get_settings().MIN_IMAGE_SIDE}")
        return value


def _disk_offsets(radius: float) -> np.ndarray:
    """Смещения пикселей диска радиуса radius относительно центра пикселя"""
    r = int(np.ceil(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    inside = dy ** 2 + dx ** 2 <= radius ** 2
    return np.stack([dy[inside], dx[inside]], axis=1)


def target_footprint(params: SceneParams) -> Tuple[float, np.ndarray]:
    """
    Радиус и смещения пикселей одной цели; проверка выполнимости по площади

    Returns:
        (радиус, смещения [N, 2])
    """
    settings = get_settings()
    h, w = params.image_size
    if params.enforce_spie and params.target_area_ratio >= settings.SPIE_MAX_AREA_RATIO:
        raise InfeasibleSceneError(
            f"target_area_ratio {params.target_area_ratio} >= {settings.SPIE_MAX_AREA_RATIO} (SPIE)"
        )

    area_per_target = params.target_area_ratio * h * w / params.num_targets
    radius = max(np.sqrt(area_per_target / np.pi), 0.5)
    offsets = _disk_offsets(radius)

    total = len(offsets) * params.num_targets
    if params.enforce_spie and total / (h * w) >= settings.SPIE_MAX_AREA_RATIO:
        raise InfeasibleSceneError(
            f"target too large for SPIE at {h}x{w}: {total} пикселей цели "
            f"(доля {total / (h * w):.5f})"
        )
    return radius, offsets


def _background(params: SceneParams, rng: np.random.Generator) -> np.ndarray:
    h, w = params.image_size
    base = np.full((h, w), params.background_level, dtype=np.float64)

    if params.background == Background.GRADIENT:
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        ramp = np.cos(angle) * (yy / h - 0.5) + np.sin(angle) * (xx / w - 0.5)
        base += 0.1 * ramp
    elif params.background == Background.CLUTTER:
        field = filters.gaussian(rng.standard_normal((h, w)), sigma=max(h, w) / 32)
        field /= field.std() or 1.0
        base += 0.03 * field

    return base


def _place_centers(params: SceneParams, radius: float, rng: np.random.Generator) -> List[np.ndarray]:
    h, w = params.image_size
    margin = int(np.ceil(radius)) + 1
    min_gap = 2 * radius + 3
    centers = []
    for _ in range(1000):
        if len(centers) == params.num_targets:
            break
        candidate = np.array([
            rng.integers(margin, h - margin),
            rng.integers(margin, w - margin),
        ])
        if all(np.linalg.norm(candidate - c) > min_gap for c in centers):
            centers.append(candidate)
    if len(centers) < params.num_targets:
        raise InfeasibleSceneError(
            f"не удалось разместить {params.num_targets} целей на {h}x{w} без пересечений"
        )
    return centers


def _render(params: SceneParams, radius: float, offsets: np.ndarray,
            rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    h, w = params.image_size
    image = _background(params, rng)
    mask = np.zeros((h, w), dtype=np.uint8)

    sigma = radius / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    target_level = params.background_level * (1.0 + params.contrast)

    for center in _place_centers(params, radius, rng):
        rows = center[0] + offsets[:, 0]
        cols = center[1] + offsets[:, 1]
        mask[rows, cols] = 1

        blob = np.exp(-((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2 * sigma ** 2))
        under = image[rows, cols].mean()
        # Амплитуда подбирается так, чтобы среднее по маске цели равнялось target_level
        amplitude = (target_level - under) / blob[rows, cols].mean()
        image += amplitude * blob

    if params.noise_sigma > 0:
        image += rng.normal(0.0, params.noise_sigma, size=(h, w))

    return quantize(np.clip(image, 0.0, 1.0)), mask


def synth_scene(params: Optional[SceneParams] = None, image_id: Optional[str] = None) -> Tuple[IRImage, TargetMask]:
    """
    Синтетическая сцена: фон + гауссов шум + гауссовы пятна-цели.
    Детерминирована по rng_seed; при enforce_spie результат проходит spie_check.

    Args:
        params: Параметры сцены
        image_id: Идентификатор изображения

    Returns:
        (IRImage, TargetMask)
    """
    params = params or SceneParams()
    radius, offsets = target_footprint(params)
    rng = np.random.default_rng(params.rng_seed)
    image_id = image_id or f"synth{params.rng_seed}"

    for attempt in range(MAX_SCENE_ATTEMPTS):
        pixels, mask_pixels = _render(params, radius, offsets, rng)
        image, mask = IRImage(pixels, image_id), TargetMask(mask_pixels)
        if not params.enforce_spie or spie_check(mask, image).is_small_target:
            if attempt:
                logger.debug(f"Сцена {image_id}: SPIE выполнен с попытки {attempt + 1}")
            return image, mask

    raise InfeasibleSceneError(
        f"сцена {image_id}: за {MAX_SCENE_ATTEMPTS} попыток не удалось выполнить критерии SPIE"
    )


def _largest_component_centroid(mask: TargetMask) -> Tuple[float, float]:
    labels = measure.label(mask.as_bool(), connectivity=get_settings().COMPONENT_CONNECTIVITY)
    regions = measure.regionprops(labels)
    if not regions:
        raise ValidationError("empty mask: нет цели для описания")
    largest = max(regions, key=lambda r: (r.area, -r.label))
    row, col = largest.centroid
    return float(row), float(col)


def quadrant_sentence(row: float, col: float, height: int, width: int) -> str:
    """Одно из четырех фиксированных предложений; центр относится к верху/левой стороне"""
    vertical = 'top' if row <= height / 2 else 'bottom'
    horizontal = 'left' if col <= width / 2 else 'right'
    return QUADRANT_SENTENCES[(vertical, horizontal)]


def _third(value: float, size: int, low: str, high: str) -> Optional[str]:
    if value < size / 3:
        return low
    if value >= 2 * size / 3:
        return high
    return None


def positional_sentence(row: float, col: float, height: int, width: int, num_targets: int = 1) -> str:
    """Шаблонное описание с позиционной лексикой по третям изображения"""
    vertical = _third(row, height, 'upper', 'lower')
    horizontal = _third(col, width, 'left', 'right')

    if vertical and horizontal:
        region = f"the {vertical} {horizontal} region"
    elif vertical:
        region = f"the {vertical} center region"
    elif horizontal:
        region = f"the center {horizontal} region"
    else:
        region = "the center region"

    subject = "A small bright target" if num_targets == 1 else "The most prominent of several small targets"
    return (
        f"{subject} is located in {region} of the infrared image, "
        f"appearing as a faint heat signature against the background."
    )


def synth_description(mask: TargetMask, mode: DescriptionMode = DescriptionMode.POSITIONAL) -> LanguagePrior:
    """
    Шаблонное описание цели по маске

    Args:
        mask: Маска (непустая)
        mode: quadrant - одно из четырех предложений, positional - позиционное описание

    Returns:
        LanguagePrior с source = template
    """
    if mask.foreground_count == 0:
        raise ValidationError("empty mask: нет цели для описания")

    height, width = mask.shape
    row, col = _largest_component_centroid(mask)

    if DescriptionMode(mode) == DescriptionMode.QUADRANT:
        text = quadrant_sentence(row, col, height, width)
    else:
        n_targets = int(measure.label(mask.as_bool(), connectivity=2).max())
        text = positional_sentence(row, col, height, width, n_targets)

    max_words = get_settings().MAX_DESCRIPTION_WORDS
    if count_words(text) > max_words:
        text = " ".join(text.split()[:max_words])

    return LanguagePrior.from_text(text, source=PriorSource.TEMPLATE, style=PromptStyle.SYSTEM)
