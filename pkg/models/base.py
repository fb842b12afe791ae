"""
Базовые типы данных: изображение, маска, языковое описание, образец, манифест
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np


class PriorSource(str, Enum):
    """Источник языкового описания"""
    VLM = "vlm"
    VLM_FAILED = "vlm_failed"
    TEMPLATE = "template"
    HUMAN = "human"


class PromptStyle(str, Enum):
    """Стиль запроса к VLM"""
    SYSTEM = "system"
    FEW_SHOT = "few_shot"
    ZERO_SHOT = "zero_shot"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class DatasetSubset(str, Enum):
    """Подмножества LangIR и синтетический набор"""
    LANGIR_IRSTD = "langir_irstd"
    LANGIR_SIRST = "langir_sirst"
    SYNTHETIC = "synthetic"


def count_words(text: str) -> int:
    """Количество токенов, разделенных пробельными символами"""
    return len(text.split())


@dataclass(frozen=True, eq=False)
class IRImage:
    """Одноканальное ИК-изображение с интенсивностями в [0, 1]"""

    pixels: np.ndarray
    id: str

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        pixels.setflags(write=False)
        object.__setattr__(self, 'pixels', pixels)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0]) if self.pixels.ndim >= 1 else 0

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1]) if self.pixels.ndim >= 2 else 0

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.pixels.shape)


@dataclass(frozen=True, eq=False)
class TargetMask:
    """Бинарная маска цели"""

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.dtype == bool:
            pixels = pixels.astype(np.uint8)
        pixels = pixels.copy()
        pixels.setflags(write=False)
        object.__setattr__(self, 'pixels', pixels)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.pixels.shape)

    @property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.pixels))

    def as_bool(self) -> np.ndarray:
        return self.pixels.astype(bool)


@dataclass(frozen=True)
class LanguagePrior:
    """Текстовое описание цели (языковой приор)"""

    text: str
    word_count: int
    source: PriorSource = PriorSource.VLM
    style: PromptStyle = PromptStyle.SYSTEM

    @classmethod
    def from_text(
        cls,
        text: str,
        source: PriorSource = PriorSource.VLM,
        style: PromptStyle = PromptStyle.SYSTEM
    ) -> 'LanguagePrior':
        """
        Создание описания с вычисленным числом слов

        Args:
            text: Текст описания
            source: Источник описания
            style: Стиль запроса, которым описание было получено

        Returns:
            LanguagePrior
        """
        return cls(text=text, word_count=count_words(text), source=source, style=style)


@dataclass(frozen=True, eq=False)
class Sample:
    """Образец набора данных"""

    image: IRImage
    mask: Optional[TargetMask] = None
    prior: Optional[LanguagePrior] = None
    split: Split = Split.TRAIN

    @property
    def id(self) -> str:
        return self.image.id


@dataclass(frozen=True)
class DatasetManifest:
    """Манифест набора данных: корень, подмножество и идентификаторы разбиений"""

    root_path: str
    subset: DatasetSubset
    train_ids: List[str] = field(default_factory=list)
    test_ids: List[str] = field(default_factory=list)

    @property
    def root(self) -> Path:
        return Path(self.root_path)

    def ids_for(self, split: Split) -> List[str]:
        return list(self.train_ids if split == Split.TRAIN else self.test_ids)


@dataclass
class ValidationReport:
    """Отчет валидации: пустой список нарушений означает валидный объект"""

    issues: List[str] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.issues

    def add(self, message: str):
        self.issues.append(message)

    def extend(self, messages: List[str]):
        self.issues.extend(messages)

    def contains(self, fragment: str) -> bool:
        """Есть ли нарушение, содержащее фрагмент текста"""
        return any(fragment in issue for issue in self.issues)

    def __len__(self) -> int:
        return len(self.issues)
