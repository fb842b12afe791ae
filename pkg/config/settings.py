"""
Настройки приложения
"""

import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import toml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class AppSettings:
    """Класс настроек приложения"""

    APP_TITLE = "LGNet: обнаружение малых целей на ИК-изображениях"

    # Критерии SPIE для малой цели
    SPIE_MAX_AREA_RATIO = 0.0015
    SPIE_MAX_CONTRAST_RATIO = 0.15
    SPIE_MAX_SNR = 1.5

    # Минимальный размер изображения
    MIN_IMAGE_SIDE = 16

    # Метрики
    BINARIZE_THRESHOLD = 0.5
    CENTROID_TOLERANCE = 3.0
    COMPONENT_CONNECTIVITY = 2  # 8-связность
    FA_REPORT_SCALE = 1e-6

    # Функция потерь
    BCE_EPSILON = 1e-7

    # Эмбеддинги
    EMBEDDING_DIM = 512
    PRETRAINED_MODEL_ID = "openai/clip-vit-base-patch16"

    # Описания
    MAX_DESCRIPTION_WORDS = 50
    POSITIONAL_KEYWORDS = ('left', 'right', 'center', 'lower', 'upper')
    REFUSAL_PHRASES = (
        "unable to do this task",
        "i am unable to",
        "i'm unable to",
        "i cannot help with",
        "i can't help with",
    )

    # VLM клиент
    VLM_API_KEY_ENV = "LGNET_VLM_API_KEY"
    VLM_MAX_ATTEMPTS = 5
    VLM_BACKOFF_SECONDS = 0.5
    VLM_BACKOFF_MAX_SECONDS = 8.0
    VLM_TIMEOUT_SECONDS = 60.0
    VLM_MAX_IN_FLIGHT = 4
    VLM_RATE_LIMIT_PER_MINUTE = 60

    # Обучение
    CHECKPOINT_EVERY = 50
    CHECKPOINT_MAGIC = "LGNET-CKPT-1"

    # Логирование
    LOG_LEVEL = "INFO"
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


# Глобальный экземпляр настроек
_settings = None


def get_settings() -> AppSettings:
    """
    Получение глобального экземпляра настроек

    Returns:
        AppSettings: Экземпляр настроек
    """
    global _settings
    if _settings is None:
        load_dotenv()
        _settings = AppSettings()
    return _settings


# Шаблоны запросов к VLM
PROMPT_TEMPLATES = {
    'system_role': "You are an expert who can locate the small {target} in the infrared image.",

    'task': (
        "Locate the small {target} within the infrared image and respond succinctly "
        "within {max_words} words, detailing the region where the {target} is situated."
    ),

    'task_unlimited': (
        "Locate the small {target} within the infrared image, "
        "detailing the region where the {target} is situated."
    ),

    'zero_shot': "Detect the small {target} in the infrared image.",
}

# Квадрантные описания
QUADRANT_SENTENCES = {
    ('top', 'left'): "The small target lies in the top-left quadrant.",
    ('top', 'right'): "The small target lies in the top-right quadrant.",
    ('bottom', 'left'): "The small target lies in the bottom-left quadrant.",
    ('bottom', 'right'): "The small target lies in the bottom-right quadrant.",
}


class LanguageMode(str, Enum):
    """Режимы доступности языкового описания"""
    NEVER = "never"
    TRAINING_ONLY = "training_only"
    TRAINING_AND_TEST = "training_and_test"


class OptimizerName(str, Enum):
    ADAN = "adan"
    ADAMW = "adamw"


class TrainConfig(BaseModel):
    """Конфигурация обучения"""

    model_config = ConfigDict(extra='forbid', protected_namespaces=())

    epochs: int = Field(600, ge=1)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    warmup_epochs: int = Field(10, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    optimizer: OptimizerName = OptimizerName.ADAN
    input_size: Tuple[int, int] = (512, 512)
    language_mode: LanguageMode = LanguageMode.TRAINING_ONLY
    seed: int = 0
    device: str = "cpu"
    checkpoint_dir: Path = Path("checkpoints")
    checkpoint_every: int = Field(AppSettings.CHECKPOINT_EVERY, ge=1)
    num_workers: int = Field(0, ge=0)

    # Архитектура сети
    in_channels: int = Field(1, ge=1)
    stage_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128, 256])
    ublock_heights: List[int] = Field(default_factory=lambda: [7, 6, 5, 4, 4])
    descriptor_dim: int = Field(AppSettings.EMBEDDING_DIM, ge=1)
    use_language_fusion: bool = True
    use_fusion_block: bool = True

    # Оценка
    threshold: float = Field(AppSettings.BINARIZE_THRESHOLD, gt=0, lt=1)
    centroid_tol: float = Field(AppSettings.CENTROID_TOLERANCE, ge=0)

    @field_validator('input_size')
    @classmethod
    def _check_input_size(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if min(value) < AppSettings.MIN_IMAGE_SIDE:
            raise ValueError(f"input_size должен быть не меньше {AppSettings.MIN_IMAGE_SIDE}")
        return value

    @model_validator(mode='after')
    def _check_warmup(self) -> 'TrainConfig':
        if self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) должно быть меньше epochs ({self.epochs})"
            )
        return self

    def to_lgnet_config(self):
        """Конфигурация сети, соответствующая параметрам обучения"""
        from models.lgnet import LGNetConfig

        return LGNetConfig(
            in_channels=self.in_channels,
            stage_channels=list(self.stage_channels),
            ublock_heights=list(self.ublock_heights),
            descriptor_dim=self.descriptor_dim,
            input_size=self.input_size,
            seed=self.seed,
            use_language_fusion=self.use_language_fusion,
            use_fusion_block=self.use_fusion_block,
        )


class VLMProvider(str, Enum):
    STUB = "stub"
    OPENAI = "openai"
    ANTHROPIC = "anthropic"


class VLMConfig(BaseModel):
    """Конфигурация клиента VLM"""

    model_config = ConfigDict(extra='forbid', protected_namespaces=())

    provider: VLMProvider = VLMProvider.STUB
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model_id: str = "gpt-4-vision-preview"
    api_key_env: str = AppSettings.VLM_API_KEY_ENV
    max_words: Optional[int] = Field(AppSettings.MAX_DESCRIPTION_WORDS, ge=1)
    max_tokens: int = Field(300, ge=1)
    max_attempts: int = Field(AppSettings.VLM_MAX_ATTEMPTS, ge=1)
    backoff_seconds: float = Field(AppSettings.VLM_BACKOFF_SECONDS, ge=0)
    backoff_max_seconds: float = Field(AppSettings.VLM_BACKOFF_MAX_SECONDS, ge=0)
    timeout_seconds: float = Field(AppSettings.VLM_TIMEOUT_SECONDS, gt=0)
    max_in_flight: int = Field(AppSettings.VLM_MAX_IN_FLIGHT, ge=1)
    rate_limit_per_minute: Optional[int] = Field(AppSettings.VLM_RATE_LIMIT_PER_MINUTE, ge=1)
    refusal_phrases: List[str] = Field(default_factory=lambda: list(AppSettings.REFUSAL_PHRASES))
    seed: int = 0

    def get_api_key(self) -> Optional[str]:
        """Ключ API читается только из переменной окружения"""
        get_settings()
        return os.environ.get(self.api_key_env)


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    """
    Чтение плоского TOML файла конфигурации

    Args:
        path: Путь к файлу или None

    Returns:
        Словарь значений (пустой, если файл не задан)
    """
    if path is None:
        return {}

    from utils.exceptions import ConfigError

    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")

    try:
        data = toml.load(path)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"invalid config file {path}: {e}") from e

    nested = [key for key, value in data.items() if isinstance(value, dict)]
    if nested:
        raise ConfigError(f"config file must be flat, found tables: {', '.join(nested)}")

    return data
