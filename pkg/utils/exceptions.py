"""
Исключения системы LGNet
"""


class LGNetError(Exception):
    """Базовое исключение системы"""
    pass


class ValidationError(LGNetError, ValueError):
    """Исключение для ошибок валидации"""
    pass


class ShapeError(LGNetError, ValueError):
    """Несовпадение размерностей тензоров или векторов"""
    pass


class ConfigError(LGNetError):
    """Ошибка конфигурации"""
    pass


class DatasetError(LGNetError):
    """Нарушение структуры набора данных"""
    pass


class CheckpointError(LGNetError):
    """Поврежденный или несовместимый чекпоинт"""
    pass


class ModelStageError(LGNetError):
    """Ошибка на конкретной стадии сети"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class TrainingError(LGNetError):
    """Ошибка в процессе обучения"""
    pass


class EmbeddingError(LGNetError):
    """Ошибка провайдера эмбеддингов"""
    pass


class InfeasibleSceneError(LGNetError, ValueError):
    """Параметры синтетической сцены несовместимы с критериями SPIE"""
    pass


class VLMTransportError(LGNetError):
    """Сервис VLM недоступен после всех попыток"""
    pass


class VLMProtocolError(LGNetError):
    """Некорректный ответ сервиса VLM"""
    pass
