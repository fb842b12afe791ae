"""
Модуль конфигурации LGNet
"""

from .settings import AppSettings, TrainConfig, VLMConfig, get_settings

__all__ = [
    'AppSettings',
    'TrainConfig',
    'VLMConfig',
    'get_settings'
]
