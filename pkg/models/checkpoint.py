"""
Сохранение и загрузка чекпоинтов LGNet
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch

from config.settings import get_settings
from models.lgnet import LGNet, LGNetConfig
from utils.exceptions import CheckpointError

logger = logging.getLogger(__name__)


def save_checkpoint(
    path: Path,
    model: LGNet,
    optimizer: Optional[torch.optim.Optimizer] = None,
    epoch: int = 0,
    extra: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Запись архива: конфигурация, параметры, состояние оптимизатора, номер эпохи

    Args:
        path: Путь к файлу
        model: Сеть
        optimizer: Оптимизатор
        epoch: Число завершенных эпох
        extra: Дополнительные JSON-совместимые поля

    Returns:
        Путь к записанному файлу
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    archive = {
        'magic': get_settings().CHECKPOINT_MAGIC,
        'config': model.config.model_dump(mode='json'),
        'state_dict': model.state_dict(),
        'optimizer': optimizer.state_dict() if optimizer is not None else None,
        'epoch': int(epoch),
        'extra': extra or {},
    }
    torch.save(archive, path)
    logger.info(f"Чекпоинт сохранен: {path} (эпоха {epoch})")
    return path


def read_checkpoint(path: Path, map_location: str = "cpu") -> Dict[str, Any]:
    """Чтение архива с проверкой сигнатуры формата"""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")

    try:
        archive = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    magic = get_settings().CHECKPOINT_MAGIC
    if not isinstance(archive, dict) or archive.get('magic') != magic:
        raise CheckpointError(f"{path}: not an {magic} archive")

    return archive


def check_compatible(config: LGNetConfig, expected: LGNetConfig):
    """Проверка совпадения архитектуры чекпоинта с ожидаемой"""
    mismatches = []
    if config.descriptor_dim != expected.descriptor_dim:
        mismatches.append(f"descriptor_dim {config.descriptor_dim} != {expected.descriptor_dim}")
    if list(config.stage_channels) != list(expected.stage_channels):
        mismatches.append(f"stage_channels {config.stage_channels} != {expected.stage_channels}")
    if list(config.ublock_heights) != list(expected.ublock_heights):
        mismatches.append(f"ublock_heights {config.ublock_heights} != {expected.ublock_heights}")
    for name in ('in_channels', 'use_language_fusion', 'use_fusion_block'):
        if getattr(config, name) != getattr(expected, name):
            mismatches.append(f"{name} {getattr(config, name)} != {getattr(expected, name)}")
    if mismatches:
        raise CheckpointError("checkpoint/config mismatch: " + "; ".join(mismatches))


def load_checkpoint(
    path: Path,
    expected: Optional[LGNetConfig] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    map_location: str = "cpu"
) -> Tuple[LGNet, Dict[str, Any]]:
    """
    Восстановление сети из архива

    Args:
        path: Путь к файлу
        expected: Ожидаемая конфигурация (проверка совместимости)
        optimizer: Оптимизатор для восстановления состояния
        map_location: Устройство

    Returns:
        (сеть, архив)
    """
    archive = read_checkpoint(path, map_location)
    config = LGNetConfig.model_validate(archive['config'])
    if expected is not None:
        check_compatible(config, expected)

    model = LGNet(config)
    try:
        model.load_state_dict(archive['state_dict'])
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not match config: {e}") from e

    if optimizer is not None and archive.get('optimizer') is not None:
        optimizer.load_state_dict(archive['optimizer'])

    model.to(map_location)
    return model, archive
