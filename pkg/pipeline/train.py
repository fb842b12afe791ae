"""
Обучение LGNet с глубоким надзором и языковым приором
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from config.settings import LanguageMode, OptimizerName, TrainConfig
from config.storage import read_manifest_split
from models.base import DatasetManifest, Sample, Split
from models.checkpoint import save_checkpoint
from models.embeddings import EmbeddingProvider
from models.lgnet import LGNet, count_parameters, deep_supervision_loss, resize_image, resize_mask
from utils.exceptions import ConfigError, DatasetError, TrainingError
from utils.metrics import MetricReport

logger = logging.getLogger(__name__)


def uses_language_in_training(mode: LanguageMode) -> bool:
    return LanguageMode(mode) != LanguageMode.NEVER


def uses_language_at_test(mode: LanguageMode) -> bool:
    return LanguageMode(mode) == LanguageMode.TRAINING_AND_TEST


def lr_warmup_factor(epoch: int, warmup_epochs: int) -> float:
    """Линейный разогрев: (epoch + 1) / (warmup + 1) на первых warmup эпохах, далее 1"""
    if epoch < warmup_epochs:
        return (epoch + 1) / (warmup_epochs + 1)
    return 1.0


class LangIRDataset(Dataset):
    """
    Образцы с заранее вычисленными дескрипторами цели.
    Изображения и маски приводятся к размеру входа сети.
    """

    def __init__(self, samples: Sequence[Sample], provider: EmbeddingProvider,
                 use_language: bool, input_size: Sequence[int]):
        self.ids: List[str] = []
        self.images: List[torch.Tensor] = []
        self.masks: List[torch.Tensor] = []
        self.descriptors: List[torch.Tensor] = []
        with_text = 0

        for sample in samples:
            if sample.mask is None:
                raise DatasetError(f"id {sample.id}: mask missing")
            prior = sample.prior if use_language else None
            td = provider.describe(sample.image, prior)
            with_text += int(td.has_language)

            image = torch.as_tensor(np.asarray(sample.image.pixels), dtype=torch.float32)[None, None]
            mask = torch.as_tensor(sample.mask.pixels.astype(np.float32))[None, None]
            self.ids.append(sample.id)
            self.images.append(resize_image(image, input_size)[0])
            self.masks.append(resize_mask(mask, input_size)[0])
            self.descriptors.append(torch.as_tensor(td.vector, dtype=torch.float32))

        logger.debug(f"Набор: {len(self.ids)} образцов, с текстом {with_text}")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        return {
            'image': self.images[index],
            'mask': self.masks[index],
            'td': self.descriptors[index],
        }


def build_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    """Adan (adan-pytorch) или AdamW; при отсутствии пакета Adan используется AdamW"""
    if config.optimizer == OptimizerName.ADAN:
        try:
            from adan_pytorch import Adan

            return Adan(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        except ImportError:
            logger.warning("Пакет adan-pytorch не установлен, используется AdamW")
    return torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)


@dataclass
class RunReport:
    """Итоги обучения"""

    loss_history: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    lr_history: List[float] = field(default_factory=list)
    seconds_per_epoch: List[float] = field(default_factory=list)
    total_seconds: float = 0.0
    parameter_count: int = 0
    metrics: Optional[MetricReport] = None
    metrics_split: Optional[str] = None
    config: Dict[str, Any] = field(default_factory=dict)
    checkpoint_path: Optional[str] = None

    @property
    def epochs_completed(self) -> int:
        return len(self.loss_history)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['metrics'] = self.metrics.to_dict() if self.metrics is not None else None
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunReport':
        data = dict(data)
        if data.get('metrics') is not None:
            data['metrics'] = MetricReport.from_dict(data['metrics'])
        return cls(**{key: data[key] for key in cls.__dataclass_fields__ if key in data})


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def train_on_samples(
    config: TrainConfig,
    samples: Sequence[Sample],
    provider: EmbeddingProvider,
    eval_samples: Optional[Sequence[Sample]] = None,
    eval_split: Optional[Split] = None
) -> RunReport:
    """
    Обучение на готовом списке образцов

    Args:
        config: Конфигурация обучения
        samples: Обучающие образцы (с масками)
        provider: Провайдер эмбеддингов
        eval_samples: Образцы для итоговой оценки (по умолчанию обучающие)
        eval_split: Название разбиения для отчета

    Returns:
        RunReport
    """
    from pipeline.evaluate import evaluate_samples

    if not samples:
        raise DatasetError("empty split: нет обучающих образцов")
    if provider.dim != config.descriptor_dim:
        raise ConfigError(f"provider dim {provider.dim} != descriptor_dim {config.descriptor_dim}")

    _seed_everything(config.seed)
    device = torch.device(config.device)

    dataset = LangIRDataset(
        samples, provider,
        use_language=uses_language_in_training(config.language_mode),
        input_size=config.input_size,
    )
    generator = torch.Generator()
    generator.manual_seed(config.seed)
    loader = DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=config.num_workers,
    )

    model = LGNet(config.to_lgnet_config()).to(device)
    optimizer = build_optimizer(model, config)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda epoch: lr_warmup_factor(epoch, config.warmup_epochs)
    )

    report = RunReport(
        parameter_count=count_parameters(model),
        config=config.model_dump(mode='json'),
    )
    logger.info(
        f"Обучение: {len(dataset)} образцов, {config.epochs} эпох, "
        f"режим {LanguageMode(config.language_mode).value}, {report.parameter_count} параметров"
    )

    checkpoint_dir = Path(config.checkpoint_dir)
    started = time.perf_counter()

    for epoch in range(config.epochs):
        epoch_started = time.perf_counter()
        model.train()
        running_loss, num_batches = 0.0, 0
        report.lr_history.append(float(optimizer.param_groups[0]['lr']))

        for step, batch in enumerate(loader):
            images = batch['image'].to(device)
            masks = batch['mask'].to(device)
            td = batch['td'].to(device)

            optimizer.zero_grad(set_to_none=True)
            outputs = model(images, td)
            loss = deep_supervision_loss(outputs, masks)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}: {loss.item()}")
            loss.backward()
            optimizer.step()

            running_loss += loss.item()
            num_batches += 1
            report.step_losses.append(float(loss.item()))

        scheduler.step()
        epoch_loss = running_loss / max(1, num_batches)
        report.loss_history.append(epoch_loss)
        report.seconds_per_epoch.append(time.perf_counter() - epoch_started)
        logger.debug(f"Эпоха {epoch + 1}/{config.epochs}: loss {epoch_loss:.4f}")

        completed = epoch + 1
        if completed % config.checkpoint_every == 0 and completed != config.epochs:
            save_checkpoint(checkpoint_dir / f"epoch_{completed:04d}.pt", model, optimizer, completed)

    final_path = save_checkpoint(checkpoint_dir / "last.pt", model, optimizer, config.epochs,
                                 extra={'loss_history': report.loss_history})
    report.checkpoint_path = str(final_path)
    report.total_seconds = time.perf_counter() - started

    targets = list(eval_samples) if eval_samples else list(samples)
    report.metrics_split = (eval_split or Split.TRAIN).value if eval_samples else Split.TRAIN.value
    report.metrics = evaluate_samples(
        model, targets, provider,
        use_language=uses_language_at_test(config.language_mode),
        threshold=config.threshold,
        centroid_tol=config.centroid_tol,
    )

    logger.info(
        f"Обучение завершено за {report.total_seconds:.1f} с: loss {report.loss_history[-1]:.4f}, "
        f"IoU ({report.metrics_split}) {report.metrics.iou:.4f}"
    )
    return report


def train(config: TrainConfig, manifest: DatasetManifest, provider: EmbeddingProvider) -> RunReport:
    """
    Обучение по манифесту набора данных; итоговая оценка на test, если он не пуст

    Args:
        config: Конфигурация обучения
        manifest: Манифест набора
        provider: Провайдер эмбеддингов

    Returns:
        RunReport
    """
    if not manifest.train_ids:
        raise DatasetError(f"empty split: {manifest.root} не содержит обучающих образцов")

    train_samples = read_manifest_split(manifest, Split.TRAIN)
    test_samples = read_manifest_split(manifest, Split.TEST) if manifest.test_ids else None
    return train_on_samples(
        config, train_samples, provider,
        eval_samples=test_samples,
        eval_split=Split.TEST if test_samples else None,
    )
