"""
Командная строка LGNet
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pydantic

from config.settings import (
    LanguageMode,
    OptimizerName,
    TrainConfig,
    VLMConfig,
    VLMProvider,
    get_settings,
    load_config_file,
)
from config.storage import LangIRStorage, load_manifest, write_langir
from models.base import DatasetSubset, PromptStyle, Sample, Split
from models.checkpoint import check_compatible, load_checkpoint
from models.embeddings import make_provider
from models.lgnet import LGNetConfig
from utils.exceptions import ConfigError, LGNetError
from utils.helpers import format_duration, word_count_stats
from utils.synthetic import Background, DescriptionMode, SceneParams, synth_description, synth_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Флаги train/evaluate, переопределяющие поля TrainConfig
TRAIN_FLAGS = (
    'epochs', 'batch_size', 'lr', 'warmup_epochs', 'weight_decay', 'optimizer', 'input_size',
    'language_mode', 'seed', 'device', 'checkpoint_dir', 'checkpoint_every', 'num_workers',
    'in_channels', 'stage_channels', 'ublock_heights', 'descriptor_dim',
    'use_language_fusion', 'use_fusion_block', 'threshold', 'centroid_tol',
)

# Поля архитектуры, которые evaluate сверяет с чекпоинтом
ARCH_FLAGS = ('in_channels', 'stage_channels', 'ublock_heights', 'descriptor_dim',
              'use_language_fusion', 'use_fusion_block')


# ============== ПОСТРОЕНИЕ ПАРСЕРА ==============

def _add_dataset_args(parser: argparse.ArgumentParser, required: bool = True):
    parser.add_argument('--root', type=Path, required=required, help="Каталог набора LangIR")
    parser.add_argument('--subset', choices=[s.value for s in DatasetSubset],
                        help="Соглашение об именах (по умолчанию определяется по файлам)")


def _add_provider_args(parser: argparse.ArgumentParser):
    parser.add_argument('--provider', choices=['stub', 'clip'], default='stub',
                        help="Провайдер эмбеддингов")
    parser.add_argument('--embedding-model', default=None, help="Идентификатор модели CLIP")


def _add_train_config_args(parser: argparse.ArgumentParser):
    parser.add_argument('--config', type=Path, help="Плоский TOML файл с полями TrainConfig")
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--lr', type=float)
    parser.add_argument('--warmup-epochs', type=int)
    parser.add_argument('--weight-decay', type=float)
    parser.add_argument('--optimizer', choices=[o.value for o in OptimizerName])
    parser.add_argument('--input-size', type=int, nargs=2, metavar=('H', 'W'))
    parser.add_argument('--language-mode', choices=[m.value for m in LanguageMode])
    parser.add_argument('--seed', type=int)
    parser.add_argument('--device')
    parser.add_argument('--checkpoint-dir', type=Path)
    parser.add_argument('--checkpoint-every', type=int)
    parser.add_argument('--num-workers', type=int)
    _add_arch_args(parser)
    parser.add_argument('--threshold', type=float)
    parser.add_argument('--centroid-tol', type=float)


def _add_arch_args(parser: argparse.ArgumentParser):
    parser.add_argument('--in-channels', type=int)
    parser.add_argument('--stage-channels', type=int, nargs=5)
    parser.add_argument('--ublock-heights', type=int, nargs=5)
    parser.add_argument('--descriptor-dim', type=int)
    # None - значение из файла конфигурации или по умолчанию
    parser.add_argument('--no-language-fusion', dest='use_language_fusion', action='store_false',
                        default=None, help="Без блока языкового слияния")
    parser.add_argument('--no-fusion-block', dest='use_fusion_block', action='store_false',
                        default=None, help="Без блоков слияния перед декодерами")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='lgnet',
        description=get_settings().APP_TITLE,
    )
    parser.add_argument('--verbose', action='store_true', help="Подробное логирование (DEBUG)")
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('train', help="Обучение сети")
    _add_dataset_args(p)
    _add_provider_args(p)
    _add_train_config_args(p)
    p.add_argument('--report-out', type=Path, help="Путь для JSON отчета (по умолчанию в checkpoint-dir)")

    p = sub.add_parser('evaluate', help="Оценка чекпоинта на тестовом разбиении")
    _add_dataset_args(p)
    _add_provider_args(p)
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--config', type=Path,
                   help="TOML файл (используются threshold, centroid_tol, device и поля архитектуры)")
    p.add_argument('--language-mode', choices=[m.value for m in LanguageMode],
                   default=LanguageMode.TRAINING_ONLY.value, help="Режим языка при тесте")
    p.add_argument('--modes', action='store_true', help="Оценка без текста и с текстом")
    p.add_argument('--timing', action='store_true', help="Замер времени инференса")
    p.add_argument('--threshold', type=float)
    p.add_argument('--centroid-tol', type=float)
    p.add_argument('--device')
    _add_arch_args(p)
    p.add_argument('--out', type=Path, help="JSON файл с метриками")

    p = sub.add_parser('generate-descriptions', help="Генерация описаний целей через VLM")
    _add_dataset_args(p)
    p.add_argument('--vlm', choices=[v.value for v in VLMProvider], default=VLMProvider.STUB.value,
                   help="Протокол сервиса VLM")
    p.add_argument('--endpoint')
    p.add_argument('--model-id')
    p.add_argument('--api-key-env', help="Переменная окружения с ключом API")
    p.add_argument('--style', choices=[s.value for s in PromptStyle], default=PromptStyle.SYSTEM.value)
    p.add_argument('--max-words', type=int, default=get_settings().MAX_DESCRIPTION_WORDS)
    p.add_argument('--no-word-limit', action='store_true', help="Запрос без ограничения числа слов")
    p.add_argument('--max-in-flight', type=int)
    p.add_argument('--rate-limit', type=int, help="Запросов в минуту")
    p.add_argument('--max-attempts', type=int)
    p.add_argument('--few-shot-id', action='append', default=[],
                   help="id образца с готовым описанием для few_shot (можно повторять)")
    p.add_argument('--split', choices=[s.value for s in Split])
    p.add_argument('--keep-existing', action='store_true', help="Не перезаписывать имеющиеся описания")
    p.add_argument('--seed', type=int, default=0)

    p = sub.add_parser('synth', help="Синтетический набор в формате LangIR")
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--n', type=int, default=16)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--size', type=int, nargs=2, default=[256, 256], metavar=('H', 'W'))
    p.add_argument('--num-targets', type=int, default=1)
    p.add_argument('--background', choices=[b.value for b in Background], default=Background.FLAT.value)
    p.add_argument('--test-fraction', type=float, default=0.25)
    p.add_argument('--description-mode', choices=[m.value for m in DescriptionMode],
                   default=DescriptionMode.POSITIONAL.value)
    p.add_argument('--subset', choices=[DatasetSubset.LANGIR_IRSTD.value, DatasetSubset.LANGIR_SIRST.value],
                   default=DatasetSubset.LANGIR_IRSTD.value)

    p = sub.add_parser('stats', help="Частоты позиционных слов в описаниях")
    _add_dataset_args(p)
    p.add_argument('--json', type=Path, help="Записать частоты в JSON")

    p = sub.add_parser('report', help="Таблицы метрик и график потерь")
    p.add_argument('--run', type=Path, required=True, help="JSON отчет обучения")
    p.add_argument('--metrics', action='append', default=[], metavar='NAME=PATH',
                   help="Дополнительный JSON с метриками (можно повторять)")
    p.add_argument('--out', type=Path, required=True)

    return parser


# ============== КОМАНДЫ ==============

def build_train_config(args: argparse.Namespace) -> TrainConfig:
    """Значения из файла конфигурации, переопределенные флагами"""
    values: Dict[str, Any] = dict(load_config_file(getattr(args, 'config', None)))
    for name in TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    try:
        return TrainConfig(**values)
    except pydantic.ValidationError as e:
        raise ConfigError(f"invalid train config: {_pydantic_summary(e)}") from e


def _pydantic_summary(error: pydantic.ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(x) for x in item['loc']) or 'config'
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def _manifest(args: argparse.Namespace):
    return load_manifest(args.root, args.subset)


def cmd_train(args: argparse.Namespace) -> int:
    from pipeline.reports import write_json
    from pipeline.train import train

    config = build_train_config(args)
    manifest = _manifest(args)
    provider = make_provider(args.provider, seed=config.seed, dim=config.descriptor_dim,
                             model_id=args.embedding_model, device=config.device)

    report = train(config, manifest, provider)
    out = args.report_out or Path(config.checkpoint_dir) / "run_report.json"
    write_json(out, report.to_dict())

    print(f"epochs: {report.epochs_completed}, final loss: {report.loss_history[-1]:.4f}")
    print(f"parameters: {report.parameter_count}, time: {format_duration(report.total_seconds)}")
    if report.metrics is not None:
        print(f"{report.metrics_split}: IoU {report.metrics.iou:.4f}, nIoU {report.metrics.niou:.4f}, "
              f"Pd {report.metrics.pd:.4f}, Fa {report.metrics.fa:.3e}")
    print(f"checkpoint: {report.checkpoint_path}")
    print(f"report: {out}")
    return EXIT_OK


def _expected_arch(args: argparse.Namespace, file_values: Dict[str, Any],
                   config: LGNetConfig) -> Optional[LGNetConfig]:
    """Архитектура из файла и флагов поверх конфигурации чекпоинта; None, если ничего не задано"""
    overrides = {name: file_values[name] for name in ARCH_FLAGS if name in file_values}
    for name in ARCH_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if not overrides:
        return None
    expected = config.model_copy(update=overrides)
    check_compatible(config, expected)
    return expected


def cmd_evaluate(args: argparse.Namespace) -> int:
    from pipeline.evaluate import evaluate, evaluate_modes, measure_inference_time
    from pipeline.reports import metrics_table, write_json

    file_values = load_config_file(args.config)
    threshold = args.threshold if args.threshold is not None else file_values.get('threshold')
    centroid_tol = args.centroid_tol if args.centroid_tol is not None else file_values.get('centroid_tol')
    device = args.device or file_values.get('device', 'cpu')

    manifest = _manifest(args)
    model, _ = load_checkpoint(args.checkpoint, map_location=device)
    expected = _expected_arch(args, file_values, model.config)
    provider = make_provider(args.provider, seed=model.config.seed, dim=model.config.descriptor_dim,
                             model_id=args.embedding_model, device=device)

    if args.modes:
        reports = evaluate_modes(args.checkpoint, manifest, provider, threshold, centroid_tol,
                                 expected=expected, device=device)
    else:
        reports = {args.language_mode: evaluate(
            args.checkpoint, manifest, provider, LanguageMode(args.language_mode),
            threshold, centroid_tol, expected=expected, device=device,
        )}

    print(metrics_table(reports))
    output: Dict[str, Any] = {name: report.to_dict() for name, report in reports.items()}

    if args.timing:
        ms = measure_inference_time(model)
        output['inference_ms'] = ms
        print(f"inference: {ms:.2f} ms/image at {tuple(model.config.input_size)}")

    if args.out:
        write_json(args.out, output)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    from pipeline.generate import generate_descriptions
    from utils.vlm_client import make_client

    manifest = _manifest(args)
    values: Dict[str, Any] = {'provider': VLMProvider(args.vlm), 'seed': args.seed}
    for field_name, value in (
        ('endpoint', args.endpoint),
        ('model_id', args.model_id),
        ('api_key_env', args.api_key_env),
        ('max_in_flight', args.max_in_flight),
        ('rate_limit_per_minute', args.rate_limit),
        ('max_attempts', args.max_attempts),
    ):
        if value is not None:
            values[field_name] = value
    max_words = None if args.no_word_limit else args.max_words
    values['max_words'] = max_words

    try:
        vlm_config = VLMConfig(**values)
    except pydantic.ValidationError as e:
        raise ConfigError(f"invalid VLM config: {_pydantic_summary(e)}") from e

    if vlm_config.provider != VLMProvider.STUB and not vlm_config.get_api_key():
        logger.warning(f"Переменная {vlm_config.api_key_env} не задана, запросы без ключа API")

    few_shot = None
    if args.few_shot_id:
        storage = LangIRStorage(manifest.root, manifest.subset)
        few_shot = []
        for sample_id in args.few_shot_id:
            text = storage.read_description(sample_id)
            if text is None:
                raise ConfigError(f"few_shot example {sample_id}: нет файла описания")
            few_shot.append((storage.image_path(sample_id).read_bytes(), text))

    summary = generate_descriptions(
        manifest,
        make_client(vlm_config),
        style=PromptStyle(args.style),
        max_words=max_words,
        max_in_flight=vlm_config.max_in_flight,
        few_shot_examples=few_shot,
        split=Split(args.split) if args.split else None,
        overwrite=not args.keep_existing,
    )
    for key, value in summary.to_dict().items():
        print(f"{key}: {value}")
    return EXIT_OK if summary.failed == 0 else EXIT_FAILURE


def synth_dataset(out: Path, n: int, seed: int = 0, size: Sequence[int] = (256, 256),
                  num_targets: int = 1, background: Background = Background.FLAT,
                  test_fraction: float = 0.25,
                  description_mode: DescriptionMode = DescriptionMode.POSITIONAL,
                  subset: DatasetSubset = DatasetSubset.LANGIR_IRSTD):
    """
    Синтетический набор LangIR; последние round(n * test_fraction) образцов идут в test

    Returns:
        DatasetManifest
    """
    if n < 1:
        raise ConfigError("n должно быть >= 1")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError("test_fraction должно быть в [0, 1)")

    n_test = int(round(n * test_fraction))
    samples: List[Sample] = []
    for i in range(n):
        params = SceneParams(
            image_size=tuple(size),
            num_targets=num_targets,
            background=background,
            rng_seed=seed * 1_000_003 + i,
        )
        image, mask = synth_scene(params, image_id=str(i))
        prior = synth_description(mask, description_mode)
        split = Split.TEST if i >= n - n_test else Split.TRAIN
        samples.append(Sample(image=image, mask=mask, prior=prior, split=split))

    return write_langir(out, subset, samples)


def cmd_synth(args: argparse.Namespace) -> int:
    manifest = synth_dataset(
        args.out, args.n, args.seed, args.size, args.num_targets,
        Background(args.background), args.test_fraction,
        DescriptionMode(args.description_mode), DatasetSubset(args.subset),
    )
    print(f"written: {len(manifest.train_ids)} train, {len(manifest.test_ids)} test -> {manifest.root}")
    return EXIT_OK


def split_word_counts(root: Path, subset: Optional[str] = None) -> Dict[str, Any]:
    """Частоты позиционных слов по разбиениям и в сумме"""
    manifest = load_manifest(root, subset)
    storage = LangIRStorage(manifest.root, manifest.subset)
    tables = {}
    for split in (Split.TRAIN, Split.TEST):
        texts = [storage.read_description(i) for i in manifest.ids_for(split)]
        tables[split.value] = word_count_stats(t for t in texts if t is not None)
    tables['total'] = tables[Split.TRAIN.value] + tables[Split.TEST.value]
    return tables


def cmd_stats(args: argparse.Namespace) -> int:
    from pipeline.reports import counts_table, write_json

    tables = split_word_counts(args.root, args.subset)
    print(counts_table(tables))
    if args.json:
        write_json(args.json, {name: table.as_dict() for name, table in tables.items()})
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from pipeline.reports import read_json, render_report

    try:
        run_report = read_json(args.run)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read run report {args.run}: {e}") from e

    extra: Dict[str, Any] = {}
    for item in args.metrics:
        name, sep, path = item.partition('=')
        if not sep:
            raise ConfigError(f"--metrics ожидает NAME=PATH, получено {item!r}")
        data = read_json(Path(path))
        # Файл evaluate может содержать несколько режимов
        if 'iou' in data:
            extra[name] = data
        else:
            extra.update({f"{name}:{mode}": m for mode, m in data.items() if isinstance(m, dict)})

    written = render_report(run_report, args.out, extra)
    for kind, path in written.items():
        print(f"{kind}: {path}")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'generate-descriptions': cmd_generate,
    'synth': cmd_synth,
    'stats': cmd_stats,
    'report': cmd_report,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Разбор аргументов и запуск подкоманды

    Args:
        argv: Аргументы без имени программы

    Returns:
        Код выхода: 0 - успех, 1 - ошибка выполнения, 2 - ошибка использования
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return COMMANDS[args.command](args)
    except pydantic.ValidationError as e:
        print(f"error: {args.command}: {_pydantic_summary(e)}", file=sys.stderr)
        return EXIT_FAILURE
    except LGNetError as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
