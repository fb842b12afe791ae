"""
Главный файл приложения - LGNet
Обнаружение малых целей на ИК-изображениях с языковым приором от VLM
"""

import logging
import os
import sys

from config.settings import get_settings

settings = get_settings()

# Настройка логирования
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
    format=settings.LOG_FORMAT,
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)

logger = logging.getLogger(__name__)

# Добавляем путь к проекту в sys.path
project_root = os.path.dirname(os.path.abspath(__file__))
if project_root not in sys.path:
    sys.path.insert(0, project_root)


def main(argv=None) -> int:
    """Главная функция приложения"""
    from pipeline.cli import cli_dispatch

    try:
        return cli_dispatch(sys.argv[1:] if argv is None else argv)
    except KeyboardInterrupt:
        logger.info("Остановлено пользователем")
        return 130


if __name__ == "__main__":
    sys.exit(main())
