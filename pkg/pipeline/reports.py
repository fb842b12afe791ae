"""
Отчеты: JSON, текстовые таблицы (pandas) и графики (plotly)
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import pandas as pd
import plotly.express as px

from config.settings import get_settings
from utils.helpers import CountTable, format_duration, format_metric
from utils.metrics import MetricReport

logger = logging.getLogger(__name__)


def write_json(path: Path, data: Any) -> Path:
    """Запись JSON в UTF-8 с отступами"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True), encoding='utf-8')
    return path


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding='utf-8'))


def metrics_frame(reports: Mapping[str, MetricReport]) -> pd.DataFrame:
    """Таблица метрик: IoU, nIoU, Pd в процентах, Fa в единицах 1e-6"""
    scale = get_settings().FA_REPORT_SCALE
    rows = []
    for name, report in reports.items():
        rows.append({
            'run': name,
            'IoU': format_metric(report.iou, 0.01),
            'nIoU': format_metric(report.niou, 0.01),
            'Pd': format_metric(report.pd, 0.01),
            'Fa (1e-6)': format_metric(report.fa, scale),
            'images': report.n,
        })
    return pd.DataFrame(rows, columns=['run', 'IoU', 'nIoU', 'Pd', 'Fa (1e-6)', 'images'])


def metrics_table(reports: Mapping[str, MetricReport]) -> str:
    return metrics_frame(reports).to_string(index=False)


def counts_table(rows: Mapping[str, CountTable]) -> str:
    """Таблица частот позиционных слов по разбиениям"""
    df = pd.DataFrame([{'split': name, **table.as_dict()} for name, table in rows.items()])
    return df.to_string(index=False)


def loss_curve_figure(loss_history: List[float], title: str = "Функция потерь по эпохам"):
    df = pd.DataFrame({'epoch': range(1, len(loss_history) + 1), 'loss': loss_history})
    fig = px.line(df, x='epoch', y='loss', title=title, markers=len(loss_history) <= 50)
    fig.update_layout(
        yaxis_title="Loss (глубокий надзор)",
        xaxis_title="Эпоха"
    )
    return fig


def write_loss_curve(loss_history: List[float], path: Path) -> Path:
    """Интерактивный график потерь в автономный HTML-файл (plotly.js встроен)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    loss_curve_figure(loss_history).write_html(str(path), include_plotlyjs=True)
    return path


def write_loss_curve_image(loss_history: List[float], path: Path, dpi: int = 150) -> Path:
    """График потерь в PNG"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = range(1, len(loss_history) + 1)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, loss_history, color="#1f77b4", marker="o" if len(loss_history) <= 50 else None)
    ax.set_xlabel("Эпоха")
    ax.set_ylabel("Loss (глубокий надзор)")
    ax.set_title("Функция потерь по эпохам")
    ax.grid(True, alpha=0.2)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path


def render_report(run_report: Mapping[str, Any], out_dir: Path,
                  extra_metrics: Optional[Mapping[str, Mapping[str, Any]]] = None) -> Dict[str, Path]:
    """
    Отчет по результатам обучения и оценки

    Args:
        run_report: Словарь RunReport (to_dict)
        out_dir: Каталог отчета
        extra_metrics: Дополнительные MetricReport по имени (например, режимы языка)

    Returns:
        Пути записанных файлов
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    reports: Dict[str, MetricReport] = {}
    if run_report.get('metrics'):
        reports[run_report.get('metrics_split') or 'final'] = MetricReport.from_dict(run_report['metrics'])
    for name, data in (extra_metrics or {}).items():
        reports[name] = MetricReport.from_dict(data)

    lines = []
    if run_report.get('parameter_count'):
        lines.append(f"Параметров: {run_report['parameter_count']}")
    seconds = run_report.get('seconds_per_epoch') or []
    if seconds:
        lines.append(f"Эпох: {len(seconds)}, среднее время эпохи: {format_duration(sum(seconds) / len(seconds))}")
    if reports:
        lines.append("")
        lines.append(metrics_table(reports))

    table_path = out_dir / "metrics.txt"
    table_path.write_text("\n".join(lines) + "\n", encoding='utf-8')
    written['table'] = table_path

    written['json'] = write_json(out_dir / "report.json", {
        'run': dict(run_report),
        'metrics': {name: report.to_dict() for name, report in reports.items()},
    })

    loss_history = run_report.get('loss_history') or []
    if loss_history:
        written['loss_curve'] = write_loss_curve(loss_history, out_dir / "loss_curve.html")
        written['loss_curve_image'] = write_loss_curve_image(loss_history, out_dir / "loss_curve.png")

    logger.info(f"Отчет записан в {out_dir}: {', '.join(p.name for p in written.values())}")
    return written
