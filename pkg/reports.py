"""
CSV reports and the HSV decay chart
"""
import csv
import logging
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from hankel import HsvReport

logger = logging.getLogger(__name__)

HSV_COLUMNS = ['layer', 'index', 'sigma', 'cumulative_energy_fraction']
METRICS_COLUMNS = ['epoch', 'train_loss', 'ce', 'reg', 'eval_acc', 'wall_time_s']
CERTIFICATE_COLUMNS = ['layer', 'r', 'tail_sum', 'bound_constant']
LYAP_COLUMNS = ['solver', 'n', 'median_s', 'runs']
SCAN_COLUMNS = ['method', 'length', 'workers', 'median_s', 'runs']
SWEEP_COLUMNS = ['trunc_ratio', 'mean_rank', 'accuracy']
EVAL_COLUMNS = ['checkpoint', 'accuracy', 'median_batch_s']

LAYER_COLORS = [(31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
                (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127)]


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(rows: Iterable, path: Path, columns: Sequence[str]) -> Path:
    """Write dict or dataclass rows with a fixed column order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator='\n')
        writer.writeheader()
        for row in rows:
            values = asdict(row) if is_dataclass(row) else row
            writer.writerow({c: _format(values[c]) for c in columns})
    logger.info(f"✓ Wrote {path}")
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def write_hsv_csv(report: HsvReport, path: Path) -> Path:
    return write_csv(report.to_rows(), path, HSV_COLUMNS)


def write_metrics_csv(metrics, path: Path) -> Path:
    return write_csv(metrics, path, METRICS_COLUMNS)


def write_certificate_csv(rows, path: Path) -> Path:
    return write_csv(rows, path, CERTIFICATE_COLUMNS)


def plot_hsv_decay(report: HsvReport, path: Path, width: int = 800, height: int = 500) -> Path:
    """
    Line chart of log10(sigma_i) against index i, one line per layer

    Zero singular values are not drawn.
    """
    margin = 60
    img = Image.new('RGB', (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()

    positive = [s[s > 0] for s in report.sigmas]
    values = np.concatenate([np.log10(s) for s in positive if s.size]) if any(s.size for s in positive) else np.zeros(1)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    longest = max(max((s.size for s in report.sigmas), default=1), 2)

    def to_xy(i, v):
        x = margin + (width - 2 * margin) * (i - 1) / (longest - 1)
        y = height - margin - (height - 2 * margin) * (v - lo) / (hi - lo)
        return x, y

    draw.line([(margin, margin), (margin, height - margin), (width - margin, height - margin)],
              fill=(0, 0, 0), width=1)
    draw.text((width // 2 - 40, height - margin + 25), "index i", font=font, fill=(0, 0, 0))
    draw.text((5, margin - 20), "log10 sigma_i", font=font, fill=(0, 0, 0))
    draw.text((5, margin), f"{hi:.1f}", font=font, fill=(0, 0, 0))
    draw.text((5, height - margin - 10), f"{lo:.1f}", font=font, fill=(0, 0, 0))
    draw.text((width - margin - 10, height - margin + 5), str(longest), font=font, fill=(0, 0, 0))

    for layer, s in enumerate(positive):
        color = LAYER_COLORS[layer % len(LAYER_COLORS)]
        points = [to_xy(i + 1, np.log10(v)) for i, v in enumerate(s)]
        if len(points) > 1:
            draw.line(points, fill=color, width=2)
        for x, y in points:
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=color)
        draw.text((width - margin - 70, margin + 15 * layer), f"layer {layer}", font=font, fill=color)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    logger.info(f"✓ Wrote {path}")
    return path
