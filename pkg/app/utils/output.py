"""Utility module for writing result tables.

Every table carries the config hash and seed so results are self-describing.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import pandas as pd

from app.core.evaluator import RECALL_POINTS
from app.models.detection import EvalResult

logger = logging.getLogger(__name__)


def write_table(rows: Sequence[Dict], path: Union[str, Path], config_hash: str, seed: int,
                columns: Sequence[str] = ()) -> Path:
    """Write rows as CSV with trailing config_hash and seed columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns) or None)
    frame["config_hash"] = config_hash
    frame["seed"] = seed
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def eval_to_frame(result: EvalResult) -> pd.DataFrame:
    """One row per metric."""
    return pd.DataFrame(result.metric_rows(), columns=["metric", "value"])


def _json_value(value: float) -> Optional[float]:
    return None if math.isnan(value) else value


def eval_to_dict(result: EvalResult) -> Dict:
    """Nested by threshold and scale; an empty scale bin becomes null."""
    return {
        "ap": result.ap,
        "ap50": result.ap50,
        "ap75": result.ap75,
        "by_threshold": dict(sorted(result.ap_at.items())),
        "by_scale": {
            "small": _json_value(result.ap_small),
            "medium": _json_value(result.ap_medium),
            "large": _json_value(result.ap_large),
        },
    }


def write_metrics(result: EvalResult, directory: Union[str, Path], config_hash: str, seed: int) -> List[Path]:
    """Write metrics.csv and metrics.json."""
    directory = Path(directory)
    csv_path = write_table(eval_to_frame(result).to_dict("records"), directory / "metrics.csv", config_hash, seed)
    json_path = directory / "metrics.json"
    document = {"config_hash": config_hash, "seed": seed, **eval_to_dict(result)}
    json_path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [csv_path, json_path]


def pr_curve_rows(result: EvalResult) -> List[Dict]:
    """Long-format PR samples: threshold, recall, precision."""
    rows = []
    for key in sorted(result.pr_curves):
        for recall, precision in zip(RECALL_POINTS, result.pr_curves[key]):
            rows.append({"threshold": key, "recall": round(float(recall), 2), "precision": precision})
    return rows


def write_pr_curves(result: EvalResult, directory: Union[str, Path], config_hash: str, seed: int) -> Path:
    return write_table(pr_curve_rows(result), Path(directory) / "pr_curves.csv", config_hash, seed,
                       columns=["threshold", "recall", "precision"])
