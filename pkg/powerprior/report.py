"""
Run artifacts: CSV/JSON writers, the run manifest, density curves and
the cross-scenario comparison table.

Manifest layout (``manifest.json`` in every output directory)::

    {
      "command": "fit",
      "config": {...merged flags and config-file values...},
      "artifacts": {"draws.csv": "<sha256>", ...},
      "versions": {"powerprior": "1.0.0", "numpy": "...", ...}
    }
"""

import hashlib
import json
import logging
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.neighbors import KernelDensity

from powerprior import __version__
from powerprior.config import SCENARIO_ORDER
from powerprior.errors import DataValidationError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
SUMMARY_FILE = "summary.json"
MEAN_DRAWS_FILE = "ybar_draws.csv"
PACKAGES = ("numpy", "scipy", "pandas", "scikit-learn", "pydantic", "python-dotenv")

PathLike = Union[str, Path]


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_json(payload: Mapping, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable), encoding="utf-8")
    return path


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"powerprior": __version__}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


def write_manifest(out_dir: PathLike, command: str, config: Mapping, artifacts: Iterable[PathLike]) -> Path:
    """Config echo, artifact hashes and package versions; no timestamps."""
    out_dir = Path(out_dir)
    hashes = {
        str(Path(path).resolve().relative_to(out_dir.resolve())): sha256_file(path)
        for path in sorted(artifacts, key=str)
    }
    payload = {"command": command, "config": dict(config), "artifacts": hashes, "versions": package_versions()}
    path = write_json(payload, out_dir / "manifest.json")
    logger.info(f"manifest 작성: {path} ({len(hashes)} artifacts)")
    return path


def density_curve(draws: np.ndarray, grid_points: int = 512) -> pd.DataFrame:
    """
    Gaussian kernel density of the draws on an even grid (Scott bandwidth
    sigma * n^(-1/5)); the curve integrates to one over the grid.
    """
    draws = np.asarray(draws, dtype=float).ravel()
    n = draws.shape[0]
    sd = float(np.std(draws, ddof=1)) if n > 1 else 0.0
    bandwidth = sd * n ** (-0.2) if sd > 0 else max(abs(float(draws.mean())) * 1e-6, 1e-12)
    kde = KernelDensity(kernel="gaussian", bandwidth=bandwidth).fit(draws[:, None])
    grid = np.linspace(draws.min() - 5 * bandwidth, draws.max() + 5 * bandwidth, grid_points)
    density = np.exp(kde.score_samples(grid[:, None]))
    return pd.DataFrame({"grid": grid, "density": density})


def collect_runs(out_dir: PathLike) -> List[Tuple[Path, dict]]:
    """Every ``summary.json`` under ``out_dir``, ordered B, C, D, E, G then by path."""
    out_dir = Path(out_dir)
    order = {kind.value: i for i, kind in enumerate(SCENARIO_ORDER)}
    runs = []
    for path in sorted(out_dir.rglob(SUMMARY_FILE)):
        payload = json.loads(path.read_text(encoding="utf-8"))
        if "scenario" in payload and "summary" in payload:
            runs.append((path, payload))
    runs.sort(key=lambda item: (order.get(item[1]["scenario"], len(order)), str(item[0])))
    return runs


def build_report(out_dir: PathLike, report_dir: Optional[PathLike] = None) -> Tuple[pd.DataFrame, List[Path]]:
    """
    여러 실행 결과를 하나의 비교표로 합칩니다 (Model, PM, PSD, PCV, 95% CI).

    Also writes one density CSV per run with saved Ybar draws and a note
    line with the posterior HPD of the discount factor.

    Raises:
        DataValidationError: no runs under ``out_dir``
    """
    out_dir = Path(out_dir)
    report_dir = Path(report_dir) if report_dir is not None else out_dir
    report_dir.mkdir(parents=True, exist_ok=True)
    runs = collect_runs(out_dir)
    if not runs:
        raise DataValidationError(f"no runs with {SUMMARY_FILE} found under {out_dir}")

    rows, notes, artifacts = [], [], []
    for path, payload in runs:
        summary = payload["summary"]
        model = payload["scenario"]
        if payload.get("method"):
            model = f"{model} ({payload['method']})"
        rows.append(
            {
                "Model": model,
                "PM": summary["PM"],
                "PSD": summary["PSD"],
                "PCV": summary["PCV"],
                "CI_low": summary["hpd_low"],
                "CI_high": summary["hpd_high"],
                "source": str(path.parent.relative_to(out_dir)),
            }
        )
        if payload.get("a_hpd"):
            low, high = payload["a_hpd"]
            notes.append(f"{model}: 95% HPD of a is ({low:.3f}, {high:.3f})")
        draws_path = path.parent / MEAN_DRAWS_FILE
        if draws_path.exists():
            draws = pd.read_csv(draws_path)["ybar"].to_numpy()
            suffix = f"{len(artifacts) + 1:02d}_{payload['scenario']}"
            artifacts.append(write_frame(density_curve(draws), report_dir / f"density_{suffix}.csv"))

    table = pd.DataFrame(rows)
    artifacts.append(write_frame(table, report_dir / "comparison.csv"))
    artifacts.append(write_json({"rows": rows, "notes": notes}, report_dir / "comparison.json"))
    for line in notes:
        logger.info(line)
    return table, artifacts
