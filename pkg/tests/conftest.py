"""Shared fixtures; the expensive trained-run fixture is session scoped."""

import numpy as np
import pytest

from dialstm.cli import main as cli_main
from dialstm.trace import load_trace_binary


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """One desk-scale training run on the pinned synthetic set (10 epochs).

    Returns a dict with the output paths and the parsed metrics rows.
    """
    out_dir = tmp_path_factory.mktemp("trained") / "run"
    code = cli_main([
        "train",
        "--set", "train.epochs=10",
        "--set", f"output.dir={out_dir}",
    ])
    assert code == 0
    metrics_path = out_dir / "metrics.csv"
    rows = []
    with open(metrics_path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        for line in f:
            cells = line.strip().split(",")
            rows.append({
                "epoch": int(cells[0]),
                "train_loss": float(cells[1]),
                "train_acc": float(cells[2]),
                "eval_acc": float(cells[3]),
                "lr": float(cells[4]),
                "status": cells[5],
            })
    return {
        "dir": out_dir,
        "checkpoint": out_dir / "checkpoint.bin",
        "metrics": out_dir / "metrics.csv",
        "config": out_dir / "config.resolved.ini",
        "header": header,
        "rows": rows,
    }


@pytest.fixture(scope="session")
def trained_trace(trained_run, tmp_path_factory):
    """Attention trace of the trained checkpoint over the eval split."""
    out_dir = tmp_path_factory.mktemp("traced")
    code = cli_main([
        "analyze", "trace",
        "--checkpoint", str(trained_run["checkpoint"]),
        "--out", str(out_dir),
    ])
    assert code == 0
    return {
        "dir": out_dir,
        "csv": out_dir / "trace.csv",
        "bin": out_dir / "trace.bin",
        "trace": load_trace_binary(out_dir / "trace.bin"),
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
