"""Bar chart of per-command median latency from a `bench --out` CSV.

    python scripts/plot_bench.py bench.csv -o bench.png
"""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402


logger = logging.getLogger("vtpm-lab")

EXPECTED_COLUMNS = ["command", "backend", "iteration", "nanos"]


def medians_ms(frame: pd.DataFrame) -> pd.DataFrame:
    """command x backend table of median latency in milliseconds."""
    missing = [c for c in EXPECTED_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"CSV lacks columns {missing}")
    table = frame.groupby(["command", "backend"])["nanos"].median().unstack("backend") / 1e6
    return table.reindex(frame["command"].drop_duplicates())


def plot(table: pd.DataFrame, out: Path) -> Path:
    fig, ax = plt.subplots(figsize=(max(6, len(table) * 0.8), 4))
    x = np.arange(len(table))
    width = 0.8 / max(1, len(table.columns))
    for i, backend in enumerate(table.columns):
        ax.bar(x + i * width, table[backend].to_numpy(), width, label=backend)
    ax.set_xticks(x + width * (len(table.columns) - 1) / 2)
    ax.set_xticklabels(table.index, rotation=45, ha="right")
    ax.set_ylabel("median latency (ms)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description="plot vtpm-lab bench CSV")
    parser.add_argument("csv", type=Path)
    parser.add_argument("-o", "--out", type=Path, default=Path("bench.png"))
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s %(message)s")
    table = medians_ms(pd.read_csv(args.csv))
    print(table.round(3).to_string())
    logger.info("[bench/plot] wrote %s", plot(table, args.out))


if __name__ == "__main__":
    main()
