"""
Spark-based grid prediction.

Distributes reports/maps.predict_grid_row over partitions of the grid. The
fitted model is broadcast once; row k always draws from substream k, so the
output matches the single-process run regardless of partitioning.
"""

import os
import sys
from dataclasses import asdict

import numpy as np
import pandas as pd
from pyspark.sql import SparkSession
from pyspark.sql.types import DoubleType, LongType, StringType, StructField, StructType

from data.models import IntervalKind, PredictionRow, RunConfig
from opd.lognormal import LogGaussianModel
from reports.maps import predict_grid_row

ROW_FIELDS = ["x", "y", "lam", "delta", "bias", "rmspe", "elp", "elj", "lower", "upper", "normaliser"]

RESULT_SCHEMA = StructType(
    [StructField("row", LongType(), False)]
    + [StructField(name, DoubleType(), True) for name in ROW_FIELDS]
    + [StructField("error", StringType(), True)]
)


def get_or_create_session(app_name: str = "OpdGridPrediction") -> SparkSession:
    """Return (or create) a local SparkSession."""
    os.environ.setdefault("PYSPARK_PYTHON", sys.executable)
    os.environ.setdefault("PYSPARK_DRIVER_PYTHON", sys.executable)

    return (
        SparkSession.builder
        .appName(app_name)
        .master("local[*]")
        .config("spark.sql.shuffle.partitions", "8")
        .config("spark.driver.memory", "4g")
        .config("spark.driver.host", "127.0.0.1")
        .config("spark.driver.bindAddress", "127.0.0.1")
        .config("spark.pyspark.python", sys.executable)
        .getOrCreate()
    )


def _row_tuple(k: int, row: PredictionRow) -> tuple:
    values = asdict(row)
    return (k, *[None if values[name] is None else float(values[name]) for name in ROW_FIELDS],
            values["error"])


def predict_grid(spark: SparkSession, model: LogGaussianModel, grid: pd.DataFrame, X: np.ndarray,
                 errors: list[str], run: RunConfig, interval_kind: IntervalKind | None = None,
                 selected: float | None = None, partitions: int = 8) -> list[PredictionRow]:
    """Prediction rows for every grid site, in grid order."""
    xs, ys = grid["x"].to_numpy(float), grid["y"].to_numpy(float)
    tasks = [(k, float(xs[k]), float(ys[k]), X[k].tolist(), errors[k]) for k in range(len(grid))]
    shared = spark.sparkContext.broadcast((model, run, interval_kind, selected))

    def run_partition(items):
        fitted, config, kind, chosen = shared.value
        for k, x, y, design, error in items:
            row = predict_grid_row(fitted, x, y, np.asarray(design, dtype=float), error, config,
                                   kind, chosen, stream=k)
            yield _row_tuple(k, row)

    rdd = spark.sparkContext.parallelize(tasks, max(1, partitions)).mapPartitions(run_partition)
    result = spark.createDataFrame(rdd, RESULT_SCHEMA).orderBy("row").collect()
    shared.unpersist()
    return [
        PredictionRow(**{name: r[name] for name in ROW_FIELDS}, error=r["error"] or "")
        for r in result
    ]
