from pathlib import Path

from opd.errors import ConfigurationError

RAW_DATA_DIR = Path(__file__).parent / "raw"
MEUSE_FILE = "meuse.csv"


def find_dataset(name: str | None = None, data_dir: Path | None = None) -> Path:
    """Find an input CSV in the raw data directory.

    With a name, that file is returned; otherwise the largest CSV present.
    """
    if data_dir is None:
        data_dir = RAW_DATA_DIR

    if not data_dir.exists():
        raise ConfigurationError(
            f"Data directory {data_dir} not found. "
            "Place your observation CSV in data/raw/ or pass --data."
        )

    if name is not None:
        path = data_dir / name
        if not path.exists():
            raise ConfigurationError(f"{name} not found in {data_dir}")
        return path

    data_files = list(data_dir.glob("*.csv"))
    if not data_files:
        raise ConfigurationError(
            f"No CSV files found in {data_dir}. Place your observation CSV in data/raw/ or pass --data."
        )
    return max(data_files, key=lambda f: f.stat().st_size)


def find_meuse(data_dir: Path | None = None) -> Path | None:
    """Path to the Meuse zinc data if the user has placed it under data/raw/."""
    path = (data_dir or RAW_DATA_DIR) / MEUSE_FILE
    return path if path.exists() else None
