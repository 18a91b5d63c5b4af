"""CSV and JSON file access.

CSV dialect: comma separated, header row, UTF-8, "." decimal, no thousands separator.
"""
import json
from pathlib import Path
from typing import Union

import pandas as pd

from .errors import ConfigError, DataError

PathLike = Union[str, Path]


def read_table(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    try:
        # read_csv renames repeated headers, so inspect the raw header row first
        header = pd.read_csv(path, sep=",", header=None, nrows=1, dtype=str, encoding="utf-8").iloc[0]
        if header.duplicated().any():
            raise DataError(f"{path} has duplicate column names: " + ", ".join(sorted(set(header[header.duplicated()]))))
        table = pd.read_csv(path, sep=",", header=0, encoding="utf-8", decimal=".", thousands=None)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return table


def table_to_csv(table: pd.DataFrame) -> str:
    return table.to_csv(index=False, lineterminator="\n")


def write_table(table: pd.DataFrame, path: PathLike) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(table_to_csv(table))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_json(path: PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return doc
