"""
CSV Result Writer
Every experiment table goes through here so numeric formatting is identical across commands
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import pandas as pd

from config import get_config

logger = logging.getLogger(__name__)


def write_csv(frame: pd.DataFrame, path: Union[str, Path], columns: Optional[List[str]] = None) -> Path:
    """
    Write a DataFrame with a header row, 9 significant digits and NA for undefined values

    Args:
        frame: table to write
        path: destination file
        columns: enforced column order
    """
    cfg = get_config()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is not None:
        frame = frame.reindex(columns=columns)
    frame.to_csv(path, index=False, float_format=cfg.CSV_FLOAT_FORMAT, na_rep=cfg.CSV_NA_REP,
                 lineterminator='\n')
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Read a table written by write_csv; NA cells come back as NaN"""
    return pd.read_csv(path, na_values=[get_config().CSV_NA_REP], keep_default_na=False)
