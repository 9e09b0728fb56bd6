import json
import threading
from pathlib import Path
from typing import List, Optional, Union

import pandas as pd


class JsonlWriter:
    """Append-only JSON-lines sink for metrics, loss traces and audits"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        line = json.dumps(record, sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as f:
            f.write(line + "\n")

    def __bool__(self) -> bool:
        return self.path is not None


def read_jsonl(path: Union[str, Path]) -> List[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """Metrics stream as a DataFrame (empty when the file is missing)"""
    records = read_jsonl(path)
    return pd.DataFrame.from_records(records)
