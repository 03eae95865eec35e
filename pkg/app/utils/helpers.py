import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
from pydantic import BaseModel

from app.config import settings

logger = logging.getLogger(__name__)


def config_hash(config: Union[BaseModel, Dict[str, Any]]) -> str:
    """Short stable digest of a config, stored with checkpoints."""
    payload = config.model_dump(mode="json", by_alias=True) if isinstance(config, BaseModel) else config
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def configure_torch(num_threads: Optional[int] = None):
    """Pin intra-op threads so CPU runs are reproducible."""
    torch.set_num_threads(num_threads or settings.TORCH_NUM_THREADS)


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


class JsonlWriter:
    """Line-delimited JSON log, truncated when opened so reruns rewrite it."""

    def __init__(self, path: Optional[Union[str, Path]]):
        self.path = Path(path) if path else None
        self._handle = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("w", encoding="utf-8")

    def write(self, record: Dict[str, Any]):
        if self._handle is None:
            return
        self._handle.write(json.dumps(record) + "\n")
        self._handle.flush()

    def close(self):
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc):
        self.close()
