"""
Persistence for IDS Lab
CSV result tables, PGM grayscale images and JSON documents, all byte-stable across reruns
"""

import csv
import io
import json
import logging
import os
from typing import Any, Dict, List, Sequence

import numpy as np
from PIL import Image

from .core import Latent
from .metrics import Sentinel

logger = logging.getLogger(__name__)


class ResultStore:
    """
    Writers and readers for every artifact a command produces
    """

    @staticmethod
    def format_value(value: Any) -> str:
        """CSV cell text: floats at 17 significant digits, sentinels by name"""
        if isinstance(value, Sentinel):
            return value.value
        if value is None:
            return ""
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, (float, np.floating)):
            value = float(value)
            if value != value:
                return Sentinel.UNDEFINED.value
            if value in (float("inf"), float("-inf")):
                return "inf" if value > 0 else "-inf"
            return "%.17g" % value
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        return str(value)

    @staticmethod
    def csv_text(columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([ResultStore.format_value(row.get(col)) for col in columns])
        return buffer.getvalue()

    @staticmethod
    def write_csv(path: str, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> str:
        try:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as handle:
                handle.write(ResultStore.csv_text(columns, rows))
            logger.info(f"Wrote {len(rows)} rows to {path}")
            return path
        except OSError as e:
            logger.error(f"CSV write error for {path}: {str(e)}")
            raise

    @staticmethod
    def read_csv(path: str) -> List[Dict[str, str]]:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            return list(csv.DictReader(handle))

    @staticmethod
    def json_text(doc: Dict[str, Any]) -> str:
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def write_json(path: str, doc: Dict[str, Any]) -> str:
        try:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(ResultStore.json_text(doc))
            return path
        except OSError as e:
            logger.error(f"JSON write error for {path}: {str(e)}")
            raise

    @staticmethod
    def read_json(path: str) -> Dict[str, Any]:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)

    @staticmethod
    def to_gray8(image: Latent) -> np.ndarray:
        """[0, 1] intensities to 0..255, round half to even, clipped"""
        scaled = np.rint(np.asarray(image, dtype=np.float64) * 255.0)
        return np.clip(scaled, 0, 255).astype(np.uint8)

    @staticmethod
    def write_pgm(path: str, image: Latent) -> str:
        """Binary PGM (P5, 8-bit)"""
        if np.ndim(image) != 2:
            raise ValueError(f"PGM needs a 2-D image, got shape {np.shape(image)}")
        try:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            Image.fromarray(ResultStore.to_gray8(image)).save(path, format="PPM")
            return path
        except OSError as e:
            logger.error(f"PGM write error for {path}: {str(e)}")
            raise

    @staticmethod
    def read_pgm(path: str) -> Latent:
        with Image.open(path) as img:
            if img.mode != "L":
                img = img.convert("L")
            return np.asarray(img, dtype=np.float64) / 255.0

    @staticmethod
    def write_triptych(path: str, images: Sequence[Latent], gap: int = 1) -> str:
        """Side-by-side strip of equally sized grid images separated by black columns"""
        height = np.shape(images[0])[0]
        parts = []
        for i, image in enumerate(images):
            if i:
                parts.append(np.zeros((height, gap)))
            parts.append(np.asarray(image, dtype=np.float64))
        return ResultStore.write_pgm(path, np.concatenate(parts, axis=1))
