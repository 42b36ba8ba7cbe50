from pathlib import Path
from concurrent.futures import ThreadPoolExecutor
import json
import logging

import pandas as pd


def setup_logging(level="INFO"):
    logging.basicConfig(level=getattr(logging, str(level).upper()), format="%(levelname)s: %(message)s")


def ensure_dir(p: Path):
    p.mkdir(parents=True, exist_ok=True)


# ── Atomic file output ───────────────────────────────────────────────────────

def atomic_write_text(dest: Path, text: str) -> Path:
    """Write text to dest through a temp file + rename, so readers never see a partial file."""
    dest = Path(dest)
    ensure_dir(dest.parent)
    tmp = dest.with_suffix(dest.suffix + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        tmp.replace(dest)
    except Exception:
        tmp.unlink(missing_ok=True)
        raise
    return dest


def dump_json(obj) -> str:
    # repr-exact floats; insertion order kept so reruns are byte-identical
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def atomic_write_json(dest: Path, obj) -> Path:
    return atomic_write_text(dest, dump_json(obj))


def read_json(path: Path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ── Parallel evaluation ──────────────────────────────────────────────────────

def parallel_map(fn, items, max_workers=None):
    """Order-preserving map. ``max_workers`` of None or 1 runs inline."""
    items = list(items)
    if max_workers is None or max_workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


# ── Tables ───────────────────────────────────────────────────────────────────

def markdown_table(df: pd.DataFrame, float_format="{:.4f}") -> str:
    cols = [str(c) for c in df.columns]
    out = []
    out.append("| " + " | ".join(cols) + " |")
    out.append("| " + " | ".join(["---"] * len(cols)) + " |")
    for row in df.itertuples(index=False, name=None):
        vals = [float_format.format(v) if isinstance(v, float) else str(v) for v in row]
        out.append("| " + " | ".join(vals) + " |")
    return "\n".join(out)
