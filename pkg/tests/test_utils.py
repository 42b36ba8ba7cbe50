import json

import numpy as np
import pandas as pd
import pytest

from src.errors import (ComparisonError, DataError, DomainError, EstimationError, LoadError, NumericError,
                        exit_code_for)
from src.utils import atomic_write_json, dump_json, markdown_table, parallel_map, read_json


def test_atomic_write_leaves_no_temp_file(tmp_path):
    dest = atomic_write_json(tmp_path / "sub" / "r.json", {"b": 1, "a": [0.1, 2.5]})
    assert read_json(dest) == {"b": 1, "a": [0.1, 2.5]}
    assert [p.name for p in dest.parent.iterdir()] == ["r.json"]


def test_dump_json_keeps_order_and_rejects_nan():
    assert list(json.loads(dump_json({"z": 1, "a": 2}))) == ["z", "a"]
    with pytest.raises(ValueError):
        dump_json({"x": float("nan")})


@pytest.mark.parametrize("workers", [None, 1, 4])
def test_parallel_map_preserves_order(workers):
    assert parallel_map(lambda v: v * v, range(20), max_workers=workers) == [v * v for v in range(20)]


def test_markdown_table_formats_floats_only():
    df = pd.DataFrame({"group": ["joints", "lever"], "n": [3, 2], "phi": [0.123456, -1.0]})
    lines = markdown_table(df).splitlines()
    assert lines[0] == "| group | n | phi |"
    assert lines[2] == "| joints | 3 | 0.1235 |"
    assert lines[3] == "| lever | 2 | -1.0000 |"


@pytest.mark.parametrize("exc, code", [
    (LoadError("bad"), 2),
    (ComparisonError("bad"), 2),
    (DomainError("bad"), 2),
    (FileNotFoundError("gone"), 2),
    (DataError("nan"), 3),
    (NumericError("singular"), 4),
    (EstimationError("budget"), 4),
])
def test_exit_codes(exc, code):
    assert exit_code_for(exc) == code


def test_unexpected_errors_are_reraised():
    with pytest.raises(KeyError):
        exit_code_for(KeyError("x"))
