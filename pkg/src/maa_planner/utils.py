from enum import Enum
from types import NoneType, UnionType
from typing import Any, TypedDict, TypeVar, cast, get_args, get_origin, is_typeddict

import numpy as np

TD = TypeVar("TD", bound=TypedDict)


def significant(value: float | None, digits: int = 17) -> str:
    "Render a float for machine-readable output."
    if value is None:
        return ""
    return format(float(value), f".{digits}g")


def probability_rows_ok(table: np.ndarray, tolerance: float) -> np.ndarray:
    "Mask of rows (last axis) that sum to 1 within `tolerance`."
    return np.abs(table.sum(axis=-1) - 1.0) <= tolerance


def _check_value(value: Any, value_type: Any, path: str):
    if value_type is Any:
        return
    if isinstance(value_type, UnionType):
        for it in get_args(value_type):
            try:
                _check_value(value, it, path)
                break
            except TypeError:
                pass
        else:
            raise TypeError(f"{path}: {value!r} is not one of {value_type}")
        return
    container_type = get_origin(value_type)
    if container_type is list:
        if not isinstance(value, list):
            raise TypeError(f"{path}: {value!r} is not a list")
        item_type = get_args(value_type)[0]
        for pos, item in enumerate(value):
            _check_value(item, item_type, f"{path}[{pos}]")
    elif container_type is dict:
        if not isinstance(value, dict):
            raise TypeError(f"{path}: {value!r} is not a dict")
        _, item_type = get_args(value_type)
        for key, item in value.items():
            _check_value(item, item_type, f"{path}.{key}")
    elif is_typeddict(value_type):
        validate_dict(value, value_type, path)
    elif value_type is NoneType:
        if value is not None:
            raise TypeError(f"{path}: {value!r} is not None")
    elif isinstance(value_type, type) and issubclass(value_type, Enum):
        if value not in {it.value for it in value_type}:
            raise TypeError(f"{path}: {value!r} is not in {value_type.__name__}")
    elif value_type is float:
        # json writes 3.0 back as 3.0, but hand-written records may say 3
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{path}: {value!r} is not a number")
    elif value_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{path}: {value!r} is not an integer")
    elif not isinstance(value, value_type):
        raise TypeError(f"{path}: {value!r} is not {value_type.__name__}")


def validate_dict(data: Any, struct_type: type[TD], path: str = "$") -> TD:
    "Check a decoded JSON object against a TypedDict schema."
    if not isinstance(data, dict):
        raise TypeError(f"{path}: {data!r} is not a {struct_type.__name__}")
    for key, value_type in struct_type.__annotations__.items():
        if key not in data:
            raise ValueError(f"Key '{key}' is missing")
        _check_value(data[key], value_type, f"{path}.{key}")
    return cast(TD, data)
