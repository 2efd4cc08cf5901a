from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from typing_extensions import Self


class Serializable:
    "Objects that round-trip through JSON-compatible dictionaries."

    def serialize(self) -> Any:
        raise NotImplementedError()

    @classmethod
    def deserialize(cls, data: Any) -> Self:
        raise NotImplementedError()

    def to_json(self) -> str:
        return json.dumps(self.serialize(), indent=4)

    def save_to_file(self, filename: str | Path):
        "Save the object to a JSON file."
        with open(filename, "w", encoding="utf-8") as file:
            file.write(self.to_json())
            file.write("\n")

    @classmethod
    def load_from_file(cls, filename: str | Path) -> Self:
        "Load an object from a JSON file."
        with open(filename, "r", encoding="utf-8") as file:
            return cls.deserialize(json.load(file))
