"""The base class of pcefusion records."""
import json
from abc import ABC, abstractmethod
from typing import Optional


class Component(ABC):
    """The base of records that are written to run files: structures, graphs, devices, splits, and reports."""

    def __repr__(self) -> str:
        return self.to_string()

    @abstractmethod
    def to_dict(self) -> dict:
        """Convert this object into a JSON-compatible dictionary."""
        raise NotImplementedError

    @abstractmethod
    def to_string(self) -> str:
        """Convert this object into a string."""
        raise NotImplementedError

    def to_json(self, indent: Optional[int] = None) -> str:
        """Serialize :meth:`to_dict` as JSON, one line unless ``indent`` is given."""
        return json.dumps(self.to_dict(), indent=indent)

    def save_json(self, path: str) -> None:
        """Write this object to ``path`` as indented JSON."""
        with open(path, "w") as f:
            f.write(self.to_json(indent=2))
