from __future__ import annotations

from pathlib import Path
from typing import Iterable, Iterator

from ..errors import FormatError, UnknownSymbolError

EPSILON = "<eps>"


class SymbolTable:
    """Dense string <-> integer mapping with id 0 reserved for epsilon."""

    def __init__(self, symbols: Iterable[str] = (), name: str = "symbol table"):
        self.name = name
        self._symbols: list[str] = [EPSILON]
        self._ids: dict[str, int] = {EPSILON: 0}
        for sym in symbols:
            self.add(sym)

    def add(self, symbol: str) -> int:
        if symbol in self._ids:
            return self._ids[symbol]
        if not symbol or any(c.isspace() for c in symbol):
            raise ValueError(f"invalid symbol {symbol!r}")
        self._ids[symbol] = len(self._symbols)
        self._symbols.append(symbol)
        return self._ids[symbol]

    def id(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise UnknownSymbolError(symbol, self.name) from None

    def symbol(self, index: int) -> str:
        if not 0 <= index < len(self._symbols):
            raise UnknownSymbolError(index, self.name)
        return self._symbols[index]

    def ids(self, symbols: Iterable[str]) -> list[int]:
        return [self.id(s) for s in symbols]

    def symbols(self, ids: Iterable[int]) -> list[str]:
        return [self.symbol(int(i)) for i in ids]

    def __len__(self) -> int:
        return len(self._symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    def __iter__(self) -> Iterator[tuple[str, int]]:
        return iter((s, i) for i, s in enumerate(self._symbols))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SymbolTable) and self._symbols == other._symbols

    def non_epsilon(self) -> list[str]:
        return self._symbols[1:]

    def to_text(self) -> str:
        return "".join(f"{s} {i}\n" for s, i in self)

    @classmethod
    def from_text(cls, text: str, name: str = "symbol table") -> "SymbolTable":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or not parts[1].isdigit():
                raise FormatError(f"expected 'symbol id', got {line!r}", lineno)
            pairs.append((parts[0], int(parts[1]), lineno))
        pairs.sort(key=lambda p: p[1])
        table = cls(name=name)
        for expected, (sym, idx, lineno) in enumerate(pairs):
            if idx != expected:
                raise FormatError(f"ids must be dense from 0, got {idx}", lineno)
            if idx == 0:
                if sym != EPSILON:
                    raise FormatError("id 0 must be <eps>", lineno)
                continue
            if sym in table:
                raise FormatError(f"duplicate symbol {sym!r}", lineno)
            table.add(sym)
        return table

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path, name: str | None = None) -> "SymbolTable":
        return cls.from_text(Path(path).read_text(), name or Path(path).name)
