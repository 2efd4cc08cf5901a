"""
Reader for the `.dpomdp` text format
"""
import itertools
import logging
import re
from pathlib import Path
from typing import TextIO

import numpy as np

from maa_planner.maa_model import DecPomdp, ModelError

log = logging.getLogger(__name__)

_HEADER = re.compile(r"^(agents|discount|values|states|start(?:\s+include|\s+exclude)?"
                     r"|actions|observations|T|O|R)\s*:(.*)$")
_UNKNOWN_HEADER = re.compile(r"^([A-Za-z_]\w*)\s*:")
_SECTIONS_BEFORE_TABLES = ("agents", "states", "actions", "observations")


class DpomdpParseError(ModelError):
    "Syntax or reference error in a `.dpomdp` file."

    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class _Statement:
    def __init__(self, keyword: str, text: str, line: int) -> None:
        self.keyword = keyword
        self.text = text.strip()
        self.line = line
        self.rows: list[str] = []

    def tokens(self) -> list[str]:
        "Tokens after the keyword, continuation lines included."
        return self.text.split() + [tok for row in self.rows for tok in row.split()]


def _statements(text: str) -> list[_Statement]:
    statements: list[_Statement] = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        match = _HEADER.match(line)
        if match:
            keyword = " ".join(match.group(1).split())
            statements.append(_Statement(keyword, match.group(2), number))
            continue
        unknown = _UNKNOWN_HEADER.match(line)
        if unknown:
            raise DpomdpParseError(f"unknown section '{unknown.group(1)}'", number)
        if not statements:
            raise DpomdpParseError(f"unexpected text '{line}' before the first section", number)
        statements[-1].rows.append(line)
    return statements


def _names(tokens: list[str], what: str, line: int) -> tuple[str, ...]:
    if not tokens:
        raise DpomdpParseError(f"missing {what}", line)
    if len(tokens) == 1 and tokens[0].isdigit():
        count = int(tokens[0])
        if count < 1:
            raise DpomdpParseError(f"number of {what} must be positive", line)
        return tuple(str(i) for i in range(count))
    if len(set(tokens)) != len(tokens):
        raise DpomdpParseError(f"duplicate {what} names", line)
    return tuple(tokens)


def _numbers(tokens: list[str], count: int, what: str, line: int) -> np.ndarray:
    if len(tokens) != count:
        raise DpomdpParseError(f"{what} expects {count} numbers, got {len(tokens)}", line)
    try:
        return np.array([float(tok) for tok in tokens])
    except ValueError as err:
        raise DpomdpParseError(f"{what}: {err}", line) from None


class _DpomdpReader:
    def __init__(self, name: str) -> None:
        self.name = name
        self.agents: tuple[str, ...] | None = None
        self.states: tuple[str, ...] | None = None
        self.actions: list[tuple[str, ...]] | None = None
        self.observations: list[tuple[str, ...]] | None = None
        self.cost = False
        self.start: np.ndarray | None = None
        self.transition: np.ndarray | None = None
        self.observation: np.ndarray | None = None
        self.reward: np.ndarray | None = None
        # (state, joint action) -> reward over (next state, joint observation)
        self.reward_detail: dict[tuple[int, int], np.ndarray] = {}

    def read(self, text: str) -> DecPomdp:
        for stmt in _statements(text):
            handler = getattr(self, "_" + stmt.keyword.replace(" ", "_"))
            handler(stmt)
        for section in _SECTIONS_BEFORE_TABLES:
            if getattr(self, section) is None:
                raise DpomdpParseError(f"missing '{section}:' section")
        self._allocate(None)
        assert self.transition is not None and self.observation is not None
        assert self.reward is not None and self.states is not None
        reward = self.reward.copy()
        for (s, a), detail in self.reward_detail.items():
            flow = self.transition[s, a][:, None] * self.observation[a]
            reward[s, a] = float((flow * detail).sum())
        if self.cost:
            reward = -reward
        if self.start is None:
            self.start = np.full(len(self.states), 1.0 / len(self.states))
        return DecPomdp(states=self.states, actions=tuple(self.actions or ()),
                        observations=tuple(self.observations or ()),
                        transition=self.transition, observation=self.observation,
                        reward=reward, initial_belief=self.start,
                        agents=self.agents or (), name=self.name)

    # header sections

    def _agents(self, stmt: _Statement):
        self.agents = _names(stmt.tokens(), "agents", stmt.line)

    def _discount(self, stmt: _Statement):
        tokens = stmt.tokens()
        value = _numbers(tokens, 1, "discount", stmt.line)[0]
        if value != 1.0:
            log.warning("discount %s ignored: planning is finite-horizon and undiscounted", value)

    def _values(self, stmt: _Statement):
        tokens = stmt.tokens()
        if tokens not in (["reward"], ["cost"]):
            raise DpomdpParseError("values must be 'reward' or 'cost'", stmt.line)
        self.cost = tokens == ["cost"]

    def _states(self, stmt: _Statement):
        self.states = _names(stmt.tokens(), "states", stmt.line)

    def _per_agent(self, stmt: _Statement, what: str) -> list[tuple[str, ...]]:
        if self.agents is None:
            raise DpomdpParseError(f"'{what}:' before 'agents:'", stmt.line)
        rows = ([stmt.text] if stmt.text else []) + stmt.rows
        if len(rows) != len(self.agents):
            raise DpomdpParseError(f"expected {len(self.agents)} lines of {what}, "
                                   f"got {len(rows)}", stmt.line)
        return [_names(row.split(), what, stmt.line) for row in rows]

    def _actions(self, stmt: _Statement):
        self.actions = self._per_agent(stmt, "actions")

    def _observations(self, stmt: _Statement):
        self.observations = self._per_agent(stmt, "observations")

    def _start(self, stmt: _Statement):
        states = self._require_states(stmt)
        tokens = stmt.tokens()
        if tokens == ["uniform"]:
            self.start = np.full(len(states), 1.0 / len(states))
        elif len(tokens) == 1 and len(states) > 1:
            belief = np.zeros(len(states))
            belief[self._state(tokens[0], stmt.line)] = 1.0
            self.start = belief
        else:
            self.start = _numbers(tokens, len(states), "start", stmt.line)

    def _start_include(self, stmt: _Statement):
        states = self._require_states(stmt)
        chosen = {self._state(tok, stmt.line) for tok in stmt.tokens()}
        self.start = np.array([1.0 if s in chosen else 0.0 for s in range(len(states))])
        self.start /= self.start.sum()

    def _start_exclude(self, stmt: _Statement):
        states = self._require_states(stmt)
        dropped = {self._state(tok, stmt.line) for tok in stmt.tokens()}
        self.start = np.array([0.0 if s in dropped else 1.0 for s in range(len(states))])
        if not self.start.sum():
            raise DpomdpParseError("start excludes every state", stmt.line)
        self.start /= self.start.sum()

    # identifiers

    def _require_states(self, stmt: _Statement) -> tuple[str, ...]:
        if self.states is None:
            raise DpomdpParseError("'start:' before 'states:'", stmt.line)
        return self.states

    def _state(self, token: str, line: int) -> int:
        return self._index(token, self.states or (), "state", line)[0]

    @staticmethod
    def _index(token: str, names: tuple[str, ...], what: str, line: int) -> list[int]:
        if token == "*":
            return list(range(len(names)))
        if token in names:
            return [names.index(token)]
        if token.isdigit() and int(token) < len(names):
            return [int(token)]
        raise DpomdpParseError(f"unknown {what} '{token}'", line)

    def _states_field(self, field: str, line: int) -> list[int]:
        tokens = field.split()
        if len(tokens) != 1:
            raise DpomdpParseError(f"expected one state, got '{field}'", line)
        return self._index(tokens[0], self.states or (), "state", line)

    def _joint(self, field: str, names: list[tuple[str, ...]], what: str, line: int) -> list[int]:
        tokens = field.split()
        counts = tuple(len(it) for it in names)
        total = int(np.prod(counts))
        if len(tokens) == 1 and len(names) > 1:
            token = tokens[0]
            if token == "*":
                return list(range(total))
            if token.isdigit() and int(token) < total:
                return [int(token)]
            raise DpomdpParseError(f"agent-count mismatch: joint {what} '{field}' has 1 "
                                   f"component, expected {len(names)}", line)
        if len(tokens) != len(names):
            raise DpomdpParseError(f"agent-count mismatch: joint {what} '{field}' has "
                                   f"{len(tokens)} components, expected {len(names)}", line)
        per_agent = [self._index(tok, names[i], f"{what} of agent {i}", line)
                     for i, tok in enumerate(tokens)]
        return [int(np.ravel_multi_index(combo, counts)) for combo in itertools.product(*per_agent)]

    def _allocate(self, stmt: _Statement | None):
        if self.transition is not None:
            return
        line = stmt.line if stmt else None
        for section in _SECTIONS_BEFORE_TABLES:
            if getattr(self, section) is None:
                raise DpomdpParseError(f"'{section}:' must precede the model tables", line)
        S = len(self.states or ())
        JA = int(np.prod([len(it) for it in self.actions or ()]))
        JO = int(np.prod([len(it) for it in self.observations or ()]))
        self.transition = np.zeros((S, JA, S))
        self.observation = np.zeros((JA, S, JO))
        self.reward = np.zeros((S, JA))

    def _split(self, stmt: _Statement) -> tuple[list[str], list[str]]:
        "Identifier fields and data tokens of a T/O/R entry."
        self._allocate(stmt)
        fields = [f.strip() for f in stmt.text.split(":")]
        identifiers, data = fields[:-1], fields[-1].split()
        data += [tok for row in stmt.rows for tok in row.split()]
        if not identifiers or any(not f for f in identifiers):
            raise DpomdpParseError(f"malformed {stmt.keyword} entry", stmt.line)
        return identifiers, data

    # tables

    def _T(self, stmt: _Statement):
        ids, data = self._split(stmt)
        assert self.transition is not None and self.actions is not None
        S = self.transition.shape[0]
        ja = self._joint(ids[0], self.actions, "action", stmt.line)
        if len(ids) == 1:
            if data == ["identity"]:
                matrix = np.eye(S)
            elif data == ["uniform"]:
                matrix = np.full((S, S), 1.0 / S)
            else:
                matrix = _numbers(data, S * S, "T matrix", stmt.line).reshape(S, S)
            for a in ja:
                self.transition[:, a, :] = matrix
        elif len(ids) == 2:
            s = self._states_field(ids[1], stmt.line)
            row = (np.full(S, 1.0 / S) if data == ["uniform"]
                   else _numbers(data, S, "T row", stmt.line))
            self.transition[np.ix_(s, ja)] = row
        elif len(ids) == 3:
            s = self._states_field(ids[1], stmt.line)
            s2 = self._states_field(ids[2], stmt.line)
            value = _numbers(data, 1, "T entry", stmt.line)[0]
            self.transition[np.ix_(s, ja, s2)] = value
        else:
            raise DpomdpParseError("T entry has too many fields", stmt.line)

    def _O(self, stmt: _Statement):
        ids, data = self._split(stmt)
        assert self.observation is not None and self.actions is not None
        _, S, JO = self.observation.shape
        ja = self._joint(ids[0], self.actions, "action", stmt.line)
        if len(ids) == 1:
            if data == ["uniform"]:
                matrix = np.full((S, JO), 1.0 / JO)
            else:
                matrix = _numbers(data, S * JO, "O matrix", stmt.line).reshape(S, JO)
            for a in ja:
                self.observation[a] = matrix
        elif len(ids) == 2:
            s2 = self._states_field(ids[1], stmt.line)
            row = (np.full(JO, 1.0 / JO) if data == ["uniform"]
                   else _numbers(data, JO, "O row", stmt.line))
            self.observation[np.ix_(ja, s2)] = row
        elif len(ids) == 3:
            s2 = self._states_field(ids[1], stmt.line)
            jo = self._joint(ids[2], self.observations or [], "observation", stmt.line)
            value = _numbers(data, 1, "O entry", stmt.line)[0]
            self.observation[np.ix_(ja, s2, jo)] = value
        else:
            raise DpomdpParseError("O entry has too many fields", stmt.line)

    def _R(self, stmt: _Statement):
        ids, data = self._split(stmt)
        assert self.reward is not None and self.actions is not None
        S, _ = self.reward.shape
        JO = self.observation.shape[2] if self.observation is not None else 0
        if len(ids) < 2 or len(ids) > 4:
            raise DpomdpParseError("R entry needs 2 to 4 identifier fields", stmt.line)
        ja = self._joint(ids[0], self.actions, "action", stmt.line)
        s = self._states_field(ids[1], stmt.line)
        if len(ids) == 4:
            value = _numbers(data, 1, "R entry", stmt.line)[0]
            s2 = self._states_field(ids[2], stmt.line)
            jo = self._joint(ids[3], self.observations or [], "observation", stmt.line)
            if len(s2) == S and len(jo) == JO:
                self.reward[np.ix_(s, ja)] = value
                for key in itertools.product(s, ja):
                    self.reward_detail.pop(key, None)
                return
            for key in itertools.product(s, ja):
                self._detail(key)[np.ix_(s2, jo)] = value
        elif len(ids) == 3:
            s2 = self._states_field(ids[2], stmt.line)
            row = _numbers(data, JO, "R row", stmt.line)
            for key in itertools.product(s, ja):
                self._detail(key)[s2, :] = row
        else:
            matrix = _numbers(data, S * JO, "R matrix", stmt.line).reshape(S, JO)
            for key in itertools.product(s, ja):
                self._detail(key)[:, :] = matrix

    def _detail(self, key: tuple[int, int]) -> np.ndarray:
        assert self.reward is not None and self.observation is not None
        if key not in self.reward_detail:
            S = self.reward.shape[0]
            JO = self.observation.shape[2]
            self.reward_detail[key] = np.full((S, JO), self.reward[key])
        return self.reward_detail[key]


def parse_dpomdp(text: str | TextIO, name: str = "") -> DecPomdp:
    "Parse `.dpomdp` text into a validated model."
    if not isinstance(text, str):
        text = text.read()
    return _DpomdpReader(name).read(text)


def load_dpomdp(path: str | Path) -> DecPomdp:
    "Read a `.dpomdp` file; the model is named after the file stem."
    path = Path(path)
    with open(path, "r", encoding="utf-8") as file:
        return parse_dpomdp(file.read(), name=path.stem)
