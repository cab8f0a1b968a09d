"""Experiment configuration: an INI file with fixed sections and typed keys."""
from __future__ import annotations

import configparser
from pathlib import Path
from typing import Any, Callable


class UsageError(ValueError):
    """Bad invocation or configuration; the CLI maps this to exit code 1."""


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "on", "true", "yes"):
        return True
    if s in ("0", "off", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(v).replace(",", " ").split())


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _opt_floats(v: str):
    return None if str(v).strip().lower() in ("", "none", "default") else _floats(v)


def _opt_str(v: str):
    return None if str(v).strip() == "" else str(v).strip()


def _opt_int(v: str):
    return None if str(v).strip().lower() in ("", "none") else int(v)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(v: str) -> str:
        s = str(v).strip().lower()
        if s not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return s
    return parse


SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "data": {
        "main_table": (_opt_str, None),
        "path_contexts": (_opt_str, None),
        "embeddings": (_opt_str, None),
        "cache": (_opt_str, None),
        "assignment": (_opt_str, None),
        "score_threshold": (float, 1.0),
        "missing_policy": (_choice("error", "zero"), "error"),
        "r_max": (_opt_int, None),
    },
    "columns": {
        "SubjectID": (str, "SubjectID"),
        "AssignmentID": (str, "AssignmentID"),
        "ProblemID": (str, "ProblemID"),
        "Attempt": (str, "Attempt"),
        "ServerTimestamp": (str, "ServerTimestamp"),
        "Score": (str, "Score"),
        "CodeStateID": (str, "CodeStateID"),
    },
    "sequence": {
        "lmax": (int, 50),
        "align": (_bool, True),
        "truncation": (_choice("earliest", "latest"), "earliest"),
    },
    "model": {
        "variant": (_choice("dkt", "codedkt", "eckt"), "dkt"),
        "axis": (_choice("time", "path"), "path"),
        "w0": (_bool, False),
        "xt_mode": (_choice("correctness", "interaction"), "correctness"),
        "hidden": (int, 32),
    },
    "train": {
        "learning_rate": (float, 5e-4),
        "d_emb": (int, 16),
        "dropout": (float, 0.0),
        "batch_size": (int, 32),
        "max_epochs": (int, 150),
        "patience": (int, 10),
        "optimizer": (_choice("adam", "sgd"), "adam"),
    },
    "grid": {
        "learning_rates": (_floats, (5e-5, 1e-4, 5e-4)),
        "embedding_sizes": (_ints, (50, 100, 150, 300, 350)),
        "dropouts": (_floats, (0.1, 0.2, 0.3, 0.4, 0.5)),
    },
    "seeds": {
        "split": (int, 0),
        "fold": (int, 1),
        "init": (int, 2),
        "shuffle": (int, 3),
    },
    "gen": {
        "n_students": (int, 300),
        "n_problems": (int, 10),
        "p_init": (_opt_floats, None),
        "p_learn": (_opt_floats, None),
        "p_guess": (float, 0.15),
        "p_slip": (float, 0.10),
        "max_attempts_per_problem": (int, 8),
        "shuffle_rows": (_bool, False),
        "feature_signal": (float, 0.5),
        "seed": (int, 0),
        "assignment_id": (str, "A1"),
        "n_tokens": (int, 31),
        "n_paths": (int, 31),
        "paths_per_submission": (_ints, (3, 8)),
        "embedding_dim": (int, 8),
    },
}

PATH_KEYS = {("data", "main_table"), ("data", "path_contexts"), ("data", "embeddings"), ("data", "cache")}


class Settings(dict):
    """``settings[section][key]`` with typed values and provenance of overrides."""

    def __init__(self):
        super().__init__({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})
        self.overridden: dict[str, str] = {}

    def set(self, section: str, key: str, raw: str, base: Path | None = None) -> None:
        if section not in SCHEMA:
            raise UsageError(f"unknown config section [{section}]")
        keys = SCHEMA[section]
        match = next((k for k in keys if k.lower() == key.lower()), None)
        if match is None:
            raise UsageError(f"unknown config key {section}.{key}")
        parse, _ = keys[match]
        try:
            value = parse(raw)
        except ValueError as exc:
            raise UsageError(f"{section}.{match}: {exc}") from None
        if (section, match) in PATH_KEYS and value is not None and base is not None:
            p = Path(value)
            value = str(p if p.is_absolute() else (base / p))
        self[section][match] = value
        self.overridden[f"{section}.{match}"] = str(raw)


def load_settings(path: str | Path | None, overrides: list[str] = ()) -> Settings:
    """Defaults, then the INI file (if any), then ``section.key=value`` overrides."""
    s = Settings()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"cannot parse {p}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                s.set(section, key, raw, base=p.parent)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        s.set(section.strip(), key.strip(), raw.strip(), base=Path.cwd())
    return s
