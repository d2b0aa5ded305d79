"""Flat ``key = value`` configuration shared by all command-line tools.

Precedence: built-in defaults, then the config file, then command-line
overrides.  Every key has a type taken from its default; ``auto`` marks
values derived at run time (e.g. regularizer weights from the alignment
mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import FormatError, UsageError

AUTO = "auto"


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    kind: type
    help: str
    choices: tuple[str, ...] = ()
    optional: bool = False

    def parse(self, text: str):
        text = text.strip()
        if self.optional and text == AUTO:
            return None
        try:
            if self.kind is bool:
                low = text.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                value = low in ("true", "1", "yes")
            elif self.kind is tuple:
                value = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
            else:
                value = self.kind(text)
        except ValueError:
            raise UsageError(f"config key {self.name!r}: cannot parse {text!r} as "
                             f"{self.kind.__name__}") from None
        if self.choices and value not in self.choices:
            raise UsageError(f"config key {self.name!r}: {value!r} not one of {self.choices}")
        return value

    def format(self, value) -> str:
        if value is None:
            return AUTO
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        if isinstance(value, bool):
            return "true" if value else "false"
        return str(value)


def _k(name, default, help, kind=None, choices=(), optional=False):
    kind = kind or (type(default) if default is not None else float)
    return Key(name, default, kind, help, tuple(choices), optional)


KEYS: tuple[Key, ...] = (
    _k("seed", 0, "global random seed"),
    _k("data_dir", "data", "prepared corpus, graphs and features"),
    _k("exp_dir", "exp", "checkpoints and outputs"),
    # desk corpus
    _k("num_phones", 10, "phones in the synthetic language"),
    _k("num_words", 20, "vocabulary size"),
    _k("successors", 20, "bigram successors per word"),
    _k("num_train", 100, "training utterances"),
    _k("num_test", 20, "held-out utterances"),
    _k("num_speakers", 8, "synthetic speakers"),
    _k("snr_db", 4.0, "corpus synthesis SNR in dB"),
    # acoustic model
    _k("hidden", (512, 512), "hidden layer widths, comma separated", tuple),
    _k("context", 5, "frames of splicing context on each side"),
    # cross-entropy training
    _k("ce_epochs", 8, "CE training epochs"),
    _k("ce_lr", 2e-4, "CE Adam learning rate"),
    _k("ce_decay_from", 4, "first epoch whose learning rate is halved"),
    _k("ce_batch_size", 16, "CE minibatch size in chunks"),
    _k("ce_chunk", 80, "CE chunk length in frames"),
    # sequence training
    _k("criterion", "mmi", "sequence criterion", str, ("mmi", "smbr", "mpe")),
    _k("alignment", "static", "numerator alignments", str, ("static", "dynamic")),
    _k("se_lr", 1e-6, "SE SGD learning rate"),
    _k("kappa", 0.1, "acoustic scale"),
    _k("ce_weight", None, "CE regularization weight (auto: 0.1 static, 0.4 dynamic)",
       float, optional=True),
    _k("l2_weight", None, "L2 regularization weight (auto: 0 static, 0.001 dynamic)",
       float, optional=True),
    _k("se_steps", 200, "SE training steps"),
    _k("batch_size", 4, "SE utterances per worker per step"),
    _k("world_size", 1, "data-parallel workers"),
    _k("rank_spawn", "local", "how worker ranks are started", str, ("local",)),
    _k("worker_mode", "process", "worker transport", str, ("process", "thread")),
    _k("checkpoint_every", 50, "SE steps between checkpoints (0: only at the end)"),
    # decoder
    _k("beam", 16.0, "decoding beam"),
    _k("lattice_beam", 8.0, "lattice pruning beam"),
    _k("max_active", 7000, "maximum active tokens per frame"),
    _k("align_beam", 64.0, "forced-alignment beam"),
    # simulation
    _k("sim_probability", 1.0, "probability an utterance is simulated"),
    _k("sim_snr_low", 0.0, "lowest simulated SNR in dB"),
    _k("sim_snr_high", 20.0, "highest simulated SNR in dB"),
    _k("sim_t60_low", 0.2, "shortest T60 in seconds"),
    _k("sim_t60_high", 0.5, "longest T60 in seconds"),
    _k("noise_manifest", "", "noise manifest (empty: synthetic noise)"),
    _k("noise_kind", "babble", "synthetic noise kind", str, ("white", "babble")),
    # benchmark
    _k("bench_steps", 10, "steps per benchmark run"),
    _k("bench_load", "se", "benchmark workload", str, ("se", "sleep")),
    _k("sleep_seconds", 0.05, "per-utterance wall time of the sleep workload"),
    _k("sleep_audio_seconds", 2.0, "audio seconds credited per sleep-workload utterance"),
)

KEY_BY_NAME = {k.name: k for k in KEYS}


def defaults() -> dict[str, Any]:
    return {k.name: k.default for k in KEYS}


def parse_text(text: str, source: str = "config") -> dict[str, str]:
    """Raw ``key = value`` pairs; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}: expected 'key = value', got {line!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(file_values: Mapping[str, str] | None = None,
            overrides: Mapping[str, str] | None = None,
            allowed: Iterable[str] | None = None) -> dict[str, Any]:
    """Defaults updated by file values then overrides, each parsed by key type."""
    allowed = set(KEY_BY_NAME if allowed is None else allowed)
    cfg = {name: KEY_BY_NAME[name].default for name in KEY_BY_NAME if name in allowed}
    for layer in (file_values or {}, overrides or {}):
        for name, text in layer.items():
            if name not in allowed:
                raise UsageError(f"unknown config key {name!r}")
            cfg[name] = KEY_BY_NAME[name].parse(str(text))
    return cfg


def load(path: str | Path | None, overrides: Mapping[str, str] | None = None,
         allowed: Iterable[str] | None = None) -> dict[str, Any]:
    file_values = parse_text(Path(path).read_text(), str(path)) if path else {}
    return resolve(file_values, overrides, allowed)


def dump(cfg: Mapping[str, Any]) -> str:
    lines = []
    for name, value in cfg.items():
        key = KEY_BY_NAME[name]
        lines.append(f"{name} = {key.format(value)}  # {key.help}")
    return "\n".join(lines) + "\n"
