"""Plain-text config files for the ``rbpct`` command.

Grammar (INI style, parsed with :mod:`configparser`)::

    # comment            ; also a comment
    key = value          keys before any section apply to every subcommand
                         that has a flag of that name
    [reconstruct]        keys in a section named after a subcommand apply
    iters = 500          to that subcommand only
    [method.rbp-dip]     sweep only: settings for one method
    ns = 500

A key is a long flag without its leading dashes (``range-deg``, ``beta-max``);
underscores are accepted in place of dashes.  Switches such as ``stable``
take ``true``/``false``/``yes``/``no``/``on``/``off``/``1``/``0``.  List values
(``grid``, ``methods``) are comma separated.  Flags given on the command line
override values from the file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .methods import ConfigError

TOP = "__top__"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def normalise_key(key: str) -> str:
    return key.strip().lower().replace("_", "-")


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


@dataclass
class ConfigFile:
    top: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)  # subcommand -> {key: value}
    methods: dict = field(default_factory=dict)  # method -> {key: value}

    def for_command(self, command: str) -> tuple[dict, dict]:
        return self.top, self.sections.get(command, {})


def parse_config_text(text: str, source: str = "<config>") -> ConfigFile:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#", ";"), default_section="__none__")
    parser.optionxform = normalise_key
    try:
        parser.read_string(f"[{TOP}]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {source}: {exc}") from exc
    cfg = ConfigFile()
    for name in parser.sections():
        values = dict(parser.items(name))
        if name == TOP:
            cfg.top = values
        elif name.startswith("method."):
            cfg.methods[name[len("method."):].strip()] = values
        else:
            cfg.sections[name.strip()] = values
    return cfg


def load_config(path) -> ConfigFile:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))
