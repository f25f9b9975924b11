"""Plain-text ``key=value`` config files (one pair per line, ``#`` comments)."""

from hintu.errors import ConfigError


def parse_kv(text, source="<config>"):
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        items[key] = value.strip()
    return items


def dump_kv(items):
    return "".join(f"{k}={_fmt(v)}\n" for k, v in items.items())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def load_kv_file(path):
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), source=str(path))
