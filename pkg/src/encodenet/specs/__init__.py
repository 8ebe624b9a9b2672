"""Baseline model specs shipped with the package."""

from importlib import resources

from ..model_ir import parse_model_spec

DEFAULT_SPEC = "vgg8_mini"


def builtin_spec_names():
    return sorted(p.name[: -len(".spec")] for p in resources.files(__name__).iterdir() if p.name.endswith(".spec"))


def builtin_spec_text(name):
    path = resources.files(__name__) / f"{name}.spec"
    if not path.is_file():
        raise KeyError(f"no builtin spec {name!r}; available: {', '.join(builtin_spec_names())}")
    return path.read_text(encoding="utf-8")


def load_builtin_spec(name=DEFAULT_SPEC):
    return parse_model_spec(builtin_spec_text(name))
