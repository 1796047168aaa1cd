"""Prompt template loading from packaged assets."""

from importlib import resources


def load_prompt(name: str) -> str:
    """Read a prompt template shipped under assets/prompts by bare name."""
    ref = resources.files("convosql").joinpath("assets/prompts").joinpath(name + ".txt")
    return ref.read_text(encoding="utf-8")
