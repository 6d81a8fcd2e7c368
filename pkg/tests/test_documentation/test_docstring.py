import inspect
import textwrap

import pytest

from crossrec import attention, config, embedding, evaluation, interactions, metrics, model
from crossrec import prompts, providers, synth, tags, training

MODULES = [attention, config, embedding, evaluation, interactions, metrics, model, prompts, providers, synth, tags, training]


def documented():
    """Every public function, class and method of the package with a usage block."""
    found = {}
    for module in MODULES:
        for name, obj in vars(module).items():
            if name.startswith("_") or getattr(obj, "__module__", None) != module.__name__:
                continue
            found[f"{module.__name__}.{name}"] = obj
            if inspect.isclass(obj):
                for attr, member in vars(obj).items():
                    if not attr.startswith("_") and callable(member):
                        found[f"{module.__name__}.{name}.{attr}"] = member
    return {k: v for k, v in found.items() if "```python\n" in (inspect.getdoc(v) or "")}


def handle_docstring(doc):
    """
    Grabs the first python code block of a docstring and runs it. If it fails,
    the calling test raises a flag.
    """
    start = doc.find("```python\n")
    end = doc.find("```\n", start + 10)
    if end == -1:
        raise ValueError("Closing code missing!")
    exec(textwrap.dedent(doc[(start + 10) : end]), {})


@pytest.mark.parametrize("name", sorted(documented()))
def test_docstrings(name):
    """The usage example of every documented callable runs without errors."""
    handle_docstring(inspect.getdoc(documented()[name]) + "\n")


def test_docstrings_found():
    assert len(documented()) >= 20
