"""
Source checks that mirror the black and mypy settings in pyproject.toml.
"""

import ast
from pathlib import Path

import pytest

PACKAGE = Path(__file__).resolve().parent.parent / "coherence_warning"
LINE_LENGTH = 88


def _sources():
    return sorted(PACKAGE.glob("*.py"))


def _unannotated(tree):
    missing = []
    for node in ast.walk(tree):
        if not isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            continue
        if node.returns is None:
            missing.append(f"{node.name}: return")
        args = node.args
        named = args.posonlyargs + args.args + args.kwonlyargs
        for arg in named:
            if arg.annotation is None and arg.arg not in ("self", "cls"):
                missing.append(f"{node.name}: {arg.arg}")
        for arg in (args.vararg, args.kwarg):
            if arg is not None and arg.annotation is None:
                missing.append(f"{node.name}: {arg.arg}")
    return missing


class TestSourceStyle:
    """Package modules stay within the configured formatter and type-checker rules."""

    @pytest.mark.unit
    def test_package_found(self):
        names = {path.name for path in _sources()}
        assert {"cli.py", "detector.py", "pipeline.py"} <= names

    @pytest.mark.unit
    @pytest.mark.parametrize("path", _sources(), ids=lambda p: p.name)
    def test_line_length(self, path):
        lines = path.read_text(encoding="utf-8").splitlines()
        long = [n for n, line in enumerate(lines, 1) if len(line) > LINE_LENGTH]
        assert long == []

    @pytest.mark.unit
    @pytest.mark.parametrize("path", _sources(), ids=lambda p: p.name)
    def test_functions_are_annotated(self, path):
        tree = ast.parse(path.read_text(encoding="utf-8"))
        assert _unannotated(tree) == []
