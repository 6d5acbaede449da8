"""Map source modules to test modules by path convention and enumerate them.

A project keeps production code under ``src/`` and test modules under
``test/``, with the test counterpart of module ``(my-project tool)`` named
``(my-project tool-test)`` and stored at ``test/my-project/tool-test.py``.
Keeping ``test/`` out of the production load path is what excludes test
code from production builds.

Test modules self-register their suites simply by binding them at module
top level: loading a module file and scanning its namespace for
suite-flagged values populates the registry in definition order.
"""

from __future__ import annotations

import importlib.util
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .model import FlowtestError, SuiteNode, ValidationError, is_suite

TEST_SUFFIX = "-test"
TEST_ROOT = "test"
SOURCE_ROOT = "src"


class ModuleNotRegistered(FlowtestError):
    """The requested module is neither registered nor present on disk."""


@dataclass(frozen=True)
class ModulePath:
    segments: tuple[str, ...]
    root_kind: str = "source"  # "source" | "test"

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValidationError("module paths need at least one segment")
        if self.root_kind not in ("source", "test"):
            raise ValidationError(f"unknown module root kind: {self.root_kind!r}")
        if self.root_kind == "test" and not self.segments[-1].endswith(TEST_SUFFIX):
            raise ValidationError(
                f"test module names end with {TEST_SUFFIX!r}: {self.segments}"
            )

    def __str__(self) -> str:
        return "(" + " ".join(self.segments) + ")"

    def test_counterpart(self) -> "ModulePath":
        if self.root_kind == "test":
            return self
        return ModulePath(self.segments[:-1] + (self.segments[-1] + TEST_SUFFIX,), "test")

    def relative_file(self) -> Path:
        root = TEST_ROOT if self.root_kind == "test" else SOURCE_ROOT
        return Path(root).joinpath(*self.segments[:-1], self.segments[-1] + ".py")


def _as_path(module: "ModulePath | Iterable[str]", root_kind: str = "source") -> ModulePath:
    if isinstance(module, ModulePath):
        return module
    return ModulePath(tuple(module), root_kind)


class SuiteRegistry:
    """Suites registered per module, in registration order."""

    def __init__(self) -> None:
        self._suites: dict[tuple[str, ...], list[SuiteNode]] = {}
        self._lock = threading.Lock()

    def register(self, module: "ModulePath | Iterable[str]", suite: SuiteNode) -> None:
        path = _as_path(module, "test")
        with self._lock:
            suites = self._suites.setdefault(path.segments, [])
            if all(existing.description != suite.description for existing in suites):
                suites.append(suite)

    def registered(self, module: "ModulePath | Iterable[str]") -> Optional[list[SuiteNode]]:
        path = _as_path(module, "test")
        with self._lock:
            suites = self._suites.get(path.segments)
            return list(suites) if suites is not None else None

    def modules(self) -> list[tuple[str, ...]]:
        with self._lock:
            return sorted(self._suites)

    def clear(self) -> None:
        with self._lock:
            self._suites.clear()


_default_registry = SuiteRegistry()


def default_registry() -> SuiteRegistry:
    return _default_registry


def _load_module_file(path: Path, module: ModulePath, registry: SuiteRegistry) -> None:
    name = "flowtest.project." + ".".join(module.segments)
    spec = importlib.util.spec_from_file_location(name, path)
    if spec is None or spec.loader is None:
        raise ModuleNotRegistered(f"cannot load module file {path}")
    loaded = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(loaded)
    for value in vars(loaded).values():
        if is_suite(value) and isinstance(value, SuiteNode):
            registry.register(module, value)


def get_test_module(source_module: "ModulePath | Iterable[str]",
                    project_root: "Path | str | None" = None,
                    registry: Optional[SuiteRegistry] = None) -> Optional[ModulePath]:
    """The conventional test counterpart, or None when no such module exists."""
    registry = registry or _default_registry
    counterpart = _as_path(source_module).test_counterpart()
    if registry.registered(counterpart) is not None:
        return counterpart
    if project_root is not None:
        if (Path(project_root) / counterpart.relative_file()).is_file():
            return counterpart
    return None


def get_module_test_suites(test_module: "ModulePath | Iterable[str]",
                           project_root: "Path | str | None" = None,
                           registry: Optional[SuiteRegistry] = None) -> list[SuiteNode]:
    """All suites registered by a test module, loading its file on first use."""
    registry = registry or _default_registry
    module = _as_path(test_module, "test")
    suites = registry.registered(module)
    if suites is not None:
        return suites
    if project_root is not None:
        file = Path(project_root) / module.relative_file()
        if file.is_file():
            _load_module_file(file, module, registry)
            return registry.registered(module) or []
    raise ModuleNotRegistered(f"no test module {module}")


def get_all_test_modules(project_root: "Path | str") -> list[ModulePath]:
    """Every ``*-test`` module under the project's test root, sorted."""
    root = Path(project_root)
    if not root.is_dir():
        raise FlowtestError(f"project root is not a readable directory: {root}")
    test_root = root / TEST_ROOT
    if not test_root.is_dir():
        return []
    modules = []
    for file in test_root.rglob("*.py"):
        if not file.stem.endswith(TEST_SUFFIX):
            continue
        segments = file.relative_to(test_root).parts[:-1] + (file.stem,)
        modules.append(ModulePath(tuple(segments), "test"))
    return sorted(modules, key=lambda m: m.segments)


def load_project_suites(runner, project_root: "Path | str",
                        registry: Optional[SuiteRegistry] = None) -> list[SuiteNode]:
    """Load every discovered test module's suites into the runner, deferred."""
    registry = registry or _default_registry
    from .runner import use_runner

    suites: list[SuiteNode] = []
    for module in get_all_test_modules(project_root):
        suites.extend(get_module_test_suites(module, project_root, registry))
    with use_runner(runner):
        for suite in suites:
            suite(execute=False)
    return suites
