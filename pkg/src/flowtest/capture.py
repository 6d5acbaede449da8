"""Definition-site capture: source text and argument thunks for assertions.

The assertion surface takes a zero-argument callable. To report failures the
way a reader wrote them, we recover the callable's source text and build a
deferred computation that re-evaluates the argument values of its outermost
call (or the operands of its outermost comparison) in the callable's own
scope. Capture is best-effort: anything unrecoverable degrades to a
placeholder text and an empty argument list, never to an error.
"""

from __future__ import annotations

import ast
import inspect
import textwrap
from typing import Any, Callable, Optional

_COMPARE_SYMBOLS = {
    ast.Eq: "==",
    ast.NotEq: "!=",
    ast.Lt: "<",
    ast.LtE: "<=",
    ast.Gt: ">",
    ast.GtE: ">=",
    ast.Is: "is",
    ast.IsNot: "is not",
    ast.In: "in",
    ast.NotIn: "not in",
}

_BINOP_SYMBOLS = {
    ast.Add: "+",
    ast.Sub: "-",
    ast.Mult: "*",
    ast.Div: "/",
    ast.FloorDiv: "//",
    ast.Mod: "%",
    ast.Pow: "**",
}


def _body_expression(fn: Callable) -> Optional[ast.expr]:
    """AST of the callable's single body expression, if recoverable."""
    try:
        source = textwrap.dedent(inspect.getsource(fn))
        tree = ast.parse(source)
    except (OSError, TypeError, SyntaxError, IndentationError):
        return None
    if fn.__name__ == "<lambda>":
        lambdas = [n for n in ast.walk(tree) if isinstance(n, ast.Lambda)]
        # Several lambdas in one statement are ambiguous; refuse to guess.
        if len(lambdas) != 1:
            return None
        return lambdas[0].body
    for node in ast.walk(tree):
        if isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)) and node.name == fn.__name__:
            if len(node.body) == 1 and isinstance(node.body[0], ast.Return) and node.body[0].value:
                return node.body[0].value
            if len(node.body) == 1 and isinstance(node.body[0], ast.Expr):
                return node.body[0].value
    return None


def _fallback_text(fn: Callable) -> str:
    code = getattr(fn, "__code__", None)
    if code is not None:
        return f"<assertion at {code.co_filename}:{code.co_firstlineno}>"
    return "<assertion>"


def capture_expression(fn: Callable) -> str:
    """Source text of the callable's asserted expression."""
    node = _body_expression(fn)
    if node is None:
        return _fallback_text(fn)
    try:
        return ast.unparse(node)
    except Exception:
        return _fallback_text(fn)


def _closure_scope(fn: Callable) -> dict[str, Any]:
    scope: dict[str, Any] = {}
    code = getattr(fn, "__code__", None)
    closure = getattr(fn, "__closure__", None)
    if code is not None and closure:
        for name, cell in zip(code.co_freevars, closure):
            try:
                scope[name] = cell.cell_contents
            except ValueError:  # cell not yet filled
                pass
    return scope


def _operand_expressions(node: ast.expr) -> list[ast.expr]:
    """Argument expressions of the outermost call-like form."""
    if isinstance(node, ast.Call):
        return [a.value if isinstance(a, ast.Starred) else a for a in node.args]
    if isinstance(node, ast.Compare) and len(node.comparators) == 1:
        return [node.left, node.comparators[0]]
    if isinstance(node, ast.BinOp):
        return [node.left, node.right]
    if isinstance(node, ast.BoolOp):
        return list(node.values)
    return []


def derive_args(fn: Callable) -> Callable[[], list]:
    """Deferred computation of the outermost call's evaluated argument values.

    Returns a thunk; if the body is not a call-like form, or its source is
    unavailable, the thunk yields an empty list.
    """
    node = _body_expression(fn)
    operands = _operand_expressions(node) if node is not None else []
    if not operands:
        return lambda: []

    compiled = []
    for expr in operands:
        wrapper = ast.Expression(body=expr)
        try:
            compiled.append(compile(ast.fix_missing_locations(wrapper), "<assertion-args>", "eval"))
        except (SyntaxError, ValueError):
            return lambda: []

    def evaluate() -> list:
        scope = _closure_scope(fn)
        return [eval(code, getattr(fn, "__globals__", {}), scope) for code in compiled]

    return evaluate


def infer_operator(expression_text: str) -> Optional[str]:
    """Operator or function name of the expression's outermost form.

    Understands both parenthesized prefix notation, e.g. ``(= 5 (+ 2 2))``
    gives ``=``, and Python source, e.g. ``5 == 2 + 2`` gives ``==``.
    """
    text = expression_text.strip()
    if text.startswith("("):
        head = text[1:].split(None, 1)
        if head and head[0].rstrip(")"):
            return head[0].rstrip(")")
        return None
    try:
        node = ast.parse(text, mode="eval").body
    except SyntaxError:
        return None
    if isinstance(node, ast.Compare) and len(node.ops) == 1:
        return _COMPARE_SYMBOLS.get(type(node.ops[0]))
    if isinstance(node, ast.BinOp):
        return _BINOP_SYMBOLS.get(type(node.op))
    if isinstance(node, ast.BoolOp):
        return "and" if isinstance(node.op, ast.And) else "or"
    if isinstance(node, ast.Call):
        try:
            return ast.unparse(node.func)
        except Exception:
            return None
    return None


def mismatch_detail(operator: Optional[str], rendered_args: list[str], rendered_result: str) -> str:
    """Failure message: ``5 and 4 are not =`` when the pieces are known."""
    if operator and len(rendered_args) >= 2:
        head = ", ".join(rendered_args[:-1])
        return f"{head} and {rendered_args[-1]} are not {operator}"
    if operator and len(rendered_args) == 1:
        return f"{rendered_args[0]} is not {operator}"
    return rendered_result
