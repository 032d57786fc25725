"""Immutable expression DAG with evaluation and forward-mode differentiation.

Expressions are matrix valued (column vectors are n x 1). Building an
expression never mutates its children, so subgraphs can be shared freely
and reused across threads. Differentiation produces new expressions, which
keeps the whole pipeline composable: a Jacobian is itself an Expr and can
be differentiated again (needed for the predictive controller).

Two evaluation paths exist:

* ``evaluate(expr, binding)`` - a plain interpreter, used as the reference
  semantics and by small one-off computations.
* ``compile_function(inputs, outputs)`` - lowers the DAG to flat scalar
  Python code and ``exec``s it once. Controllers call the compiled
  functions thousands of times per simulation, so this path avoids all
  per-node dispatch overhead.

Both paths are checked against each other in the test-suite.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = [
    "VarSymbol",
    "Universe",
    "Expr",
    "ShapeError",
    "UnboundVariableError",
    "constant",
    "sin",
    "cos",
    "tan",
    "sqrt",
    "vertcat",
    "horzcat",
    "dot",
    "norm_fro",
    "det",
    "transpose",
    "evaluate",
    "jacobian",
    "substitute",
    "free_variables",
    "compile_function",
    "CompiledFunction",
]

# Guard used in derivatives of sqrt / frobenius-norm at the origin.
_GUARD_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class UnboundVariableError(KeyError):
    """Raised when evaluation encounters a variable without a binding."""


class VarSymbol:
    """A named matrix-valued variable. Identity-hashed, shape fixed forever."""

    __slots__ = ("name", "shape")

    def __init__(self, name: str, shape: tuple[int, int]):
        rows, cols = int(shape[0]), int(shape[1])
        if rows < 1 or cols < 1:
            raise ShapeError(f"variable {name!r} must have positive shape, got {shape}")
        self.name = name
        self.shape = (rows, cols)

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    def __repr__(self):
        return f"VarSymbol({self.name!r}, {self.shape})"


class Universe:
    """Scope in which variable names must be unique."""

    def __init__(self):
        self._names: dict[str, VarSymbol] = {}

    def variable(self, name: str, shape: tuple[int, int] = (1, 1)) -> "Expr":
        if name in self._names:
            raise ValueError(f"variable name {name!r} already used in this universe")
        sym = VarSymbol(name, shape)
        self._names[name] = sym
        return Expr._variable(sym)

    def __contains__(self, name: str) -> bool:
        return name in self._names


def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ShapeError(f"constants must be scalars, vectors or matrices, got ndim={a.ndim}")
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


class Expr:
    """One node of the expression DAG.

    ``kind`` is one of: constant, variable, add, sub, neg, mul, matmul, div,
    sin, cos, tan, sqrt, power, transpose, vertcat, horzcat, index, fro,
    det, dot, guard. ``guard`` is internal (max with a small epsilon) and
    only appears in derivative graphs.
    """

    __slots__ = ("kind", "children", "shape", "value", "var", "payload")

    def __init__(self, kind, children, shape, value=None, var=None, payload=None):
        self.kind = kind
        self.children = children
        self.shape = shape
        self.value = value
        self.var = var
        self.payload = payload

    # -- constructors -------------------------------------------------

    @staticmethod
    def _variable(sym: VarSymbol) -> "Expr":
        return Expr("variable", (), sym.shape, var=sym)

    @staticmethod
    def _constant(x) -> "Expr":
        v = _as_value(x)
        return Expr("constant", (), v.shape, value=v)

    # -- helpers -------------------------------------------------------

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def is_scalar(self) -> bool:
        return self.shape == (1, 1)

    def _zero(self) -> bool:
        return self.kind == "constant" and not np.any(self.value)

    def __repr__(self):
        if self.kind == "variable":
            return f"Expr<{self.var.name}{self.shape}>"
        return f"Expr<{self.kind}{self.shape}>"

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return _binary_elementwise("add", self, _coerce(other))

    def __radd__(self, other):
        return _binary_elementwise("add", _coerce(other), self)

    def __sub__(self, other):
        return _binary_elementwise("sub", self, _coerce(other))

    def __rsub__(self, other):
        return _binary_elementwise("sub", _coerce(other), self)

    def __mul__(self, other):
        return _binary_elementwise("mul", self, _coerce(other))

    def __rmul__(self, other):
        return _binary_elementwise("mul", _coerce(other), self)

    def __truediv__(self, other):
        return _binary_elementwise("div", self, _coerce(other))

    def __rtruediv__(self, other):
        return _binary_elementwise("div", _coerce(other), self)

    def __neg__(self):
        if self._zero():
            return self
        return Expr("neg", (self,), self.shape)

    def __matmul__(self, other):
        other = _coerce(other)
        if self.cols != other.rows:
            raise ShapeError(f"matmul inner dimensions disagree: {self.shape} @ {other.shape}")
        return Expr("matmul", (self, other), (self.rows, other.cols))

    def __rmatmul__(self, other):
        return _coerce(other).__matmul__(self)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("exponent must be a Python number")
        return _power(self, float(p))

    @property
    def T(self) -> "Expr":
        return transpose(self)

    def __getitem__(self, key) -> "Expr":
        if not isinstance(key, tuple):
            key = (key, slice(None))
        if len(key) != 2:
            raise IndexError("expressions are indexed as e[rows, cols]")
        rsel = _norm_slice(key[0], self.rows, "row")
        csel = _norm_slice(key[1], self.cols, "column")
        nr = rsel.stop - rsel.start
        nc = csel.stop - csel.start
        node = Expr("index", (self,), (nr, nc), payload=(rsel, csel))
        return node


def _norm_slice(k, n, what) -> slice:
    if isinstance(k, int):
        if k < -n or k >= n:
            raise IndexError(f"{what} index {k} out of range for size {n}")
        if k < 0:
            k += n
        return slice(k, k + 1)
    if isinstance(k, slice):
        start, stop, step = k.indices(n)
        if step != 1:
            raise IndexError("strided slicing is not supported")
        if stop < start:
            stop = start
        return slice(start, stop)
    raise IndexError(f"unsupported {what} index {k!r}")


def _coerce(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return Expr._constant(x)


def constant(x) -> Expr:
    """Wrap a scalar / vector / matrix as a constant node."""
    return Expr._constant(x)


def _broadcast_shape(a: Expr, b: Expr, op: str) -> tuple[int, int]:
    if a.shape == b.shape:
        return a.shape
    if a.is_scalar:
        return b.shape
    if b.is_scalar:
        return a.shape
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _binary_elementwise(kind: str, a: Expr, b: Expr) -> Expr:
    shape = _broadcast_shape(a, b, kind)
    # Constant folding of structural zeros keeps derivative graphs small.
    if kind == "add":
        if a._zero() and a.shape == shape:
            return b
        if b._zero() and b.shape == shape:
            return a
    elif kind == "sub":
        if b._zero() and a.shape == shape:
            return a
        if a._zero():
            return -b if b.shape == shape else Expr("sub", (a, b), shape)
    elif kind == "mul":
        if a._zero() or b._zero():
            return Expr._constant(np.zeros(shape))
        if a.kind == "constant" and a.is_scalar and a.value[0, 0] == 1.0:
            return b if b.shape == shape else Expr(kind, (a, b), shape)
        if b.kind == "constant" and b.is_scalar and b.value[0, 0] == 1.0:
            return a if a.shape == shape else Expr(kind, (a, b), shape)
    elif kind == "div":
        if a._zero():
            return Expr._constant(np.zeros(shape))
    return Expr(kind, (a, b), shape)


def _power(a: Expr, p: float) -> Expr:
    if p == 1.0:
        return a
    return Expr("power", (a,), a.shape, payload=p)


def _unary(kind: str, a: Expr) -> Expr:
    return Expr(kind, (a,), a.shape)


def sin(a) -> Expr:
    return _unary("sin", _coerce(a))


def cos(a) -> Expr:
    return _unary("cos", _coerce(a))


def tan(a) -> Expr:
    return _unary("tan", _coerce(a))


def sqrt(a) -> Expr:
    return _unary("sqrt", _coerce(a))


def _guard(a: Expr) -> Expr:
    return Expr("guard", (a,), a.shape)


def transpose(a) -> Expr:
    a = _coerce(a)
    if a.kind == "transpose":
        return a.children[0]
    return Expr("transpose", (a,), (a.cols, a.rows))


def vertcat(*parts) -> Expr:
    parts = tuple(_coerce(p) for p in parts)
    if not parts:
        raise ShapeError("vertcat needs at least one operand")
    if len(parts) == 1:
        return parts[0]
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError("vertcat: column counts disagree")
    rows = sum(p.rows for p in parts)
    return Expr("vertcat", parts, (rows, cols))


def horzcat(*parts) -> Expr:
    parts = tuple(_coerce(p) for p in parts)
    if not parts:
        raise ShapeError("horzcat needs at least one operand")
    if len(parts) == 1:
        return parts[0]
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError("horzcat: row counts disagree")
    cols = sum(p.cols for p in parts)
    return Expr("horzcat", parts, (rows, cols))


def dot(a, b) -> Expr:
    a, b = _coerce(a), _coerce(b)
    if a.cols != 1 or b.cols != 1 or a.rows != b.rows:
        raise ShapeError(f"dot expects equal-length column vectors, got {a.shape}, {b.shape}")
    return Expr("dot", (a, b), (1, 1))


def norm_fro(a) -> Expr:
    return Expr("fro", (_coerce(a),), (1, 1))


def det(a) -> Expr:
    a = _coerce(a)
    if a.rows != a.cols:
        raise ShapeError(f"det expects a square matrix, got {a.shape}")
    if a.rows > 4:
        raise ShapeError("det supports matrices up to 4x4")
    return Expr("det", (a,), (1, 1))


def matrix_from(entries) -> Expr:
    """Assemble a matrix expression from a 2-D list of scalar expressions."""
    rows = []
    for row in entries:
        rows.append(horzcat(*[_coerce(e) for e in row]))
    return vertcat(*rows)


# ----------------------------------------------------------------------
# traversal


def _topo(roots) -> list[Expr]:
    order: list[Expr] = []
    seen: set[int] = set()
    stack: list[tuple[Expr, bool]] = [(r, False) for r in reversed(roots)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for ch in reversed(node.children):
            if id(ch) not in seen:
                stack.append((ch, False))
    return order


def free_variables(e: Expr) -> set[VarSymbol]:
    out: set[VarSymbol] = set()
    for node in _topo([e]):
        if node.kind == "variable":
            out.add(node.var)
    return out


# ----------------------------------------------------------------------
# evaluation (reference interpreter)


def _check_binding_value(sym: VarSymbol, v) -> np.ndarray:
    a = _as_value(v)
    if a.shape != sym.shape:
        raise ShapeError(
            f"binding for {sym.name!r} has shape {a.shape}, expected {sym.shape}"
        )
    return a


def evaluate(e: Expr, binding: dict[VarSymbol, object]) -> np.ndarray:
    """Evaluate an expression at the given variable binding.

    Returns a dense (rows, cols) float array. Deterministic: the node order
    and the arithmetic performed are a pure function of the DAG.
    """
    vals: dict[int, np.ndarray] = {}
    for node in _topo([e]):
        k = node.kind
        if k == "constant":
            v = node.value
        elif k == "variable":
            if node.var not in binding:
                raise UnboundVariableError(f"no value bound for variable {node.var.name!r}")
            v = _check_binding_value(node.var, binding[node.var])
        else:
            c = [vals[id(ch)] for ch in node.children]
            if k == "add":
                v = c[0] + c[1]
            elif k == "sub":
                v = c[0] - c[1]
            elif k == "neg":
                v = -c[0]
            elif k == "mul":
                v = c[0] * c[1]
            elif k == "div":
                v = c[0] / c[1]
            elif k == "matmul":
                v = c[0] @ c[1]
            elif k == "sin":
                v = np.sin(c[0])
            elif k == "cos":
                v = np.cos(c[0])
            elif k == "tan":
                v = np.tan(c[0])
            elif k == "sqrt":
                v = np.sqrt(c[0])
            elif k == "guard":
                v = np.maximum(c[0], _GUARD_EPS)
            elif k == "power":
                v = c[0] ** node.payload
            elif k == "transpose":
                v = c[0].T
            elif k == "vertcat":
                v = np.vstack(c)
            elif k == "horzcat":
                v = np.hstack(c)
            elif k == "index":
                rsel, csel = node.payload
                v = c[0][rsel, csel]
            elif k == "fro":
                v = np.sqrt(np.sum(c[0] * c[0])).reshape(1, 1)
            elif k == "dot":
                v = (c[0].T @ c[1]).reshape(1, 1)
            elif k == "det":
                v = np.array([[_det_cofactor(c[0])]])
            else:  # pragma: no cover
                raise AssertionError(f"unknown node kind {k}")
            v = np.asarray(v, dtype=float).reshape(node.shape)
        vals[id(node)] = v
    return vals[id(e)]


def _det_cofactor(a: np.ndarray) -> float:
    n = a.shape[0]
    if n == 1:
        return float(a[0, 0])
    if n == 2:
        return float(a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0])
    s = 0.0
    cols = list(range(n))
    for j in range(n):
        minor = a[1:][:, [c for c in cols if c != j]]
        s += ((-1.0) ** j) * a[0, j] * _det_cofactor(minor)
    return float(s)


# ----------------------------------------------------------------------
# substitution


def substitute(e: Expr, replacements: dict[VarSymbol, Expr]) -> Expr:
    """Replace variables by expressions, returning a new DAG.

    The original expression is untouched; untouched subgraphs are shared.
    """
    for sym, rep in replacements.items():
        rep = _coerce(rep)
        if rep.shape != sym.shape:
            raise ShapeError(
                f"replacement for {sym.name!r} has shape {rep.shape}, expected {sym.shape}"
            )
    reps = {sym: _coerce(rep) for sym, rep in replacements.items()}
    memo: dict[int, Expr] = {}
    for node in _topo([e]):
        if node.kind == "variable" and node.var in reps:
            memo[id(node)] = reps[node.var]
            continue
        if not node.children:
            memo[id(node)] = node
            continue
        ch = tuple(memo[id(c)] for c in node.children)
        if all(a is b for a, b in zip(ch, node.children)):
            memo[id(node)] = node
        else:
            memo[id(node)] = Expr(node.kind, ch, node.shape, value=node.value,
                                  var=node.var, payload=node.payload)
    return memo[id(e)]


# ----------------------------------------------------------------------
# forward-mode differentiation


def _zeros(shape) -> Expr:
    return Expr._constant(np.zeros(shape))


def jacobian(e: Expr, v: VarSymbol | Expr) -> Expr:
    """Jacobian d e / d v as an (m x n) expression.

    Dense forward mode: one tangent sweep per component of ``v``. Structural
    zeros are folded away during construction, so seeding a variable the
    output does not depend on costs nothing.
    """
    if isinstance(v, Expr):
        if v.kind != "variable":
            raise ValueError("jacobian target must be a variable")
        v = v.var
    if e.cols != 1:
        raise ShapeError(f"jacobian expects a column-vector expression, got {e.shape}")
    if v.shape[1] != 1:
        raise ShapeError(f"jacobian target must be a column vector, got {v.shape}")
    n = v.shape[0]
    order = _topo([e])
    cols = []
    for j in range(n):
        seed = np.zeros(v.shape)
        seed[j, 0] = 1.0
        cols.append(_forward_sweep(order, e, v, Expr._constant(seed)))
    return horzcat(*cols)


def _forward_sweep(order: list[Expr], root: Expr, v: VarSymbol, seed: Expr) -> Expr:
    tan: dict[int, Expr] = {}
    for node in order:
        k = node.kind
        if k == "constant":
            d = _zeros(node.shape)
        elif k == "variable":
            d = seed if node.var is v else _zeros(node.shape)
        else:
            c = node.children
            dc = [tan[id(ch)] for ch in c]
            if k == "add":
                d = dc[0] + dc[1]
            elif k == "sub":
                d = dc[0] - dc[1]
            elif k == "neg":
                d = -dc[0]
            elif k == "mul":
                d = dc[0] * c[1] + c[0] * dc[1]
            elif k == "div":
                d = dc[0] / c[1] - (c[0] * dc[1]) / (c[1] * c[1])
            elif k == "matmul":
                d = dc[0] @ c[1] + c[0] @ dc[1]
            elif k == "sin":
                d = cos(c[0]) * dc[0]
            elif k == "cos":
                d = -(sin(c[0]) * dc[0])
            elif k == "tan":
                d = (1.0 + node * node) * dc[0]
            elif k == "sqrt":
                # guarded at 0; the consumers square the value before use
                d = dc[0] / (2.0 * _guard(node))
            elif k == "guard":
                d = dc[0]
            elif k == "power":
                p = node.payload
                if p == 0.0:
                    d = _zeros(node.shape)
                elif p == 2.0:
                    d = (2.0 * c[0]) * dc[0]
                else:
                    d = (p * _power(c[0], p - 1.0)) * dc[0]
            elif k == "transpose":
                d = transpose(dc[0])
            elif k == "vertcat":
                d = vertcat(*dc)
            elif k == "horzcat":
                d = horzcat(*dc)
            elif k == "index":
                rsel, csel = node.payload
                d = dc[0][rsel, csel]
            elif k == "fro":
                a, da = c[0], dc[0]
                if da._zero():
                    d = _zeros((1, 1))
                else:
                    ones_l = Expr._constant(np.ones((1, a.rows)))
                    ones_r = Expr._constant(np.ones((a.cols, 1)))
                    num = ones_l @ (a * da) @ ones_r
                    d = num / _guard(node)
            elif k == "dot":
                d = dot(dc[0], c[1]) + dot(c[0], dc[1])
            elif k == "det":
                d = _det_tangent(c[0], dc[0])
            else:  # pragma: no cover
                raise AssertionError(f"no derivative rule for {k}")
        tan[id(node)] = d
    return tan[id(root)]


def _det_tangent(a: Expr, da: Expr) -> Expr:
    """d det(A) along tangent dA, via multilinearity in the rows."""
    if da._zero():
        return _zeros((1, 1))
    n = a.rows
    if n == 1:
        return da
    terms = []
    for i in range(n):
        rows = []
        for r in range(n):
            rows.append(da[r, :] if r == i else a[r, :])
        terms.append(det(vertcat(*rows)))
    s = terms[0]
    for t in terms[1:]:
        s = s + t
    return s


# ----------------------------------------------------------------------
# compilation to flat scalar code


class _Emitter:
    def __init__(self):
        self.lines: list[str] = []
        self.n = 0
        self.cache: dict[str, str] = {}

    def emit(self, rhs: str) -> str:
        hit = self.cache.get(rhs)
        if hit is not None:
            return hit
        name = f"t{self.n}"
        self.n += 1
        self.lines.append(f"{name} = {rhs}")
        self.cache[rhs] = name
        return name


def _lit(x) -> str:
    return repr(float(x))


def _atom(x) -> str:
    return x if isinstance(x, str) else _lit(x)


def _is_lit(x, val=None):
    if isinstance(x, str):
        return False
    return True if val is None else x == val


def _scal_add(em, x, y):
    if _is_lit(x) and _is_lit(y):
        return x + y
    if _is_lit(x, 0.0):
        return y
    if _is_lit(y, 0.0):
        return x
    return em.emit(f"{_atom(x)} + {_atom(y)}")


def _scal_sub(em, x, y):
    if _is_lit(x) and _is_lit(y):
        return x - y
    if _is_lit(y, 0.0):
        return x
    if _is_lit(x, 0.0):
        return em.emit(f"-{_atom(y)}")
    return em.emit(f"{_atom(x)} - {_atom(y)}")


def _scal_mul(em, x, y):
    if _is_lit(x) and _is_lit(y):
        return x * y
    if _is_lit(x, 0.0) or _is_lit(y, 0.0):
        return 0.0
    if _is_lit(x, 1.0):
        return y
    if _is_lit(y, 1.0):
        return x
    if _is_lit(x, -1.0):
        return em.emit(f"-{_atom(y)}")
    if _is_lit(y, -1.0):
        return em.emit(f"-{_atom(x)}")
    return em.emit(f"{_atom(x)} * {_atom(y)}")


def _scal_div(em, x, y):
    if _is_lit(x) and _is_lit(y):
        return x / y
    if _is_lit(x, 0.0):
        return 0.0
    if _is_lit(y, 1.0):
        return x
    return em.emit(f"{_atom(x)} / {_atom(y)}")


def _scal_neg(em, x):
    if _is_lit(x):
        return -x
    return em.emit(f"-{_atom(x)}")


def _scal_call(em, fn, x):
    if _is_lit(x):
        return float(getattr(math, fn)(x))
    return em.emit(f"_{fn}({_atom(x)})")


def _scal_sum(em, terms):
    terms = [t for t in terms if not _is_lit(t, 0.0)]
    if not terms:
        return 0.0
    litsum = sum(t for t in terms if _is_lit(t))
    syms = [t for t in terms if not _is_lit(t)]
    if not syms:
        return litsum
    expr = " + ".join(_atom(t) for t in syms)
    if litsum != 0.0:
        expr += f" + {_lit(litsum)}"
    if len(syms) == 1 and litsum == 0.0:
        return syms[0]
    return em.emit(expr)


def _grid_det(em, g):
    n = len(g)
    if n == 1:
        return g[0][0]
    if n == 2:
        return _scal_sub(em, _scal_mul(em, g[0][0], g[1][1]),
                         _scal_mul(em, g[0][1], g[1][0]))
    terms = []
    cols = list(range(n))
    for j in range(n):
        minor = [[g[r][c] for c in cols if c != j] for r in range(1, n)]
        t = _scal_mul(em, g[0][j], _grid_det(em, minor))
        terms.append(t if j % 2 == 0 else _scal_neg(em, t))
    return _scal_sum(em, terms)


class CompiledFunction:
    """Numeric function produced by :func:`compile_function`.

    Call with one numpy array (or scalar) per input symbol; returns a list
    with one ``(rows, cols)`` array per output expression.
    """

    def __init__(self, inputs, outputs, name="compiled"):
        self.inputs = list(inputs)
        self.output_shapes = [o.shape for o in outputs]
        self.name = name
        self.source, self._fn = _lower(self.inputs, [ _coerce(o) for o in outputs ], name)

    def __call__(self, *values):
        if len(values) != len(self.inputs):
            raise TypeError(f"{self.name} expects {len(self.inputs)} inputs, got {len(values)}")
        flats = []
        for sym, v in zip(self.inputs, values):
            a = np.asarray(v, dtype=float)
            if a.size != sym.size:
                raise ShapeError(
                    f"input {sym.name!r}: expected {sym.size} values, got {a.size}"
                )
            flats.append(a.ravel().tolist())
        return self._fn(*flats)


def _lower(inputs: list[VarSymbol], outputs: list[Expr], name: str):
    em = _Emitter()
    grids: dict[int, list[list]] = {}
    in_names: dict[VarSymbol, list[str]] = {}
    args = []
    prelude = []
    for i, sym in enumerate(inputs):
        arg = f"_a{i}"
        args.append(arg)
        r, c = sym.shape
        names = [f"v{i}_{k}" for k in range(r * c)]
        in_names[sym] = names
        if len(names) == 1:
            prelude.append(f"{names[0]}, = {arg}")
        else:
            prelude.append(f"{', '.join(names)} = {arg}")

    order = _topo(outputs)
    for node in order:
        k = node.kind
        r, c = node.shape
        if k == "constant":
            g = [[float(node.value[i, j]) for j in range(c)] for i in range(r)]
        elif k == "variable":
            if node.var not in in_names:
                raise UnboundVariableError(
                    f"expression depends on {node.var.name!r} which is not an input"
                )
            names = in_names[node.var]
            g = [[names[i * c + j] for j in range(c)] for i in range(r)]
        else:
            cg = [grids[id(ch)] for ch in node.children]
            if k in ("add", "sub", "mul", "div"):
                fn = {"add": _scal_add, "sub": _scal_sub,
                      "mul": _scal_mul, "div": _scal_div}[k]
                a, b = node.children
                ga, gb = cg
                g = [[fn(em,
                         ga[0][0] if a.is_scalar else ga[i][j],
                         gb[0][0] if b.is_scalar else gb[i][j])
                      for j in range(c)] for i in range(r)]
            elif k == "neg":
                g = [[_scal_neg(em, cg[0][i][j]) for j in range(c)] for i in range(r)]
            elif k in ("sin", "cos", "tan", "sqrt"):
                g = [[_scal_call(em, k, cg[0][i][j]) for j in range(c)] for i in range(r)]
            elif k == "guard":
                g = [[(max(x, _GUARD_EPS) if _is_lit(x)
                       else em.emit(f"{_atom(x)} if {_atom(x)} > {_GUARD_EPS!r} else {_GUARD_EPS!r}"))
                      for x in row] for row in cg[0]]
            elif k == "power":
                p = node.payload
                g = [[(x ** p if _is_lit(x) else em.emit(f"{_atom(x)} ** {p!r}"))
                      for x in row] for row in cg[0]]
            elif k == "transpose":
                g = [[cg[0][j][i] for j in range(c)] for i in range(r)]
            elif k == "matmul":
                a, b = node.children
                ga, gb = cg
                g = [[_scal_sum(em, [_scal_mul(em, ga[i][t], gb[t][j])
                                     for t in range(a.cols)])
                      for j in range(c)] for i in range(r)]
            elif k == "vertcat":
                g = []
                for sub in cg:
                    g.extend(sub)
            elif k == "horzcat":
                g = [[] for _ in range(r)]
                for sub in cg:
                    for i in range(r):
                        g[i] = g[i] + sub[i]
            elif k == "index":
                rsel, csel = node.payload
                g = [row[csel] for row in cg[0][rsel]]
            elif k == "dot":
                g = [[_scal_sum(em, [_scal_mul(em, cg[0][i][0], cg[1][i][0])
                                     for i in range(node.children[0].rows)])]]
            elif k == "fro":
                sq = [_scal_mul(em, x, x) for row in cg[0] for x in row]
                g = [[_scal_call(em, "sqrt", _scal_sum(em, sq))]]
            elif k == "det":
                g = [[_grid_det(em, cg[0])]]
            else:  # pragma: no cover
                raise AssertionError(f"cannot lower node kind {k}")
        grids[id(node)] = g

    body = prelude + em.lines
    rets = []
    for oi, out in enumerate(outputs):
        r, c = out.shape
        g = grids[id(out)]
        oname = f"_o{oi}"
        entries = [(i, j, g[i][j]) for i in range(r) for j in range(c)]
        nonzero = [(i, j, x) for i, j, x in entries if not _is_lit(x, 0.0)]
        if len(nonzero) <= (r * c) // 2:
            body.append(f"{oname} = _np.zeros(({r}, {c}))")
            for i, j, x in nonzero:
                body.append(f"{oname}[{i}, {j}] = {_atom(x)}")
        else:
            body.append(f"{oname} = _np.empty(({r}, {c}))")
            for i, j, x in entries:
                body.append(f"{oname}[{i}, {j}] = {_atom(x)}")
        rets.append(oname)
    body.append(f"return [{', '.join(rets)}]")

    src = f"def {name}({', '.join(args)}):\n" + "\n".join("    " + ln for ln in body)
    ns = {
        "_np": np,
        "_sin": math.sin,
        "_cos": math.cos,
        "_tan": math.tan,
        "_sqrt": math.sqrt,
    }
    code = compile(src, f"<{name}>", "exec")
    exec(code, ns)
    return src, ns[name]


def compile_function(inputs, outputs, name="compiled") -> CompiledFunction:
    """Compile expressions into a fast numeric function of the input symbols."""
    syms = []
    for x in inputs:
        if isinstance(x, Expr):
            if x.kind != "variable":
                raise ValueError("compile_function inputs must be variables")
            syms.append(x.var)
        else:
            syms.append(x)
    return CompiledFunction(syms, outputs, name)
