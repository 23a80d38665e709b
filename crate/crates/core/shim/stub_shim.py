"""Minimal runner speaking the sandbox line protocol.

Reads one JSON document from stdin:
    {"source": str, "assertions": [str], "mode": "functional"|"timed", "repeats": int}
Writes one JSON line per assertion to stdout, flushed before the next test:
    {"index": i, "status": "pass"|"fail"|"error", "message": str, "times": [seconds]}
If the source cannot be loaded, writes a single {"index": -1, "status": "error", ...}.

In timed mode the callee and its arguments are evaluated once; only the call
itself is timed, and the first timed call is the one whose result is checked.
Calls are looped until one measurement covers at least
MIN_MEASUREMENT seconds (or autoranging exhausts its budget), mutable
arguments are copied afresh before every call, and each entry of "times" is
seconds per call.
"""
import sys
import time

# ast and copy are imported lazily, and the json package (which drags in re)
# is bypassed for its C scanner: functional runs spawn one interpreter per
# test, and start-up time dominates there.
try:
    import _json
except ImportError:
    _json = None


class _ScanContext:
    strict = True
    object_hook = None
    object_pairs_hook = None
    parse_float = float
    parse_int = int
    parse_constant = float
    memo = {}


def loads(text):
    if _json is None:
        import json
        return json.loads(text)
    value, _ = _json.make_scanner(_ScanContext())(text.strip(), 0)
    return value


def quote(text):
    if _json is None:
        import json
        return json.dumps(text)
    return _json.encode_basestring_ascii(text)


def emit(record):
    times = ", ".join(repr(float(t)) for t in record["times"])
    sys.stdout.write('{"index": %d, "status": %s, "message": %s, "times": [%s]}\n' % (
        record["index"], quote(record["status"]), quote(record["message"]), times))
    sys.stdout.flush()


def describe(exc):
    text = str(exc)
    name = type(exc).__name__
    return f"{name}: {text}" if text else name


MIN_MEASUREMENT = 0.002
MAX_LOOPS = 1 << 14
# wall seconds autoranging may spend, argument copies included
AUTORANGE_BUDGET = 0.5


def split_assertion(text):
    """Return (call_node, check_code) or None when the line is not a plain assert."""
    import ast
    try:
        tree = ast.parse(text)
    except SyntaxError:
        return None
    if len(tree.body) != 1 or not isinstance(tree.body[0], ast.Assert):
        return None
    node = tree.body[0]
    test = node.test
    if isinstance(test, ast.Compare):
        call = test.left
        check = ast.Assert(
            test=ast.Compare(left=ast.Name(id="__effigen_value__", ctx=ast.Load()),
                             ops=test.ops, comparators=test.comparators),
            msg=node.msg)
    else:
        call = test
        check = ast.Assert(test=ast.Name(id="__effigen_value__", ctx=ast.Load()), msg=node.msg)
    check_mod = ast.fix_missing_locations(ast.Module(body=[check], type_ignores=[]))
    return call, compile(check_mod, "<assert>", "exec")


def evaluate(node, namespace):
    import ast
    code = compile(ast.fix_missing_locations(ast.Expression(body=node)), "<call>", "eval")
    return eval(code, namespace)


def prepare_call(call, namespace):
    """Evaluate the callee and its arguments once so only the call is timed."""
    import ast
    if not isinstance(call, ast.Call) or any(isinstance(a, ast.Starred) for a in call.args) \
            or any(k.arg is None for k in call.keywords):
        return None
    func = evaluate(call.func, namespace)
    args = tuple(evaluate(a, namespace) for a in call.args)
    kwargs = {k.arg: evaluate(k.value, namespace) for k in call.keywords}
    return func, args, kwargs


ATOMIC = (int, float, complex, str, bytes, bool, type(None))


def copier(value):
    """A function returning a fresh copy of `value`, or None when `value`
    cannot be mutated and may be shared."""
    if isinstance(value, ATOMIC):
        return None
    kind = type(value)
    if kind is tuple and all(type(x) in ATOMIC for x in value):
        return None
    if kind in (list, set, dict, bytearray):
        items = value.values() if kind is dict else value
        if kind is bytearray or all(type(x) in ATOMIC for x in items):
            return value.copy
    import copy
    return lambda: copy.deepcopy(value)


def fresh_arguments(args, kwargs):
    """Returns (fresh, shared): a zero-argument function producing call
    arguments, and whether every argument can be reused as is."""
    arg_copiers = [copier(a) for a in args]
    kw_copiers = {k: copier(v) for k, v in kwargs.items()}
    shared = all(c is None for c in arg_copiers) and all(c is None for c in kw_copiers.values())
    if shared:
        return (lambda: (args, kwargs)), True

    def fresh():
        a = [v if c is None else c() for v, c in zip(args, arg_copiers)]
        k = {n: (kwargs[n] if c is None else c()) for n, c in kw_copiers.items()}
        return a, k
    return fresh, False


def measure(func, fresh, shared, loops):
    """Seconds per call over `loops` calls. Mutable arguments are copied
    before each call, outside the timed region."""
    if shared:
        a, k = fresh()
        start = time.perf_counter()
        for _ in range(loops):
            func(*a, **k)
        return (time.perf_counter() - start) / loops
    total = 0.0
    for _ in range(loops):
        a, k = fresh()
        start = time.perf_counter()
        func(*a, **k)
        total += time.perf_counter() - start
    return total / loops


def time_call(func, fresh, shared, repeats, first):
    """`first` is the duration of the single call already made to check the
    result; it counts as the one-loop measurement."""
    loops = 1
    began = time.perf_counter()
    while (first * loops < MIN_MEASUREMENT and loops < MAX_LOOPS
           and time.perf_counter() - began < AUTORANGE_BUDGET):
        loops *= 2
        first = measure(func, fresh, shared, loops)
    times = [first]
    for _ in range(repeats - 1):
        times.append(measure(func, fresh, shared, loops))
    return times


def run_one(index, text, namespace, repeats, timed):
    times = []
    try:
        if not timed:
            start = time.perf_counter()
            exec(compile(text, "<assert>", "exec"), namespace)
            return {"index": index, "status": "pass", "message": "", "times": [time.perf_counter() - start]}
        split = split_assertion(text)
        if split is None:
            code = compile(text, "<assert>", "exec")
            for _ in range(repeats):
                start = time.perf_counter()
                exec(code, namespace)
                times.append(time.perf_counter() - start)
            return {"index": index, "status": "pass", "message": "timed whole statement", "times": times}
        call, check_code = split
        prepared = prepare_call(call, namespace)
        if prepared is None:
            for _ in range(repeats):
                start = time.perf_counter()
                value = evaluate(call, namespace)
                times.append(time.perf_counter() - start)
        else:
            func, args, kwargs = prepared
            fresh, shared = fresh_arguments(args, kwargs)
            a, k = fresh()
            start = time.perf_counter()
            value = func(*a, **k)
            single = time.perf_counter() - start
        namespace["__effigen_value__"] = value
        exec(check_code, namespace)
        if prepared is not None:
            times = time_call(func, fresh, shared, repeats, single)
        return {"index": index, "status": "pass", "message": "", "times": times}
    except AssertionError as exc:
        return {"index": index, "status": "fail", "message": describe(exc), "times": times}
    except BaseException as exc:  # noqa: BLE001 - candidate code may raise anything
        return {"index": index, "status": "error", "message": describe(exc), "times": times}


def main():
    command = loads(sys.stdin.read())
    repeats = max(1, int(command.get("repeats", 1)))
    timed = command.get("mode", "functional") == "timed"
    if not timed:
        repeats = 1
    namespace = {"__name__": "__candidate__"}
    try:
        exec(compile(command["source"], "<candidate>", "exec"), namespace)
    except BaseException as exc:  # noqa: BLE001
        emit({"index": -1, "status": "error", "message": describe(exc), "times": []})
        return 0
    for index, text in enumerate(command.get("assertions", [])):
        emit(run_one(index, text, namespace, repeats, timed))
    return 0


if __name__ == "__main__":
    sys.exit(main())
