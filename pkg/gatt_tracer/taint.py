"""
Crypto tracer

Decides whether data written with a setValue overload is the output of a
crypto call (backtrace from the sink argument) or whether data obtained
with a getValue variant reaches a crypto call (forward trace from the
source result).

Two trace passes run in order, then a lenient scan; the first that finds a
crypto call decides the confidence level:

    High    direct trace: register transfers, results of internal calls,
            fields, intent extras and AsyncTask handoffs
    Medium  associated entities: the other arguments of calls on the
            path, and implementations of interface/abstract methods
    Low     lenient scan: any crypto call in a method either pass visited
"""
import enum
import functools
import logging
import re
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field, fields, replace
from typing import FrozenSet, Optional, Tuple

from gatt_tracer.common import (
    MAX_DEPTH,
    MAX_VISITED,
    TIMEOUT,
    Confidence,
    Direction,
    TracerException,
)
from gatt_tracer.smali import (
    MethodSignature,
    OpFamily,
    Register,
    RegisterKind,
    def_use,
    p,
)


log = logging.getLogger(__name__)

INTENT = "Landroid/content/Intent;"
ASYNC_TASK = "Landroid/os/AsyncTask;"
_GET_EXTRA_RE = re.compile(r"^get\w*Extra$")
_DISPATCH_ARGS = {"execute": 1, "executeOnExecutor": 2}

# flows we do not follow, only count
LOOPER_CLASSES = ("Landroid/os/Handler;", "Landroid/os/Messenger;", "Landroid/os/Looper;")
FILE_IO_CLASSES = (
    "Ljava/io/FileOutputStream;",
    "Ljava/io/FileInputStream;",
    "Landroid/content/SharedPreferences;",
    "Landroid/content/SharedPreferences$Editor;",
)
FILE_IO_METHODS = ("openFileInput", "openFileOutput")


class Origin(enum.Enum):
    SEED_SITE = "SeedSite"
    CALLER_ARGUMENT = "CallerArgument"
    CALLEE_RETURN = "CalleeReturn"
    FIELD_ASSIGNMENT = "FieldAssignment"
    INTENT_EXTRA = "IntentExtra"
    THREAD_HANDOFF = "ThreadHandoff"
    INTERFACE_DISPATCH = "InterfaceDispatch"
    LENIENT_SCAN = "LenientScan"


class TracePass(enum.Enum):
    DIRECT = Confidence.HIGH
    ASSOCIATED = Confidence.MEDIUM


class EventKind(enum.Enum):
    CONSTANT = "constant"
    NEW_ARRAY = "new-array"
    NEW_INSTANCE = "new-instance"
    CRYPTO = "crypto"
    INVOKE = "invoke"
    ARGUMENT_USE = "argument-use"
    PARAMETER = "parameter"
    FIELD = "field"


class BudgetExhausted(TracerException):
    pass


@dataclass(frozen=True)
class TraceBudget:
    max_depth: int = MAX_DEPTH
    max_visited: int = MAX_VISITED
    wall_clock_limit: float = TIMEOUT

    def __post_init__(self):
        if self.max_depth <= 0 or self.max_visited <= 0 or self.wall_clock_limit <= 0:
            raise TracerException("Trace budget values must be positive: %s" % (self,))


@dataclass(frozen=True)
class TaintSeed:
    direction: Direction
    method: object
    offset: int
    register: Register

    @property
    def site(self):
        return (self.method, self.offset)


@dataclass(frozen=True)
class TraceFrame:
    method: MethodSignature
    tracked: FrozenSet[Register]
    origin: Origin
    # where tracking of `tracked` begins in this method
    offset: int = 0

    def to_record(self):
        return {
            "method": str(self.method),
            "registers": [str(r) for r in sorted(self.tracked)],
            "origin": self.origin.value,
            "offset": self.offset,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            MethodSignature.parse(record["method"]),
            frozenset(Register.parse(r) for r in record["registers"]),
            Origin(record["origin"]),
            record.get("offset", 0),
        )


@dataclass(frozen=True)
class VisitKey:
    method: MethodSignature
    register: Register
    direction: Direction
    offset: int


@dataclass(frozen=True)
class TraceDiagnostics:
    looper_msgs_seen: int = 0
    unresolved_extras: int = 0
    file_io_seen: int = 0
    depth_limited: int = 0

    def to_record(self):
        return {
            "looper_msgs_seen": self.looper_msgs_seen,
            "unresolved_extras": self.unresolved_extras,
            "file_io_seen": self.file_io_seen,
            "depth_limited": self.depth_limited,
        }

    @classmethod
    def from_record(cls, record):
        # the CLI adds lint counters alongside these
        names = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in record.items() if k in names})


@dataclass(frozen=True)
class TaintVerdict:
    direction: Direction
    crypto_found: bool
    confidence: Confidence
    witness: Tuple[TraceFrame, ...] = ()
    seeds_examined: int = 0
    budget_exhausted: bool = False
    diagnostics: TraceDiagnostics = field(default_factory=TraceDiagnostics)

    def __post_init__(self):
        if self.crypto_found == (self.confidence == Confidence.NONE):
            raise TracerException("Inconsistent verdict: %s" % (self,))
        if self.crypto_found != bool(self.witness):
            raise TracerException("A witness is required exactly for positive verdicts")

    @property
    def witness_methods(self):
        return frozenset(frame.method for frame in self.witness)

    def to_record(self):
        return {
            "direction": self.direction.value,
            "crypto_found": self.crypto_found,
            "confidence": self.confidence.value,
            "witness": [frame.to_record() for frame in self.witness],
            "seeds_examined": self.seeds_examined,
            "budget_exhausted": self.budget_exhausted,
            "diagnostics": self.diagnostics.to_record(),
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            Direction(record["direction"]),
            bool(record["crypto_found"]),
            Confidence(record["confidence"]),
            tuple(TraceFrame.from_record(f) for f in record.get("witness", [])),
            record.get("seeds_examined", 0),
            bool(record.get("budget_exhausted", False)),
            TraceDiagnostics.from_record(record.get("diagnostics") or {}),
        )


@dataclass(frozen=True)
class TraceEvent:
    kind: EventKind
    method: object
    offset: int
    register: Optional[Register]
    frames: Tuple[TraceFrame, ...]

    @property
    def instruction(self):
        return self.method.instructions[self.offset]


@dataclass(frozen=True)
class _Work:
    method: object
    register: Register
    offset: int
    frames: Tuple[TraceFrame, ...]
    depth: int
    chain: Tuple[Register, ...]

    def witness(self):
        last = replace(self.frames[-1], tracked=frozenset(self.chain))
        return self.frames[:-1] + (last,)


def work_item(method, register, offset, origin=Origin.SEED_SITE):
    """A single starting point for walk_back or walk_forward."""
    frame = TraceFrame(method.signature, frozenset([register]), origin, offset)
    return _Work(method, register, offset, (frame,), 0, (register,))


@functools.lru_cache(maxsize=8192)
def method_facts(method):
    """Def-use table plus control-flow edges of a method."""
    return def_use(method), method.predecessors(), method.successors()


def reaching_definitions(method, register, offset):
    """Definitions of `register` that reach the use at `offset`.

    Walks every control-flow path backward without path sensitivity.
    Returns (defining offsets, offsets of invokes taking the register as
    an argument on the way, whether the method entry is reached).
    """
    table, preds, _ = method_facts(method)
    defs = set()
    uses = set()
    entry = False
    frontier = [offset]
    seen = set()
    while frontier:
        point = frontier.pop()
        if point in seen:
            continue
        seen.add(point)
        if point == 0:
            entry = True
        for i in preds[point]:
            row = table[i]
            insn = method.instructions[i]
            if register in row.defs:
                defs.add(i)
                if row.strong:
                    continue
            elif insn.is_invoke and register in insn.operands:
                uses.add(i)
            frontier.append(i)
    return sorted(defs), sorted(uses), entry


def constant_string(method, register, offset, depth=0):
    """The single const-string value a register holds at `offset`, if any."""
    defs, _, entry = reaching_definitions(method, register, offset)
    if entry or not defs:
        return None
    values = set()
    for i in defs:
        insn = method.instructions[i]
        if insn.opcode.startswith("const-string"):
            values.add(insn.string_value)
        elif insn.family == OpFamily.MOVE and depth < 16:
            value = constant_string(method, insn.operands[1], i, depth + 1)
            if value is None:
                return None
            values.add(value)
        else:
            return None
    return values.pop() if len(values) == 1 else None


def _is_put_extra(signature):
    return (
        signature.class_descriptor == INTENT
        and signature.name == "putExtra"
        and signature.param_descriptors[:1] == ("Ljava/lang/String;",)
    )


def _is_get_extra(signature):
    return (
        signature.class_descriptor == INTENT
        and _GET_EXTRA_RE.match(signature.name) is not None
        and signature.param_descriptors[:1] == ("Ljava/lang/String;",)
    )


class ComponentLinker:
    """Pairs intent extras by key and AsyncTask dispatches with their task."""

    def __init__(self, program):
        self.program = program
        self.unresolved = set()
        self._puts = None
        self._gets = None
        self._dispatches = None

    def _index(self):
        if self._puts is not None:
            return
        self._puts = defaultdict(list)
        self._gets = defaultdict(list)
        self._dispatches = []
        for method in self.program.iter_methods():
            for insn in method.instructions:
                if not insn.is_invoke or len(insn.operands) < 2:
                    continue
                ref = insn.method_ref
                if _is_put_extra(ref) or _is_get_extra(ref):
                    key = constant_string(method, insn.operands[1], insn.offset)
                    if key is None:
                        continue
                    target = self._puts if _is_put_extra(ref) else self._gets
                    target[key].append((method, insn.offset))
                    continue
                task = self.task_class(method, insn)
                if task is not None:
                    self._dispatches.append((method, insn.offset, task))

    def intent_key(self, method, insn):
        key = constant_string(method, insn.operands[1], insn.offset)
        if key is None:
            site = (method.signature, insn.offset)
            if site not in self.unresolved:
                log.info("Unresolved intent extra key at %s:%d", *site)
            self.unresolved.add(site)
        return key

    def task_class(self, method, insn):
        ref = insn.method_ref
        position = _DISPATCH_ARGS.get(ref.name)
        if position is None or len(insn.operands) <= position:
            return None
        program = self.program
        cls = ref.class_descriptor
        if cls != ASYNC_TASK and cls in program.classes:
            return cls if program.extends(cls, ASYNC_TASK) else None
        if cls != ASYNC_TASK:
            return None
        # a plain AsyncTask reference: use the allocation of the receiver
        defs, _, _ = reaching_definitions(method, insn.operands[0], insn.offset)
        types = {
            method.instructions[i].literal
            for i in defs
            if method.instructions[i].family == OpFamily.NEW_INSTANCE
        }
        if len(types) == 1:
            task = types.pop()
            if task in program.classes and program.extends(task, ASYNC_TASK):
                return task
        return None

    def _task_methods(self, task, name):
        for owner in [task] + self.program.ancestors(task):
            cls = self.program.classes.get(owner)
            if cls is None:
                continue
            found = [
                m
                for m in sorted(cls.methods, key=lambda m: m.signature.sort_key)
                if m.signature.name == name
                and len(m.signature.param_descriptors) == 1
                and not m.is_abstract
            ]
            if found:
                return found
        return []

    def hop(self, method, offset, register, direction, entry=False):
        """Frames on the far side of an intent or thread boundary.

        With `entry` set, `register` is a parameter traced back to the start
        of `method`.
        """
        self._index()
        frames = []
        sig = method.signature
        insn = method.instructions[offset] if offset < len(method.instructions) else None
        if direction == Direction.WRITES:
            if not entry and insn is not None and insn.is_invoke and _is_get_extra(insn.method_ref):
                key = self.intent_key(method, insn)
                for put_method, put_offset in self._puts.get(key, ()) if key else ():
                    if len(put_method.instructions[put_offset].operands) < 3:
                        continue
                    value = put_method.instructions[put_offset].operands[2]
                    frames.append(
                        TraceFrame(
                            put_method.signature,
                            frozenset([value]),
                            Origin.INTENT_EXTRA,
                            put_offset,
                        )
                    )
            elif entry and register == p(1) and not method.is_static:
                if sig.name == "doInBackground":
                    for caller, site, task in self._dispatches:
                        if method in self._task_methods(task, "doInBackground"):
                            call = caller.instructions[site]
                            args = call.operands[_DISPATCH_ARGS[call.method_ref.name]]
                            frames.append(
                                TraceFrame(
                                    caller.signature,
                                    frozenset([args]),
                                    Origin.THREAD_HANDOFF,
                                    site,
                                )
                            )
                elif sig.name == "onPostExecute":
                    for background in self._task_methods(
                        sig.class_descriptor, "doInBackground"
                    ):
                        for ret in background.instructions:
                            if ret.family == OpFamily.RETURN and ret.operands:
                                frames.append(
                                    TraceFrame(
                                        background.signature,
                                        frozenset([ret.operands[0]]),
                                        Origin.THREAD_HANDOFF,
                                        ret.offset,
                                    )
                                )
            return frames

        if insn is None:
            return frames
        if insn.is_invoke and _is_put_extra(insn.method_ref):
            if len(insn.operands) > 2 and insn.operands[2] == register:
                key = self.intent_key(method, insn)
                for get_method, get_offset in self._gets.get(key, ()) if key else ():
                    following = get_offset + 1
                    if following >= len(get_method.instructions):
                        continue
                    result = get_method.instructions[following]
                    if result.family != OpFamily.MOVE_RESULT:
                        continue
                    frames.append(
                        TraceFrame(
                            get_method.signature,
                            frozenset([result.operands[0]]),
                            Origin.INTENT_EXTRA,
                            following + 1,
                        )
                    )
        elif insn.is_invoke:
            task = self.task_class(method, insn)
            if task is not None:
                args = insn.operands[_DISPATCH_ARGS[insn.method_ref.name]]
                if args == register:
                    for background in self._task_methods(task, "doInBackground"):
                        frames.append(
                            TraceFrame(
                                background.signature,
                                frozenset([p(1)]),
                                Origin.THREAD_HANDOFF,
                                0,
                            )
                        )
        elif (
            insn.family == OpFamily.RETURN
            and insn.operands
            and insn.operands[0] == register
            and sig.name == "doInBackground"
            and self.program.extends(sig.class_descriptor, ASYNC_TASK)
        ):
            for post in self._task_methods(sig.class_descriptor, "onPostExecute"):
                frames.append(
                    TraceFrame(post.signature, frozenset([p(1)]), Origin.THREAD_HANDOFF, 0)
                )
        return frames


def cross_component_hop(
    method, offset, register, program, direction, linker=None, entry=False
):
    """Trace frames reached across an intent extra or AsyncTask boundary.

    `method`/`offset` is the getExtra/putExtra/execute call site, the entry
    (offset 0) of doInBackground/onPostExecute, or a return in
    doInBackground; `register` is the register being traced there.
    """
    if linker is None:
        linker = ComponentLinker(program)
    return linker.hop(method, offset, register, direction, entry)


class CryptoTracer:
    def __init__(self, program, rules, budget=None):
        self.program = program
        self.rules = rules
        self.budget = budget or TraceBudget()
        self.linker = ComponentLinker(program)
        self.visited_methods = {}
        self.depth_limited = 0
        self._visited_total = 0
        self._deadline = None
        self._interfaces = None

    def start_clock(self):
        self._deadline = time.monotonic() + self.budget.wall_clock_limit

    def _tick(self):
        self._visited_total += 1
        if self._visited_total > self.budget.max_visited:
            raise BudgetExhausted("visited more than %d keys" % self.budget.max_visited)
        if self._deadline is not None and time.monotonic() > self._deadline:
            raise BudgetExhausted(
                "ran longer than %.0fs" % self.budget.wall_clock_limit
            )

    def _visit(self, method, origin):
        self.visited_methods.setdefault(method.signature, origin)

    def _deeper(self, work, depth):
        if depth > self.budget.max_depth:
            self.depth_limited += 1
            return False
        return True

    def seeds(self, direction):
        """Seeds in (class, method, offset) order."""
        seeds = []
        for method in self.program.iter_methods():
            if self.rules.is_excluded(method.signature.class_descriptor):
                continue
            for insn in method.instructions:
                if not insn.is_invoke:
                    continue
                if direction == Direction.WRITES:
                    matcher = self.rules.write_sink(insn.method_ref)
                    if matcher is None:
                        continue
                    slots = insn.method_ref.argument_slots(insn.is_static_invoke)
                    for position in matcher.data_params:
                        if position < len(slots) and slots[position] < len(insn.operands):
                            seeds.append(
                                TaintSeed(
                                    direction,
                                    method,
                                    insn.offset,
                                    insn.operands[slots[position]],
                                )
                            )
                else:
                    if self.rules.read_source(insn.method_ref) is None:
                        continue
                    following = insn.offset + 1
                    if following < len(method.instructions):
                        result = method.instructions[following]
                        if result.family == OpFamily.MOVE_RESULT:
                            seeds.append(
                                TaintSeed(direction, method, insn.offset, result.operands[0])
                            )
        return seeds

    def _interfaces_of(self, descriptor):
        if self._interfaces is None:
            self._interfaces = defaultdict(set)
            for interface, owners in self.program.interface_impl_index.items():
                for owner in owners:
                    self._interfaces[owner].add(interface)
        return sorted(self._interfaces.get(descriptor, ()))

    def _callers(self, method, trace_pass):
        """Call sites that may dispatch to `method`, with the frame origin."""
        program = self.program
        sig = method.signature
        sites = [(c, o, Origin.CALLER_ARGUMENT) for c, o in program.callers(method)]
        # inherited, not overridden
        for sub in program.subclass_index.get(sig.class_descriptor, ()):
            inherited = sig.with_class(sub)
            if inherited not in program.methods:
                sites += [
                    (c, o, Origin.CALLER_ARGUMENT)
                    for c, o in program.callers_index.get(inherited, ())
                ]
        if trace_pass == TracePass.ASSOCIATED and not method.is_static:
            owners = self._interfaces_of(sig.class_descriptor)
            owners += program.ancestors(sig.class_descriptor)
            for owner in owners:
                sites += [
                    (c, o, Origin.INTERFACE_DISPATCH)
                    for c, o in program.callers_index.get(sig.with_class(owner), ())
                ]
        return sites

    def _dispatch_targets(self, insn, trace_pass):
        """Internal methods an invoke reaches, with the frame origin."""
        targets = []
        resolved = self.program.resolve(insn.method_ref)
        direct = (
            resolved is not None
            and not resolved.is_abstract
            and not insn.opcode.startswith("invoke-interface")
        )
        if direct:
            targets.append((resolved, Origin.CALLEE_RETURN))
        if trace_pass == TracePass.ASSOCIATED:
            for impl in self.program.implementations(insn.method_ref):
                if not direct or impl is not resolved:
                    targets.append((impl, Origin.INTERFACE_DISPATCH))
        return targets

    def walk_back(self, starts, trace_pass, follow=None):
        """Yield the origins of the values held by `starts` (work items).

        `follow` optionally names external calls whose result is traced
        through their receiver and arguments even in the direct pass.
        """
        queue = deque(starts)
        seen = set()
        while queue:
            work = queue.popleft()
            method = work.method
            key = VisitKey(method.signature, work.register, Direction.WRITES, work.offset)
            if key in seen:
                continue
            seen.add(key)
            self._tick()
            self._visit(method, work.frames[-1].origin)

            defs, arg_uses, entry = reaching_definitions(method, work.register, work.offset)

            def local(register, offset):
                queue.append(
                    _Work(
                        method, register, offset, work.frames, work.depth,
                        work.chain + (register,),
                    )
                )

            def remote(target, register, offset, origin):
                depth = work.depth + 1
                if not self._deeper(work, depth):
                    return
                frame = TraceFrame(target.signature, frozenset([register]), origin, offset)
                queue.append(
                    _Work(target, register, offset, work.witness() + (frame,), depth, (register,))
                )

            def event(kind, offset, register=None):
                return TraceEvent(kind, method, offset, register, work.witness())

            for i in defs:
                insn = method.instructions[i]
                family = insn.family
                if family in (OpFamily.CONST, OpFamily.FILL_ARRAY_DATA):
                    yield event(EventKind.CONSTANT, i)
                elif family == OpFamily.NEW_ARRAY:
                    yield event(EventKind.NEW_ARRAY, i)
                elif family == OpFamily.NEW_INSTANCE:
                    yield event(EventKind.NEW_INSTANCE, i)
                elif family == OpFamily.MOVE:
                    local(insn.operands[1], i)
                elif family == OpFamily.AGET:
                    local(insn.operands[1], i)
                elif family == OpFamily.APUT:
                    local(insn.operands[0], i)
                elif family in (OpFamily.ARITH, OpFamily.COMPARE):
                    table, _, _ = method_facts(method)
                    for register in sorted(table[i].uses):
                        local(register, i)
                elif family in (OpFamily.IGET, OpFamily.SGET):
                    writes = self.program.field_writes_index.get(insn.field_ref, ())
                    if not writes:
                        yield event(EventKind.FIELD, i)
                    for writer, offset in writes:
                        value = writer.instructions[offset].operands[0]
                        remote(writer, value, offset, Origin.FIELD_ASSIGNMENT)
                elif family == OpFamily.MOVE_RESULT:
                    source = method_facts(method)[0][i].source_offset
                    if source is None:
                        yield event(EventKind.INVOKE, i)
                        continue
                    call = method.instructions[source]
                    if not call.is_invoke:
                        # filled-new-array
                        for register in call.operands:
                            local(register, source)
                        continue
                    ref = call.method_ref
                    if self.rules.is_crypto(ref):
                        yield event(EventKind.CRYPTO, source)
                        continue
                    if _is_get_extra(ref):
                        frames = self.linker.hop(method, source, work.register, Direction.WRITES)
                        for frame in frames:
                            target = self.program.methods[frame.method]
                            (register,) = frame.tracked
                            remote(target, register, frame.offset, frame.origin)
                        if frames:
                            continue
                    targets = self._dispatch_targets(call, trace_pass)
                    for target, origin in targets:
                        for ret in target.instructions:
                            if ret.family == OpFamily.RETURN and ret.operands:
                                remote(target, ret.operands[0], ret.offset, origin)
                    followed = follow is not None and follow(ref)
                    if trace_pass == TracePass.ASSOCIATED or followed:
                        for register in call.operands:
                            local(register, source)
                    elif not targets:
                        yield event(EventKind.INVOKE, source)
                # opaque instructions never define a register

            for i in arg_uses:
                call = method.instructions[i]
                ref = call.method_ref
                constructor = ref.name == "<init>" and call.operands[0] == work.register
                if constructor and self.rules.is_crypto(ref):
                    yield event(EventKind.CRYPTO, i, work.register)
                    continue
                yield event(EventKind.ARGUMENT_USE, i, work.register)
                if constructor or trace_pass == TracePass.ASSOCIATED:
                    if trace_pass == TracePass.ASSOCIATED and self.rules.is_crypto(ref):
                        yield event(EventKind.CRYPTO, i, work.register)
                        continue
                    for register in call.operands:
                        if register != work.register:
                            local(register, i)

            if entry and work.register.kind == RegisterKind.PARAM:
                reached = False
                for frame in self.linker.hop(
                    method, 0, work.register, Direction.WRITES, entry=True
                ):
                    target = self.program.methods[frame.method]
                    (register,) = frame.tracked
                    remote(target, register, frame.offset, frame.origin)
                    reached = True
                for caller, offset, origin in self._callers(method, trace_pass):
                    call = caller.instructions[offset]
                    if work.register.index < len(call.operands):
                        remote(caller, call.operands[work.register.index], offset, origin)
                        reached = True
                if not reached:
                    yield event(EventKind.PARAMETER, 0, work.register)

    def walk_forward(self, starts, trace_pass):
        """Yield every call that consumes a value derived from `starts`."""
        queue = deque(starts)
        seen = set()
        while queue:
            work = queue.popleft()
            method = work.method
            key = VisitKey(method.signature, work.register, Direction.READS, work.offset)
            if key in seen:
                continue
            seen.add(key)
            self._tick()
            self._visit(method, work.frames[-1].origin)
            table, _, succs = method_facts(method)
            count = len(method.instructions)
            reg = work.register

            def local(register, offset):
                queue.append(
                    _Work(
                        method, register, offset, work.frames, work.depth,
                        work.chain + (register,),
                    )
                )

            def remote(target, register, offset, origin):
                depth = work.depth + 1
                if not self._deeper(work, depth):
                    return
                frame = TraceFrame(target.signature, frozenset([register]), origin, offset)
                queue.append(
                    _Work(target, register, offset, work.witness() + (frame,), depth, (register,))
                )

            def hop(offset):
                for frame in self.linker.hop(method, offset, reg, Direction.READS):
                    target = self.program.methods[frame.method]
                    (register,) = frame.tracked
                    remote(target, register, frame.offset, frame.origin)

            stack = [work.offset]
            walked = set()
            while stack:
                j = stack.pop()
                if j in walked or j >= count:
                    continue
                walked.add(j)
                insn = method.instructions[j]
                row = table[j]
                family = insn.family
                if reg in row.uses:
                    if family == OpFamily.MOVE:
                        local(insn.operands[0], j + 1)
                    elif family == OpFamily.AGET:
                        if insn.operands[1] == reg:
                            local(insn.operands[0], j + 1)
                    elif family == OpFamily.APUT:
                        if insn.operands[0] == reg:
                            local(insn.operands[1], j + 1)
                    elif family in (OpFamily.ARITH, OpFamily.COMPARE):
                        local(insn.operands[0], j + 1)
                    elif family in (OpFamily.IPUT, OpFamily.SPUT):
                        if insn.operands[0] == reg:
                            for reader, offset in self.program.field_reads_index.get(
                                insn.field_ref, ()
                            ):
                                dest = reader.instructions[offset].operands[0]
                                remote(reader, dest, offset + 1, Origin.FIELD_ASSIGNMENT)
                    elif family == OpFamily.RETURN:
                        hop(j)
                        for caller, offset, _ in self._callers(method, TracePass.DIRECT):
                            following = offset + 1
                            if following < len(caller.instructions):
                                result = caller.instructions[following]
                                if result.family == OpFamily.MOVE_RESULT:
                                    remote(
                                        caller,
                                        result.operands[0],
                                        following + 1,
                                        Origin.CALLEE_RETURN,
                                    )
                    elif family == OpFamily.INVOKE:
                        ref = insn.method_ref
                        if self.rules.is_crypto(ref):
                            yield TraceEvent(
                                EventKind.CRYPTO, method, j, reg, work.witness()
                            )
                        else:
                            yield TraceEvent(
                                EventKind.ARGUMENT_USE, method, j, reg, work.witness()
                            )
                        hop(j)
                        positions = [k for k, r in enumerate(insn.operands) if r == reg]
                        for target, origin in self._dispatch_targets(insn, trace_pass):
                            origin = (
                                Origin.CALLER_ARGUMENT
                                if origin == Origin.CALLEE_RETURN
                                else origin
                            )
                            for k in positions:
                                if k < target.param_register_count:
                                    remote(target, p(k), 0, origin)
                        if trace_pass == TracePass.ASSOCIATED:
                            for other in insn.operands:
                                if other != reg:
                                    local(other, j + 1)
                        if j + 1 < count:
                            result = method.instructions[j + 1]
                            if result.family == OpFamily.MOVE_RESULT:
                                local(result.operands[0], j + 2)
                if reg in row.defs and row.strong:
                    # redefined; a derived value was queued above
                    continue
                stack.extend(reversed(succs[j]))

    def _starts(self, seed):
        method = seed.method
        if seed.direction == Direction.WRITES:
            offset = seed.offset
        else:
            offset = seed.offset + 2
        return [work_item(method, seed.register, offset)]

    def trace(self, seed, trace_pass):
        """Witness of the first crypto call reached from one seed, or None."""
        if seed.direction == Direction.WRITES:
            events = self.walk_back(self._starts(seed), trace_pass)
        else:
            events = self.walk_forward(self._starts(seed), trace_pass)
        for event in events:
            if event.kind == EventKind.CRYPTO:
                return event.frames
        return None

    def lenient_scan(self, visited_methods):
        for sig in sorted(visited_methods, key=lambda s: s.sort_key):
            method = self.program.methods.get(sig)
            if method is None:
                continue
            for insn in method.instructions:
                if not insn.is_invoke or not self.rules.is_crypto(insn.method_ref):
                    continue
                tracked = set(insn.operands)
                following = insn.offset + 1
                if following < len(method.instructions):
                    result = method.instructions[following]
                    if result.family == OpFamily.MOVE_RESULT:
                        tracked.add(result.operands[0])
                # a call with no operands or result still counts, with nothing tracked
                return (
                    TraceFrame(sig, frozenset(tracked), Origin.LENIENT_SCAN, insn.offset),
                )
        return None

    def diagnostics(self):
        looper = 0
        file_io = 0
        for sig in self.visited_methods:
            method = self.program.methods.get(sig)
            if method is None:
                continue
            for insn in method.instructions:
                if not insn.is_invoke:
                    continue
                ref = insn.method_ref
                if ref.class_descriptor in LOOPER_CLASSES:
                    looper += 1
                elif ref.class_descriptor in FILE_IO_CLASSES or ref.name in FILE_IO_METHODS:
                    file_io += 1
        return TraceDiagnostics(
            looper_msgs_seen=looper,
            unresolved_extras=len(self.linker.unresolved),
            file_io_seen=file_io,
            depth_limited=self.depth_limited,
        )

    def analyze(self, direction):
        self.start_clock()
        seeds = self.seeds(direction)
        examined = set()
        witness = None
        confidence = Confidence.NONE
        exhausted = False
        try:
            for trace_pass in TracePass:
                for index, seed in enumerate(seeds):
                    examined.add(index)
                    witness = self.trace(seed, trace_pass)
                    if witness:
                        confidence = trace_pass.value
                        break
                if witness:
                    break
            if not witness:
                witness = self.lenient_scan(self.visited_methods)
                if witness:
                    confidence = Confidence.LOW
        except BudgetExhausted as e:
            log.warning("Trace budget exhausted (%s), %s verdict kept", e, direction.value)
            exhausted = True
        return TaintVerdict(
            direction,
            bool(witness),
            confidence if witness else Confidence.NONE,
            tuple(witness or ()),
            len(examined),
            exhausted,
            self.diagnostics(),
        )


def analyze_app(program, rules, direction, budget=None):
    """Verdict for one direction of one app; passes stop at the first hit."""
    return CryptoTracer(program, rules, budget).analyze(direction)


def _trace_seed(seed, program, rules, budget, trace_pass):
    tracer = CryptoTracer(program, rules, budget)
    tracer.start_clock()
    passes = [trace_pass] if trace_pass is not None else list(TracePass)
    for current in passes:
        witness = tracer.trace(seed, current)
        if witness:
            return current.value, witness
    return None


def backtrace(seed, program, rules, budget=None, trace_pass=None):
    """Backtrace one write seed; returns (confidence, witness) or None."""
    if seed.direction != Direction.WRITES:
        raise TracerException("backtrace needs a write seed")
    return _trace_seed(seed, program, rules, budget, trace_pass)


def forward_trace(seed, program, rules, budget=None, trace_pass=None):
    """Forward-trace one read seed; returns (confidence, witness) or None."""
    if seed.direction != Direction.READS:
        raise TracerException("forward_trace needs a read seed")
    return _trace_seed(seed, program, rules, budget, trace_pass)


def lenient_scan(visited_methods, program, rules):
    """Low-confidence witness: any crypto call inside an already visited method."""
    return CryptoTracer(program, rules).lenient_scan(visited_methods)
