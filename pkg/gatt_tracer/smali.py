"""
Smali intermediate representation

Parses baksmali-style disassembly text into classes, methods and
instructions, and builds the program-wide indexes the tracer needs:
callers of each method, writes and reads of each field, and the
implementors of each interface.

A built SmaliProgram is never mutated, so it can be shared between
threads for read-only analysis.
"""
import ast
import enum
import logging
import os
import re
import zipfile
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Tuple

from gatt_tracer.common import TracerException


log = logging.getLogger(__name__)


class EmptyInput(TracerException):
    pass


class SmaliSyntaxError(TracerException):
    def __init__(self, line, reason):
        super().__init__("line %s: %s" % (line, reason))
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class ParseError:
    file: str
    line: int
    reason: str


class RegisterKind(enum.Enum):
    LOCAL = "v"
    PARAM = "p"


@dataclass(frozen=True)
class Register:
    kind: RegisterKind
    index: int

    def __str__(self):
        return "%s%d" % (self.kind.value, self.index)

    def __lt__(self, other):
        return (self.kind.value, self.index) < (other.kind.value, other.index)

    def next(self):
        # upper half of a wide (J/D) value
        return Register(self.kind, self.index + 1)

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if not _REGISTER_RE.match(text):
            raise ValueError("not a register: %r" % text)
        kind = RegisterKind.PARAM if text[0] == "p" else RegisterKind.LOCAL
        return cls(kind, int(text[1:]))


def v(index):
    return Register(RegisterKind.LOCAL, index)


def p(index):
    return Register(RegisterKind.PARAM, index)


_REGISTER_RE = re.compile(r"^[vp]\d+$")
_METHOD_REF_RE = re.compile(
    r"^(?P<cls>\[*L[^;]+;|\[+[ZBSCIJFD])->(?P<name>[^(\s]+)"
    r"\((?P<params>[^)]*)\)(?P<ret>\S+)$"
)
_FIELD_REF_RE = re.compile(r"^(?P<cls>\[*L[^;]+;)->(?P<name>[^:\s]+):(?P<type>\S+)$")


def split_descriptors(text):
    """Split a concatenated parameter descriptor string into single types."""
    result = []
    i = 0
    while i < len(text):
        start = i
        while i < len(text) and text[i] == "[":
            i += 1
        if i == len(text):
            raise ValueError("bad type descriptor in %r" % text)
        if text[i] == "L":
            end = text.find(";", i)
            if end < 0:
                raise ValueError("unterminated class descriptor in %r" % text)
            i = end + 1
        elif text[i] in "ZBSCIJFDV":
            i += 1
        else:
            raise ValueError("bad type descriptor in %r" % text)
        result.append(text[start:i])
    return result


def is_wide(descriptor):
    return descriptor in ("J", "D")


@dataclass(frozen=True)
class MethodSignature:
    class_descriptor: str
    name: str
    param_descriptors: Tuple[str, ...]
    return_descriptor: str

    def __str__(self):
        return "%s->%s(%s)%s" % (
            self.class_descriptor,
            self.name,
            "".join(self.param_descriptors),
            self.return_descriptor,
        )

    @property
    def descriptor(self):
        return "(%s)%s" % ("".join(self.param_descriptors), self.return_descriptor)

    @property
    def sort_key(self):
        return (self.class_descriptor, self.name, self.descriptor)

    def with_class(self, class_descriptor):
        return MethodSignature(
            class_descriptor, self.name, self.param_descriptors, self.return_descriptor
        )

    def param_register_count(self, static):
        count = 0 if static else 1
        for descriptor in self.param_descriptors:
            count += 2 if is_wide(descriptor) else 1
        return count

    def argument_slots(self, static):
        """Register slot of each declared parameter (receiver excluded)."""
        slots = []
        slot = 0 if static else 1
        for descriptor in self.param_descriptors:
            slots.append(slot)
            slot += 2 if is_wide(descriptor) else 1
        return slots

    @classmethod
    def parse(cls, text):
        match = _METHOD_REF_RE.match(text.strip())
        if not match:
            raise ValueError("not a method reference: %r" % text)
        return cls(
            match.group("cls"),
            match.group("name"),
            tuple(split_descriptors(match.group("params"))),
            match.group("ret"),
        )


@dataclass(frozen=True)
class FieldId:
    class_descriptor: str
    name: str
    type_descriptor: str

    def __str__(self):
        return "%s->%s:%s" % (self.class_descriptor, self.name, self.type_descriptor)

    @classmethod
    def parse(cls, text):
        match = _FIELD_REF_RE.match(text.strip())
        if not match:
            raise ValueError("not a field reference: %r" % text)
        return cls(match.group("cls"), match.group("name"), match.group("type"))


class OpFamily(enum.Enum):
    MOVE = "move"
    MOVE_RESULT = "move-result"
    CONST = "const"
    NEW_ARRAY = "new-array"
    NEW_INSTANCE = "new-instance"
    AGET = "aget"
    APUT = "aput"
    IGET = "iget"
    IPUT = "iput"
    SGET = "sget"
    SPUT = "sput"
    INVOKE = "invoke"
    RETURN = "return"
    FILL_ARRAY_DATA = "fill-array-data"
    ARITH = "arith"
    COMPARE = "compare"
    GOTO = "goto"
    IF = "if"
    OPAQUE = "opaque"


_MOVES = {
    "move", "move/from16", "move/16",
    "move-wide", "move-wide/from16", "move-wide/16",
    "move-object", "move-object/from16", "move-object/16",
}
_MOVE_RESULTS = {"move-result", "move-result-wide", "move-result-object"}
_CONSTS = {
    "const", "const/4", "const/16", "const/high16",
    "const-wide", "const-wide/16", "const-wide/32", "const-wide/high16",
    "const-string", "const-string/jumbo", "const-class",
}
_ACCESS_SUFFIXES = {"", "-wide", "-object", "-boolean", "-byte", "-char", "-short"}
_RETURNS = {"return-void", "return", "return-wide", "return-object"}
_GOTOS = {"goto", "goto/16", "goto/32"}
_IFS = {
    "if-%s%s" % (cond, z)
    for cond in ("eq", "ne", "lt", "ge", "gt", "le")
    for z in ("", "z")
}
_COMPARES = {"cmpl-float", "cmpg-float", "cmpl-double", "cmpg-double", "cmp-long"}
_INVOKE_RE = re.compile(r"^invoke-(virtual|super|direct|static|interface)(/range)?$")
_BINOP_RE = re.compile(
    r"^(add|sub|mul|div|rem|and|or|xor|shl|shr|ushr)-(int|long|float|double)(/2addr)?$"
)
_LITOP_RE = re.compile(
    r"^(add|rsub|mul|div|rem|and|or|xor|shl|shr|ushr)-int/lit(8|16)$|^rsub-int$"
)
_UNOP_RE = re.compile(r"^(neg|not)-(int|long|float|double)$")
_CONVERT_RE = re.compile(r"^(int|long|float|double)-to-(int|long|float|double|byte|char|short)$")

# register count each family carries, None when it varies
_ARITY = {
    OpFamily.MOVE: (2,),
    OpFamily.MOVE_RESULT: (1,),
    OpFamily.CONST: (1,),
    OpFamily.NEW_ARRAY: (2,),
    OpFamily.NEW_INSTANCE: (1,),
    OpFamily.AGET: (3,),
    OpFamily.APUT: (3,),
    OpFamily.IGET: (2,),
    OpFamily.IPUT: (2,),
    OpFamily.SGET: (1,),
    OpFamily.SPUT: (1,),
    OpFamily.RETURN: (0, 1),
    OpFamily.FILL_ARRAY_DATA: (1,),
    OpFamily.ARITH: (2, 3),
    OpFamily.COMPARE: (3,),
    OpFamily.GOTO: (0,),
    OpFamily.IF: (1, 2),
}


def opcode_family(mnemonic):
    if mnemonic in _MOVE_RESULTS:
        return OpFamily.MOVE_RESULT
    if mnemonic in _MOVES:
        return OpFamily.MOVE
    if mnemonic in _CONSTS:
        return OpFamily.CONST
    if mnemonic == "new-array":
        return OpFamily.NEW_ARRAY
    if mnemonic == "new-instance":
        return OpFamily.NEW_INSTANCE
    for prefix, family in (
        ("aget", OpFamily.AGET),
        ("aput", OpFamily.APUT),
        ("iget", OpFamily.IGET),
        ("iput", OpFamily.IPUT),
        ("sget", OpFamily.SGET),
        ("sput", OpFamily.SPUT),
    ):
        if mnemonic.startswith(prefix) and mnemonic[len(prefix):] in _ACCESS_SUFFIXES:
            return family
    if _INVOKE_RE.match(mnemonic):
        return OpFamily.INVOKE
    if mnemonic in _RETURNS:
        return OpFamily.RETURN
    if mnemonic == "fill-array-data":
        return OpFamily.FILL_ARRAY_DATA
    if mnemonic in _GOTOS:
        return OpFamily.GOTO
    if mnemonic in _IFS:
        return OpFamily.IF
    if mnemonic in _COMPARES:
        return OpFamily.COMPARE
    if (
        _BINOP_RE.match(mnemonic)
        or _LITOP_RE.match(mnemonic)
        or _UNOP_RE.match(mnemonic)
        or _CONVERT_RE.match(mnemonic)
        or mnemonic in ("array-length", "instance-of")
    ):
        return OpFamily.ARITH
    return OpFamily.OPAQUE


def _wide_positions(mnemonic, family):
    """Operand positions holding a wide (two-register) value."""
    if family in (
        OpFamily.MOVE, OpFamily.AGET, OpFamily.APUT, OpFamily.IGET,
        OpFamily.IPUT, OpFamily.SGET, OpFamily.SPUT,
    ):
        if "-wide" in mnemonic:
            return {0, 1} if family == OpFamily.MOVE else {0}
        return set()
    if family in (OpFamily.MOVE_RESULT, OpFamily.RETURN, OpFamily.CONST):
        return {0} if "wide" in mnemonic else set()
    if family == OpFamily.COMPARE:
        return {1, 2} if ("long" in mnemonic or "double" in mnemonic) else set()
    if family == OpFamily.ARITH:
        convert = _CONVERT_RE.match(mnemonic)
        if convert:
            positions = set()
            if convert.group(2) in ("long", "double"):
                positions.add(0)
            if convert.group(1) in ("long", "double"):
                positions.add(1)
            return positions
        unop = _UNOP_RE.match(mnemonic)
        if unop:
            return {0, 1} if unop.group(2) in ("long", "double") else set()
        binop = _BINOP_RE.match(mnemonic)
        if binop and binop.group(2) in ("long", "double"):
            positions = {0, 1} if binop.group(3) else {0, 1, 2}
            if binop.group(1) in ("shl", "shr", "ushr"):
                # the shift distance is always an int
                positions.discard(max(positions))
            return positions
    return set()


def _split_operands(text):
    """Split an operand list on commas outside quotes and braces."""
    parts = []
    current = []
    in_string = False
    depth = 0
    i = 0
    while i < len(text):
        char = text[i]
        if in_string:
            current.append(char)
            if char == "\\" and i + 1 < len(text):
                current.append(text[i + 1])
                i += 1
            elif char == '"':
                in_string = False
        elif char == '"':
            in_string = True
            current.append(char)
        elif char == "{":
            depth += 1
            current.append(char)
        elif char == "}":
            depth -= 1
            current.append(char)
        elif char == "," and depth == 0:
            parts.append("".join(current).strip())
            current = []
        else:
            current.append(char)
        i += 1
    tail = "".join(current).strip()
    if tail or parts:
        parts.append(tail)
    return parts


def _expand_register_list(text):
    inner = text.strip()[1:-1].strip()
    if not inner:
        return []
    if ".." in inner:
        first, last = [Register.parse(r) for r in inner.split("..")]
        if first.kind != last.kind or last.index < first.index:
            raise ValueError("bad register range %r" % text)
        return [Register(first.kind, i) for i in range(first.index, last.index + 1)]
    return [Register.parse(r) for r in inner.split(",")]


def strip_comment(line):
    in_string = False
    escaped = False
    for i, char in enumerate(line):
        if escaped:
            escaped = False
        elif char == "\\":
            escaped = True
        elif char == '"':
            in_string = not in_string
        elif char == "#" and not in_string:
            return line[:i]
    return line


@dataclass(frozen=True)
class Instruction:
    opcode: str
    operands: Tuple[Register, ...]
    literal: Optional[str] = None
    method_ref: Optional[MethodSignature] = None
    field_ref: Optional[FieldId] = None
    offset: int = 0

    @property
    def family(self):
        return opcode_family(self.opcode)

    @property
    def is_invoke(self):
        return self.family == OpFamily.INVOKE

    @property
    def is_static_invoke(self):
        return self.opcode.startswith("invoke-static")

    @property
    def is_range(self):
        return self.opcode.endswith("/range")

    @property
    def string_value(self):
        """Decoded value of a const-string literal, None otherwise."""
        if not self.literal or not self.literal.startswith('"'):
            return None
        try:
            return ast.literal_eval(self.literal)
        except (ValueError, SyntaxError):
            return self.literal[1:-1]

    @property
    def int_value(self):
        if self.literal is None:
            return None
        return parse_int_literal(self.literal)

    def render(self):
        if self.family == OpFamily.OPAQUE:
            if self.literal:
                return "%s %s" % (self.opcode, self.literal)
            return self.opcode
        if self.family == OpFamily.INVOKE:
            if self.is_range and self.operands:
                regs = "{%s .. %s}" % (self.operands[0], self.operands[-1])
            else:
                regs = "{%s}" % ", ".join(str(r) for r in self.operands)
            return "%s %s, %s" % (self.opcode, regs, self.method_ref)
        parts = [str(r) for r in self.operands]
        if self.field_ref is not None:
            parts.append(str(self.field_ref))
        if self.literal is not None:
            parts.append(self.literal)
        if not parts:
            return self.opcode
        return "%s %s" % (self.opcode, ", ".join(parts))


def parse_int_literal(text):
    text = text.strip()
    # long, byte and short suffixes
    if len(text) > 1 and text[-1] in "LlTtSs":
        text = text[:-1]
    try:
        return int(text, 0)
    except ValueError:
        return None


def parse_instruction(line, offset=0):
    """Parse one instruction line; unknown opcodes become opaque."""
    text = strip_comment(line).strip()
    if not text:
        raise SmaliSyntaxError(None, "empty instruction")
    mnemonic, _, tail = text.partition(" ")
    tail = tail.strip()
    family = opcode_family(mnemonic)
    if family == OpFamily.OPAQUE:
        regs = tuple(
            Register.parse(m) for m in re.findall(r"\b[vp]\d+\b", tail.split('"')[0])
        )
        return Instruction(mnemonic, regs, tail or None, offset=offset)

    operands = []
    literal = None
    method_ref = None
    field_ref = None
    for part in _split_operands(tail):
        if not part:
            raise SmaliSyntaxError(None, "empty operand in %r" % text)
        if part.startswith("{"):
            try:
                operands.extend(_expand_register_list(part))
            except ValueError as e:
                raise SmaliSyntaxError(None, str(e))
        elif _REGISTER_RE.match(part):
            operands.append(Register.parse(part))
        elif family == OpFamily.INVOKE and "->" in part:
            try:
                method_ref = MethodSignature.parse(part)
            except ValueError as e:
                raise SmaliSyntaxError(None, str(e))
        elif family in (OpFamily.IGET, OpFamily.IPUT, OpFamily.SGET, OpFamily.SPUT):
            try:
                field_ref = FieldId.parse(part)
            except ValueError as e:
                raise SmaliSyntaxError(None, str(e))
        elif literal is None:
            literal = part
        else:
            raise SmaliSyntaxError(None, "unexpected operand %r in %r" % (part, text))

    if family == OpFamily.INVOKE and method_ref is None:
        raise SmaliSyntaxError(None, "invoke without method reference: %r" % text)
    if family in (OpFamily.IGET, OpFamily.IPUT, OpFamily.SGET, OpFamily.SPUT):
        if field_ref is None:
            raise SmaliSyntaxError(None, "field access without field: %r" % text)
    arity = _ARITY.get(family)
    if arity is not None and len(operands) not in arity:
        raise SmaliSyntaxError(
            None, "%s takes %s registers, got %d" % (mnemonic, arity, len(operands))
        )
    if family == OpFamily.RETURN and (mnemonic == "return-void") != (not operands):
        raise SmaliSyntaxError(None, "bad return operands in %r" % text)
    return Instruction(
        mnemonic, tuple(operands), literal, method_ref, field_ref, offset=offset
    )


@dataclass(frozen=True)
class DefUse:
    offset: int
    defs: FrozenSet[Register]
    uses: FrozenSet[Register]
    # weak definitions (aput into an array) keep the previous value alive
    strong: bool = True
    # for move-result: the instruction whose result is moved
    source_offset: Optional[int] = None


def _with_wide(insn, positions):
    regs = set()
    wide = _wide_positions(insn.opcode, insn.family)
    for position in positions:
        if position >= len(insn.operands):
            continue
        register = insn.operands[position]
        regs.add(register)
        if position in wide:
            regs.add(register.next())
    return frozenset(regs)


def instruction_def_use(insn, previous=None):
    family = insn.family
    count = len(insn.operands)
    everything = range(count)
    if family == OpFamily.MOVE:
        return DefUse(insn.offset, _with_wide(insn, [0]), _with_wide(insn, [1]))
    if family == OpFamily.MOVE_RESULT:
        source = None
        if previous is not None and (
            previous.is_invoke or previous.opcode.startswith("filled-new-array")
        ):
            source = previous.offset
        return DefUse(insn.offset, _with_wide(insn, [0]), frozenset(), True, source)
    if family in (OpFamily.CONST, OpFamily.NEW_INSTANCE, OpFamily.SGET):
        return DefUse(insn.offset, _with_wide(insn, [0]), frozenset())
    if family == OpFamily.FILL_ARRAY_DATA:
        return DefUse(insn.offset, _with_wide(insn, [0]), frozenset())
    if family in (OpFamily.NEW_ARRAY, OpFamily.IGET, OpFamily.AGET, OpFamily.COMPARE):
        return DefUse(
            insn.offset, _with_wide(insn, [0]), _with_wide(insn, range(1, count))
        )
    if family == OpFamily.APUT:
        return DefUse(
            insn.offset, _with_wide(insn, [1]), _with_wide(insn, [0, 2]), strong=False
        )
    if family == OpFamily.ARITH:
        uses = range(1, count)
        if insn.opcode.endswith("/2addr"):
            uses = range(count)
        return DefUse(insn.offset, _with_wide(insn, [0]), _with_wide(insn, uses))
    return DefUse(insn.offset, frozenset(), _with_wide(insn, everything))


@dataclass(frozen=True)
class SmaliMethod:
    signature: MethodSignature
    access_flags: FrozenSet[str]
    registers_declared: int
    instructions: Tuple[Instruction, ...]
    labels: Dict[str, int] = field(default_factory=dict)
    array_payloads: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def __hash__(self):
        return hash(self.signature)

    @property
    def is_static(self):
        return "static" in self.access_flags

    @property
    def is_abstract(self):
        return "abstract" in self.access_flags or "native" in self.access_flags

    @property
    def param_register_count(self):
        return self.signature.param_register_count(self.is_static)

    def payload(self, insn):
        """Constant elements of a fill-array-data instruction."""
        if insn.literal is None:
            return None
        return self.array_payloads.get(insn.literal)

    def successors(self):
        """Control-flow successors per instruction; exception edges are ignored."""
        result = []
        count = len(self.instructions)
        for i, insn in enumerate(self.instructions):
            family = insn.family
            fallthrough = [i + 1] if i + 1 < count else []
            target = self.labels.get(insn.literal) if insn.literal else None
            if family == OpFamily.RETURN or insn.opcode == "throw":
                result.append(())
            elif family == OpFamily.GOTO:
                result.append((target,) if target is not None and target < count else ())
            elif family == OpFamily.IF:
                targets = list(fallthrough)
                if target is not None and target < count and target not in targets:
                    targets.append(target)
                result.append(tuple(targets))
            else:
                result.append(tuple(fallthrough))
        return tuple(result)

    def predecessors(self):
        preds = [[] for _ in self.instructions]
        for i, targets in enumerate(self.successors()):
            for target in targets:
                preds[target].append(i)
        return tuple(tuple(sorted(p)) for p in preds)


def def_use(method):
    """Registers defined and used by every instruction of a method."""
    table = []
    previous = None
    for insn in method.instructions:
        table.append(instruction_def_use(insn, previous))
        previous = insn
    return tuple(table)


@dataclass(frozen=True)
class SmaliClass:
    descriptor: str
    super_descriptor: Optional[str]
    interfaces: Tuple[str, ...]
    methods: Tuple[SmaliMethod, ...]
    fields: Tuple[FieldId, ...]
    access_flags: FrozenSet[str] = frozenset()
    source: str = ""
    skipped: Tuple[Tuple[str, int], ...] = ()

    @property
    def is_interface(self):
        return "interface" in self.access_flags


_SKIPPED_BLOCKS = {
    ".annotation": ".end annotation",
    ".subannotation": ".end subannotation",
    ".packed-switch": ".end packed-switch",
    ".sparse-switch": ".end sparse-switch",
}


_COUNT_RE = re.compile(r"^\.(?:registers|locals)\s+(\d+)$")


def _register_count(line):
    match = _COUNT_RE.match(line)
    return int(match.group(1)) if match else None


class _MethodBuilder:
    def __init__(self, signature, flags, line):
        self.signature = signature
        self.flags = frozenset(flags)
        self.line = line
        self.registers = None
        self.locals = None
        self.instructions = []
        self.labels = {}
        self.payloads = {}

    @property
    def static(self):
        return "static" in self.flags

    def rename(self, register):
        # `.registers N` puts parameters in the top registers
        if self.registers is None or register.kind != RegisterKind.LOCAL:
            return register
        first_param = self.registers - self.signature.param_register_count(self.static)
        if register.index >= first_param:
            return Register(RegisterKind.PARAM, register.index - first_param)
        return register

    def build(self):
        params = self.signature.param_register_count(self.static)
        if self.registers is not None:
            declared = self.registers
        elif self.locals is not None:
            declared = self.locals + params
        else:
            declared = params
        if params > declared:
            raise SmaliSyntaxError(
                self.line, "%d parameter registers exceed %d declared" % (params, declared)
            )
        return SmaliMethod(
            self.signature,
            self.flags,
            declared,
            tuple(self.instructions),
            dict(self.labels),
            dict(self.payloads),
        )


def parse_smali(text, source="<string>", errors=None):
    """Parse the text of one .smali file into a SmaliClass.

    Line-level problems are appended to `errors` as ParseError records and
    the offending line is kept as an opaque instruction where possible.
    """
    if errors is None:
        errors = []
    descriptor = None
    super_descriptor = None
    class_flags = frozenset()
    interfaces = []
    fields = []
    methods = []
    skipped = Counter()
    method = None
    block_end = None
    payload = None
    last_label = None

    for number, raw in enumerate(text.splitlines(), start=1):
        line = strip_comment(raw).strip()
        if not line:
            continue
        if block_end is not None:
            if line == block_end:
                block_end = None
            continue
        if payload is not None:
            label, values = payload
            if line == ".end array-data":
                method.payloads[label] = tuple(values)
                payload = None
            else:
                value = parse_int_literal(line)
                if value is None:
                    errors.append(ParseError(source, number, "bad array element %r" % line))
                else:
                    values.append(value)
            continue

        directive = line.split()[0]
        if directive in _SKIPPED_BLOCKS:
            skipped[directive] += 1
            block_end = _SKIPPED_BLOCKS[directive]
            continue

        if method is None:
            if directive == ".class":
                parts = line.split()
                descriptor = parts[-1]
                class_flags = frozenset(parts[1:-1])
            elif directive == ".super":
                super_descriptor = line.split()[-1]
            elif directive == ".implements":
                interfaces.append(line.split()[-1])
            elif directive == ".field":
                if descriptor is None:
                    raise SmaliSyntaxError(number, ".field before .class")
                declaration = line.split(" = ")[0].split()
                name, _, type_descriptor = declaration[-1].partition(":")
                fields.append(FieldId(descriptor, name, type_descriptor))
            elif directive == ".method":
                if descriptor is None:
                    raise SmaliSyntaxError(number, ".method before .class")
                parts = line.split()
                try:
                    signature = MethodSignature.parse(descriptor + "->" + parts[-1])
                except ValueError as e:
                    raise SmaliSyntaxError(number, str(e))
                method = _MethodBuilder(signature, parts[1:-1], number)
            elif directive in (".source", ".end"):
                pass
            else:
                skipped[directive] += 1
            continue

        if directive == ".end" and line == ".end method":
            methods.append(method.build())
            method = None
        elif directive in (".registers", ".locals"):
            count = _register_count(line)
            if count is None:
                raise SmaliSyntaxError(number, "bad register count: %s" % line)
            setattr(method, directive[1:], count)
        elif directive == ".array-data":
            payload = (last_label, [])
        elif directive.startswith("."):
            # .line .prologue .local .param .catch and friends
            skipped[directive] += 1
        elif line.startswith(":"):
            method.labels[line] = len(method.instructions)
            last_label = line
        else:
            last_label = None
            offset = len(method.instructions)
            try:
                insn = parse_instruction(line, offset)
            except SmaliSyntaxError as e:
                errors.append(ParseError(source, number, e.reason))
                mnemonic, _, tail = line.partition(" ")
                insn = Instruction(mnemonic + "?", (), tail.strip() or None, offset=offset)
            if any(r.kind == RegisterKind.LOCAL for r in insn.operands):
                insn = Instruction(
                    insn.opcode,
                    tuple(method.rename(r) for r in insn.operands),
                    insn.literal,
                    insn.method_ref,
                    insn.field_ref,
                    offset,
                )
            method.instructions.append(insn)

    if method is not None:
        raise SmaliSyntaxError(method.line, "unterminated method")
    if descriptor is None:
        raise SmaliSyntaxError(1, "no .class directive")
    return SmaliClass(
        descriptor,
        super_descriptor,
        tuple(interfaces),
        tuple(methods),
        tuple(fields),
        class_flags,
        source,
        tuple(sorted(skipped.items())),
    )


def _method_key(method):
    return method.signature.sort_key


@dataclass(frozen=True)
class SmaliProgram:
    classes: Dict[str, SmaliClass]
    methods: Dict[MethodSignature, SmaliMethod]
    callers_index: Dict[MethodSignature, Tuple[Tuple[SmaliMethod, int], ...]]
    field_writes_index: Dict[FieldId, Tuple[Tuple[SmaliMethod, int], ...]]
    field_reads_index: Dict[FieldId, Tuple[Tuple[SmaliMethod, int], ...]]
    interface_impl_index: Dict[str, Tuple[str, ...]]
    subclass_index: Dict[str, Tuple[str, ...]]
    parse_errors: Tuple[ParseError, ...] = ()

    def iter_methods(self):
        for descriptor in sorted(self.classes):
            for method in sorted(self.classes[descriptor].methods, key=_method_key):
                yield method

    def ancestors(self, descriptor):
        """Superclasses of a class that are defined in the program."""
        seen = []
        current = self.classes.get(descriptor)
        while current is not None and current.super_descriptor not in seen:
            if current.super_descriptor is None:
                break
            seen.append(current.super_descriptor)
            current = self.classes.get(current.super_descriptor)
        return seen

    def extends(self, descriptor, ancestor):
        return ancestor == descriptor or ancestor in self.ancestors(descriptor)

    def resolve(self, signature):
        """The concrete-or-abstract method a reference dispatches to, if internal."""
        method = self.methods.get(signature)
        if method is not None:
            return method
        for ancestor in self.ancestors(signature.class_descriptor):
            method = self.methods.get(signature.with_class(ancestor))
            if method is not None:
                return method
        return None

    def implementations(self, signature):
        """Concrete overrides of an interface or abstract method in the program."""
        owners = list(self.interface_impl_index.get(signature.class_descriptor, ()))
        owners += list(self.subclass_index.get(signature.class_descriptor, ()))
        found = []
        for owner in sorted(set(owners)):
            method = self.methods.get(signature.with_class(owner))
            if method is not None and not method.is_abstract and method not in found:
                found.append(method)
        return found

    def callers(self, method):
        return self.callers_index.get(method.signature, ())


def build_program(classes, parse_errors=()):
    """Index a set of parsed classes. Indexes are complete by construction."""
    by_descriptor = {}
    errors = list(parse_errors)
    for cls in sorted(classes, key=lambda c: (c.descriptor, c.source)):
        if cls.descriptor in by_descriptor:
            errors.append(
                ParseError(cls.source, 1, "duplicate class %s" % cls.descriptor)
            )
            continue
        by_descriptor[cls.descriptor] = cls

    methods = {}
    callers = defaultdict(list)
    writes = defaultdict(list)
    reads = defaultdict(list)
    for descriptor in sorted(by_descriptor):
        for method in sorted(by_descriptor[descriptor].methods, key=_method_key):
            methods[method.signature] = method
            for insn in method.instructions:
                family = insn.family
                if family == OpFamily.INVOKE:
                    callers[insn.method_ref].append((method, insn.offset))
                elif family in (OpFamily.IPUT, OpFamily.SPUT):
                    writes[insn.field_ref].append((method, insn.offset))
                elif family in (OpFamily.IGET, OpFamily.SGET):
                    reads[insn.field_ref].append((method, insn.offset))

    subclasses = defaultdict(set)
    for descriptor, cls in by_descriptor.items():
        current = cls
        seen = set()
        while current is not None and current.super_descriptor and current.super_descriptor not in seen:
            seen.add(current.super_descriptor)
            subclasses[current.super_descriptor].add(descriptor)
            current = by_descriptor.get(current.super_descriptor)

    implementors = defaultdict(set)
    for descriptor, cls in by_descriptor.items():
        pending = list(cls.interfaces)
        chain = [descriptor]
        current = cls
        while current is not None and current.super_descriptor in by_descriptor:
            current = by_descriptor[current.super_descriptor]
            if current.descriptor in chain:
                break
            chain.append(current.descriptor)
            pending.extend(current.interfaces)
        seen = set()
        while pending:
            interface = pending.pop()
            if interface in seen:
                continue
            seen.add(interface)
            implementors[interface].add(descriptor)
            parent = by_descriptor.get(interface)
            if parent is not None:
                pending.extend(parent.interfaces)

    return SmaliProgram(
        by_descriptor,
        methods,
        {k: tuple(v) for k, v in callers.items()},
        {k: tuple(v) for k, v in writes.items()},
        {k: tuple(v) for k, v in reads.items()},
        {k: tuple(sorted(v)) for k, v in implementors.items()},
        {k: tuple(sorted(v)) for k, v in subclasses.items()},
        tuple(errors),
    )


def _iter_sources(root):
    """Yield (name, text) for every .smali file under a directory or zip."""
    if zipfile.is_zipfile(root):
        with zipfile.ZipFile(root) as archive:
            for name in sorted(archive.namelist()):
                if name.endswith(".smali"):
                    yield name, archive.read(name)
        return
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for filename in sorted(filenames):
            if filename.endswith(".smali"):
                path = os.path.join(dirpath, filename)
                with open(path, "rb") as f:
                    yield os.path.relpath(path, root), f.read()


def parse_program(root):
    """Parse every .smali file under `root` into one SmaliProgram.

    Malformed files are recorded in `parse_errors` and skipped.
    """
    if not os.path.exists(root):
        raise EmptyInput("No such smali tree: %s" % root)
    classes = []
    errors = []
    found = 0
    for name, data in _iter_sources(root):
        found += 1
        try:
            text = data.decode("utf-8")
            classes.append(parse_smali(text, name, errors))
        except UnicodeDecodeError as e:
            errors.append(ParseError(name, 0, "not UTF-8: %s" % e))
        except SmaliSyntaxError as e:
            errors.append(ParseError(name, e.line or 0, e.reason))
        except (ValueError, IndexError) as e:
            errors.append(ParseError(name, 0, "unparseable: %s" % e))
    if not found:
        raise EmptyInput("No .smali files found in %s" % root)
    for error in errors:
        log.warning("%s:%s: %s", error.file, error.line, error.reason)
    return build_program(classes, errors)


def find_invocations(program, matcher):
    """Every call site whose method reference satisfies `matcher`."""
    sites = []
    for method in program.iter_methods():
        for insn in method.instructions:
            if insn.is_invoke and matcher.matches(insn.method_ref):
                sites.append((method, insn.offset))
    return sites
