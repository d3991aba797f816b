"""
Crypto misuse checks run over the methods of a positive witness
(and the internal methods they call directly).
"""
import enum
import logging
import re
from dataclasses import dataclass

from gatt_tracer.ruleset import default_ruleset
from gatt_tracer.smali import MethodSignature, OpFamily
from gatt_tracer.taint import (
    BudgetExhausted,
    CryptoTracer,
    EventKind,
    TracePass,
    work_item,
)


log = logging.getLogger(__name__)

CIPHER = "Ljavax/crypto/Cipher;"
FINALIZERS = ("doFinal", "update", "updateAAD", "wrap", "unwrap")
_ECB_RE = re.compile(r"/ECB(/|$)", re.IGNORECASE)

# constructor class -> (kind of material, operand holding the bytes)
MATERIAL_CONSTRUCTORS = {
    "Ljavax/crypto/spec/SecretKeySpec;": ("key", 1),
    "Ljavax/crypto/spec/IvParameterSpec;": ("iv", 1),
    "Ljavax/crypto/spec/GCMParameterSpec;": ("iv", 2),
}

# calls whose result is the same bytes in another shape
TRANSPARENT = (
    ("Ljava/lang/String;", "getBytes"),
    ("Ljava/lang/String;", "toCharArray"),
    ("Ljava/util/Arrays;", "copyOf"),
    ("Ljava/util/Arrays;", "copyOfRange"),
    ("Landroid/util/Base64;", "decode"),
    ("Ljava/util/Base64$Decoder;", "decode"),
)

RANDOMNESS = (
    ("Ljava/security/SecureRandom;", "nextBytes"),
    ("Ljava/security/SecureRandom;", "generateSeed"),
    ("Ljavax/crypto/KeyGenerator;", "generateKey"),
    ("Ljava/security/KeyPairGenerator;", "generateKeyPair"),
)


class MisuseKind(enum.Enum):
    BAD_CIPHER_MODE = "BadCipherMode"
    DEFAULT_MODE_AES = "DefaultModeAES"
    HARDCODED_KEY_BYTES = "HardcodedKeyBytes"
    HARDCODED_IV_BYTES = "HardcodedIVBytes"
    NON_RANDOM_KEY = "NonRandomKey"
    NON_RANDOM_IV = "NonRandomIV"
    DEAD_CRYPTO_CODE = "DeadCryptoCode"


_MATERIAL_KINDS = {
    "key": (MisuseKind.HARDCODED_KEY_BYTES, MisuseKind.NON_RANDOM_KEY),
    "iv": (MisuseKind.HARDCODED_IV_BYTES, MisuseKind.NON_RANDOM_IV),
}


@dataclass(frozen=True)
class MisuseFinding:
    kind: MisuseKind
    method: MethodSignature
    offset: int
    detail: str = ""

    @property
    def site(self):
        return (self.method, self.offset)

    def to_record(self):
        return {
            "kind": self.kind.value,
            "method": str(self.method),
            "offset": self.offset,
            "detail": self.detail,
        }


def _matches(signature, pairs):
    return any(
        signature.class_descriptor == cls and signature.name == name
        for cls, name in pairs
    )


class CryptoLinter:
    def __init__(self, program, rules=None, budget=None):
        self.program = program
        self.rules = rules or default_ruleset()
        self.tracer = CryptoTracer(program, self.rules, budget)
        self.unresolved_transformations = 0
        self.budget_exhausted = False

    def scope(self, witness_methods):
        """Witness methods plus the internal methods they call directly."""
        found = {}
        for sig in witness_methods:
            method = self.program.methods.get(sig)
            if method is None:
                continue
            found[sig] = method
            for insn in method.instructions:
                if insn.is_invoke:
                    callee = self.program.resolve(insn.method_ref)
                    if callee is not None and not callee.is_abstract:
                        found[callee.signature] = callee
        return [found[sig] for sig in sorted(found, key=lambda s: s.sort_key)]

    def _origins(self, method, register, offset, follow=None):
        start = work_item(method, register, offset)
        return list(self.tracer.walk_back([start], TracePass.DIRECT, follow))

    def transformations(self, method, insn):
        """Constant transformation strings reaching a Cipher.getInstance call."""
        values = set()
        for event in self._origins(method, insn.operands[0], insn.offset):
            if event.kind == EventKind.CONSTANT:
                value = event.instruction.string_value
                if value is not None:
                    values.add(value)
        return sorted(values)

    def check_transformation(self, method, insn):
        values = self.transformations(method, insn)
        if not values:
            self.unresolved_transformations += 1
            log.debug("Unresolved transformation at %s:%d", method.signature, insn.offset)
        for value in values:
            if _ECB_RE.search(value):
                yield MisuseFinding(
                    MisuseKind.BAD_CIPHER_MODE, method.signature, insn.offset, value
                )
            elif "/" not in value and value.strip().upper() == "AES":
                yield MisuseFinding(
                    MisuseKind.DEFAULT_MODE_AES, method.signature, insn.offset, value
                )

    def check_material(self, method, insn):
        material, position = MATERIAL_CONSTRUCTORS[insn.method_ref.class_descriptor]
        if position >= len(insn.operands):
            return
        hardcoded = constant = random = False
        for event in self._origins(
            method,
            insn.operands[position],
            insn.offset,
            lambda ref: _matches(ref, TRANSPARENT),
        ):
            if event.kind == EventKind.CONSTANT:
                constant = True
                source = event.instruction
                if source.opcode.startswith("const-string") or (
                    source.family == OpFamily.FILL_ARRAY_DATA
                ):
                    hardcoded = True
            elif event.kind == EventKind.NEW_ARRAY:
                constant = True
            elif event.kind in (EventKind.ARGUMENT_USE, EventKind.INVOKE, EventKind.CRYPTO):
                source = event.instruction
                if source.is_invoke and _matches(source.method_ref, RANDOMNESS):
                    random = True
                elif event.kind == EventKind.CRYPTO:
                    random = True
        hardcoded_kind, non_random_kind = _MATERIAL_KINDS[material]
        detail = insn.method_ref.class_descriptor
        if hardcoded:
            yield MisuseFinding(hardcoded_kind, method.signature, insn.offset, detail)
        if constant and not random:
            yield MisuseFinding(non_random_kind, method.signature, insn.offset, detail)

    def is_dead(self, method, insn):
        """A Cipher obtained here never reaches doFinal/update/wrap/unwrap."""
        following = insn.offset + 1
        if following >= len(method.instructions):
            return True
        result = method.instructions[following]
        if result.family != OpFamily.MOVE_RESULT:
            return True
        register = result.operands[0]
        start = work_item(method, register, following + 1)
        for event in self.tracer.walk_forward([start], TracePass.DIRECT):
            if event.kind not in (EventKind.CRYPTO, EventKind.ARGUMENT_USE):
                continue
            call = event.instruction
            if (
                call.method_ref.class_descriptor == CIPHER
                and call.method_ref.name in FINALIZERS
                and call.operands[:1] == (event.register,)
            ):
                return False
        return True

    def lint(self, witness_methods):
        """Sorted findings; when the budget runs out, those found so far."""
        self.tracer.start_clock()
        witness_methods = set(witness_methods)
        findings = set()
        try:
            self._lint_scope(witness_methods, findings)
        except BudgetExhausted as e:
            log.warning("Lint stopped early: %s", e)
            self.budget_exhausted = True
        return sorted(
            findings, key=lambda f: (f.method.sort_key, f.offset, f.kind.value)
        )

    def _lint_scope(self, witness_methods, findings):
        for method in self.scope(witness_methods):
            for insn in method.instructions:
                if not insn.is_invoke:
                    continue
                ref = insn.method_ref
                if ref.class_descriptor == CIPHER and ref.name == "getInstance":
                    if insn.operands:
                        findings.update(self.check_transformation(method, insn))
                    if method.signature in witness_methods and self.is_dead(method, insn):
                        findings.add(
                            MisuseFinding(
                                MisuseKind.DEAD_CRYPTO_CODE, method.signature, insn.offset
                            )
                        )
                elif ref.name == "<init>" and ref.class_descriptor in MATERIAL_CONSTRUCTORS:
                    findings.update(self.check_material(method, insn))


def lint_crypto(program, witness_methods, rules=None, budget=None):
    """Misuse findings for the methods of one witness."""
    return CryptoLinter(program, rules, budget).lint(witness_methods)
