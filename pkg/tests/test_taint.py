import functools
import random
from unittest import TestCase

from gatt_tracer.common import Confidence, Direction, TracerException
from gatt_tracer.ruleset import default_ruleset
from gatt_tracer.smali import MethodSignature, p, parse_program, v
from gatt_tracer.taint import (
    BudgetExhausted,
    CryptoTracer,
    Origin,
    TaintVerdict,
    TraceBudget,
    TracePass,
    analyze_app,
    backtrace,
    constant_string,
    cross_component_hop,
    forward_trace,
    lenient_scan,
)
from data_provider import (
    CH,
    GET_VALUE,
    LOCALS,
    SET_VALUE,
    corpus_case,
    fixture,
    frame,
    method,
    program_from,
    random_ops,
    reader_class,
    smali_class,
    straight_line_reader,
    straight_line_writer,
    writer_class,
)


INTENT = "Landroid/content/Intent;"
GET_EXTRA = INTENT + "->getByteArrayExtra(Ljava/lang/String;)[B"
PUT_EXTRA = INTENT + "->putExtra(Ljava/lang/String;[B)Landroid/content/Intent;"


def analyze(case_id, direction, budget=None):
    return analyze_app(parse_program(corpus_case(case_id)), default_ruleset(), direction, budget)


def origins(verdict):
    return [f.origin for f in verdict.witness]


def write_oracle(ops, seed_register):
    """Does the value written come from a crypto call, by plain def-use chains?"""

    @functools.lru_cache(maxsize=None)
    def produced_by_crypto(register, end):
        for i in range(end - 1, -1, -1):
            op = ops[i]
            kind = op[0]
            if kind == "log" or op[1] != register:
                continue
            if kind == "crypto":
                return True
            if kind in ("const", "new-array", "call"):
                return False
            if kind in ("move", "aget"):
                return produced_by_crypto(op[2], i)
            return produced_by_crypto(op[2], i) or produced_by_crypto(op[3], i)
        return False

    return produced_by_crypto(seed_register, len(ops))


def read_oracle(ops, seed_register):
    """Does any register derived from the value read reach a crypto call?"""
    tainted = {seed_register}

    def assign(register, value):
        if value:
            tainted.add(register)
        else:
            tainted.discard(register)

    for op in ops:
        kind = op[0]
        if kind in ("const", "new-array"):
            tainted.discard(op[1])
        elif kind in ("move", "aget", "call"):
            assign(op[1], op[2] in tainted)
        elif kind == "arith":
            assign(op[1], op[2] in tainted or op[3] in tainted)
        elif kind == "crypto":
            if op[2] in tainted:
                return True
            tainted.discard(op[1])
    return False


class SeedTests(TestCase):
    def test_write_seed_is_data_argument(self):
        program = parse_program(corpus_case("direct_write_crypto"))
        (seed,) = CryptoTracer(program, default_ruleset()).seeds(Direction.WRITES)
        self.assertEqual("send", seed.method.signature.name)
        self.assertEqual(v(1), seed.register)
        self.assertEqual(SET_VALUE, str(seed.method.instructions[seed.offset].method_ref))

    def test_four_int_write_gives_two_seeds(self):
        program = program_from(
            writer_class(
                "Lcom/example/app/Sender;",
                [
                    "const/4 v0, 0x1",
                    "const/4 v1, 0x2",
                    "invoke-virtual {p1, v0, v1, v2, v3}, %s->setValue(IIII)Z" % CH,
                    "return-void",
                ],
            )
        )
        seeds = CryptoTracer(program, default_ruleset()).seeds(Direction.WRITES)
        self.assertEqual([v(0), v(1)], [s.register for s in seeds])

    def test_read_seeds_in_method_order(self):
        program = parse_program(corpus_case("reads_two_sources"))
        seeds = CryptoTracer(program, default_ruleset()).seeds(Direction.READS)
        self.assertEqual(
            ["onCharacteristicChanged", "onCharacteristicRead"],
            [s.method.signature.name for s in seeds],
        )
        self.assertEqual([v(0), v(0)], [s.register for s in seeds])

    def test_read_without_move_result_is_no_seed(self):
        program = program_from(
            reader_class("Lcom/example/app/Callback;", ["return-void"]),
            smali_class(
                "Lcom/example/app/Poller;",
                [method("poll(%s)V" % CH, ["invoke-virtual {p1}, " + GET_VALUE, "return-void"], 0)],
            ),
        )
        seeds = CryptoTracer(program, default_ruleset()).seeds(Direction.READS)
        self.assertEqual(1, len(seeds))


class ListingTests(TestCase):
    def test_write_through_private_helper(self):
        program = parse_program(fixture("smali", "write_listing"))
        self.assertEqual((), program.parse_errors)
        (seed,) = CryptoTracer(program, default_ruleset()).seeds(Direction.WRITES)
        confidence, witness = backtrace(seed, program, default_ruleset())
        self.assertEqual(Confidence.HIGH, found[0])
        self.assertEqual([Origin.SEED_SITE, Origin.CALLER_ARGUMENT], [f.origin for f in witness])
        self.assertEqual(["a", "b"], [f.method.name for f in witness])
        self.assertEqual(frozenset([p(2)]), witness[0].tracked)
        self.assertEqual(frozenset([v(1)]), witness[1].tracked)

    def test_read_through_string_building(self):
        program = parse_program(fixture("smali", "read_listing"))
        (seed,) = CryptoTracer(program, default_ruleset()).seeds(Direction.READS)
        confidence, witness = forward_trace(seed, program, default_ruleset())
        self.assertEqual(Confidence.HIGH, found[0])
        self.assertEqual(frozenset([v(0), v(2), v(3), v(4)]), witness[-1].tracked)

    def test_wrong_direction(self):
        program = parse_program(fixture("smali", "read_listing"))
        (seed,) = CryptoTracer(program, default_ruleset()).seeds(Direction.READS)
        with self.assertRaises(TracerException):
            backtrace(seed, program, default_ruleset())
        program = parse_program(fixture("smali", "write_listing"))
        (seed,) = CryptoTracer(program, default_ruleset()).seeds(Direction.WRITES)
        with self.assertRaises(TracerException):
            forward_trace(seed, program, default_ruleset())

    def test_single_pass(self):
        program = parse_program(corpus_case("iface_write"))
        (seed,) = CryptoTracer(program, default_ruleset()).seeds(Direction.WRITES)
        rules = default_ruleset()
        self.assertIsNone(backtrace(seed, program, rules, trace_pass=TracePass.DIRECT))
        confidence, _ = backtrace(seed, program, rules, trace_pass=TracePass.ASSOCIATED)
        self.assertEqual(Confidence.MEDIUM, confidence)


class WitnessTests(TestCase):
    def test_field(self):
        verdict = analyze("field_relay", Direction.WRITES)
        self.assertEqual(Confidence.HIGH, verdict.confidence)
        self.assertIn(Origin.FIELD_ASSIGNMENT, origins(verdict))

    def test_intent(self):
        verdict = analyze("intent_relay", Direction.WRITES)
        self.assertEqual(Confidence.HIGH, verdict.confidence)
        self.assertIn(Origin.INTENT_EXTRA, origins(verdict))
        self.assertEqual("push", verdict.witness[-1].method.name)

    def test_thread_handoff(self):
        for case_id, direction in [
            ("task_relay", Direction.WRITES),
            ("task_read_post", Direction.READS),
        ]:
            verdict = analyze(case_id, direction)
            self.assertEqual(Confidence.HIGH, verdict.confidence, case_id)
            self.assertIn(Origin.THREAD_HANDOFF, origins(verdict), case_id)

    def test_interface(self):
        verdict = analyze("iface_write", Direction.WRITES)
        self.assertEqual(Confidence.MEDIUM, verdict.confidence)
        self.assertIn(Origin.INTERFACE_DISPATCH, origins(verdict))

    def test_lenient(self):
        verdict = analyze("lenient_field_digest", Direction.WRITES)
        self.assertEqual(Confidence.LOW, verdict.confidence)
        self.assertEqual([Origin.LENIENT_SCAN], origins(verdict))

    def test_witness_starts_at_seed(self):
        for case_id, direction in [
            ("direct_write_helper", Direction.WRITES),
            ("direct_read_helper", Direction.READS),
            ("recursive_read", Direction.READS),
        ]:
            verdict = analyze(case_id, direction)
            self.assertTrue(verdict.crypto_found, case_id)
            self.assertEqual(Origin.SEED_SITE, verdict.witness[0].origin, case_id)
            self.assertGreater(verdict.seeds_examined, 0)

    def test_two_read_sources(self):
        verdict = analyze("reads_two_sources", Direction.READS)
        self.assertEqual(Confidence.HIGH, verdict.confidence)
        self.assertEqual(2, verdict.seeds_examined)
        self.assertEqual("onCharacteristicRead", verdict.witness[0].method.name)

    def test_repeatable(self):
        program = parse_program(corpus_case("recursive_write"))
        first = analyze_app(program, default_ruleset(), Direction.WRITES).to_record()
        for _ in range(100):
            again = analyze_app(program, default_ruleset(), Direction.WRITES)
            self.assertEqual(first, again.to_record())


class ComponentTests(TestCase):
    def intent_program(self, put_key, get_key):
        sender = smali_class(
            "Lcom/example/app/MainActivity;",
            [
                method(
                    "push([B)V",
                    [
                        "new-instance v0, " + INTENT,
                        "invoke-direct {v0}, %s-><init>()V" % INTENT,
                        'const-string v1, "%s"' % put_key,
                        "invoke-virtual {v0, v1, p1}, " + PUT_EXTRA,
                        "return-void",
                    ],
                    2,
                )
            ],
            super_="Landroid/app/Activity;",
        )
        receiver = smali_class(
            "Lcom/example/app/GattService;",
            [
                method(
                    "handle(%s%s)V" % (INTENT, CH),
                    [
                        'const-string v0, "%s"' % get_key,
                        "invoke-virtual {p1, v0}, " + GET_EXTRA,
                        "move-result-object v1",
                        "invoke-virtual {p2, v1}, " + SET_VALUE,
                        "return-void",
                    ],
                    2,
                )
            ],
            super_="Landroid/app/Service;",
        )
        program = program_from(sender, receiver)
        handle = program.methods[
            MethodSignature.parse("Lcom/example/app/GattService;->handle(%s%s)V" % (INTENT, CH))
        ]
        return program, handle

    def test_matching_keys_hop(self):
        program, handle = self.intent_program("data", "data")
        (hop,) = cross_component_hop(handle, 1, v(1), program, Direction.WRITES)
        self.assertEqual("push", hop.method.name)
        self.assertEqual(Origin.INTENT_EXTRA, hop.origin)
        self.assertEqual(frozenset([p(1)]), hop.tracked)

    def test_mismatched_keys(self):
        program, handle = self.intent_program("data", "datum")
        self.assertEqual([], cross_component_hop(handle, 1, v(1), program, Direction.WRITES))

    def test_forward_hop_to_reader(self):
        program, _ = self.intent_program("data", "data")
        push = program.methods[MethodSignature.parse("Lcom/example/app/MainActivity;->push([B)V")]
        (hop,) = cross_component_hop(push, 3, p(1), program, Direction.READS)
        self.assertEqual("handle", hop.method.name)
        self.assertEqual(frozenset([v(1)]), hop.tracked)
        self.assertEqual(3, hop.offset)

    def test_unresolved_key_is_counted(self):
        receiver = smali_class(
            "Lcom/example/app/GattService;",
            [
                method(
                    "handle(%s%sLjava/lang/String;)V" % (INTENT, CH),
                    [
                        "invoke-virtual {p1, p3}, " + GET_EXTRA,
                        "move-result-object v0",
                        "invoke-virtual {p2, v0}, " + SET_VALUE,
                        "return-void",
                    ],
                    1,
                )
            ],
        )
        verdict = analyze_app(program_from(receiver), default_ruleset(), Direction.WRITES)
        self.assertEqual(Confidence.NONE, verdict.confidence)
        self.assertEqual(1, verdict.diagnostics.unresolved_extras)

    def task_program(self, super_):
        caller = reader_class(
            "Lcom/example/app/Callback;",
            [
                "new-instance v1, Lcom/example/app/Task;",
                "invoke-direct {v1}, Lcom/example/app/Task;-><init>()V",
                "invoke-virtual {v1, v0}, Lcom/example/app/Task;->execute([Ljava/lang/Object;)"
                "Landroid/os/AsyncTask;",
                "return-void",
            ],
        )
        task = smali_class(
            "Lcom/example/app/Task;",
            [
                method(
                    "doInBackground([Ljava/lang/Object;)Ljava/lang/Object;",
                    ["return-object p1"],
                    0,
                    "protected",
                )
            ],
            super_=super_,
        )
        program = program_from(caller, task)
        (callback,) = program.classes["Lcom/example/app/Callback;"].methods
        return program, callback

    def test_async_task_dispatch(self):
        program, callback = self.task_program("Landroid/os/AsyncTask;")
        (hop,) = cross_component_hop(callback, 4, v(0), program, Direction.READS)
        self.assertEqual("doInBackground", hop.method.name)
        self.assertEqual(Origin.THREAD_HANDOFF, hop.origin)
        self.assertEqual(frozenset([p(1)]), hop.tracked)

    def test_execute_on_other_classes_is_not_dispatch(self):
        program, callback = self.task_program("Ljava/lang/Object;")
        self.assertEqual([], cross_component_hop(callback, 4, v(0), program, Direction.READS))

    def test_constant_string(self):
        text = smali_class(
            "La/B;",
            [
                method(
                    "f(Z)V",
                    [
                        "if-eqz p1, :cond_0",
                        'const-string v0, "same"',
                        "goto :goto_0",
                        ":cond_0",
                        'const-string v0, "same"',
                        ":goto_0",
                        "move-object v1, v0",
                        'const-string v2, "other"',
                        "if-eqz p1, :cond_1",
                        'const-string v2, "different"',
                        ":cond_1",
                        "return-void",
                    ],
                    3,
                )
            ],
        )
        (m,) = program_from(text).methods.values()
        self.assertEqual("same", constant_string(m, v(1), 8))
        self.assertIsNone(constant_string(m, v(2), 8))
        self.assertIsNone(constant_string(m, p(1), 8))


class BudgetTests(TestCase):
    def test_invalid_budget(self):
        for kwargs in [{"max_depth": 0}, {"max_visited": -1}, {"wall_clock_limit": 0}]:
            with self.assertRaises(TracerException):
                TraceBudget(**kwargs)

    def test_visited_limit(self):
        verdict = analyze("direct_write_helper", Direction.WRITES, TraceBudget(max_visited=1))
        self.assertTrue(verdict.budget_exhausted)
        self.assertEqual(Confidence.NONE, verdict.confidence)
        self.assertFalse(verdict.crypto_found)

    def test_visited_limit_raises_inside_trace(self):
        program = parse_program(corpus_case("direct_write_helper"))
        tracer = CryptoTracer(program, default_ruleset(), TraceBudget(max_visited=1))
        (seed,) = tracer.seeds(Direction.WRITES)
        with self.assertRaises(BudgetExhausted):
            tracer.trace(seed, TracePass.DIRECT)

    def test_depth_limit(self):
        verdict = analyze("recursive_write", Direction.WRITES, TraceBudget(max_depth=1))
        self.assertEqual(Confidence.NONE, verdict.confidence)
        self.assertFalse(verdict.budget_exhausted)
        self.assertGreater(verdict.diagnostics.depth_limited, 0)

    def test_recursion_terminates(self):
        self.assertEqual(Confidence.NONE, analyze("recursive_plain", Direction.WRITES).confidence)
        self.assertEqual(Confidence.HIGH, analyze("recursive_write", Direction.WRITES).confidence)


class DiagnosticsTests(TestCase):
    def test_looper_and_file_io_are_counted(self):
        program = program_from(
            reader_class(
                "Lcom/example/app/Callback;",
                [
                    "const/4 v1, 0x0",
                    "invoke-virtual {v1}, Landroid/os/Handler;->obtainMessage()Landroid/os/Message;",
                    "move-result-object v2",
                    "invoke-virtual {v1, v2}, Landroid/os/Handler;->sendMessage(Landroid/os/Message;)Z",
                    "invoke-virtual {v3, v0}, Ljava/io/FileOutputStream;->write([B)V",
                    "return-void",
                ],
            )
        )
        verdict = analyze_app(program, default_ruleset(), Direction.READS)
        self.assertEqual(Confidence.NONE, verdict.confidence)
        self.assertEqual(2, verdict.diagnostics.looper_msgs_seen)
        self.assertEqual(1, verdict.diagnostics.file_io_seen)

    def test_no_seeds(self):
        program = program_from(reader_class("Lcom/example/app/Callback;", ["return-void"]))
        verdict = analyze_app(program, default_ruleset(), Direction.WRITES)
        self.assertEqual(0, verdict.seeds_examined)
        self.assertEqual(Confidence.NONE, verdict.confidence)

    def test_lenient_scan_of_visited_methods(self):
        program = parse_program(corpus_case("incidental_digest"))
        tracer = CryptoTracer(program, default_ruleset())
        (seed,) = tracer.seeds(Direction.WRITES)
        self.assertIsNone(tracer.trace(seed, TracePass.DIRECT))
        (found,) = lenient_scan(set(tracer.visited_methods), program, default_ruleset())
        self.assertEqual(Origin.LENIENT_SCAN, found.origin)
        self.assertEqual(seed.method.signature, found.method)
        self.assertIsNone(lenient_scan(set(), program, default_ruleset()))

    def test_lenient_scan_counts_calls_without_operands(self):
        program = program_from(
            writer_class(
                "Lcom/example/app/Sender;",
                [
                    "invoke-static {}, Ljava/security/Security;->removeProvider()V",
                    "const/16 v0, 0x10",
                    "new-array v1, v0, [B",
                    "invoke-virtual {p1, v1}, " + SET_VALUE,
                    "return-void",
                ],
                2,
            )
        )
        verdict = analyze_app(program, default_ruleset(), Direction.WRITES)
        self.assertEqual(Confidence.LOW, verdict.confidence)
        (found,) = verdict.witness
        self.assertEqual(Origin.LENIENT_SCAN, found.origin)
        self.assertEqual((0, frozenset()), (found.offset, found.tracked))
        self.assertEqual(verdict, TaintVerdict.from_record(verdict.to_record()))


class VerdictTests(TestCase):
    def test_consistency(self):
        with self.assertRaises(TracerException):
            TaintVerdict(Direction.WRITES, True, Confidence.NONE, (frame(),))
        with self.assertRaises(TracerException):
            TaintVerdict(Direction.WRITES, False, Confidence.HIGH, (frame(),))
        with self.assertRaises(TracerException):
            TaintVerdict(Direction.WRITES, True, Confidence.HIGH)
        with self.assertRaises(TracerException):
            TaintVerdict(Direction.WRITES, False, Confidence.NONE, (frame(),))

    def test_record(self):
        verdict = analyze("intent_relay", Direction.WRITES)
        record = verdict.to_record()
        self.assertEqual("writes", record["direction"])
        self.assertEqual("High", record["confidence"])
        self.assertEqual(verdict, TaintVerdict.from_record(record))


class StraightLineTests(TestCase):
    """The direct pass agrees with plain def-use chains on branch-free code."""

    def test_writes(self):
        rng = random.Random(20190814)
        rules = default_ruleset()
        for i in range(200):
            ops = random_ops(rng, LOCALS + ["p2"], rng.randint(1, 50))
            seed_register = rng.choice(LOCALS + ["p2"])
            program = straight_line_writer(ops, seed_register)
            (seed,) = CryptoTracer(program, rules).seeds(Direction.WRITES)
            found = backtrace(seed, program, rules, trace_pass=TracePass.DIRECT)
            self.assertEqual(
                write_oracle(ops, seed_register), found is not None, (ops, seed_register)
            )

    def test_reads(self):
        rng = random.Random(20190815)
        rules = default_ruleset()
        for i in range(200):
            ops = random_ops(rng, LOCALS, rng.randint(1, 50))
            seed_register = rng.choice(LOCALS)
            program = straight_line_reader(ops, seed_register)
            (seed,) = CryptoTracer(program, rules).seeds(Direction.READS)
            found = forward_trace(seed, program, rules, trace_pass=TracePass.DIRECT)
            self.assertEqual(
                read_oracle(ops, seed_register), found is not None, (ops, seed_register)
            )

    def test_wrapping_a_register_in_crypto_keeps_a_positive(self):
        rng = random.Random(20190816)
        rules = default_ruleset()
        checked = 0
        while checked < 100:
            ops = random_ops(rng, LOCALS, rng.randint(1, 50))
            seed_register = rng.choice(LOCALS)
            if not write_oracle(ops, seed_register):
                continue
            checked += 1
            register = rng.choice(LOCALS)
            position = rng.randint(0, len(ops))
            wrapped = ops[:position] + [("crypto", register, register)] + ops[position:]
            program = straight_line_writer(wrapped, seed_register)
            (seed,) = CryptoTracer(program, rules).seeds(Direction.WRITES)
            self.assertIsNotNone(
                backtrace(seed, program, rules, trace_pass=TracePass.DIRECT), wrapped
            )

    def test_overwritten_register_stops_forward_taint(self):
        rules = default_ruleset()
        killed = straight_line_reader([("const", "v0"), ("crypto", "v1", "v0")], "v0")
        (seed,) = CryptoTracer(killed, rules).seeds(Direction.READS)
        self.assertIsNone(forward_trace(seed, killed, rules, trace_pass=TracePass.DIRECT))

        copied = straight_line_reader(
            [("move", "v2", "v0"), ("const", "v0"), ("crypto", "v1", "v2")], "v0"
        )
        (seed,) = CryptoTracer(copied, rules).seeds(Direction.READS)
        found = forward_trace(seed, copied, rules, trace_pass=TracePass.DIRECT)
        self.assertEqual(Confidence.HIGH, found[0])
