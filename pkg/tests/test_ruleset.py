from unittest import TestCase

from gatt_tracer.common import DEFAULT_RULES_PATH, Direction
from gatt_tracer.ruleset import (
    MethodMatcher,
    SchemaError,
    default_ruleset,
    has_bluetooth_permission,
    is_eligible,
    load_ruleset,
    load_ruleset_file,
)
from gatt_tracer.smali import MethodSignature
from gatt_tracer.taint import CryptoTracer
from data_provider import (
    CH,
    connect_gatt,
    fixture,
    program_from,
    writer_class,
)


class MatcherTests(TestCase):
    def test_exact_overload(self):
        rules = default_ruleset()
        self.assertIsNotNone(rules.write_sink(MethodSignature.parse(CH + "->setValue([B)Z")))
        self.assertIsNotNone(
            rules.write_sink(MethodSignature.parse(CH + "->setValue(Ljava/lang/String;)Z"))
        )
        self.assertIsNone(rules.write_sink(MethodSignature.parse(CH + "->setValue(J)Z")))
        self.assertIsNone(rules.read_source(MethodSignature.parse(CH + "->getUuid()Ljava/util/UUID;")))

    def test_four_int_overload_carries_two_data_params(self):
        matcher = default_ruleset().write_sink(
            MethodSignature.parse(CH + "->setValue(IIII)Z")
        )
        self.assertEqual((0, 1), matcher.data_params)

    def test_any_overload_and_prefix(self):
        matcher = MethodMatcher("Lcom/vendor/", "send")
        self.assertTrue(matcher.matches(MethodSignature.parse("Lcom/vendor/a/B;->send(I)V")))
        self.assertTrue(matcher.matches(MethodSignature.parse("Lcom/vendor/C;->send()Z")))
        self.assertFalse(matcher.matches(MethodSignature.parse("Lcom/other/C;->send()Z")))

    def test_crypto_prefixes(self):
        rules = default_ruleset()
        for ref in [
            "Ljavax/crypto/Cipher;->doFinal([B)[B",
            "Ljavax/crypto/spec/SecretKeySpec;-><init>([BLjava/lang/String;)V",
            "Ljava/security/MessageDigest;->digest([B)[B",
            "Ljava/security/SecureRandom;->nextBytes([B)V",
        ]:
            self.assertTrue(rules.is_crypto(MethodSignature.parse(ref)), ref)
        self.assertFalse(
            rules.is_crypto(MethodSignature.parse("Ljava/util/Base64;->getEncoder()Ljava/util/Base64$Encoder;"))
        )

    def test_render(self):
        with open(fixture("ruleset", "default_render.txt"), encoding="utf-8") as f:
            self.assertEqual(f.read(), default_ruleset().render())


class LoaderTests(TestCase):
    def test_default_file_spells_out_the_defaults(self):
        self.assertEqual(default_ruleset(), load_ruleset_file(DEFAULT_RULES_PATH))

    def test_empty_document(self):
        self.assertEqual(default_ruleset(), load_ruleset(None))

    def test_vendor_stacks(self):
        rules = load_ruleset_file(fixture("ruleset", "vendor.yml"))
        self.assertEqual(12, len(rules.read_sources))
        self.assertEqual(12, len(rules.write_sinks))
        ref = MethodSignature.parse(
            "Lcom/samsung/android/sdk/bt/gatt/BluetoothGattCharacteristic;->setValue([B)Z"
        )
        self.assertIsNotNone(rules.write_sink(ref))
        self.assertIsNone(default_ruleset().write_sink(ref))

    def test_add_source_and_exclusion(self):
        rules = load_ruleset_file(fixture("ruleset", "extra_source.yml"))
        self.assertEqual(5, len(rules.read_sources))
        self.assertIsNotNone(
            rules.read_source(MethodSignature.parse("Lcom/vendor/ble/Characteristic;->getValue()[B"))
        )
        self.assertTrue(rules.is_excluded("Lno/nordicsemi/android/dfu/DfuBaseService;"))
        self.assertFalse(rules.is_excluded("Lcom/example/Main;"))
        self.assertEqual(4, len(default_ruleset().read_sources))

    def test_remove(self):
        rules = load_ruleset(
            {
                "write_sinks": {
                    "remove": [
                        {
                            "class": CH,
                            "name": "setValue",
                            "params": ["Ljava/lang/String;"],
                            "return": "Z",
                        }
                    ]
                }
            }
        )
        self.assertEqual(3, len(rules.write_sinks))

    def test_remove_missing_entry(self):
        with self.assertRaises(SchemaError) as e:
            load_ruleset({"write_sinks": {"remove": [{"class": CH, "name": "nope"}]}})
        assert "write_sinks.remove[0]" in str(e.exception)

    def test_typo_suggests_section(self):
        with self.assertRaises(SchemaError) as e:
            load_ruleset_file(fixture("ruleset", "typo.yml"))
        assert "did you mean 'write_sinks'" in str(e.exception)

    def test_typo_in_entry_key(self):
        with self.assertRaises(SchemaError) as e:
            load_ruleset({"read_sources": {"add": [{"class": CH, "nmae": "getValue"}]}})
        assert "did you mean 'name'" in str(e.exception)

    def test_no_sinks(self):
        with self.assertRaises(SchemaError) as e:
            load_ruleset_file(fixture("ruleset", "no_sinks.yml"))
        assert "at least one sink" in str(e.exception)

    def test_broken_yaml(self):
        with self.assertRaises(SchemaError) as e:
            load_ruleset_file(fixture("ruleset", "broken.yml"))
        assert "not valid YAML" in str(e.exception)

    def test_bad_values(self):
        for document in [
            ["write_sinks"],
            {"vendor": {"enabled": "yes"}},
            {"write_sinks": {"add": [{"class": CH}]}},
            {"write_sinks": {"add": [{"class": CH, "name": "setValue", "data": [-1]}]}},
            {"write_sinks": {"add": [{"class": CH, "name": "setValue", "params": "[B"}]}},
            {"crypto_prefixes": ["javax.crypto"]},
            {"crypto_prefixes": []},
        ]:
            with self.assertRaises(SchemaError, msg=repr(document)):
                load_ruleset(document)

    def test_sink_cannot_be_a_source(self):
        entry = {"class": CH, "name": "setValue", "params": ["[B"], "return": "Z"}
        with self.assertRaises(SchemaError) as e:
            load_ruleset({"read_sources": {"add": [entry]}})
        assert "also a write sink" in str(e.exception)


class EligibilityTests(TestCase):
    def setUp(self):
        self.rules = default_ruleset()
        self.program = program_from(
            connect_gatt(),
            writer_class(
                "Lcom/example/app/Sender;",
                ["invoke-virtual {p1, p2}, %s->setValue([B)Z" % CH, "return-void"],
            ),
        )

    def test_connect_gatt_without_permissions(self):
        result = is_eligible(self.program, self.rules)
        self.assertTrue(result.eligible)
        self.assertFalse(result.permission_checked)

    def test_permission_present(self):
        result = is_eligible(
            self.program, self.rules, ["android.permission.INTERNET", "android.permission.BLUETOOTH"]
        )
        self.assertTrue(result.eligible)
        self.assertTrue(result.permission_checked)

    def test_permission_absent(self):
        result = is_eligible(self.program, self.rules, ["android.permission.INTERNET"])
        self.assertFalse(result.eligible)
        self.assertEqual("permission absent", result.reason)

    def test_no_connect_gatt(self):
        program = program_from(
            writer_class(
                "Lcom/example/app/Sender;",
                ["invoke-virtual {p1, p2}, %s->setValue([B)Z" % CH, "return-void"],
            )
        )
        result = is_eligible(program, self.rules, ["android.permission.BLUETOOTH"])
        self.assertFalse(result.eligible)
        self.assertEqual("no connectGatt", result.reason)

    def test_permission_names(self):
        self.assertTrue(has_bluetooth_permission(["BLUETOOTH_CONNECT"]))
        self.assertFalse(has_bluetooth_permission(["android.permission.BLUETOOTH_ADMIN"]))

    def test_excluded_callers_give_no_seeds(self):
        program = program_from(
            writer_class(
                "Lno/nordicsemi/android/dfu/Uploader;",
                ["invoke-virtual {p1, p2}, %s->setValue([B)Z" % CH, "return-void"],
            ),
            writer_class(
                "Lcom/example/app/Sender;",
                ["invoke-virtual {p1, p2}, %s->setValue([B)Z" % CH, "return-void"],
            ),
        )
        rules = load_ruleset_file(fixture("ruleset", "extra_source.yml"))
        seeds = CryptoTracer(program, rules).seeds(Direction.WRITES)
        self.assertEqual(
            ["Lcom/example/app/Sender;"],
            [s.method.signature.class_descriptor for s in seeds],
        )
        self.assertEqual(2, len(CryptoTracer(program, default_ruleset()).seeds(Direction.WRITES)))
