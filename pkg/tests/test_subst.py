from tests.util import *

from llft.subst import *


class TestSubst(TestCase):

    def test_parse_grid(self):
        s = "loss{0,10}-{crashprimary,partition}, faultfree"
        res = parse_grid(s)
        exp = ["loss0-crashprimary", "loss0-partition",
               "loss10-crashprimary", "loss10-partition", "faultfree"]
        self.assertEqual(res, exp)

    def test_parse_grid_empty(self):
        self.assertEqual(parse_grid(""), [])

    def test_parse_grid_spaces(self):
        res = parse_grid("loss{0, 10}")
        exp = ["loss0", "loss10"]
        self.assertEqual(res, exp)

    def test_parse_grid_first_factor_outer(self):
        res = parse_grid("loss{0, 10}-crash{primary, backup}")
        exp = ["loss0-crashprimary", "loss0-crashbackup",
               "loss10-crashprimary", "loss10-crashbackup"]
        self.assertEqual(res, exp)

    def test_expand_factor_conditions_match(self):
        cell = DummyCell(name='loss10-partition')
        s = 'loss{10,20}: 0.25'
        res = expand_factor_conditions(s, cell)
        self.assertEqual(res, "0.25")

    def test_expand_factor_conditions_mismatch(self):
        cell = DummyCell(name='loss0-partition')
        s = 'loss{10,20}: 0.25'
        res = expand_factor_conditions(s, cell)
        self.assertEqual(res, "")

    def test_expand_factor_conditions_plain(self):
        cell = DummyCell(name='loss0-partition')
        res = expand_factor_conditions('0.25', cell)
        self.assertEqual(res, "0.25")

    def test_matches_factor_conditions_match(self):
        cell = DummyCell(name='loss20-crashbackup')
        self.assertTrue(matches_factor_conditions("loss{10, 20}", cell))

    def test_matches_factor_conditions_mismatch(self):
        cell = DummyCell(name='loss0-crashbackup')
        self.assertFalse(matches_factor_conditions("loss{10, 20}", cell))

    def test_parse_grid_nested_commas(self):
        res = parse_grid("a{1,2}, b ,, c{x}")
        exp = ["a1", "a2", "b", "cx"]
        self.assertEqual(res, exp)

    def test_partition_sides(self):
        res = partition_sides("server.0 | server.1  server.2")
        exp = [['server.0'], ['server.1', 'server.2']]
        self.assertEqual(res, exp)

    def test_partition_sides_empty(self):
        self.assertEqual(partition_sides(""), [])


class TestReplaceBraces(TestCase):

    def test_replace_braces_attr(self):
        cell = DummyCell(seed=7, path="x.ini")
        res = replace_braces("{seed}", cell)
        self.assertEqual(res, "7")

    def test_replace_braces_envvar(self):
        cell = DummyCell(path="x.ini")
        res = replace_braces("{env:USER:}", cell)
        exp = os.environ.get("USER", "")
        self.assertEqual(res, exp)

    def test_replace_braces_envvar_missing_default(self):
        if os.environ.get("NOTAENVKEY", ""):
            raise SkipTest()

        cell = DummyCell(path="x.ini")
        res = replace_braces("{env:NOTAENVKEY:0.1}", cell)
        self.assertEqual(res, "0.1")

    def test_replace_braces_envvar_missing(self):
        if os.environ.get("NOTAENVKEY", ""):
            raise SkipTest()

        cell = DummyCell(path="x.ini")
        self.assertRaises(KeyError, replace_braces, "{env:NOTAENVKEY}", cell)

    def test_replace_braces_config(self):
        config = parse_config("[scenario]\nloss = 0.1\n")
        cell = DummyCell(name='default', config=config, path="x.ini")
        res = replace_braces("{[scenario]loss}", cell)
        self.assertEqual(res, "0.1")

    def test_replace_braces_nested(self):
        if os.environ.get("NOTAENVKEY", ""):
            raise SkipTest()

        config = parse_config("[scenario]\nloss = 0.1\n")
        cell = DummyCell(name='default', config=config, path="x.ini")
        res = replace_braces("{env:NOTAENVKEY:{[scenario]loss}}", cell)
        self.assertEqual(res, "0.1")

    def test_replace_braces_unknown(self):
        cell = DummyCell(path="x.ini")
        self.assertRaises(NotImplementedError, replace_braces, "{posargs}",
                          cell)


if __name__ == '__main__':
    test_main()
