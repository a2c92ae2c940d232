import pytest


def test_pass():
    assert 1 + 1 == 2


def test_fail():
    assert [1, 2] == [1, 3]


@pytest.fixture
def broken():
    raise RuntimeError("fixture exploded")


def test_error(broken):
    pass


@pytest.mark.skip(reason="not supported here")
def test_skip():
    pass


@pytest.mark.xfail(reason="known bug")
def test_xfail():
    assert False


@pytest.mark.parametrize("a,b", [(1, 2), (3, 4), ("x y", "z")])
def test_param(a, b):
    assert a != 3


class TestGroup:
    def test_method_ok(self):
        assert True

    def test_method_bad(self):
        raise ValueError("bad value")

    @pytest.mark.parametrize("n", [0, 1])
    def test_method_param(self, n):
        assert n >= 0
