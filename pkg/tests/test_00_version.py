import thz_sensing


def test_version() -> None:
    assert thz_sensing.__version__ != "999"
