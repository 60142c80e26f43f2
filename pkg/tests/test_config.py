import pytest

from lmrasch import FitConfig, InvalidArgument, LoadError, load_config


def test_defaults():
    config = FitConfig()
    assert config.max_iters == 5000
    assert config.tol == 1e-8
    assert config.n_random_starts == 9
    assert config.clamp == 50.0
    assert config.n_students is None


@pytest.mark.parametrize(
    "overrides",
    [
        {"tol": 0.0},
        {"max_iters": 0},
        {"n_random_starts": -1},
        {"threads": 0},
        {"separation_warning": 60.0},
        {"inner": "partial"},
        {"n_students": 0},
    ],
)
def test_validation(overrides):
    with pytest.raises(InvalidArgument):
        FitConfig(**overrides)


def test_replace_ignores_none():
    config = FitConfig().replace(tol=1e-6, threads=None)
    assert config.tol == 1e-6
    assert config.threads == 1


def test_load_config(tmp_path):
    path = tmp_path / "fit.cfg"
    path.write_text(
        "# school survey settings\n"
        "\n"
        "max_iters = 200\n"
        "tol=1e-6\n"
        "n_students = 1246\n"
        "inner = full\n"
    )
    config = load_config(path)
    assert config.max_iters == 200
    assert config.tol == 1e-6
    assert config.n_students == 1246
    assert config.n_random_starts == 9


def test_load_config_none_value(tmp_path):
    path = tmp_path / "fit.cfg"
    path.write_text("n_students = none\n")
    assert load_config(path).n_students is None


@pytest.mark.parametrize(
    "text,message,line",
    [
        ("tol = 1e-6\nstarts = 3\n", 'unknown setting "starts"', 2),
        ("max_iters = many\n", 'invalid value "many"', 1),
        ("\n\nmax_iters\n", "key=value", 3),
    ],
)
def test_load_config_errors(tmp_path, text, message, line):
    path = tmp_path / "fit.cfg"
    path.write_text(text)
    with pytest.raises(LoadError, match=message) as info:
        load_config(path)
    assert info.value.line == line


def test_load_config_invalid_setting(tmp_path):
    path = tmp_path / "fit.cfg"
    path.write_text("threads = 0\n")
    with pytest.raises(LoadError, match="threads"):
        load_config(path)
    with pytest.raises(LoadError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")
