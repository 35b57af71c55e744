import pytest

from delayplate import config
from delayplate.config import AUTO, ConfigError, parse, resolve_step

from conftest import SMALL_INI


def without(text, section):
    out, skip = [], False
    for line in text.splitlines():
        if line.startswith("["):
            skip = line.strip() == f"[{section}]"
        if not skip:
            out.append(line)
    return "\n".join(out)


class TestParse:
    def test_defaults_filled(self, small_cfg):
        assert small_cfg["physics"]["k"] == 0.0
        assert small_cfg["delay"]["n_theta"] == 32
        assert small_cfg["basis"]["quad_order"] == AUTO
        assert small_cfg.seed == 0

    def test_missing_section_named(self):
        with pytest.raises(ConfigError, match=r"\[physics\]"):
            parse(without(SMALL_INI, "physics"))

    def test_missing_required_key(self):
        with pytest.raises(ConfigError, match=r"missing required key \[basis\] ny"):
            parse(SMALL_INI.replace("ny = 3\n", ""))

    def test_unknown_key_and_section(self):
        with pytest.raises(ConfigError) as exc:
            parse(SMALL_INI + "\n[extra]\nfoo = 1\n")
        assert "unknown section [extra]" in str(exc.value)
        with pytest.raises(ConfigError, match="unknown key"):
            parse(SMALL_INI.replace("b2 = 1.0", "b2 = 1.0\nbogus = 3"))

    def test_all_errors_reported_together(self):
        bad = SMALL_INI.replace("b2 = 1.0", "b2 = -1.0").replace("U = 0.5", "U = 1.0")
        with pytest.raises(ConfigError) as exc:
            parse(bad)
        assert len(exc.value.errors) == 2

    @pytest.mark.parametrize("old, new", [("b2 = 1.0", "b2 = 0"), ("U = 0.5", "U = 1.0000001"),
                                          ("nx = 3", "nx = 0"), ("n_s = 64", "n_s = 1"),
                                          ("stride = 16", "stride = 0"), ("nx = 3", "nx = three")])
    def test_constraints(self, old, new):
        with pytest.raises(ConfigError):
            parse(SMALL_INI.replace(old, new))

    def test_quad_floor(self):
        with pytest.raises(ConfigError, match="floor"):
            parse(SMALL_INI.replace("ny = 3", "ny = 3\nquad_order = 9"))

    def test_syntax_error(self):
        with pytest.raises(ConfigError, match="syntax"):
            parse("not an ini")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            config.load(tmp_path / "nope.ini")


class TestCanonical:
    def test_roundtrip(self, small_cfg):
        again = parse(small_cfg.to_text())
        assert again.to_text() == small_cfg.to_text()
        assert again.hash() == small_cfg.hash()

    def test_hash_sees_changes(self, small_cfg):
        assert small_cfg.replace(run__seed=7).hash() != small_cfg.hash()

    def test_replace_validates(self, small_cfg):
        with pytest.raises(ConfigError):
            small_cfg.replace(physics__b2=-1.0)
        with pytest.raises(ConfigError, match="unknown key"):
            small_cfg.replace(physics__nope=1)

    def test_comments_and_lists(self):
        cfg = parse(SMALL_INI.replace("init_index = 0, 1", "init_index = 0 1 2 ; three modes"))
        assert cfg["time"]["init_index"] == (0, 1, 2)


class TestResolveStep:
    def test_explicit_dt_must_divide_tstar(self, small_cfg):
        cfg = small_cfg.replace(delay__n_s=AUTO, delay__t_star=2.5, time__dt=0.3)
        _, _, errors = resolve_step(cfg, 2.43, 1e6)
        assert any("divide" in e for e in errors)

    def test_dt_dividing_tstar(self, small_cfg):
        cfg = small_cfg.replace(delay__n_s=AUTO, delay__t_star=2.5, time__dt=0.025)
        ts, n_s, errors = resolve_step(cfg, 2.43, 1e6)
        assert not errors and n_s == 100 and ts == 2.5

    def test_tstar_below_exit_time_rejected(self, small_cfg):
        _, _, errors = resolve_step(small_cfg.replace(delay__t_star=1.0), 2.43, 1e6)
        assert errors

    def test_auto_resolves_fastest_mode(self, small_cfg):
        import math

        lam = 4e6
        ts, n_s, errors = resolve_step(small_cfg.replace(delay__n_s=AUTO), 2.43, lam)
        assert not errors
        assert ts / n_s <= (2 * math.pi / math.sqrt(lam)) / 20
        assert ts / (n_s - 1) > (2 * math.pi / math.sqrt(lam)) / 20


def test_every_default_is_a_fixed_point_of_format_and_parse():
    for sec, keys in config.SCHEMA.items():
        for key, (parser, default, _) in keys.items():
            if default is config.REQUIRED:
                continue
            text = config._format(default)
            assert config._format(parser(text)) == text, (sec, key)


def test_describe_lists_every_key():
    text = config.describe()
    for sec, keys in config.SCHEMA.items():
        assert f"[{sec}]" in text
        for key in keys:
            assert f"# {key} = " in text
