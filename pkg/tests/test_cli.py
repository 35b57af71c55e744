import pytest

from delayplate import cli

from conftest import SMALL_INI

EXTRA = {
    "simulate": "",
    "defect": "[defect]\nkind = modes\ngrid = 1, 2, 4, 8\n",
    "determine": "[determine]\nkind = modes\ngrid = 1, 9\n",
    "quasi": "[quasi]\ndirections = 2\nperturbation = 1e-3\nt_end = 2.0\n",
    "dimension": "[dimension]\nsamples = 200\ntransient = 1.0\n",
    "flowtrace": "[flowtrace]\npoints = 2\nn_theta = 16\nn_s = 6\n",
}


def write_cfg(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(autouse=True)
def cache_env(monkeypatch, cache):
    monkeypatch.setenv(cli.CACHE_ENV, str(cache))


class TestExitCodes:
    def test_missing_section(self, tmp_path, capsys):
        text = SMALL_INI.replace("[physics]\nU = 0.5\nb2 = 1.0\n", "")
        code = cli.main(["simulate", "--config", write_cfg(tmp_path, text), "--out", str(tmp_path / "o")])
        assert code == cli.EXIT_CONFIG
        assert "physics" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        text = SMALL_INI + "[run]\nbogus = 1\n"
        assert cli.main(["simulate", "--config", write_cfg(tmp_path, text)]) == cli.EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err

    def test_blowup_is_a_numerical_abort(self, tmp_path):
        # explicit cubic term at a large amplitude is far beyond its step limit
        text = SMALL_INI.replace("init = eigen", "init = eigen\ninit_amplitude = 1e3\nberger = explicit")
        out = tmp_path / "o"
        code = cli.main(["simulate", "--config", write_cfg(tmp_path, text), "--out", str(out)])
        assert code == cli.EXIT_ABORT
        diag = (out / "blowup.txt").read_text()
        assert "blow-up" in diag and "step" in diag


class TestSubcommands:
    def test_simulate_summary(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert cli.main(["simulate", "--config", write_cfg(tmp_path, SMALL_INI), "--out", str(out)]) == 0
        summary = (out / "summary.txt").read_text()
        for key in ("final_E_star", "ball_entry_time", "max_identity_residual", "config_hash"):
            assert key in summary
        assert {"config.ini", "energies.csv", "states.csv", "summary.txt"} <= set(tree(out))
        assert any(k.startswith("checkpoints/") for k in tree(out))

    def test_defect_modes_table(self, tmp_path):
        out = tmp_path / "o"
        code = cli.main(["defect", "--config", write_cfg(tmp_path, SMALL_INI + EXTRA["defect"]), "--out", str(out)])
        assert code == 0
        rows = (out / "defect_table.csv").read_text().splitlines()[1:]
        from delayplate.basis import PlateDomain, build_basis
        from delayplate.functionals import modal_pencil

        lam, _ = modal_pencil(build_basis(PlateDomain(1.0, 1.0), 3, 3))
        for row in rows:
            n, eps = row.split(",")[:2]
            assert float(eps) == pytest.approx(lam[int(float(n))] ** -0.5, rel=1e-10)

    def test_quasi_identical_pair(self, tmp_path):
        text = SMALL_INI + EXTRA["quasi"].replace("1e-3", "0.0")
        out = tmp_path / "o"
        assert cli.main(["quasi", "--config", write_cfg(tmp_path, text), "--out", str(out)]) == 0
        report = (out / "report.txt").read_text()
        assert "max_H2[0] = 0" in report and "FAIL" not in report

    def test_check_passes(self, tmp_path):
        out = tmp_path / "o"
        cfg = str(cli.Path(__file__).resolve().parents[1] / "configs" / "check.ini")
        assert cli.main(["check", "--config", cfg, "--out", str(out)]) == 0
        assert "FAIL" not in (out / "report.txt").read_text()

    def test_seed_and_threads(self, tmp_path):
        text = SMALL_INI.replace("init = eigen", "init = random")
        cfg = write_cfg(tmp_path, text)
        for seed in (1, 2):
            assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / f"s{seed}"),
                             "--seed", str(seed), "--threads", "1"]) == 0
        a = (tmp_path / "s1" / "energies.csv").read_bytes()
        b = (tmp_path / "s2" / "energies.csv").read_bytes()
        assert a != b
        assert "seed = 1" in (tmp_path / "s1" / "config.ini").read_text()

    def test_default_out_uses_config_hash(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert cli.main(["simulate", "--config", write_cfg(tmp_path, SMALL_INI)]) == 0
        assert len(list(tmp_path.glob("simulate-*"))) == 1


@pytest.mark.parametrize("command", sorted(EXTRA))
def test_rerun_from_embedded_config_is_byte_identical(tmp_path, command):
    first, second = tmp_path / "a", tmp_path / "b"
    code = cli.main([command, "--config", write_cfg(tmp_path, SMALL_INI + EXTRA[command]), "--out", str(first)])
    assert code in (cli.EXIT_PASS, cli.EXIT_FAIL)
    assert cli.main([command, "--config", str(first / "config.ini"), "--out", str(second)]) == code
    assert tree(first) == tree(second)
