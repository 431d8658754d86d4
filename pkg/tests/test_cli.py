import pytest

from crnn import cli, model as M, synth


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A small dataset plus a briefly trained checkpoint, shared per module."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main([
        "gen", "--out", str(root / "ds"), "--n", "30", "--seed", "3",
        "--alphabet", "digits", "--max-len", "3",
    ]) == 0
    assert cli.main([
        "train", "--dataset", str(root / "ds"),
        "--checkpoint", str(root / "m.ckpt"), "--preset", "simplified",
        "--alphabet", "digits", "--epochs", "1", "--batch-size", "8",
        "--eps", "1e-4", "--clip-norm", "1.0", "--seed", "0",
    ]) == 0
    return root


class TestGen:
    def test_reproducible_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert cli.main([
                "gen", "--out", str(tmp_path / name), "--n", "12",
                "--seed", "9", "--alphabet", "digits",
            ]) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "manifest.tsv").read_bytes() == (b / "manifest.tsv").read_bytes()
        for row in synth.read_manifest(a):
            assert (a / row.filename).read_bytes() == (b / row.filename).read_bytes()

    def test_zero_samples_is_usage_error(self, tmp_path):
        assert cli.main([
            "gen", "--out", str(tmp_path / "d"), "--n", "0", "--seed", "1",
        ]) == 2

    def test_bad_alphabet_symbol(self, tmp_path):
        assert cli.main([
            "gen", "--out", str(tmp_path / "d"), "--n", "2", "--seed", "1",
            "--alphabet", "a?b",
        ]) == 2


class TestTrain:
    def test_checkpoint_loadable_and_log_written(self, workdir):
        loaded = M.load(workdir / "m.ckpt")
        assert loaded.model.config.conv_count() == 5
        log = workdir / "m.ckpt.log.tsv"
        lines = log.read_text().splitlines()
        assert lines[0].startswith("epoch\tstep")
        assert len(lines) >= 2

    def test_missing_dataset_is_data_error(self, tmp_path):
        assert cli.main([
            "train", "--dataset", str(tmp_path / "nope"),
            "--checkpoint", str(tmp_path / "m.ckpt"), "--epochs", "1",
        ]) == 3


class TestEval:
    def test_writes_report_with_header(self, workdir, tmp_path):
        report = tmp_path / "report.tsv"
        assert cli.main([
            "eval", "--dataset", str(workdir / "ds"),
            "--checkpoint", str(workdir / "m.ckpt"),
            "--split", "test", "--report", str(report),
        ]) == 0
        lines = report.read_text().splitlines()
        assert lines[0] == ("split\tmode\tsamples\tdelta\tsequence_accuracy"
                            "\tmean_edit_distance\tcandidate_hit_rate")
        assert lines[1].startswith("test\tfree\t3\t")

    def test_report_appends_without_second_header(self, workdir, tmp_path):
        report = tmp_path / "report.tsv"
        for _ in range(2):
            assert cli.main([
                "eval", "--dataset", str(workdir / "ds"),
                "--checkpoint", str(workdir / "m.ckpt"),
                "--split", "val", "--report", str(report),
            ]) == 0
        lines = report.read_text().splitlines()
        assert len(lines) == 3
        assert lines[1] == lines[2]

    def test_lexicon_mode_adds_row(self, workdir, tmp_path):
        lexicon = tmp_path / "words.txt"
        labels = [r.label for r in synth.read_manifest(workdir / "ds")]
        lexicon.write_text("\n".join(labels) + "\n")
        report = tmp_path / "lex_report.tsv"
        assert cli.main([
            "eval", "--dataset", str(workdir / "ds"),
            "--checkpoint", str(workdir / "m.ckpt"),
            "--split", "test", "--lexicon", str(lexicon),
            "--delta", "2", "--report", str(report),
        ]) == 0
        lines = report.read_text().splitlines()
        assert any(line.startswith("test\tlexicon\t3\t2") for line in lines)

    def test_missing_checkpoint_is_checkpoint_error(self, workdir, tmp_path):
        assert cli.main([
            "eval", "--dataset", str(workdir / "ds"),
            "--checkpoint", str(tmp_path / "absent.ckpt"),
        ]) == 4

    def test_empty_split_is_usage_error(self, workdir, tmp_path):
        # A 4-sample dataset has no val/test members under the 80/10/10 rule.
        assert cli.main([
            "gen", "--out", str(tmp_path / "tiny"), "--n", "4", "--seed", "1",
            "--alphabet", "digits",
        ]) == 0
        assert cli.main([
            "eval", "--dataset", str(tmp_path / "tiny"),
            "--checkpoint", str(workdir / "m.ckpt"), "--split", "test",
        ]) == 2


class TestDecode:
    def test_prints_transcription(self, workdir, capsys):
        assert cli.main([
            "decode", "--checkpoint", str(workdir / "m.ckpt"),
            "--image", str(workdir / "ds" / "000000.pgm"),
        ]) == 0
        out = capsys.readouterr().out
        assert "best-path:" in out
        assert "timing:" in out

    def test_lexicon_decode_reports_candidates(self, workdir, tmp_path, capsys):
        lexicon = tmp_path / "words.txt"
        lexicon.write_text("123\n42\n7\n")
        assert cli.main([
            "decode", "--checkpoint", str(workdir / "m.ckpt"),
            "--image", str(workdir / "ds" / "000001.pgm"),
            "--lexicon", str(lexicon), "--delta", "3",
        ]) == 0
        out = capsys.readouterr().out
        assert "lexicon:" in out and "candidates=" in out

    def test_missing_image_is_data_error(self, workdir, tmp_path):
        assert cli.main([
            "decode", "--checkpoint", str(workdir / "m.ckpt"),
            "--image", str(tmp_path / "absent.pgm"),
        ]) == 3

    def test_bad_checkpoint_is_checkpoint_error(self, workdir, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint at all")
        assert cli.main([
            "decode", "--checkpoint", str(bad),
            "--image", str(workdir / "ds" / "000000.pgm"),
        ]) == 4


class TestBenchDelta:
    def test_sweep_reports_and_monotone_candidates(self, workdir, tmp_path):
        lexicon = tmp_path / "words.txt"
        labels = sorted({r.label for r in synth.read_manifest(workdir / "ds")})
        lexicon.write_text("\n".join(labels) + "\n")
        report = tmp_path / "bench.tsv"
        assert cli.main([
            "bench-delta", "--dataset", str(workdir / "ds"),
            "--checkpoint", str(workdir / "m.ckpt"),
            "--lexicon", str(lexicon), "--split", "test",
            "--report", str(report), "--repeats", "2",
        ]) == 0
        lines = report.read_text().splitlines()
        assert lines[0] == ("delta\tsamples\tsequence_accuracy\tmean_candidates"
                            "\tcandidate_hit_rate")
        assert len(lines) == 7
        candidates = [float(line.split("\t")[3]) for line in lines[1:]]
        assert candidates == sorted(candidates)
        timing = report.with_suffix(report.suffix + ".timing.tsv")
        assert timing.exists()
        assert timing.read_text().splitlines()[0] == "delta\tsearch_ms_per_sample"

    def test_deterministic_columns_reproduce(self, workdir, tmp_path):
        lexicon = tmp_path / "words.txt"
        labels = sorted({r.label for r in synth.read_manifest(workdir / "ds")})
        lexicon.write_text("\n".join(labels) + "\n")
        reports = []
        for name in ("r1.tsv", "r2.tsv"):
            path = tmp_path / name
            assert cli.main([
                "bench-delta", "--dataset", str(workdir / "ds"),
                "--checkpoint", str(workdir / "m.ckpt"),
                "--lexicon", str(lexicon), "--split", "test",
                "--report", str(path), "--repeats", "1",
            ]) == 0
            reports.append(path.read_bytes())
        assert reports[0] == reports[1]


class TestRunConfigFile:
    def test_config_file_sets_defaults_and_flags_override(self, tmp_path):
        config = tmp_path / "run.conf"
        config.write_text("alphabet = digits\nmax_len = 2\nseed = 77\n")
        assert cli.main([
            "gen", "--config", str(config), "--out", str(tmp_path / "d1"),
            "--n", "6",
        ]) == 0
        rows = synth.read_manifest(tmp_path / "d1")
        assert max(len(r.label) for r in rows) <= 2
        # explicit flag wins over the file value
        assert cli.main([
            "gen", "--config", str(config), "--out", str(tmp_path / "d2"),
            "--n", "6", "--max-len", "4", "--seed", "77",
        ]) == 0
        rows2 = synth.read_manifest(tmp_path / "d2")
        assert max(len(r.label) for r in rows2) >= 3

    def test_unknown_config_key_is_config_error(self, tmp_path):
        config = tmp_path / "run.conf"
        config.write_text("warp_speed = 9\n")
        assert cli.main([
            "gen", "--config", str(config), "--out", str(tmp_path / "d"),
            "--n", "2",
        ]) == 2
