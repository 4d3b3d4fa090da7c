import numpy as np
import pytest

from vcflow import cli
from vcflow.config import DEFAULTS, INFERENCE_KEYS, PipelineConfig
from vcflow.dsp import ConfigError, Waveform, read_wav, write_wav
from vcflow.pipeline import CFM_CKPT, CONTENT_CKPT, PITCH_CKPT

TINY = [
    "corpus.n_speakers=20",
    "corpus.n_utts=3",
    "pitch.steps=20",
    "pitch.hidden=16",
    "content.k=8",
    "flow.d_model=16",
    "flow.hidden=16",
    "flow.n_semantic_blocks=1",
    "flow.n_decoder_blocks=2",
    "timbre.d_spk=8",
    "train.steps=3",
    "train.batch_frames=600",
    "eval.n_pairs=3",
    "eval.sweep_pairs=1",
    "eval.sweep_steps=2,1",
    "dsp.gl_iters=2",
    "flow.ode_steps=2",
]


def run_cli(*args, out=None, extra=()):
    argv = list(args) + ["--quiet"]
    if out is not None:
        argv += ["--out", str(out)]
    for s in list(TINY) + list(extra):
        argv += ["--set", s]
    return cli.main(argv)


def build_pipeline(root):
    for cmd in ("make-corpus", "train-pitch", "fit-content", "train-cfm"):
        assert run_cli(cmd, out=root) == 0, cmd
    return root


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    a = build_pipeline(tmp_path_factory.mktemp("run_a"))
    b = build_pipeline(tmp_path_factory.mktemp("run_b"))
    return a, b


class TestConfig:
    def test_defaults_resolve(self):
        cfg = PipelineConfig()
        assert cfg["flow.sigma_min"] == 1e-4 and cfg["content.k"] == 64 and cfg.seed == 0

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            PipelineConfig().set("flow.nope", "1")
        with pytest.raises(ConfigError, match="unknown config section"):
            PipelineConfig().set("bogus.x", "1")

    def test_parse_with_comments_and_line_numbers(self):
        cfg = PipelineConfig.parse("# header\nflow.ode_steps = 5  # fewer\n\ntrain.lr = 0.01\n")
        assert cfg["flow.ode_steps"] == 5 and cfg["train.lr"] == 0.01
        with pytest.raises(ConfigError, match="cfg:2"):
            PipelineConfig.parse("run.seed = 1\nflow.bad = 2\n", "cfg")
        with pytest.raises(ConfigError, match="cannot parse"):
            PipelineConfig.parse("run.seed = abc\n")

    def test_bool_parse(self):
        cfg = PipelineConfig().apply_overrides(["flow.use_pitch=false"])
        assert cfg["flow.use_pitch"] is False

    def test_dump_round_trip(self):
        cfg = PipelineConfig().apply_overrides(["train.lr=0.003", "flow.solver=midpoint"])
        back = PipelineConfig.parse(cfg.dump())
        assert back.values == cfg.values and back.hash() == cfg.hash()

    def test_every_default_dumped(self):
        text = PipelineConfig().dump()
        assert sum(len(v) for v in DEFAULTS.values()) == len(text.splitlines())

    def test_hash_sensitivity(self):
        base = PipelineConfig()
        assert base.hash() == PipelineConfig().hash()
        assert base.copy().apply_overrides(["train.lr=0.1"]).hash("cfm") != base.hash("cfm")
        # training the pitch model does not depend on flow settings
        assert base.copy().apply_overrides(["flow.hidden=64"]).hash("pitch") == base.hash("pitch")
        for key in INFERENCE_KEYS:
            other = base.copy()
            default = other[key]
            other.set(key, "midpoint" if key == "flow.solver" else str(default * 2 if not isinstance(default, bool) else default))
            assert other.hash("cfm") == base.hash("cfm"), key

    def test_override_needs_equals(self):
        with pytest.raises(ConfigError):
            PipelineConfig().apply_overrides(["flow.ode_steps"])


class TestCliErrors:
    def test_unknown_set_key_exits_nonzero(self, tmp_path, capsys):
        assert cli.main(["make-corpus", "--out", str(tmp_path), "--set", "corpus.bogus=1"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_dependency_message(self, tmp_path, capsys):
        assert cli.main(["train-cfm", "--out", str(tmp_path), "--quiet"]) == 1
        err = capsys.readouterr().err.strip()
        assert "stage train-cfm requires artifact corpus" in err and "vcflow make-corpus" in err
        assert len(err.splitlines()) == 1

    def test_missing_pitch_artifact(self, pipeline_dirs, tmp_path, capsys):
        a, _ = pipeline_dirs
        assert run_cli("train-cfm", out=tmp_path, extra=[f"paths.corpus={a / 'corpus'}"]) == 1
        assert "requires artifact pitch.ckpt" in capsys.readouterr().err

    def test_convert_needs_inputs(self, pipeline_dirs, capsys):
        a, _ = pipeline_dirs
        assert run_cli("convert", out=a) == 1
        assert "convert needs" in capsys.readouterr().err

    def test_short_prompt(self, pipeline_dirs, tmp_path, capsys):
        a, _ = pipeline_dirs
        write_wav(Waveform(np.zeros(4000)), tmp_path / "short.wav")
        src = next((a / "corpus" / "wav").glob("*.wav"))
        rc = run_cli("convert", "--source", str(src), "--prompt", str(tmp_path / "short.wav"), "--output", str(tmp_path / "o.wav"), out=a)
        assert rc == 1 and "insufficient prompt" in capsys.readouterr().err


class TestCliRuns:
    def test_artifacts_and_logs(self, pipeline_dirs):
        a, _ = pipeline_dirs
        for name in (PITCH_CKPT, CONTENT_CKPT, CFM_CKPT, "config.txt", "run.log", "corpus/manifest.tsv"):
            assert (a / name).exists(), name
        log = (a / "run.log").read_text()
        cfg = PipelineConfig.load(a / "config.txt")
        assert f"config_hash={cfg.hash()}" in log and "seed=0" in log

    def test_convert_manifest_three_lines(self, pipeline_dirs, tmp_path):
        a, _ = pipeline_dirs
        wavs = sorted((a / "corpus" / "wav").glob("*.wav"))
        lines = [f"{wavs[i]}\t{wavs[-1 - i]}\t{tmp_path / f'out{i}.wav'}" for i in range(3)]
        (tmp_path / "jobs.tsv").write_text("\n".join(lines) + "\n")
        assert run_cli("convert", "--manifest", str(tmp_path / "jobs.tsv"), out=a) == 0
        for i in range(3):
            out = read_wav(tmp_path / f"out{i}.wav")
            assert len(out) == len(read_wav(wavs[i]))

    def test_bad_manifest_line(self, pipeline_dirs, tmp_path, capsys):
        a, _ = pipeline_dirs
        (tmp_path / "jobs.tsv").write_text("only_one_column\n")
        assert run_cli("convert", "--manifest", str(tmp_path / "jobs.tsv"), out=a) == 1
        assert "jobs.tsv:1" in capsys.readouterr().err

    def test_eval_report(self, pipeline_dirs):
        a, _ = pipeline_dirs
        assert run_cli("eval", out=a) == 0
        text = (a / "eval.tsv").read_text()
        summary = text.strip().splitlines()[-1]
        assert summary.startswith("SUMMARY r=") and "content=" in summary and "envelope=" in summary and "usage=" in summary
        assert "ode_steps\twall_clock_s\tcontent_match" in text

    def test_eval_untrained(self, pipeline_dirs, tmp_path):
        a, _ = pipeline_dirs
        assert run_cli("eval", "--untrained", "--no-sweep", "--report", str(tmp_path / "u.tsv"), out=a) == 0
        assert (tmp_path / "u.tsv").read_text().strip().splitlines()[-1].startswith("SUMMARY")

    def test_reproducible_artifacts(self, pipeline_dirs, tmp_path):
        a, b = pipeline_dirs
        for name in (PITCH_CKPT, CONTENT_CKPT, CFM_CKPT, "corpus/manifest.tsv"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        src = sorted((a / "corpus" / "wav").glob("*.wav"))[0]
        prompt = sorted((a / "corpus" / "wav").glob("*.wav"))[-1]
        for root, name in ((a, "x.wav"), (b, "y.wav")):
            assert run_cli("convert", "--source", str(src), "--prompt", str(prompt), "--output", str(tmp_path / name), out=root) == 0
        assert (tmp_path / "x.wav").read_bytes() == (tmp_path / "y.wav").read_bytes()

    def test_default_run_dir_reused(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = PipelineConfig()
        first = cli.resolve_run_dir(cfg, None)
        assert first.parent.name == "runs" and first.name.endswith(cfg.hash("cfm"))
        first.mkdir(parents=True)
        assert cli.resolve_run_dir(cfg, None) == first

    def test_gradcheck_command(self, tmp_path):
        assert cli.main(["gradcheck", "--out", str(tmp_path), "--quiet"]) == 0
        assert "[flow_decoder]" in (tmp_path / "gradcheck.txt").read_text()

    def test_gradcheck_failure_exit_code(self, tmp_path, capsys):
        # no finite-difference estimate meets an impossible tolerance
        assert cli.main(["gradcheck", "--out", str(tmp_path), "--quiet", "--rtol", "1e-30"]) == 1
        assert "gradcheck failed" in capsys.readouterr().err
