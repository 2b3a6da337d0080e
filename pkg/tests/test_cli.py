import json

import numpy as np
import pytest

from gacodec import cli
from gacodec import codec
from gacodec.config import RunConfig, defaults_text
from gacodec.ic1 import ConfigError

TINY = {"seed": 3, "corpus": {"n_clips": 96},
        "stage1": {"steps": 40, "codebook_size": 16},
        "stage2": {"steps": 30, "tier": "small"},
        "eval": {"judge_steps": 50, "mmd_frames": 200, "ode_steps": 2}}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "c.json").write_text(json.dumps(TINY))
    cfg = d / "c.json"
    assert run("gen-data", "--config", cfg, "--corpus-out", d / "corpus.bin") == 0
    assert run("train-stage1", "--config", cfg, "--corpus", d / "corpus.bin",
               "--out", d / "s1.gacp") == 0
    assert run("train-stage2", "--config", cfg, "--corpus", d / "corpus.bin",
               "--stage1", d / "s1.gacp", "--tier", "small", "--out", d / "s2.gacp") == 0
    assert run("encode", "--stage1", d / "s1.gacp", "--in", 4, "--corpus", d / "corpus.bin",
               "--out", d / "clip.gacb") == 0
    assert run("decode", "--stage1", d / "s1.gacp", "--stage2", d / "s2.gacp",
               "--in", d / "clip.gacb", "--steps", 4, "--seed", 7,
               "--features-out", d / "rec.csv") == 0
    return d


def test_outputs_exist(pipeline):
    for name in ("corpus.bin", "s1.gacp", "s1.gacp.json", "s2.gacp", "s2.gacp.json",
                 "clip.gacb", "rec.csv"):
        assert (pipeline / name).stat().st_size > 0


def test_decoded_csv_shape(pipeline):
    rows = (pipeline / "rec.csv").read_text().splitlines()
    assert rows[0].split(",")[0] == "band_0"
    data = np.loadtxt(pipeline / "rec.csv", delimiter=",", skiprows=1)
    assert data.shape == (31, 32) and np.all(np.isfinite(data))


def test_bitstream_header(pipeline):
    h, tokens = codec.unpack((pipeline / "clip.gacb").read_bytes())
    assert (h.codebook_size, h.downsample, h.num_tokens) == (16, 1, 31)
    assert tokens.tokens.max() < 16


def test_tier_flag_overrides_config(pipeline):
    assert json.loads((pipeline / "s2.gacp.json").read_text())["tier"] == "small"
    out = pipeline / "s2m.gacp"
    assert run("train-stage2", "--config", pipeline / "c.json", "--corpus",
               pipeline / "corpus.bin", "--stage1", pipeline / "s1.gacp", "--tier", "medium",
               "--out", out) == 0
    assert json.loads(out.with_name("s2m.gacp.json").read_text())["tier"] == "medium"


def test_eval_csv(pipeline):
    out = pipeline / "m.csv"
    assert run("eval", "--config", pipeline / "c.json", "--corpus", pipeline / "corpus.bin",
               "--stage1", pipeline / "s1.gacp", "--stage2", pipeline / "s2.gacp",
               "--csv-out", out) == 0
    head, row = out.read_text().splitlines()
    assert head.split(",")[-5:] == ["bitrate_bps", "lsd", "mmd", "judge_accuracy",
                                     "perplexity"]
    assert float(row.split(",")[4]) == 200.0


def test_decode_is_idempotent(pipeline):
    first = (pipeline / "rec.csv").read_bytes()
    assert run("decode", "--stage1", pipeline / "s1.gacp", "--stage2", pipeline / "s2.gacp",
               "--in", pipeline / "clip.gacb", "--steps", 4, "--seed", 7,
               "--features-out", pipeline / "rec.csv") == 0
    assert (pipeline / "rec.csv").read_bytes() == first


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"stage1": {"nope": 1}}')
        assert run("gen-data", "--config", tmp_path / "c.json",
                   "--corpus-out", tmp_path / "x.bin") == 2
        err = capsys.readouterr().err
        assert err.count("\n") == 1 and "nope" in err

    def test_unreadable_config(self, tmp_path):
        assert run("gen-data", "--config", tmp_path / "missing.json",
                   "--corpus-out", tmp_path / "x.bin") == 2

    def test_truncated_bitstream(self, pipeline, tmp_path):
        data = (pipeline / "clip.gacb").read_bytes()
        (tmp_path / "t.gacb").write_bytes(data[:-3])
        assert run("decode", "--stage1", pipeline / "s1.gacp", "--stage2", pipeline / "s2.gacp",
                   "--in", tmp_path / "t.gacb", "--features-out", tmp_path / "r.csv") == 3

    def test_corrupt_corpus(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"GACC" + b"\x00" * 10)
        assert run("train-stage1", "--corpus", tmp_path / "bad.bin",
                   "--out", tmp_path / "s1.gacp") == 3

    def test_clip_index_out_of_range(self, pipeline, tmp_path):
        assert run("encode", "--stage1", pipeline / "s1.gacp", "--in", 10_000,
                   "--corpus", pipeline / "corpus.bin", "--out", tmp_path / "c.gacb") == 3

    def test_divergence(self, pipeline, tmp_path):
        cfg = dict(TINY, stage1={"steps": 20, "lr": 1e300})
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        with np.errstate(all="ignore"):
            assert run("train-stage1", "--config", tmp_path / "c.json",
                       "--corpus", pipeline / "corpus.bin", "--out", tmp_path / "s1.gacp") == 4

    def test_bad_records(self, tmp_path):
        (tmp_path / "r.csv").write_text("a,b\n1,2\n")
        assert run("ic1-fit", "--records", tmp_path / "r.csv") == 3


class TestConfig:
    def test_help_lists_every_default(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["train-stage1", "--help"])
        out = capsys.readouterr().out
        d = RunConfig().to_dict()
        for section, values in d.items():
            if isinstance(values, dict):
                for key in values:
                    assert f"    {key} = " in out, (section, key)

    def test_defaults_text_nonempty(self):
        assert "[stage1]" in defaults_text()

    def test_stage2_seed_follows_global(self):
        assert RunConfig.from_dict({"seed": 11}).stage2.seed == 11
        assert RunConfig.from_dict({"seed": 11, "stage2": {"seed": 2}}).stage2.seed == 2

    def test_rejects_bad_types(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"stage2": {"tier": "huge"}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict([])
