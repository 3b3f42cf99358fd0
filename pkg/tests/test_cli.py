import hashlib

import numpy as np
import pytest

from clickgcn.checkpoint import (Checkpoint, checkpoint_from_bytes, checkpoint_to_bytes,
                                 load_checkpoint, save_checkpoint)
from clickgcn.cli import main
from clickgcn.graph import FormatError
from clickgcn.ingest import Vocab
from clickgcn.model import ModelParams

SMALL = ["--n-clusters", "5", "--n-queries", "200", "--n-items", "100", "--n-clicks", "5000"]
FAST = ["--d", "8", "--epochs", "1", "--batch", "64", "--fanout", "4"]


def ckpt(variant="attention", layers=2):
    vocab = Vocab(["", "red", "dress", "ü"], [0, 5, 3, 1])
    params = ModelParams.init(4, 3, layers, variant, np.random.default_rng(0))
    return Checkpoint(params, vocab, 7, {"lr": "0.01", "batch_size": "256"})


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["mean", "attention", "mask"])
    def test_round_trip(self, variant, tmp_path):
        c = ckpt(variant)
        path = tmp_path / "m.sgcn"
        save_checkpoint(c, path)
        back = load_checkpoint(path)
        assert back.params.embeddings.tobytes() == c.params.embeddings.tobytes()
        if c.params.attention is not None:
            assert back.params.attention.tobytes() == c.params.attention.tobytes()
        assert back.params.variant == variant and back.params.leaky_slope == 0.2
        assert back.vocab.tokens == c.vocab.tokens and back.vocab.counts == c.vocab.counts
        assert back.seed == 7 and back.config == c.config
        assert checkpoint_to_bytes(back) == path.read_bytes()

    def test_bad_magic(self):
        data = checkpoint_to_bytes(ckpt())
        with pytest.raises(FormatError, match="bad magic"):
            checkpoint_from_bytes(b"XXXX" + data[4:])

    def test_version_mismatch(self):
        data = bytearray(checkpoint_to_bytes(ckpt()))
        data[4] = 9
        with pytest.raises(FormatError, match="version"):
            checkpoint_from_bytes(bytes(data))

    def test_truncated_embeddings(self):
        data = checkpoint_to_bytes(ckpt())
        emb_end = data.index(ckpt().params.embeddings.tobytes()) + 4 * 12
        with pytest.raises(FormatError, match="unexpected end of file"):
            checkpoint_from_bytes(data[:emb_end - 5])

    def test_vocab_size_must_match(self):
        with pytest.raises(ValueError):
            Checkpoint(ModelParams.init(5, 3, 1, "mean"), Vocab(["", "a"], [0, 1]))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    data = ["--catalog", str(d / "catalog.tsv"), "--clicks", str(d / "clicks.tsv")]
    assert main(["synth", "--out-dir", str(d), "--seed", "1"] + SMALL) == 0
    assert main(["build", *data, "--out", str(d / "graph.sgcg")]) == 0
    data += ["--graph", str(d / "graph.sgcg")]
    assert main(["train", *data, *FAST, "--out", str(d / "model.sgcn"),
                 "--metrics", str(d / "metrics.tsv")]) == 0
    assert main(["train", *data, *FAST, "--layers", "0", "--variant", "mean",
                 "--out", str(d / "base.sgcn")]) == 0
    return d, data


class TestCommands:
    def test_outputs_exist(self, pipeline):
        d, _ = pipeline
        for name in ("catalog.tsv", "clicks.tsv", "graph.sgcg", "model.sgcn", "metrics.tsv"):
            assert (d / name).stat().st_size > 0
        line = (d / "metrics.tsv").read_text().splitlines()[0].split("\t")
        assert len(line) == 4 and line[:2] == ["1", "1"]

    def test_eval_with_baseline(self, pipeline, capsys):
        d, data = pipeline
        assert main(["eval", *data, "--checkpoint", str(d / "model.sgcn"), "--baseline",
                     str(d / "base.sgcn"), "--fanout", "4", "--out", str(d / "report.txt")]) == 0
        text = (d / "report.txt").read_text()
        assert "Error reduction rate" in text and "error_reduction_tail=" in text

    def test_search(self, pipeline, capsys):
        d, data = pipeline
        assert main(["search", *data, "--checkpoint", str(d / "model.sgcn"), "--fanout", "4",
                     "--index", str(d / "index.sgci"), "--query", "c0 q0", "--topk", "3"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[1] == "# c0 q0" and len(out) == 5
        assert (d / "index.sgci").read_bytes()[:4] == b"SGCI"

    def test_unembeddable_query_exits_1(self, pipeline, capsys):
        d, data = pipeline
        assert main(["search", *data, "--checkpoint", str(d / "model.sgcn"), "--query", "  "]) == 1
        assert "unembeddable query" in capsys.readouterr().err

    def test_inputs_not_mutated(self, pipeline):
        d, data = pipeline
        digest = lambda: {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                          for p in (d / "catalog.tsv", d / "clicks.tsv", d / "graph.sgcg", d / "model.sgcn")}
        before = digest()
        main(["eval", *data, "--checkpoint", str(d / "model.sgcn"), "--out", str(d / "r2.txt")])
        main(["search", *data, "--checkpoint", str(d / "model.sgcn"), "--query", "c1 q1"])
        assert digest() == before

    def test_missing_file_exits_1(self, tmp_path, capsys):
        missing = tmp_path / "nope.tsv"
        assert main(["build", "--catalog", str(missing), "--clicks", str(missing),
                     "--out", str(tmp_path / "g")]) == 1
        assert str(missing) in capsys.readouterr().err

    def test_graph_data_mismatch_exits_1(self, pipeline, tmp_path):
        d, _ = pipeline
        main(["synth", "--out-dir", str(tmp_path), "--n-queries", "50", "--n-items", "30",
              "--n-clicks", "500", "--n-clusters", "3"])
        assert main(["train", "--catalog", str(tmp_path / "catalog.tsv"), "--clicks",
                     str(tmp_path / "clicks.tsv"), "--graph", str(d / "graph.sgcg"),
                     "--out", str(tmp_path / "m")]) == 1

    def test_corrupt_checkpoint_exits_1(self, pipeline, tmp_path, capsys):
        d, data = pipeline
        bad = tmp_path / "bad.sgcn"
        bad.write_bytes(b"XXXX" + (d / "model.sgcn").read_bytes()[4:])
        assert main(["eval", *data, "--checkpoint", str(bad)]) == 1
        assert "bad magic" in capsys.readouterr().err


class TestUsage:
    def test_bogus_variant(self, capsys):
        assert main(["gradcheck", "--variant", "bogus"]) == 2

    def test_unknown_flag_and_subcommand(self, capsys):
        assert main(["gradcheck", "--frobnicate"]) == 2
        assert main(["frobnicate"]) == 2
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("variant, layers", [("attention", 2), ("mean", 1), ("mask", 0)])
    def test_gradcheck(self, variant, layers, capsys):
        assert main(["gradcheck", "--layers", str(layers), "--variant", variant]) == 0
        out = capsys.readouterr().out
        err = float(out.split("max_rel_err=")[1].split()[0])
        assert err < (1e-6 if variant == "mean" else 1e-4)

    def test_gradcheck_too_large(self):
        assert main(["gradcheck", "--d", "16"]) == 2

    def test_config_file_and_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# small check\nvariant=mean\nlayers=1\n")
        assert main(["gradcheck", "--config", str(cfg)]) == 0
        assert "variant=mean layers=1" in capsys.readouterr().out
        assert main(["gradcheck", "--config", str(cfg), "--variant", "attention"]) == 0
        assert "variant=attention layers=1" in capsys.readouterr().out

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("colour=blue\n")
        assert main(["gradcheck", "--config", str(cfg)]) == 2
        cfg.write_text("variant=bogus\n")
        assert main(["gradcheck", "--config", str(cfg)]) == 2
        cfg.write_text("layers=two\n")
        assert main(["gradcheck", "--config", str(cfg)]) == 2
