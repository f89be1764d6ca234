import json

import pytest

from beamfuse.cli import main
from beamfuse.harness import generate_corpus
from beamfuse.lm import read_arpa
from beamfuse.tokenization import read_vocab


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A corpus, vocabularies, a model, and one decoded utterance on disk."""
    root = tmp_path_factory.mktemp("cli")
    lines = generate_corpus(5, 300, 80)
    (root / "corpus.txt").write_text("\n".join(lines[:240]) + "\n")
    (root / "eval.txt").write_text("\n".join(lines[240:]) + "\n")

    def run(*argv):
        assert main([str(a) for a in argv]) == 0

    run("build-vocab", "--corpus", root / "corpus.txt", "--size", 64, "--out", root / "asr.vocab")
    run("build-vocab", "--corpus", root / "corpus.txt", "--size", 128, "--out", root / "lm.vocab")
    run(
        "train-lm",
        "--corpus", root / "corpus.txt",
        "--vocab", root / "lm.vocab",
        "--order", 3,
        "--discount", 0.4,
        "--out", root / "lm.arpa",
    )
    run(
        "train-lm",
        "--corpus", root / "corpus.txt",
        "--vocab", root / "asr.vocab",
        "--order", 2,
        "--discount", 0.4,
        "--out", root / "second.arpa",
    )
    run(
        "gen-data",
        "--corpus", root / "eval.txt",
        "--vocab", root / "asr.vocab",
        "--count", 2,
        "--noise", 0.4,
        "--seed", 9,
        "--out", root / "data",
    )
    return root


class TestPipeline:
    def test_artifacts_exist(self, workspace):
        vocab = read_vocab(str(workspace / "asr.vocab"))
        assert vocab.size == 64
        model = read_arpa(str(workspace / "lm.arpa"))
        assert model.order == 3
        assert (workspace / "data" / "manifest.tsv").exists()

    def test_decode_plain(self, workspace, capsys):
        assert (
            main(
                [
                    "decode",
                    "--emissions", str(workspace / "data" / "utt0000.em"),
                    "--asr-vocab", str(workspace / "asr.vocab"),
                    "--lm", str(workspace / "lm.arpa"),
                    "--lm-vocab", str(workspace / "lm.vocab"),
                    "--policy", "shortest",
                    "--beam", "8",
                    "--lm-weight", "0.5",
                    "--mode", "ctc",
                ]
            )
            == 0
        )
        out = capsys.readouterr().out.strip()
        manifest = (workspace / "data" / "manifest.tsv").read_text().splitlines()
        reference = manifest[0].split("\t")[2]
        assert out == reference  # low noise: the decode should be exact

    def test_decode_json_payload(self, workspace, capsys):
        argv = [
            "decode",
            "--emissions", str(workspace / "data" / "utt0000.em"),
            "--asr-vocab", str(workspace / "asr.vocab"),
            "--lm", str(workspace / "lm.arpa"),
            "--lm-vocab", str(workspace / "lm.vocab"),
            "--policy", "interval",
            "--interval", "8",
            "--beam", "5",
            "--lm-weight", "0.5",
            "--mode", "ctc",
            "--json",
        ]
        assert main(argv) == 0
        payload = json.loads(capsys.readouterr().out)
        assert set(payload) == {"best", "nbest", "counters"}
        assert set(payload["best"]) == {"text", "e2e", "lm_raw", "combined"}
        assert len(payload["nbest"]) <= 5
        assert payload["counters"]["lm_calls"] >= 1
        assert payload["counters"]["lm_calls_final"] == 1

    def test_decode_with_second_lm(self, workspace, capsys):
        argv = [
            "decode",
            "--emissions", str(workspace / "data" / "utt0001.em"),
            "--asr-vocab", str(workspace / "asr.vocab"),
            "--lm", str(workspace / "lm.arpa"),
            "--lm-vocab", str(workspace / "lm.vocab"),
            "--policy", "shortest",
            "--beam", "5",
            "--lm-weight", "0.3",
            "--second-lm", str(workspace / "second.arpa"),
            "--second-weight", "0.3",
            "--second-final", "no",
            "--mode", "ctc",
            "--json",
        ]
        assert main(argv) == 0
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["best"]["lm_raw"]) == 2

    def test_decode_labelsync(self, workspace, capsys):
        argv = [
            "decode",
            "--emissions", str(workspace / "data" / "utt0000.em"),
            "--asr-vocab", str(workspace / "asr.vocab"),
            "--lm", str(workspace / "lm.arpa"),
            "--lm-vocab", str(workspace / "lm.vocab"),
            "--policy", "never",
            "--beam", "4",
            "--lm-weight", "0.5",
            "--mode", "labelsync",
        ]
        assert main(argv) == 0
        assert capsys.readouterr().out.strip()

    def test_lm_vocab_mismatch_rejected(self, workspace, capsys):
        argv = [
            "decode",
            "--emissions", str(workspace / "data" / "utt0000.em"),
            "--asr-vocab", str(workspace / "asr.vocab"),
            "--lm", str(workspace / "lm.arpa"),
            "--lm-vocab", str(workspace / "asr.vocab"),
            "--policy", "never",
            "--beam", "4",
            "--lm-weight", "0.5",
            "--mode", "ctc",
        ]
        assert main(argv) == 2
        assert "does not match" in capsys.readouterr().err


class TestOracle:
    def test_ctc_oracle_agrees(self, workspace, capsys):
        from beamfuse.acoustic import synth_emissions, write_emissions

        em = synth_emissions([1, 2], 5, (1, 2), noise=0.6, seed=4)
        path = workspace / "small.em"
        write_emissions(em, str(path))
        assert main(["oracle", "ctc", "--emissions", str(path), "--labels", "1 2"]) == 0
        out = capsys.readouterr().out
        assert "enumeration" in out and "forward DP" in out


class TestBenchCommand:
    def test_bench_writes_csv(self, workspace, capsys):
        cfg = workspace / "bench.cfg"
        cfg.write_text(
            "corpus =\n"
            "corpus_sentences = 300\n"
            "corpus_vocabulary = 80\n"
            "utterances = 2\n"
            "noise = 0.45\n"
            "policies = never\n"
            "beams = 4\n"
            "seed = 5\n"
        )
        out = workspace / "bench.csv"
        assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("policy,beam,interval")
        assert len(lines) == 4  # header + baseline + shallow + never
