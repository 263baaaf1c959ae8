import pytest

from slt.cli import main

TINY = {
    "input_sizes": "8,8", "conv_filters": "2", "speech_layers": "1", "encoder_cell": "6",
    "text_embed": "6", "decoder_cell": "8", "target_embed": "4", "output_size": "8",
    "batch_size": "4", "eval_interval": "5", "updates": "10", "bpe_merges": "10",
    "max_target_len": "20", "dropout": "0.1", "symbol_dropout": "0.2",
}


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert main(["make-toy-corpus", str(d), "--train", "8", "--dev", "3", "--test", "3", "--seed", "1"]) == 0
    return d


def train_args(corpus, out, **extra):
    values = {**TINY, "out_dir": str(out), **{k: str(v) for k, v in extra.items()}}
    args = ["train", str(corpus / "toy.conf")]
    for k, v in values.items():
        args += ["--set", f"{k}={v}"]
    return args


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
        for line in mod.CURVES:
            terminalreporter.write_line(line)
