"""Builds the extension module, imports it and runs a tiny end-to-end check.

Usage: python3 python/smoke_test.py [--no-build]
"""

import importlib.util
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent
NAME = "hidden_transfer_py"

TINY = """
n_layers = 2
d_model = 16
n_heads = 2
ffn_dim = 32
max_positions = 128
context = 32
batch_size = 4
max_steps = 5
k = 2
transfer_layers = 1,2
"""


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "hidden-transfer-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )


def load(tmp):
    lib = ROOT / "target" / "release" / f"lib{NAME}.so"
    if not lib.exists():
        sys.exit(f"{lib} not found; build first")
    dest = pathlib.Path(tmp) / f"{NAME}.so"
    shutil.copy(lib, dest)
    spec = importlib.util.spec_from_file_location(NAME, dest)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    if "--no-build" not in sys.argv:
        build()
    with tempfile.TemporaryDirectory() as tmp:
        ht = load(tmp)

        assert ht.decode(ht.encode("hello")) == "hello"

        model = ht.Model.pretrain(TINY)
        assert model.n_layers == 2 and model.d_model == 16
        rows = model.logits(ht.encode("abc"))
        assert len(rows) == 3 and len(rows[0]) == model.vocab_size

        transfer = ht.Transfer.train(model, TINY)
        medusa = ht.Medusa.train(model, TINY)
        assert transfer.k == 2 and transfer.layers == [1, 2]
        assert medusa.k == 2

        path = pathlib.Path(tmp)
        model.save(str(path / "base.htc"))
        transfer.save(str(path / "transfer.htc"))
        medusa.save(str(path / "medusa.htc"))
        again = ht.Model.load(str(path / "base.htc"))
        assert again.content_hash == model.content_hash
        transfer = ht.Transfer.load(str(path / "transfer.htc"))
        medusa = ht.Medusa.load(str(path / "medusa.htc"))

        prompt = ht.encode("Once upon a time")
        reference = ht.generate(model, prompt, 24)
        assert reference.emitted == 24 and reference.forwards == 24
        for mode in ["transfer_tree", "transfer_two_pass", "medusa_tree"]:
            out = ht.generate(model, prompt, 24, mode, transfer=transfer, medusa=medusa)
            assert out.tokens == reference.tokens, mode
            if mode != "transfer_two_pass":
                assert out.forwards <= out.emitted, mode
        chain = ht.generate(model, prompt, 24, "transfer_tree", transfer=transfer, tree="0\n0,0\n")
        assert chain.tokens == reference.tokens

        for bad in [
            lambda: ht.generate(model, prompt, 4, "nope"),
            lambda: ht.generate(model, prompt, 4, "medusa_tree"),
            lambda: ht.Model.pretrain("widht = 3"),
        ]:
            try:
                bad()
            except (ValueError, RuntimeError):
                pass
            else:
                raise AssertionError("expected an error")
        try:
            ht.Model.load(str(path / "missing.htc"))
        except OSError:
            pass
        else:
            raise AssertionError("expected OSError")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
