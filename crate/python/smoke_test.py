"""Build the extension module and exercise it from Python.

    python3 python/smoke_test.py
"""

import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build(dest):
    subprocess.run(["cargo", "build", "-q", "-p", "adr-py"], cwd=ROOT, check=True)
    lib = os.path.join(ROOT, "target", "debug", "libadr_py.so")
    shutil.copy(lib, os.path.join(dest, "adr_py.so"))
    sys.path.insert(0, dest)


def main():
    with tempfile.TemporaryDirectory() as tmp:
        build(tmp)
        import adr_py

        assert adr_py.preprocess("@bob Effexor gave me a HEADACHE!! http://x.co") == [
            "<USER>", "effexor", "gave", "headache", "<LINK>",
        ]
        tags = adr_py.encode_spans(5, [(1, 3, "ADR"), (4, 5, "Indication")])
        assert tags == ["O", "I-ADR", "I-ADR", "O", "I-IND"], tags
        assert adr_py.decode_spans(tags) == [(1, 3, "ADR"), (4, 5, "Indication")]
        try:
            adr_py.encode_spans(2, [(1, 3, "ADR")])
        except ValueError:
            pass
        else:
            raise AssertionError("out-of-range span accepted")

        counts = adr_py.approximate_match([(0, 2, "ADR")], [(1, 3, "ADR"), (5, 6, "ADR")])
        assert counts == (1, 1, 2), counts
        p, r, f = adr_py.prf(*counts)
        assert (p, r) == (1.0, 0.5) and abs(f - 2 / 3) < 1e-12
        mean, std = adr_py.aggregate([(1, 1, 2), (2, 2, 2)])
        assert abs(mean[1] - 0.75) < 1e-12 and std[0] == 0.0
        assert abs(sum(adr_py.softmax([1.0, 2.0, 3.0])) - 1.0) < 1e-12
        passed, worst = adr_py.gradcheck(seeds=2)
        assert passed and worst < 1e-4

        words = ["gave", "me", "headache", "nausea", "love", "it", "sleep"]
        tagger = adr_py.Tagger(words, ["effexor", "cymbalta"], embed_dim=8, hidden=6, seed=3)
        probs = tagger.drug_probabilities(["<DRUG>", "gave", "me", "nausea"])
        assert len(probs) == 2 and abs(sum(probs) - 1.0) < 1e-12

        examples = [(["<DRUG>", "gave", "me", "nausea"], "effexor"), (["love", "<DRUG>", "sleep"], "cymbalta")] * 4
        rows = tagger.pretrain(examples, epochs=2, batch_size=4, learning_rate=0.01)
        assert len(rows) == 3

        tweets = [
            (["effexor", "gave", "me", "headache"], ["O", "O", "O", "I-ADR"]),
            (["love", "cymbalta", "sleep"], ["O", "O", "O"]),
        ]
        rows = tagger.train(tweets, epochs=40, learning_rate=0.05)
        assert rows[-1][1] < rows[0][1], rows
        assert tagger.tag_tokens(["effexor", "gave", "me", "headache"]) == ["O", "O", "O", "I-ADR"]
        pairs, spans = tagger.predict("Effexor gave me a headache")
        assert [t for t, _ in pairs] == ["effexor", "gave", "headache"]

        path = os.path.join(tmp, "model.ckpt")
        tagger.save(path)
        again = adr_py.Tagger.load(path)
        assert again.tag_tokens(["love", "it"]) == tagger.tag_tokens(["love", "it"])
        assert again.drugs == ["cymbalta", "effexor"] or again.drugs == ["effexor", "cymbalta"]
        try:
            adr_py.Tagger.load(os.path.join(tmp, "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")
        print(repr(again), spans)
    print("smoke test ok")


if __name__ == "__main__":
    main()
