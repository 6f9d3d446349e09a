import pytest

from audiotext.text import (BOS, EOS, PAD, UNK, TokenSequence, Vocab, apply_prompt_template, build_vocab,
                            detokenize, pad_batch, tokenize)


class TestVocab:
    def test_sorted_ids(self):
        v = build_vocab(["a b", "b c"])
        assert [v.id(w) for w in "abc"] == [4, 5, 6]

    def test_empty_corpus(self):
        v = build_vocab([""])
        assert len(v) == 4 and v.itos[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]

    def test_deterministic(self):
        corpus = ["Z y x", "a b Z"]
        assert build_vocab(corpus) == build_vocab(list(reversed(corpus)))

    def test_bijection(self):
        v = build_vocab(["the quick brown fox jumps"])
        assert all(v.id(v.token(i)) == i for i in range(4, len(v)))

    def test_save_load(self, tmp_path):
        v = build_vocab(["a low sine tone then white noise"])
        v.save(tmp_path / "vocab.txt")
        lines = (tmp_path / "vocab.txt").read_text().splitlines()
        assert all(v.id(w) == i + 4 for i, w in enumerate(lines))
        assert Vocab.load(tmp_path / "vocab.txt") == v

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            Vocab(["a", "a"])


class TestTokenize:
    vocab = build_vocab(["a b", "b c"])

    def test_empty(self):
        assert tokenize("", self.vocab).ids == [BOS, EOS]

    def test_lookup(self):
        assert tokenize("a b", self.vocab).ids == [1, 4, 5, 2]

    def test_oov(self):
        assert tokenize("a zebra", self.vocab).ids == [BOS, 4, UNK, EOS]

    def test_truncation(self):
        seq = tokenize(" ".join(["a"] * 100), self.vocab)
        assert len(seq) == 77 and seq.ids[-1] == EOS and seq.ids[0] == BOS

    @pytest.mark.parametrize("text", ["A  b", "c b a", "B"])
    def test_round_trip(self, text):
        assert detokenize(tokenize(text, self.vocab).ids, self.vocab) == " ".join(text.lower().split())

    def test_no_internal_pad_and_mask(self):
        seq = tokenize("a b c", self.vocab)
        assert PAD not in seq.ids and not any(seq.pad_mask)
        batch = pad_batch([seq, tokenize("a", self.vocab)])
        assert batch.shape == (2, 5)
        assert TokenSequence(list(batch[1])).pad_mask == [False, False, False, True, True]
        assert list(batch[1]) == [BOS, 4, EOS, PAD, PAD]


class TestPrompt:
    @pytest.mark.parametrize("label,template,out", [
        ("dog bark", "This is a sound of [label]", "This is a sound of dog bark"),
        ("park", "This sound is on [label]", "This sound is on park"),
    ])
    def test_fill(self, label, template, out):
        assert apply_prompt_template(label, template) == out

    def test_missing_placeholder(self):
        with pytest.raises(ValueError):
            apply_prompt_template("dog", "no slot here")
