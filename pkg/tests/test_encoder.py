import numpy as np
import pytest

from dstreader.corpus import Dialog, FlattenedDialog, Turn, flatten
from dstreader.encoder import (
    EMBED_PRETRAINED,
    EMBED_TRAINABLE,
    EmbeddingFileError,
    Encoder,
    EncoderConfig,
    EncoderConfigError,
    UNK,
    Vocabulary,
    load_embedding_file,
    record_for,
    write_embedding_file,
)
from dstreader.nncore import zero_grads
from dstreader.synth import synthetic_records


def make_flat(tokens_text: str, agent: str | None = None, t: int = 1):
    turns = []
    if agent is not None:
        turns.append(Turn(agent=None, user="hello", state={}))
        turns.append(Turn(agent=agent, user=tokens_text, state={}))
        return flatten(Dialog(id="d", turns=turns), 2)
    turns.append(Turn(agent=None, user=tokens_text, state={}))
    return flatten(Dialog(id="d", turns=turns), 1)


def small_config(mode=EMBED_TRAINABLE, pretrained_dim=None):
    return EncoderConfig(
        embed_mode=mode,
        embed_dim=5,
        pretrained_dim=pretrained_dim,
        affine_dim=6,
        hidden_dim=3,
    )


@pytest.fixture()
def vocab():
    flats = [make_flat("the hotel in the east"), make_flat("four stars please")]
    return Vocabulary.build(flats)


class TestVocabulary:
    def test_specials_present(self, vocab):
        assert vocab.tokens[0] == UNK
        assert "[U]" in vocab.tokens and "[A]" in vocab.tokens

    def test_unknown_maps_to_unk(self, vocab):
        assert vocab.index("zzzz-not-there") == vocab.index(UNK)

    def test_deterministic_order(self):
        flats = [make_flat("b a c")]
        v1 = Vocabulary.build(flats)
        v2 = Vocabulary.build(flats)
        assert v1.tokens == v2.tokens


class TestEmbeddingFile:
    def test_roundtrip(self, tmp_path, rng):
        records = {
            "d#1": rng.normal(size=(4, 7)),
            "d#2": rng.normal(size=(9, 7)),
        }
        path = tmp_path / "emb.dste"
        write_embedding_file(path, 7, records)
        dim, loaded = load_embedding_file(path)
        assert dim == 7
        assert set(loaded) == set(records)
        for key in records:
            assert loaded[key].tobytes() == np.asarray(records[key]).tobytes()

    def test_missing_record(self, tmp_path, rng):
        path = tmp_path / "emb.dste"
        write_embedding_file(path, 3, {"other#1": rng.normal(size=(2, 3))})
        _, records = load_embedding_file(path)
        flat = make_flat("hello world")
        with pytest.raises(EmbeddingFileError, match="missing"):
            record_for(flat, records)

    def test_row_count_mismatch(self, tmp_path, rng):
        flat = make_flat("hello world")  # length 3 with marker
        path = tmp_path / "emb.dste"
        write_embedding_file(path, 3, {flat.key: rng.normal(size=(2, 3))})
        _, records = load_embedding_file(path)
        with pytest.raises(EmbeddingFileError, match="rows"):
            record_for(flat, records)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "emb.dste"
        path.write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(EmbeddingFileError, match="magic"):
            load_embedding_file(path)


class TestEncoderForward:
    def test_zero_weights_zero_outputs(self, vocab, rng):
        enc = Encoder(small_config(), rng, vocab=vocab)
        for p in enc.parameters():
            p.value[:] = 0.0
        flat = make_flat("the hotel in the east")
        state = enc.forward([flat])
        assert np.array_equal(state.D, np.zeros_like(state.D))
        assert np.array_equal(state.e, np.zeros_like(state.e))

    def test_length_equivariance(self, vocab, rng):
        enc = Encoder(small_config(), rng, vocab=vocab)
        flat = make_flat("four stars please")
        state = enc.forward([flat])
        assert state.D.shape == (1, flat.length, small_config().enc_dim)

    def test_dialog_embedding_definition(self, vocab, rng):
        enc = Encoder(small_config(), rng, vocab=vocab)
        flat = make_flat("the hotel in the east")
        state = enc.forward([flat])
        H = small_config().hidden_dim
        L = flat.length
        assert np.array_equal(state.e[0, :H], state.D[0, 0, :H])
        assert np.array_equal(state.e[0, H:], state.D[0, L - 1, H:])

    def test_unknown_token_uses_unk_row(self, vocab, rng):
        enc = Encoder(small_config(), rng, vocab=vocab)
        flat = make_flat("zebra")  # not in the vocab corpus
        state = enc.forward([flat])
        assert np.array_equal(state.X[0, 1], enc.emb.value[vocab.index(UNK)])

    def test_batch_matches_single(self, vocab, rng):
        # right padding must not change any example's outputs
        enc = Encoder(small_config(), rng, vocab=vocab)
        f1 = make_flat("the hotel in the east")
        f2 = make_flat("four stars")
        batch = enc.forward([f1, f2])
        for b, flat in enumerate([f1, f2]):
            single = enc.forward([flat])
            L = flat.length
            assert np.allclose(batch.D[b, :L], single.D[0, :L], atol=1e-12)
            assert np.allclose(batch.e[b], single.e[0], atol=1e-12)

    def test_reversal_swaps_directions_with_tied_weights(self, rng):
        # two hand-built token sequences that are exact mirrors
        base = make_flat("a b c d e")
        rev = FlattenedDialog(
            dialog_id=base.dialog_id,
            turn_index=1,
            tokens=tuple(reversed(base.tokens)),
            alignment=tuple(reversed(base.alignment)),
        )
        vocab = Vocabulary.build([base])
        enc = Encoder(small_config(), rng, vocab=vocab)
        for p_src, p_dst in zip(enc.lstm_fwd.parameters(), enc.lstm_bwd.parameters()):
            p_dst.value = p_src.value.copy()
        fwd_state = enc.forward([base])
        rev_state = enc.forward([rev])
        H = small_config().hidden_dim
        L = base.length
        for i in range(L):
            j = L - 1 - i
            assert np.allclose(fwd_state.D[0, i, H:], rev_state.D[0, j, :H], atol=1e-12)
            assert np.allclose(fwd_state.D[0, i, :H], rev_state.D[0, j, H:], atol=1e-12)

    def test_directions_match_explicit_runs(self, vocab, rng):
        # oracle: run each direction by hand on the affine outputs
        from dstreader.nncore import affine_forward

        enc = Encoder(small_config(), rng, vocab=vocab)
        flat = make_flat("the hotel in the east")
        state = enc.forward([flat])
        H1 = affine_forward(state.X, enc.affine_W.value, enc.affine_b.value)
        F, _ = enc.lstm_fwd.forward(H1)
        Brev, _ = enc.lstm_bwd.forward(H1[:, ::-1, :])
        Bwd = Brev[:, ::-1, :]
        H = small_config().hidden_dim
        assert np.allclose(state.D[0, :, H:], F[0], atol=1e-12)
        assert np.allclose(state.D[0, :, :H], Bwd[0], atol=1e-12)

    def test_question_vectors(self, vocab, rng):
        enc = Encoder(small_config(), rng, vocab=vocab, n_slots=3, with_questions=True)
        q1 = enc.question_vector(1)
        assert np.array_equal(q1, enc.question_vector(1))
        assert not np.array_equal(q1, enc.question_vector(2))
        with pytest.raises(EncoderConfigError):
            enc.question_vector(7)


class TestPretrainedMode:
    def make_setup(self, rng):
        dialog = Dialog(
            id="d",
            turns=[
                Turn(agent=None, user="the cafe in the east", state={}),
            ],
        )
        flat = flatten(dialog, 1)
        records = synthetic_records([[dialog]], dim=9)
        cfg = small_config(mode=EMBED_PRETRAINED, pretrained_dim=9)
        enc = Encoder(cfg, rng, vocab=None)
        return enc, flat, records

    def test_rows_align_and_context_varies(self, rng):
        enc, flat, records = self.make_setup(rng)
        rows = records[flat.key]
        assert rows.shape == (flat.length, 9)
        # "the" occurs twice with different neighbors: contextual rows differ
        positions = [i for i, t in enumerate(flat.tokens) if t == "the"]
        assert len(positions) == 2
        assert not np.allclose(rows[positions[0]], rows[positions[1]])

    def test_marker_positions_use_learned_vectors(self, rng):
        enc, flat, records = self.make_setup(rng)
        state = enc.forward([flat], records=records)
        assert np.array_equal(state.X[0, 0], enc.marker_emb.value[1])  # [U]

    def test_file_rows_frozen(self, rng):
        enc, flat, records = self.make_setup(rng)
        before = {k: v.copy() for k, v in records.items()}
        state = enc.forward([flat], records=records)
        zero_grads(enc.parameters())
        de = np.ones_like(state.e)
        dD = np.ones_like(state.D)
        enc.backward(state, dD=dD, de=de)
        for k in records:
            assert np.array_equal(records[k], before[k])
        # markers and the affine do learn
        assert np.any(enc.marker_emb.grad != 0.0)
        assert np.any(enc.affine_W.grad != 0.0)

    def test_missing_records_map(self, rng):
        enc, flat, _ = self.make_setup(rng)
        with pytest.raises(EmbeddingFileError):
            enc.forward([flat], records=None)
