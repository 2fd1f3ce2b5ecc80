import numpy as np
import pytest

from dstreader.corpus import Dialog, Schema, SlotId, Turn, flatten
from dstreader.encoder import EncoderConfig, Vocabulary
from dstreader.models import (
    CarryoverBatch,
    CarryoverModel,
    JstBatch,
    JstModel,
    SpanBatch,
    SpanModel,
    TypeBatch,
    TypeModel,
    gold_class_targets,
    load_model,
)
from dstreader.nncore import grad_check, softmax

SCHEMA = Schema(
    (
        SlotId("hotel", "semi", "area"),
        SlotId("hotel", "semi", "parking"),
        SlotId("cafe", "semi", "food"),
    )
)
ONTOLOGY = {
    "hotel.semi.area": ["east", "west"],
    "hotel.semi.parking": ["no", "yes"],
    "cafe.semi.food": ["indian", "italian", "thai"],
}


def tiny_config():
    return EncoderConfig(embed_dim=4, affine_dim=5, hidden_dim=3)


def make_flats():
    d1 = Dialog(
        id="d1",
        turns=[
            Turn(agent=None, user="a hotel in the east please", state={}),
            Turn(agent="sure thing .", user="i want thai food", state={}),
        ],
    )
    d2 = Dialog(id="d2", turns=[Turn(agent=None, user="cheap parking", state={})])
    return [flatten(d1, 1), flatten(d1, 2), flatten(d2, 1)]


@pytest.fixture()
def flats():
    return make_flats()


@pytest.fixture()
def vocab(flats):
    return Vocabulary.build(flats)


def check_model_gradients(model, batch, tolerance=1e-4):
    model.zero_grads()
    model.loss(batch, compute_grad=True)

    def loss_fn():
        return model.loss(batch, compute_grad=False)

    report = grad_check(
        loss_fn,
        model.parameters(),
        tolerance=tolerance,
        rng=np.random.default_rng(0),
        max_elements_per_param=40,
    )
    assert report.ok, report.per_param


class TestCarryoverModel:
    def test_full_stack_gradients(self, vocab, rng):
        model = CarryoverModel(SCHEMA, tiny_config(), rng, vocab)
        labels = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        check_model_gradients(model, CarryoverBatch(make_flats(), labels))

    def test_probs_shape_and_range(self, vocab, rng, flats):
        model = CarryoverModel(SCHEMA, tiny_config(), rng, vocab)
        probs = model.change_probs(flats[0])
        assert probs.shape == (3,)
        assert np.all((probs > 0) & (probs < 1))

    def test_batch_padding_does_not_leak(self, vocab, rng, flats):
        # loss of a batch equals the mean of single-example losses
        model = CarryoverModel(SCHEMA, tiny_config(), rng, vocab)
        labels = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        batch_loss = model.loss(CarryoverBatch(flats, labels))
        singles = [
            model.loss(CarryoverBatch([flats[i]], labels[i : i + 1])) for i in range(3)
        ]
        assert np.isclose(batch_loss, np.mean(singles), atol=1e-12)


class TestTypeModel:
    def test_full_stack_gradients(self, vocab, rng):
        model = TypeModel(SCHEMA, tiny_config(), rng, vocab)
        batch = TypeBatch(
            make_flats(),
            slot_idx=np.array([0, 2, 1]),
            labels=np.array([3, 3, 0]),
        )
        check_model_gradients(model, batch)

    def test_question_gradient_isolation(self, vocab, rng, flats):
        model = TypeModel(SCHEMA, tiny_config(), rng, vocab)
        model.zero_grads()
        batch = TypeBatch([flats[0]], slot_idx=np.array([1]), labels=np.array([0]))
        model.loss(batch, compute_grad=True)
        qgrad = model.encoder.questions.grad
        assert np.all(qgrad[0] == 0.0)
        assert np.any(qgrad[1] != 0.0)
        assert np.all(qgrad[2] == 0.0)

    def test_dist_sums_to_one(self, vocab, rng, flats):
        model = TypeModel(SCHEMA, tiny_config(), rng, vocab)
        dist = model.type_dist(flats[1], 2)
        assert dist.shape == (4,)
        assert abs(dist.sum() - 1.0) < 1e-12


class TestSpanModel:
    def test_full_stack_gradients(self, vocab, rng):
        flats = make_flats()
        model = SpanModel(SCHEMA, tiny_config(), rng, vocab)
        batch = SpanBatch(
            flats,
            slot_idx=np.array([0, 2, 1]),
            starts=np.array([5, 4, 1]),
            ends=np.array([5, 5, 2]),
        )
        check_model_gradients(model, batch)

    def test_dists_match_batched_logits(self, vocab, rng, flats):
        model = SpanModel(SCHEMA, tiny_config(), rng, vocab)
        p_start, p_end = model.span_dists(flats[0], 0)
        L = flats[0].length
        assert p_start.shape == (L,) and p_end.shape == (L,)
        assert abs(p_start.sum() - 1.0) < 1e-12
        # oracle: per-position bilinear scores through the encoder state
        state = model.encoder.forward([flats[0]])
        q = model.encoder.question_vector(0)
        scores = np.array(
            [state.D[0, x] @ model.head.theta_start.value @ q for x in range(L)]
        )
        assert np.allclose(p_start, softmax(scores), atol=1e-12)


class TestJstModel:
    def test_full_stack_gradients(self, rng, vocab):
        model = JstModel(SCHEMA, tiny_config(), rng, vocab, ontology=ONTOLOGY)
        targets = np.array([[2, 0, -1], [0, 1, 4], [1, -1, 0]])
        check_model_gradients(model, JstBatch(make_flats(), targets))

    def test_gold_targets(self, rng, vocab):
        model = JstModel(SCHEMA, tiny_config(), rng, vocab, ontology=ONTOLOGY)
        state = {"hotel.semi.area": "East", "hotel.semi.parking": None, "cafe.semi.food": "sushi"}
        targets = gold_class_targets(model, state)
        assert targets[0] == model.head.classes["hotel.semi.area"].index("east")
        assert targets[1] == 0
        assert targets[2] == -1  # not representable in the closed vocabulary

    def test_predict_state_closed_vocabulary(self, rng, vocab, flats):
        model = JstModel(SCHEMA, tiny_config(), rng, vocab, ontology=ONTOLOGY)
        state = model.predict_state(flats[0])
        for slot, value in state.items():
            assert value is None or value in model.head.classes[slot]

    def test_unknown_slot_rejected(self, rng, vocab, flats):
        model = JstModel(SCHEMA, tiny_config(), rng, vocab, ontology=ONTOLOGY)
        with pytest.raises(KeyError):
            model.slot_dist(flats[0], "hotel.semi.colour")


class TestPersistence:
    @pytest.mark.parametrize("kind", ["carryover", "type", "span", "jst"])
    def test_roundtrip(self, kind, rng, vocab, flats, tmp_path):
        config = tiny_config()
        if kind == "carryover":
            model = CarryoverModel(SCHEMA, config, rng, vocab)
            probe = lambda m: m.change_probs(flats[0])
        elif kind == "type":
            model = TypeModel(SCHEMA, config, rng, vocab)
            probe = lambda m: m.type_dist(flats[0], 1)
        elif kind == "span":
            model = SpanModel(SCHEMA, config, rng, vocab)
            probe = lambda m: np.concatenate(m.span_dists(flats[0], 2))
        else:
            model = JstModel(SCHEMA, config, rng, vocab, ontology=ONTOLOGY)
            probe = lambda m: m.slot_dist(flats[0], "cafe.semi.food")
        path = tmp_path / f"{kind}.ckpt"
        model.save(path)
        loaded = load_model(path)
        assert type(loaded) is type(model)
        assert np.array_equal(probe(model), probe(loaded))

    def test_jst_classes_survive(self, rng, vocab, tmp_path):
        model = JstModel(SCHEMA, tiny_config(), rng, vocab, ontology=ONTOLOGY)
        path = tmp_path / "jst.ckpt"
        model.save(path)
        loaded = load_model(path)
        assert loaded.head.classes == model.head.classes

    def test_same_seed_same_init(self, vocab):
        a = CarryoverModel(SCHEMA, tiny_config(), np.random.default_rng(5), vocab)
        b = CarryoverModel(SCHEMA, tiny_config(), np.random.default_rng(5), vocab)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.value, pb.value)
